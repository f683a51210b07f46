"""Command-line front end: ``synth``, ``train``, ``detect``, ``eval``, ``analyze``.

Every command writes into an output directory and echoes the effective
configuration there as ``config.json``. Exit codes: 0 success, 1 usage error,
2 data or validation error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import sys
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .config import ConfigError, RunConfig, load_config
from .data import (DataError, atomic_write_text, generate_synthetic,
                   load_annotations, load_class_scores, load_detections, load_features,
                   oracle_class_scores, save_annotations, save_class_scores,
                   save_detections, save_features)
from .evaluation import (AVERAGE_THRESHOLDS, LENGTH_GROUPS, evaluate, length_group,
                         length_group_profiles)
from .inference import detect_video
from .model import load_checkpoint, save_checkpoint
from .training import NumericalError, TrainState, Video, fit

log = logging.getLogger("ctal")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
LOSS_COLUMNS = ("bce", "mse", "offset", "boundary", "l2", "total")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ------------------------------------------------------------------ helpers

def _resolve_config(args, fallback: Optional[Path] = None) -> RunConfig:
    path = args.config
    if path is None and fallback is not None and fallback.exists():
        path = fallback
    return load_config(path, args.set, args.seed)


def _prepare_out(out: Path, force: bool, what: str = "output directory"):
    if out.exists() and not out.is_dir():
        raise UsageError(f"{out} exists and is not a directory")
    if out.exists() and any(out.iterdir()) and not force:
        raise UsageError(f"{what} {out} is not empty; pass --force to overwrite")
    out.mkdir(parents=True, exist_ok=True)


def _echo_config(out: Path, cfg: RunConfig):
    atomic_write_text(out / "config.json", cfg.to_json())


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _fmt(x) -> str:
    return "" if x is None else repr(float(x))


def load_dataset(data_dir: Path, split: Optional[str] = None):
    """``(records, features)`` from a directory written by ``synth``."""
    ann = data_dir / "annotations.json"
    if not ann.exists():
        raise DataError(f"{data_dir}: no annotations.json")
    records = load_annotations(ann)
    if split not in (None, "all"):
        records = [r for r in records if r.split == split]
    feats = {}
    for r in records:
        path = data_dir / "features" / f"{r.id}.feat"
        if not path.exists():
            raise DataError(f"video {r.id!r}: missing feature file {path}")
        feats[r.id] = load_features(path)
        if abs(feats[r.id].duration - r.duration) > 1e-6 * max(1.0, r.duration):
            raise DataError(f"video {r.id!r}: feature span {feats[r.id].duration} "
                            f"disagrees with duration {r.duration}")
    dims = {f.dim for f in feats.values()}
    if len(dims) > 1:
        raise DataError(f"{data_dir}: mixed feature dimensions {sorted(dims)}")
    return records, feats


def _eval_inputs(args):
    records = load_annotations(args.annotations)
    if args.split != "all":
        records = [r for r in records if r.split == args.split]
    known = {r.id for r in records}
    dets = load_detections(args.detections)
    for d in dets:
        if d.video not in known:
            raise DataError(f"detection for unknown video {d.video!r} "
                            f"(not in the {args.split} split of {args.annotations})")
    gts = [g for r in records for g in r.ground_truths()]
    return records, dets, gts


# ----------------------------------------------------------------- commands

def cmd_synth(args) -> int:
    cfg = _resolve_config(args)
    out = Path(args.out)
    _prepare_out(out, args.force)
    records, feats = generate_synthetic(cfg.synth)
    save_annotations(out / "annotations.json", records)
    for vid, f in feats.items():
        save_features(out / "features" / f"{vid}.feat", f)
    save_class_scores(out / "class_scores.json",
                      oracle_class_scores(records, cfg.synth.classes))
    _echo_config(out, cfg)
    files = sorted(p for p in out.rglob("*") if p.is_file() and p.name != "manifest.json")
    manifest = {
        "generator": f"ctal {__version__}",
        "videos": len(records),
        "splits": {s: sum(r.split == s for r in records) for s in ("train", "val", "test")},
        "files": [{"path": p.relative_to(out).as_posix(), "bytes": p.stat().st_size,
                   "sha256": hashlib.sha256(p.read_bytes()).hexdigest()} for p in files],
    }
    atomic_write_text(out / "manifest.json", json.dumps(manifest, indent=1) + "\n")
    print(f"wrote {len(records)} videos to {out}")
    return EXIT_OK


def _loss_log(history) -> str:
    rows = [[i + 1, _fmt(h["lr"])] + [_fmt(h[k]) for k in LOSS_COLUMNS]
            for i, h in enumerate(history)]
    return _csv_text(("epoch", "lr") + LOSS_COLUMNS, rows)


def cmd_train(args) -> int:
    out = Path(args.out)
    ckpt = out / "checkpoint.ckpt"
    if args.resume:
        if not ckpt.exists():
            raise DataError(f"nothing to resume: {ckpt} does not exist")
        cfg = _resolve_config(args, out / "config.json")
    else:
        cfg = _resolve_config(args)
        _prepare_out(out, args.force, "run directory")
    records, feats = load_dataset(Path(args.data), "train")
    if not records:
        raise DataError(f"{args.data}: no training videos")
    dataset = [Video(r.id, feats[r.id], np.array([s.as_tuple() for s in r.segments],
                                                 dtype=np.float64).reshape(-1, 2))
               for r in records]
    dim = dataset[0].features.dim
    tc = cfg.train_config()
    state, history = None, []
    if args.resume:
        params, opt, meta = load_checkpoint(ckpt)
        if params.config.feature_dim != dim:
            raise DataError(f"checkpoint expects D={params.config.feature_dim}, "
                            f"data has D={dim}")
        history = list(meta.get("history", []))
        state = TrainState(params, opt, int(meta["epoch"]))
        log.info("resuming at epoch %d", state.epoch)
    _echo_config(out, cfg)

    def on_epoch(st, rep):
        row = {"lr": tc.lr_at(st.epoch - 1), **rep.as_dict()}
        history.append(row)
        save_checkpoint(ckpt, st.params, st.opt,
                        {"epoch": st.epoch, "seed": cfg.seed, "history": history})
        atomic_write_text(out / "loss_log.csv", _loss_log(history))
        print(f"epoch {st.epoch:3d}  loss {rep.total:.6f}", flush=True)

    state = fit(dataset, cfg.model_config(dim), tc, cfg.seed, state, on_epoch)
    if state.epoch == 0 or not history:
        save_checkpoint(ckpt, state.params, state.opt,
                        {"epoch": state.epoch, "seed": cfg.seed, "history": history})
        atomic_write_text(out / "loss_log.csv", _loss_log(history))
    if history:
        from .plotting import plot_loss_curves
        plot_loss_curves(list(range(1, len(history) + 1)),
                         {k: [h[k] for h in history] for k in LOSS_COLUMNS if k != "l2"},
                         out / "loss_curves.png")
    return EXIT_OK


def cmd_detect(args) -> int:
    ckpt = Path(args.checkpoint)
    if not ckpt.exists():
        raise DataError(f"checkpoint {ckpt} does not exist")
    cfg = _resolve_config(args, ckpt.parent / "config.json")
    out = Path(args.out)
    _prepare_out(out, args.force)
    try:
        params, _, _ = load_checkpoint(ckpt)
    except ValueError as exc:
        raise DataError(f"{ckpt}: {exc}") from exc
    data = Path(args.data)
    records, feats = load_dataset(data, args.split)
    scores_path = Path(args.class_scores) if args.class_scores else data / "class_scores.json"
    class_scores = None
    if not args.no_class_scores and scores_path.exists():
        class_scores = load_class_scores(scores_path)
    labels = sorted({lab for r in load_annotations(data / "annotations.json")
                     for _, lab in r.annotations})
    dets = []
    for r in records:
        f = feats[r.id]
        if f.dim != params.config.feature_dim:
            raise DataError(f"video {r.id!r}: feature dim {f.dim} but checkpoint "
                            f"expects {params.config.feature_dim}")
        cs = None
        if class_scores is not None:
            if r.id not in class_scores:
                raise DataError(f"video {r.id!r}: missing from class-score file")
            cs = class_scores[r.id]
        dets += detect_video(params, f, r.id, cfg.M, cs, labels, cfg.nms_threshold,
                             cfg.score_floor, cfg.q)
    save_detections(out / "detections.json", dets)
    _echo_config(out, cfg)
    print(f"wrote {len(dets)} detections for {len(records)} videos to {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _resolve_config(args)
    out = Path(args.out)
    _prepare_out(out, args.force)
    _, dets, gts = _eval_inputs(args)
    if not gts:
        raise DataError(f"no ground truth in the {args.split} split")
    thresholds = AVERAGE_THRESHOLDS
    if args.thresholds:
        thresholds = tuple(float(t) for t in args.thresholds.split(","))
    report = evaluate(dets, gts, thresholds, cfg.q, cfg.group_threshold)
    text = report.format_text()
    atomic_write_text(out / "report.txt", text)
    atomic_write_text(out / "results.json", json.dumps(report.to_dict(), indent=1) + "\n")
    rows = [[f"{t:.2f}", _fmt(v)] for t, v in sorted(report.per_threshold_map.items())]
    atomic_write_text(out / "map_by_threshold.csv", _csv_text(("tiou", "map"), rows))
    from .plotting import plot_threshold_curve
    plot_threshold_curve(report.per_threshold_map, out / "map_by_threshold.png")
    _echo_config(out, cfg)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_analyze(args) -> int:
    cfg = _resolve_config(args)
    out = Path(args.out)
    _prepare_out(out, args.force)
    _, dets, gts = _eval_inputs(args)
    thr = cfg.group_threshold
    counts = {name: 0 for name, _, _ in LENGTH_GROUPS}
    for g in gts:
        counts[length_group(g.segment.length)] += 1
    empty = [name for name, n in counts.items() if n == 0]
    for name in empty:
        print(f"notice: length group {name} has no ground truth; omitted")
    per_map, per_fn = length_group_profiles(dets, gts, thr)
    rows = [[g, counts[g], _fmt(per_map[g]), _fmt(per_fn[g])] for g in per_map]
    atomic_write_text(out / "length_groups.csv",
                      _csv_text(("group", "n_gt", "map", "fn_rate"), rows))
    sweep = []
    for t in AVERAGE_THRESHOLDS:
        m, fn = length_group_profiles(dets, gts, t)
        sweep += [[f"{t:.2f}", g, _fmt(m[g]), _fmt(fn[g])] for g in m]
    atomic_write_text(out / "length_groups_by_threshold.csv",
                      _csv_text(("tiou", "group", "map", "fn_rate"), sweep))
    summary = {"threshold": thr, "counts": counts, "omitted_groups": empty,
               "per_group_map": per_map, "per_group_fn_rate": per_fn}
    atomic_write_text(out / "analysis.json", json.dumps(summary, indent=1) + "\n")
    if per_map:
        from .plotting import plot_length_groups
        plot_length_groups(per_map, per_fn, out / "length_groups.png", thr)
    _echo_config(out, cfg)
    for g in per_map:
        print(f"{g:<3} n={counts[g]:<5d} mAP {100 * per_map[g]:6.2f}  "
              f"FN {100 * per_fn[g]:6.2f}")
    return EXIT_OK


# ------------------------------------------------------------------ parser

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON config file")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key (repeatable; synth.* for synth keys)")
    common.add_argument("--seed", type=int, help="shorthand for seed and synth.seed")
    common.add_argument("--out", required=True, help="output directory")
    common.add_argument("--force", action="store_true", help="overwrite a non-empty output")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="ctal", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", parents=[common], help="generate a synthetic dataset")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", parents=[common], help="train a scorer")
    s.add_argument("--data", required=True, help="dataset directory from synth")
    s.add_argument("--resume", action="store_true",
                   help="continue from OUT/checkpoint.ckpt using OUT/config.json")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("detect", parents=[common], help="run inference")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--split", default="val", choices=("train", "val", "test", "all"))
    s.add_argument("--class-scores", help="video-level class scores (default: DATA/class_scores.json)")
    s.add_argument("--no-class-scores", action="store_true",
                   help="score every class at 1.0 instead of reading class scores")
    s.set_defaults(func=cmd_detect)

    for name, func, helptext in (("eval", cmd_eval, "compute mAP and recall"),
                                 ("analyze", cmd_analyze, "length-group profiles")):
        s = sub.add_parser(name, parents=[common], help=helptext)
        s.add_argument("--detections", required=True, type=Path)
        s.add_argument("--annotations", required=True, type=Path)
        s.add_argument("--split", default="val", choices=("train", "val", "test", "all"))
        if name == "eval":
            s.add_argument("--thresholds", help="comma-separated extra tIoU thresholds")
        s.set_defaults(func=func)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"ctal {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"ctal {args.command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, ValueError, OSError) as exc:
        print(f"ctal {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
