"""Synthetic videos with planted segments, and the on-disk formats.

Formats:

* annotations -- JSON in the ActivityNet layout::

      {"version": ..., "database": {vid: {"duration": d, "subset": "training",
                                          "annotations": [{"segment": [s, e],
                                                           "label": "..."}]}}}

* features -- little-endian binary: ``b"CTALFEAT"``, u32 version, u32 D,
  u32 T, f64 step, then ``D * T`` float32 values, row-major.
* detections -- JSON ``{"version": ..., "results": {vid: [{"segment": [s, e],
  "score": p, "label": "..."}]}}``.
* class scores -- JSON ``{"version": ..., "results": {vid: {label: score}}}``.
"""
from __future__ import annotations

import json
import math
import os
import struct
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .evaluation import GroundTruth
from .geometry import Segment
from .model import FeatureSequence
from .postproc import Detection

FORMAT_VERSION = "ctal-1.0"
FEATURE_MAGIC = b"CTALFEAT"
FEATURE_VERSION = 1
_FEATURE_HEADER = struct.Struct("<8sIIId")

SPLITS = ("train", "val", "test")
_SUBSET_NAMES = {"train": "training", "val": "validation", "test": "testing"}
_SPLIT_OF = {v: k for k, v in _SUBSET_NAMES.items()}


class DataError(ValueError):
    """A file or record violates the expected format or invariants."""


@dataclass
class VideoRecord:
    id: str
    duration: float
    annotations: list  # of (Segment, label)
    split: str = "train"

    def __post_init__(self):
        if not self.duration > 0:
            raise DataError(f"video {self.id!r}: duration must be positive")
        if self.split not in SPLITS:
            raise DataError(f"video {self.id!r}: unknown split {self.split!r}")
        for seg, _ in self.annotations:
            if seg.end > self.duration + 1e-9:
                raise DataError(f"video {self.id!r}: segment [{seg.start}, {seg.end}] "
                                f"exceeds duration {self.duration}")

    @property
    def segments(self) -> list:
        return [s for s, _ in self.annotations]

    def ground_truths(self) -> list:
        return [GroundTruth(s, lab, self.id) for s, lab in self.annotations]


# ------------------------------------------------------------------ writing

def atomic_write_bytes(path: Path, data: bytes):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: Path, text: str):
    atomic_write_bytes(path, text.encode("utf-8"))


def _write_json(path, obj):
    atomic_write_text(path, json.dumps(obj, indent=1) + "\n")


def _read_json(path):
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: malformed JSON ({exc})") from exc


# -------------------------------------------------------------- annotations

def annotations_to_json(records: Sequence[VideoRecord]) -> dict:
    db = {}
    for r in records:
        db[r.id] = {
            "duration": r.duration,
            "subset": _SUBSET_NAMES[r.split],
            "annotations": [{"segment": [s.start, s.end], "label": lab}
                            for s, lab in r.annotations],
        }
    return {"version": FORMAT_VERSION, "database": db}


def annotations_from_json(obj) -> list:
    if not isinstance(obj, dict) or not isinstance(obj.get("database"), dict):
        raise DataError("annotation file lacks a 'database' table")
    out = []
    for vid, entry in obj["database"].items():
        try:
            duration = float(entry["duration"])
            subset = entry.get("subset", "training")
            split = _SPLIT_OF.get(subset, subset)
            anns = []
            for a in entry.get("annotations", []):
                s, e = a["segment"]
                anns.append((Segment(float(s), float(e)), str(a["label"])))
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, DataError):
                raise
            raise DataError(f"video {vid!r}: malformed annotation ({exc})") from exc
        out.append(VideoRecord(str(vid), duration, anns, split))
    return out


def save_annotations(path, records):
    _write_json(path, annotations_to_json(records))


def load_annotations(path) -> list:
    return annotations_from_json(_read_json(path))


# ----------------------------------------------------------------- features

def feature_bytes(f: FeatureSequence) -> bytes:
    d, t = f.values.shape
    head = _FEATURE_HEADER.pack(FEATURE_MAGIC, FEATURE_VERSION, d, t, f.step)
    return head + np.ascontiguousarray(f.values, dtype="<f4").tobytes()


def parse_features(data: bytes, name: str = "features") -> FeatureSequence:
    if len(data) < _FEATURE_HEADER.size:
        raise DataError(f"{name}: truncated header")
    magic, version, d, t, step = _FEATURE_HEADER.unpack_from(data)
    if magic != FEATURE_MAGIC:
        raise DataError(f"{name}: bad magic {magic!r}")
    if version != FEATURE_VERSION:
        raise DataError(f"{name}: unsupported feature version {version}")
    n = d * t * 4
    body = data[_FEATURE_HEADER.size:]
    if len(body) != n:
        raise DataError(f"{name}: expected {n} payload bytes, found {len(body)}")
    values = np.frombuffer(body, dtype="<f4").reshape(d, t).astype(np.float64)
    try:
        return FeatureSequence(values, step)
    except ValueError as exc:
        raise DataError(f"{name}: {exc}") from exc


def save_features(path, f: FeatureSequence):
    atomic_write_bytes(Path(path), feature_bytes(f))


def load_features(path) -> FeatureSequence:
    return parse_features(Path(path).read_bytes(), str(path))


# --------------------------------------------------------------- detections

def detections_to_json(dets: Sequence[Detection]) -> dict:
    results = {}
    for d in dets:
        results.setdefault(d.video, []).append(
            {"segment": [d.segment.start, d.segment.end], "score": d.score,
             "label": d.label})
    return {"version": FORMAT_VERSION, "results": results}


def detections_from_json(obj) -> list:
    if not isinstance(obj, dict) or not isinstance(obj.get("results"), dict):
        raise DataError("detection file lacks a 'results' table")
    out = []
    for vid, rows in obj["results"].items():
        for k, r in enumerate(rows):
            try:
                s, e = r["segment"]
                out.append(Detection(Segment(float(s), float(e)), float(r["score"]),
                                     str(r["label"]), str(vid)))
            except (KeyError, TypeError, ValueError) as exc:
                raise DataError(f"video {vid!r}, detection {k}: {exc}") from exc
    return out


def save_detections(path, dets):
    atomic_write_text(path, json.dumps(detections_to_json(dets)) + "\n")


def load_detections(path) -> list:
    return detections_from_json(_read_json(path))


def save_class_scores(path, scores: dict):
    _write_json(path, {"version": FORMAT_VERSION, "results": scores})


def load_class_scores(path) -> dict:
    obj = _read_json(path)
    if not isinstance(obj, dict) or not isinstance(obj.get("results"), dict):
        raise DataError(f"{path}: class-score file lacks a 'results' table")
    out = {}
    for vid, row in obj["results"].items():
        try:
            out[str(vid)] = {str(k): float(v) for k, v in row.items()}
        except (AttributeError, TypeError, ValueError) as exc:
            raise DataError(f"video {vid!r}: malformed class scores ({exc})") from exc
    return out


# ---------------------------------------------------------------- synthesis

class InfeasiblePacking(DataError):
    pass


@dataclass
class SynthConfig:
    num_videos: int = 250
    classes: int = 3
    duration_range: tuple = (360.0, 480.0)
    segments_per_video: tuple = (1, 4)
    length_range: tuple = (5.0, 240.0)
    feature_dim: int = 16
    num_snippets: int = 64
    snr: float = 4.0
    seed: int = 0
    val_fraction: float = 0.2
    test_fraction: float = 0.0
    frames_per_snippet: int = 16
    bump_width: float = 1.0
    max_retries: int = 200

    def __post_init__(self):
        self.duration_range = tuple(map(float, self.duration_range))
        self.segments_per_video = tuple(map(int, self.segments_per_video))
        self.length_range = tuple(map(float, self.length_range))
        if min(self.num_videos, self.classes, self.feature_dim) < 1:
            raise ValueError("counts must be >= 1")
        if self.num_snippets < 2:
            raise ValueError("num_snippets must be >= 2")
        if not self.snr > 0:
            raise ValueError("snr must be positive")
        lo, hi = self.length_range
        if not 0 < lo <= hi:
            raise ValueError("length_range must satisfy 0 < lo <= hi")
        dmin, dmax = self.duration_range
        if not 0 < dmin <= dmax:
            raise ValueError("duration_range must satisfy 0 < lo <= hi")
        if lo < dmax / self.num_snippets / self.frames_per_snippet:
            raise ValueError("shortest planted segment would be below one frame")
        smin, smax = self.segments_per_video
        if not 1 <= smin <= smax:
            raise ValueError("segments_per_video must satisfy 1 <= lo <= hi")

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("duration_range", "segments_per_video", "length_range"):
            d[k] = list(d[k])
        return d

    def sample_lengths(self, rng: np.random.Generator, n: int) -> np.ndarray:
        lo, hi = self.length_range
        return np.exp(rng.uniform(math.log(lo), math.log(hi), size=n))

    def length_cdf(self, x):
        lo, hi = self.length_range
        x = np.clip(np.asarray(x, dtype=np.float64), lo, hi)
        return (np.log(x) - math.log(lo)) / (math.log(hi) - math.log(lo))


def _pack(rng, lengths, duration, retries):
    placed = []
    for length in sorted(lengths, reverse=True):
        for _ in range(retries):
            s = rng.uniform(0.0, duration - length)
            if all(s + length <= a or s >= b for a, b in placed):
                placed.append((s, s + length))
                break
        else:
            return None
    return sorted(placed)


def class_signatures(cfg: SynthConfig) -> np.ndarray:
    """``(classes + 2, D)``: one signature per class, then start and end bumps."""
    rng = np.random.default_rng([cfg.seed, 7919])
    return rng.normal(0.0, 1.0, size=(cfg.classes + 2, cfg.feature_dim))


def render_features(cfg: SynthConfig, duration: float, annotations, rng) -> FeatureSequence:
    """Features of one video: window-overlap class signal + boundary bumps + noise."""
    sig = class_signatures(cfg)
    t_count = cfg.num_snippets
    step = duration / t_count
    centers = np.arange(t_count) * step
    lo, hi = centers - 0.5 * step, centers + 0.5 * step
    x = np.zeros((t_count, cfg.feature_dim))
    width = cfg.bump_width * step
    for seg, label in annotations:
        c = int(label.rsplit("_", 1)[1])
        frac = np.clip(np.minimum(hi, seg.end) - np.maximum(lo, seg.start), 0.0, None) / step
        x += frac[:, None] * sig[c]
        x += np.clip(1.0 - np.abs(centers - seg.start) / width, 0.0, None)[:, None] * sig[-2]
        x += np.clip(1.0 - np.abs(centers - seg.end) / width, 0.0, None)[:, None] * sig[-1]
    if math.isfinite(cfg.snr):
        x += rng.normal(0.0, 1.0 / cfg.snr, size=x.shape)
    # stored as float32 on disk; keep the in-memory copy identical
    return FeatureSequence(x.T.astype(np.float32).astype(np.float64), step)


def class_names(n: int) -> list:
    return [f"class_{i}" for i in range(n)]


def generate_synthetic(cfg: SynthConfig):
    """Return ``(records, features)`` where ``features`` maps video id -> sequence."""
    rng = np.random.default_rng(cfg.seed)
    names = class_names(cfg.classes)
    n_val = int(round(cfg.val_fraction * cfg.num_videos))
    n_test = int(round(cfg.test_fraction * cfg.num_videos))
    n_train = cfg.num_videos - n_val - n_test
    records, feats = [], {}
    width = len(str(cfg.num_videos - 1))
    for v in range(cfg.num_videos):
        vid = f"v_{v:0{width}d}"
        duration = float(rng.uniform(*cfg.duration_range))
        label = names[int(rng.integers(cfg.classes))]
        for _ in range(cfg.max_retries):
            k = int(rng.integers(cfg.segments_per_video[0], cfg.segments_per_video[1] + 1))
            lengths = cfg.sample_lengths(rng, k)
            if lengths.max() >= duration:
                continue
            placed = _pack(rng, lengths, duration, cfg.max_retries)
            if placed is not None:
                break
        else:
            raise InfeasiblePacking(f"video {vid}: could not place non-overlapping "
                                    f"segments after {cfg.max_retries} attempts")
        anns = [(Segment(s, e), label) for s, e in placed]
        split = "train" if v < n_train else ("val" if v < n_train + n_val else "test")
        records.append(VideoRecord(vid, duration, anns, split))
        feats[vid] = render_features(cfg, duration, anns, rng)
    return records, feats


def oracle_class_scores(records: Sequence[VideoRecord], classes: int) -> dict:
    """Video-level class scores: 1 for every class annotated in the video, else 0."""
    names = class_names(classes)
    out = {}
    for r in records:
        present = {lab for _, lab in r.annotations}
        out[r.id] = {c: (1.0 if c in present else 0.0) for c in names}
    return out
