"""Detection metrics: AP / mAP at tIoU thresholds, recall, and length-group profiles."""
from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .geometry import Segment, tiou_matrix
from .postproc import Detection

AVERAGE_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
THUMOS_THRESHOLDS = (0.3, 0.4, 0.5, 0.6, 0.7)

# (name, lower exclusive, upper inclusive) in seconds
LENGTH_GROUPS = (
    ("XS", 0.0, 30.0),
    ("S", 30.0, 60.0),
    ("M", 60.0, 120.0),
    ("L", 120.0, 180.0),
    ("XL", 180.0, math.inf),
)
SHORT_GROUPS = ("XS", "S")


@dataclass(frozen=True)
class GroundTruth:
    segment: Segment
    label: str
    video: str


def length_group(length: float) -> str:
    for name, lo, hi in LENGTH_GROUPS:
        if lo < length <= hi:
            return name
    return LENGTH_GROUPS[0][0]


def _by_label(items) -> dict:
    out = defaultdict(list)
    for x in items:
        out[x.label].append(x)
    return out


def _rank(dets: Sequence[Detection]) -> list[Detection]:
    order = sorted(range(len(dets)), key=lambda i: -dets[i].score)
    return [dets[i] for i in order]


def match_detections(dets: Sequence[Detection], gts: Sequence[GroundTruth],
                     threshold: float) -> list[int]:
    """Greedy one-to-one matching of score-ranked detections to ground truths.

    ``dets`` must already be ranked. Each detection takes the unmatched GT of
    its video with the highest tIoU, provided that tIoU reaches ``threshold``.
    Returns the matched GT index (into ``gts``) per detection, -1 for none.
    """
    per_video = defaultdict(list)
    for k, g in enumerate(gts):
        per_video[g.video].append(k)
    ious = {}
    by_video = defaultdict(list)
    for i, d in enumerate(dets):
        by_video[d.video].append(i)
    for vid, di in by_video.items():
        gi = per_video.get(vid)
        if gi:
            ious[vid] = tiou_matrix(
                np.array([dets[i].segment.as_tuple() for i in di]),
                np.array([gts[k].segment.as_tuple() for k in gi]))
    row = {}
    for vid, di in by_video.items():
        for r, i in enumerate(di):
            row[i] = r
    taken = set()
    out = []
    for i, d in enumerate(dets):
        gi = per_video.get(d.video)
        if not gi:
            out.append(-1)
            continue
        ov = ious[d.video][row[i]]
        best, best_k = -1.0, -1
        for c, k in enumerate(gi):
            if k not in taken and ov[c] >= threshold and ov[c] > best:
                best, best_k = ov[c], k
        if best_k >= 0:
            taken.add(best_k)
        out.append(best_k)
    return out


def _ap_from_hits(hits: Iterable[bool], n_gt: int) -> float:
    if n_gt == 0:
        return 0.0
    precisions = []
    tp = 0
    for rank, hit in enumerate(hits, start=1):
        if hit:
            tp += 1
            precisions.append(tp / rank)
    return math.fsum(precisions) / n_gt


def average_precision(dets: Sequence[Detection], gts: Sequence[GroundTruth],
                      threshold: float) -> float:
    """Non-interpolated AP of one class: mean precision over GT recall steps."""
    ranked = _rank(dets)
    matches = match_detections(ranked, gts, threshold)
    return _ap_from_hits((m >= 0 for m in matches), len(gts))


def _class_mean(values: list) -> float:
    return math.fsum(values) / len(values) if values else 0.0


def map_at(dets: Sequence[Detection], gts: Sequence[GroundTruth],
           thresholds: Sequence[float]) -> dict:
    """mAP per threshold over the classes present in the ground truth."""
    if len(thresholds) == 0:
        raise ValueError("need at least one threshold")
    d_by, g_by = _by_label(dets), _by_label(gts)
    out = {}
    for t in thresholds:
        aps = [average_precision(d_by.get(c, []), g_by[c], t) for c in g_by]
        out[float(t)] = _class_mean(aps)
    return out


def average_map(dets, gts) -> float:
    return _class_mean(list(map_at(dets, gts, AVERAGE_THRESHOLDS).values()))


def _global_matching(dets, gts, threshold):
    """Per class: ranked detections, their matched global GT index."""
    d_by = _by_label(dets)
    g_idx = defaultdict(list)
    for k, g in enumerate(gts):
        g_idx[g.label].append(k)
    result = {}
    for c, ks in g_idx.items():
        ranked = _rank(d_by.get(c, []))
        local = match_detections(ranked, [gts[k] for k in ks], threshold)
        result[c] = (ranked, [ks[m] if m >= 0 else -1 for m in local])
    return result


def restricted_map(dets, gts, threshold: float, groups: Sequence[str],
                   matching=None) -> Optional[float]:
    """mAP over the GTs whose length group is in ``groups``.

    Detections are matched against the full GT set first. A detection matched
    to a GT outside ``groups`` is removed; unmatched detections stay as false
    positives. Returns None when no GT falls in ``groups``.
    """
    member = [length_group(g.segment.length) in groups for g in gts]
    if not any(member):
        return None
    if matching is None:
        matching = _global_matching(dets, gts, threshold)
    aps = []
    for c, (ranked, matched) in matching.items():
        n_gt = sum(1 for k, g in enumerate(gts) if g.label == c and member[k])
        if n_gt == 0:
            continue
        hits = [m >= 0 and member[m] for m in matched if m < 0 or member[m]]
        aps.append(_ap_from_hits(hits, n_gt))
    return _class_mean(aps)


def length_group_profiles(dets, gts, threshold: float):
    """Per length group: restricted mAP and false-negative rate; empty groups omitted."""
    matching = _global_matching(dets, gts, threshold)
    matched = set()
    for _, m in matching.values():
        matched.update(k for k in m if k >= 0)
    per_map, per_fn = {}, {}
    for name, _, _ in LENGTH_GROUPS:
        ks = [k for k, g in enumerate(gts) if length_group(g.segment.length) == name]
        if not ks:
            continue
        per_map[name] = restricted_map(dets, gts, threshold, (name,), matching)
        per_fn[name] = sum(1 for k in ks if k not in matched) / len(ks)
    return per_map, per_fn


def recall_at(dets, gts, threshold: float, q: int) -> float:
    """Fraction of GTs covered (tIoU >= threshold) by any of their video's top-q detections."""
    if q < 1:
        raise ValueError("q must be >= 1")
    if not gts:
        return 0.0
    by_video = defaultdict(list)
    for i, d in enumerate(dets):
        by_video[d.video].append(i)
    top = {v: sorted(ix, key=lambda i: (-dets[i].score, i))[:q] for v, ix in by_video.items()}
    hit = 0
    for g in gts:
        ix = top.get(g.video)
        if not ix:
            continue
        ov = tiou_matrix(np.array([dets[i].segment.as_tuple() for i in ix]),
                         np.array([g.segment.as_tuple()]))
        hit += bool((ov >= threshold).any())
    return hit / len(gts)


@dataclass
class EvalReport:
    per_threshold_map: dict
    average_map: float
    per_group_map: dict
    per_group_fn_rate: dict
    recall_at_q: float
    q: int = 100
    group_threshold: float = 0.5
    short_map: Optional[float] = None
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "per_threshold_map": {f"{k:.2f}": v for k, v in self.per_threshold_map.items()},
            "average_map": self.average_map,
            "per_group_map": self.per_group_map,
            "per_group_fn_rate": self.per_group_fn_rate,
            "recall_at_q": self.recall_at_q,
            "q": self.q,
            "group_threshold": self.group_threshold,
            "short_map": self.short_map,
            **self.extra,
        }

    def format_text(self) -> str:
        lines = ["tIoU   mAP"]
        for t, v in sorted(self.per_threshold_map.items()):
            lines.append(f"{t:.2f}   {100 * v:6.2f}")
        lines.append(f"average mAP (0.50:0.05:0.95): {100 * self.average_map:.2f}")
        if self.short_map is not None:
            lines.append(f"short (XS+S) mAP: {100 * self.short_map:.2f}")
        lines.append(f"recall@{self.q} (tIoU {self.group_threshold:.2f}): "
                     f"{100 * self.recall_at_q:.2f}")
        lines.append(f"length groups at tIoU {self.group_threshold:.2f}:")
        lines.append("group   mAP     FN-rate")
        for g in self.per_group_map:
            lines.append(f"{g:<6}{100 * self.per_group_map[g]:6.2f}  "
                         f"{100 * self.per_group_fn_rate[g]:6.2f}")
        return "\n".join(lines) + "\n"


def evaluate(dets, gts, thresholds: Sequence[float] = AVERAGE_THRESHOLDS, q: int = 100,
             group_threshold: float = 0.5, short_groups: Sequence[str] = SHORT_GROUPS
             ) -> EvalReport:
    all_t = sorted(set(map(float, thresholds)) | set(AVERAGE_THRESHOLDS))
    per_t = map_at(dets, gts, all_t)
    avg = _class_mean([per_t[t] for t in AVERAGE_THRESHOLDS])
    gmap, gfn = length_group_profiles(dets, gts, group_threshold)
    return EvalReport(per_t, avg, gmap, gfn, recall_at(dets, gts, group_threshold, q), q,
                      group_threshold, restricted_map(dets, gts, group_threshold,
                                                      short_groups))
