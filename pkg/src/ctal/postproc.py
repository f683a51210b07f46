"""Score fusion, Soft-NMS and top-Q selection for detections."""
from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .geometry import Segment, tiou_matrix

DEFAULT_NMS_THRESHOLD = 0.3
DEFAULT_SCORE_FLOOR = 1e-4


@dataclass(frozen=True)
class Detection:
    segment: Segment
    score: float
    label: str
    video: str

    def __post_init__(self):
        if not (0.0 <= self.score <= 1.0) or math.isnan(self.score):
            raise ValueError(f"detection score {self.score} outside [0, 1]")

    def rescored(self, score: float) -> "Detection":
        return Detection(self.segment, score, self.label, self.video)


def fuse_scores(p_tiou: float, p_cls: float) -> float:
    return p_tiou * p_cls


def _group_indices(dets: Sequence[Detection], key) -> dict:
    groups = defaultdict(list)
    for i, d in enumerate(dets):
        groups[key(d)].append(i)
    return groups


def _soft_nms_group(segs: np.ndarray, scores: np.ndarray, threshold: float,
                    method: str, sigma: float, floor: float):
    """Return ``(kept indices in selection order, final scores)``."""
    scores = scores.astype(np.float64).copy()
    remaining = np.flatnonzero(scores >= floor)
    keep, final = [], []
    while remaining.size:
        # argmax takes the first maximum; ``remaining`` stays in input order
        pos = int(np.argmax(scores[remaining]))
        i = remaining[pos]
        keep.append(i)
        final.append(scores[i])
        remaining = np.delete(remaining, pos)
        if not remaining.size:
            break
        ov = tiou_matrix(segs[i], segs[remaining])[0]
        if method == "linear":
            hit = ov > threshold
            scores[remaining[hit]] *= 1.0 - ov[hit]
        elif method == "gaussian":
            scores[remaining] *= np.exp(-(ov * ov) / sigma)
        else:
            raise ValueError(f"unknown soft-nms method {method!r}")
        remaining = remaining[scores[remaining] >= floor]
    return keep, final


def soft_nms(dets: Sequence[Detection], tiou_threshold: float = DEFAULT_NMS_THRESHOLD,
             sigma: float = 0.5, score_floor: float = DEFAULT_SCORE_FLOOR,
             method: str = "linear") -> list[Detection]:
    """Per-video, per-class Soft-NMS.

    The linear rule multiplies a remaining score by ``1 - tIoU`` whenever its
    tIoU with the selected detection exceeds ``tiou_threshold``; ``sigma`` is
    only used by the Gaussian rule. Detections whose score falls below
    ``score_floor`` are dropped. Output is sorted by final score, ties kept in
    input order.
    """
    dets = list(dets)
    if not dets:
        return []
    results = []
    for idx in _group_indices(dets, lambda d: (d.video, d.label)).values():
        segs = np.array([dets[i].segment.as_tuple() for i in idx])
        scores = np.array([dets[i].score for i in idx])
        keep, final = _soft_nms_group(segs, scores, tiou_threshold, method, sigma,
                                      score_floor)
        results += [(s, idx[k]) for k, s in zip(keep, final)]
    results.sort(key=lambda r: (-r[0], r[1]))
    return [dets[i].rescored(float(s)) for s, i in results]


def top_q(dets: Sequence[Detection], q: int) -> list[Detection]:
    """Keep the ``q`` highest-scoring detections of every video."""
    if q < 0:
        raise ValueError("q must be >= 0")
    out = []
    for idx in _group_indices(dets, lambda d: d.video).values():
        ranked = sorted(idx, key=lambda i: (-dets[i].score, i))[:q]
        out += [dets[i] for i in ranked]
    return out


def detections_from_arrays(video: str, segments: np.ndarray, scores: np.ndarray,
                           class_scores: dict) -> list[Detection]:
    """Expand class-agnostic proposals into labelled detections with fused scores."""
    out = []
    for label, cls in class_scores.items():
        if cls <= 0:
            continue
        fused = np.clip(scores * cls, 0.0, 1.0)
        out += [Detection(Segment(s, e), float(p), label, video)
                for (s, e), p in zip(segments, fused)]
    return out


def group_by_video(dets: Iterable[Detection]) -> dict:
    groups = defaultdict(list)
    for d in dets:
        groups[d.video].append(d)
    return dict(groups)
