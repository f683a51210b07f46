"""Detection pipeline: grid initialisation, refinement, fusion, suppression."""
from __future__ import annotations

from typing import Mapping, Optional

import numpy as np

from .geometry import Segment, TimeGrid
from .model import FeatureSequence, ScorerParams
from .postproc import Detection, _soft_nms_group, top_q
from .refine import run_refinement
from .sampling import grid_samples


def propose(params: ScorerParams, f: FeatureSequence, M: int):
    """Class-agnostic proposals ``(segments (N, 2), scores (N,))`` for one video.

    Segments are the coordinates after the last stage; the score is the
    product of that stage's two confidences.
    """
    grid = TimeGrid(f.length, f.duration)
    traj = run_refinement(grid_samples(grid), params, f, M)
    last = traj.final
    return last.coords, last.output.p1 * last.output.p2


def detect_video(params: ScorerParams, f: FeatureSequence, video: str, M: int,
                 class_scores: Optional[Mapping[str, float]], labels,
                 nms_threshold: float = 0.3, score_floor: float = 1e-4,
                 q: int = 100) -> list[Detection]:
    segs, scores = propose(params, f, M)
    if class_scores is None:
        class_scores = {c: 1.0 for c in labels}
    dets = []
    for label, cls in class_scores.items():
        if cls <= 0:
            continue
        fused = np.clip(scores * cls, 0.0, 1.0)
        keep, final = _soft_nms_group(segs, fused, nms_threshold, "linear", 0.5,
                                      score_floor)
        order = sorted(range(len(keep)), key=lambda r: (-final[r], keep[r]))[:q]
        dets += [Detection(Segment(*segs[keep[r]]), float(final[r]), label, video)
                 for r in order]
    return top_q(sorted(dets, key=lambda d: -d.score), q)
