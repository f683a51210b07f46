"""Training sample spaces over continuous (start, end) coordinates."""
from __future__ import annotations

from dataclasses import dataclass
from enum import IntEnum
from typing import Iterator, Optional, Sequence

import numpy as np

from .geometry import Segment, TimeGrid, tiou_matrix

DEFAULT_N_PER_GT = 16
DEFAULT_KAPPA = 0.25
DEFAULT_RETRY_CAP = 8


class Origin(IntEnum):
    GRID = 0
    UNIFORM = 1
    GT_LOCAL = 2


@dataclass(frozen=True)
class SamplePoint:
    segment: Segment
    origin: Origin
    gt_hint: Optional[int] = None


@dataclass
class SampleSet:
    """Column-oriented batch of sampled segments.

    ``segments`` is ``(N, 2)``; ``origins`` holds :class:`Origin` codes and
    ``gt_hints`` is -1 where a point has no ground-truth hint.
    """

    segments: np.ndarray
    origins: np.ndarray
    gt_hints: np.ndarray
    grid: TimeGrid

    def __post_init__(self):
        self.segments = np.asarray(self.segments, dtype=np.float64).reshape(-1, 2)
        self.origins = np.asarray(self.origins, dtype=np.int64).reshape(-1)
        self.gt_hints = np.asarray(self.gt_hints, dtype=np.int64).reshape(-1)
        n = len(self.segments)
        if len(self.origins) != n or len(self.gt_hints) != n:
            raise ValueError("segments, origins and gt_hints must have equal length")

    def __len__(self) -> int:
        return len(self.segments)

    @property
    def points(self) -> list[SamplePoint]:
        return list(iter(self))

    def __iter__(self) -> Iterator[SamplePoint]:
        for (s, e), o, h in zip(self.segments, self.origins, self.gt_hints):
            yield SamplePoint(Segment(s, e), Origin(int(o)), None if h < 0 else int(h))

    def subset(self, index) -> "SampleSet":
        return SampleSet(self.segments[index], self.origins[index],
                         self.gt_hints[index], self.grid)

    @classmethod
    def empty(cls, grid: TimeGrid) -> "SampleSet":
        return cls(np.zeros((0, 2)), np.zeros(0, np.int64), np.zeros(0, np.int64), grid)


def grid_index_pairs(num_snippets: int) -> tuple[np.ndarray, np.ndarray]:
    """Start-major ``(i, j)`` pairs with ``i <= j``."""
    i, j = np.triu_indices(num_snippets)
    return i, j


def grid_segments(grid: TimeGrid) -> np.ndarray:
    i, j = grid_index_pairs(grid.num_snippets)
    starts = i * grid.step
    ends = np.minimum((j + 1) * grid.step, grid.duration)
    return np.stack([starts, ends], axis=1)


def grid_samples(grid: TimeGrid) -> SampleSet:
    seg = grid_segments(grid)
    n = len(seg)
    return SampleSet(seg, np.full(n, Origin.GRID), np.full(n, -1), grid)


def grid_tiou_map(gts: Sequence[Segment], grid: TimeGrid) -> np.ndarray:
    """Dense ``T x T`` max-tIoU map of the grid baseline (zeros below the diagonal)."""
    t = grid.num_snippets
    out = np.zeros((t, t))
    if len(gts) == 0:
        return out
    g = np.array([s.as_tuple() for s in gts])
    idx = np.arange(t)
    starts = idx * grid.step
    ends = np.minimum((idx + 1) * grid.step, grid.duration)
    for k in range(len(g)):
        inter = np.maximum(0.0, np.minimum(ends[None, :], g[k, 1])
                           - np.maximum(starts[:, None], g[k, 0]))
        union = (ends[None, :] - starts[:, None]) + (g[k, 1] - g[k, 0]) - inter
        cell = np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)
        out = np.maximum(out, cell)
    return np.triu(out)


def uniform_samples(grid: TimeGrid, rng: np.random.Generator,
                    half_width: Optional[float] = None) -> SampleSet:
    """Grid-centre segments with independent uniform jitter on each endpoint."""
    if half_width is None:
        half_width = 0.5 * grid.step
    seg = grid_segments(grid)
    if half_width > 0:
        seg = seg + rng.uniform(-half_width, half_width, size=seg.shape)
    seg = np.sort(np.clip(seg, 0.0, grid.duration), axis=1)
    n = len(seg)
    return SampleSet(seg, np.full(n, Origin.UNIFORM), np.full(n, -1), grid)


def scale_invariant_samples(gts: Sequence[Segment], n_per_gt: int, grid: TimeGrid,
                            rng: np.random.Generator, kappa: float = DEFAULT_KAPPA,
                            retry_cap: int = DEFAULT_RETRY_CAP) -> SampleSet:
    """Gaussian perturbations of each ground truth with std ``kappa * length``.

    Draws that collapse to zero length after clipping are redrawn up to
    ``retry_cap`` times, then replaced by the ground truth itself.
    """
    if n_per_gt < 1:
        raise ValueError("n_per_gt must be >= 1")
    if len(gts) == 0:
        return SampleSet.empty(grid)
    segs, hints = [], []
    for k, gt in enumerate(gts):
        base = np.array([gt.start, gt.end])
        std = kappa * gt.length
        draw = np.sort(np.clip(base + rng.normal(0.0, 1.0, (n_per_gt, 2)) * std,
                               0.0, grid.duration), axis=1)
        bad = draw[:, 1] - draw[:, 0] <= 0
        tries = 0
        while bad.any() and tries < retry_cap:
            redraw = base + rng.normal(0.0, 1.0, (int(bad.sum()), 2)) * std
            draw[bad] = np.sort(np.clip(redraw, 0.0, grid.duration), axis=1)
            bad = draw[:, 1] - draw[:, 0] <= 0
            tries += 1
        draw[bad] = base
        segs.append(draw)
        hints.append(np.full(n_per_gt, k))
    seg = np.concatenate(segs)
    return SampleSet(seg, np.full(len(seg), Origin.GT_LOCAL), np.concatenate(hints), grid)


def compose_training_batch(grid_s: SampleSet, uni_s: SampleSet,
                           si_s: SampleSet) -> SampleSet:
    if not (grid_s.grid == uni_s.grid == si_s.grid):
        raise ValueError("sample sets were drawn on different time grids")
    parts = (grid_s, uni_s, si_s)
    return SampleSet(np.concatenate([p.segments for p in parts]),
                     np.concatenate([p.origins for p in parts]),
                     np.concatenate([p.gt_hints for p in parts]),
                     grid_s.grid)


def positives_by_gt(samples: SampleSet, gts: Sequence[Segment],
                    tau: float = 0.7) -> np.ndarray:
    """Count of samples with best tIoU above ``tau``, attributed to the best GT."""
    counts = np.zeros(len(gts), dtype=np.int64)
    if len(gts) == 0 or len(samples) == 0:
        return counts
    m = tiou_matrix(samples.segments, np.array([g.as_tuple() for g in gts]))
    best = m.max(axis=1)
    arg = m.argmax(axis=1)
    np.add.at(counts, arg[best > tau], 1)
    return counts
