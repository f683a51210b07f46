"""Interval arithmetic and the coordinate transforms of the anchoring families.

All functions here are pure. Scalar helpers operate on :class:`Segment`;
the ``*_arrays`` variants operate on ``(N, 2)`` float arrays of
``(start, end)`` rows and are what the model code uses.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np


@dataclass(frozen=True)
class Segment:
    start: float
    end: float

    def __post_init__(self):
        s, e = float(self.start), float(self.end)
        if not (math.isfinite(s) and math.isfinite(e)):
            raise ValueError(f"segment endpoints must be finite, got ({s}, {e})")
        if s < 0 or e < s:
            raise ValueError(f"invalid segment [{s}, {e}]")
        object.__setattr__(self, "start", s)
        object.__setattr__(self, "end", e)

    @property
    def length(self) -> float:
        return self.end - self.start

    @property
    def center(self) -> float:
        return 0.5 * (self.start + self.end)

    def as_tuple(self) -> tuple[float, float]:
        return (self.start, self.end)


@dataclass(frozen=True)
class TimeGrid:
    """Snippet grid of a video. ``duration`` is authoritative; ``step`` follows."""

    num_snippets: int
    duration: float

    def __post_init__(self):
        if int(self.num_snippets) < 1:
            raise ValueError("num_snippets must be >= 1")
        if not self.duration > 0:
            raise ValueError("duration must be positive")
        object.__setattr__(self, "num_snippets", int(self.num_snippets))
        object.__setattr__(self, "duration", float(self.duration))

    @property
    def step(self) -> float:
        return self.duration / self.num_snippets


@dataclass(frozen=True)
class OffsetPair:
    delta_start: float
    delta_end: float

    def __post_init__(self):
        if not (math.isfinite(self.delta_start) and math.isfinite(self.delta_end)):
            raise ValueError("offsets must be finite")


def _intersection_union(s1, e1, s2, e2):
    inter = np.maximum(0.0, np.minimum(e1, e2) - np.maximum(s1, s2))
    union = (e1 - s1) + (e2 - s2) - inter
    return inter, union


def tiou(a: Segment, b: Segment) -> float:
    """Temporal IoU; 0 when the union has zero length."""
    inter, union = _intersection_union(a.start, a.end, b.start, b.end)
    if union <= 0:
        return 0.0
    return float(inter / union)


def tiou_matrix(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Pairwise tIoU between ``(N, 2)`` and ``(K, 2)`` segment arrays -> ``(N, K)``."""
    x = np.asarray(x, dtype=np.float64).reshape(-1, 2)
    g = np.asarray(g, dtype=np.float64).reshape(-1, 2)
    inter, union = _intersection_union(
        x[:, 0:1], x[:, 1:2], g[None, :, 0], g[None, :, 1]
    )
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=union > 0)
    return out


def best_tiou(x: Segment, gts: Sequence[Segment]) -> tuple[float, int]:
    """Maximum tIoU of ``x`` over ``gts`` and its (lowest) arg-max index."""
    if len(gts) == 0:
        raise ValueError("best_tiou needs at least one ground truth")
    scores = [tiou(x, g) for g in gts]
    idx = int(np.argmax(scores))
    return scores[idx], idx


def _finish(start: float, end: float, duration: float | None) -> Segment:
    lo, hi = min(start, end), max(start, end)
    upper = math.inf if duration is None else duration
    lo = min(max(lo, 0.0), upper)
    hi = min(max(hi, 0.0), upper)
    return Segment(lo, hi)


def apply_anchor_offset(anchor: Segment, off: OffsetPair,
                        duration: float | None = None) -> Segment:
    """Multi-scale anchor regression: endpoints shifted by offset times anchor length."""
    length = anchor.length
    return _finish(off.delta_start * length + anchor.start,
                   off.delta_end * length + anchor.end, duration)


def apply_center_offset(center: float, off: OffsetPair,
                        duration: float | None = None) -> Segment:
    """Anchor-free regression; ``off.delta_end`` carries the predicted length."""
    c = off.delta_start + center
    length = max(off.delta_end, 0.0)
    return _finish(c - 0.5 * length, c + 0.5 * length, duration)


def apply_continuous_offset(x: Segment, off: OffsetPair,
                            duration: float | None = None) -> Segment:
    length = x.end - x.start
    return _finish(off.delta_start * length + x.start,
                   off.delta_end * length + x.end, duration)


def spf(grid: TimeGrid, frames_per_snippet: int) -> float:
    """Seconds per frame: the shortest duration an output segment may have."""
    if frames_per_snippet < 1:
        raise ValueError("frames_per_snippet must be >= 1")
    return grid.step / frames_per_snippet


def clamp_spf(x: Segment, grid: TimeGrid, frames_per_snippet: int) -> Segment:
    floor = spf(grid, frames_per_snippet)
    if x.length >= floor:
        return x
    lo, hi = _spf_expand(x.center, floor, grid.duration)
    return Segment(lo, hi)


def _spf_expand(center, floor, duration):
    if duration < floor:
        return 0.0, duration
    lo = center - 0.5 * floor
    hi = center + 0.5 * floor
    if lo < 0:
        lo, hi = 0.0, floor
    elif hi > duration:
        lo, hi = duration - floor, duration
    return lo, hi


def bottom_up_fuse(s_score: float, e_score: float, q_score: float) -> float:
    """Bottom-up proposal confidence: start prob x end prob x segment quality."""
    return s_score * e_score * q_score


def grid_segment(i: int, j: int, grid: TimeGrid) -> Segment:
    """Segment spanning snippets ``i..j`` inclusive (the grid cell ``(i, j)``)."""
    return Segment(i * grid.step, min((j + 1) * grid.step, grid.duration))


# ------------------------------------------------------- batched, differentiable

@dataclass
class OffsetCache:
    x: np.ndarray
    delta: np.ndarray
    swapped: np.ndarray
    lo_free: np.ndarray
    hi_free: np.ndarray
    short: np.ndarray
    expand_free: np.ndarray


def continuous_offset_arrays(x: np.ndarray, delta: np.ndarray, duration: float,
                             floor: float = 0.0):
    """Batched continuous-offset update of ``(N, 2)`` segments.

    Applies the length-scaled offsets, re-orders, clamps to ``[0, duration]``
    and enforces the minimum length ``floor``. Returns ``(segments, cache)``;
    pass the cache to :func:`continuous_offset_backward`.
    """
    x = np.asarray(x, dtype=np.float64).reshape(-1, 2)
    delta = np.asarray(delta, dtype=np.float64).reshape(-1, 2)
    length = (x[:, 1] - x[:, 0])[:, None]
    raw = delta * length + x
    swapped = raw[:, 0] > raw[:, 1]
    lo = np.where(swapped, raw[:, 1], raw[:, 0])
    hi = np.where(swapped, raw[:, 0], raw[:, 1])
    lo_free = (lo > 0.0) & (lo < duration)
    hi_free = (hi > 0.0) & (hi < duration)
    lo = np.clip(lo, 0.0, duration)
    hi = np.clip(hi, 0.0, duration)
    short = (hi - lo) < floor
    expand_free = np.zeros_like(short)
    if short.any():
        if duration < floor:
            lo[short], hi[short] = 0.0, duration
        else:
            c = 0.5 * (lo[short] + hi[short])
            nlo, nhi = c - 0.5 * floor, c + 0.5 * floor
            left, right = nlo < 0.0, nhi > duration
            nlo[left], nhi[left] = 0.0, floor
            nlo[right], nhi[right] = duration - floor, duration
            lo[short], hi[short] = nlo, nhi
            expand_free[short] = ~(left | right)
    out = np.stack([lo, hi], axis=1)
    return out, OffsetCache(x, delta, swapped, lo_free, hi_free, short, expand_free)


def continuous_offset_backward(cache: OffsetCache, g_out: np.ndarray):
    """Gradients ``(d_x, d_delta)`` of :func:`continuous_offset_arrays`."""
    g_lo, g_hi = g_out[:, 0].copy(), g_out[:, 1].copy()
    s = cache.short
    if s.any():
        mean = 0.5 * (g_lo[s] + g_hi[s]) * cache.expand_free[s]
        g_lo[s], g_hi[s] = mean, mean
    g_lo *= cache.lo_free
    g_hi *= cache.hi_free
    g_rs = np.where(cache.swapped, g_hi, g_lo)
    g_re = np.where(cache.swapped, g_lo, g_hi)
    x, d = cache.x, cache.delta
    length = x[:, 1] - x[:, 0]
    g_delta = np.stack([g_rs * length, g_re * length], axis=1)
    # raw_s = d_s * (xe - xs) + xs ; raw_e = d_e * (xe - xs) + xe
    g_x = np.empty_like(x)
    g_x[:, 0] = g_rs * (1.0 - d[:, 0]) - g_re * d[:, 1]
    g_x[:, 1] = g_rs * d[:, 0] + g_re * (1.0 + d[:, 1])
    return g_x, g_delta
