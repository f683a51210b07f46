"""Target assignment and the training objective.

The per-stage regression loss is a class-balanced BCE on the binary branch,
an MSE on the tIoU-regression branch and an L1 offset loss; the stages are
combined with geometric decay and a boundary + weight-decay term is added.
Every loss returns its value together with analytic gradients.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, NamedTuple, Optional, Sequence, Union

import numpy as np

from .geometry import OffsetPair, Segment, TimeGrid, tiou_matrix

EPS = 1e-7


@dataclass(frozen=True)
class TargetAssignment:
    tiou_star: float
    is_positive: bool
    offset_target: OffsetPair
    closest_gt: Optional[int]


@dataclass
class Targets:
    """Array form of a list of :class:`TargetAssignment` (indexable like one)."""

    tiou_star: np.ndarray        # (N,)
    is_positive: np.ndarray      # (N,) bool
    offset_target: np.ndarray    # (N, 2)
    closest_gt: np.ndarray       # (N,) int, -1 when there are no ground truths

    def __len__(self):
        return len(self.tiou_star)

    def __getitem__(self, i) -> TargetAssignment:
        c = int(self.closest_gt[i])
        return TargetAssignment(float(self.tiou_star[i]), bool(self.is_positive[i]),
                                OffsetPair(*map(float, self.offset_target[i])),
                                None if c < 0 else c)

    def __iter__(self):
        return (self[i] for i in range(len(self)))


def _as_array(gts) -> np.ndarray:
    if isinstance(gts, np.ndarray):
        return gts.reshape(-1, 2).astype(np.float64)
    return np.array([g.as_tuple() for g in gts], dtype=np.float64).reshape(-1, 2)


def assign_target_arrays(x: np.ndarray, gts: np.ndarray, tau: float) -> Targets:
    x = np.asarray(x, dtype=np.float64).reshape(-1, 2)
    n = len(x)
    gts = np.asarray(gts, dtype=np.float64).reshape(-1, 2)
    if len(gts) == 0:
        return Targets(np.zeros(n), np.zeros(n, bool), np.zeros((n, 2)),
                       np.full(n, -1, dtype=np.int64))
    m = tiou_matrix(x, gts)
    closest = m.argmax(axis=1)
    star = m[np.arange(n), closest]
    length = x[:, 1] - x[:, 0]
    live = length > 0
    off = np.zeros((n, 2))
    g = gts[closest]
    off[live] = (g[live] - x[live]) / length[live, None]
    return Targets(star, (star > tau) & live, off, closest.astype(np.int64))


def assign_targets(samples, gts: Sequence[Segment], tau: float) -> Targets:
    """Best-tIoU, foreground label and normalised offset target per sample.

    ``samples`` may be a :class:`~ctal.sampling.SampleSet` or an ``(N, 2)`` array.
    """
    if not 0 < tau < 1:
        raise ValueError("tau must lie in (0, 1)")
    x = getattr(samples, "segments", samples)
    return assign_target_arrays(x, _as_array(gts), tau)


def target_jacobians(x: np.ndarray, gts: np.ndarray, targets: Targets):
    """Derivatives of ``tiou_star`` and ``offset_target`` w.r.t. the sample endpoints.

    Returns ``(d_star, d_off)`` with shapes ``(N, 2)`` and ``(N, 2, 2)``
    (``d_off[n, k, j]`` = d offset_k / d x_j). The arg-max GT is held fixed,
    so these are the derivatives almost everywhere.
    """
    n = len(x)
    d_star = np.zeros((n, 2))
    d_off = np.zeros((n, 2, 2))
    if len(gts) == 0 or n == 0:
        return d_star, d_off
    g = gts[targets.closest_gt]
    xs, xe = x[:, 0], x[:, 1]
    gs, ge = g[:, 0], g[:, 1]
    lo, hi = np.maximum(xs, gs), np.minimum(xe, ge)
    inter = np.maximum(0.0, hi - lo)
    union = (xe - xs) + (ge - gs) - inter
    overlap = (hi - lo) > 0
    di_ds = np.where(overlap & (xs > gs), -1.0, 0.0)
    di_de = np.where(overlap & (xe < ge), 1.0, 0.0)
    du_ds = -1.0 - di_ds
    du_de = 1.0 - di_de
    ok = union > 0
    safe_u = np.where(ok, union, 1.0)
    d_star[:, 0] = np.where(ok, (di_ds * union - inter * du_ds) / safe_u**2, 0.0)
    d_star[:, 1] = np.where(ok, (di_de * union - inter * du_de) / safe_u**2, 0.0)

    length = xe - xs
    live = length > 0
    safe_l = np.where(live, length, 1.0)
    # o_s = (gs - xs) / l, o_e = (ge - xe) / l, l = xe - xs
    d_off[:, 0, 0] = np.where(live, (-length + (gs - xs)) / safe_l**2, 0.0)
    d_off[:, 0, 1] = np.where(live, -(gs - xs) / safe_l**2, 0.0)
    d_off[:, 1, 0] = np.where(live, (ge - xe) / safe_l**2, 0.0)
    d_off[:, 1, 1] = np.where(live, (-length - (ge - xe)) / safe_l**2, 0.0)
    return d_star, d_off


def balanced_bce(p: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Half the positive-class mean log loss plus half the negative-class mean.

    Probabilities are clamped into ``(EPS, 1 - EPS)``; an empty class adds 0.
    """
    p = np.asarray(p, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    pc = np.clip(p, EPS, 1 - EPS)
    inside = (p >= EPS) & (p <= 1 - EPS)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    value = 0.0
    grad = np.zeros_like(pc)
    if n_pos:
        value -= 0.5 * np.log(pc[labels]).sum() / n_pos
        grad[labels] = -0.5 / (n_pos * pc[labels])
    if n_neg:
        neg = ~labels
        value -= 0.5 * np.log1p(-pc[neg]).sum() / n_neg
        grad[neg] = 0.5 / (n_neg * (1.0 - pc[neg]))
    return float(value), grad * inside


class TiouLoss(NamedTuple):
    value: float
    bce: float
    mse: float
    grad_p1: np.ndarray
    grad_p2: np.ndarray
    grad_target: np.ndarray


def loss_tiou_parts(p1, p2, targets: Targets, lambda1: float) -> TiouLoss:
    p1 = np.asarray(p1, dtype=np.float64)
    p2 = np.asarray(p2, dtype=np.float64)
    if not (len(p1) == len(p2) == len(targets)):
        raise ValueError("prediction and target lengths differ")
    bce, g1 = balanced_bce(p1, targets.is_positive)
    n = len(p2)
    if n:
        r = p2 - targets.tiou_star
        mse = float(np.mean(r * r))
        g2 = 2.0 * lambda1 * r / n
    else:
        mse, g2 = 0.0, np.zeros(0)
    return TiouLoss(bce + lambda1 * mse, bce, mse, g1, g2, -g2)


def loss_tiou(p1, p2, targets: Targets, lambda1: float):
    """Balanced BCE on ``p1`` plus ``lambda1`` x MSE of ``p2`` against tIoU*.

    Returns ``(value, (grad_p1, grad_p2))``.
    """
    r = loss_tiou_parts(p1, p2, targets, lambda1)
    return r.value, (r.grad_p1, r.grad_p2)


def loss_offset(pred, targets: Targets, positives_only: bool = True):
    """Mean absolute offset error over selected samples and both endpoints.

    Returns ``(value, grad_pred)``; the gradient w.r.t. the target is its negative.
    """
    pred = np.asarray([(o.delta_start, o.delta_end) if isinstance(o, OffsetPair) else o
                       for o in pred], dtype=np.float64).reshape(-1, 2)
    if len(pred) != len(targets):
        raise ValueError("prediction and target lengths differ")
    sel = targets.is_positive if positives_only else np.ones(len(pred), bool)
    n_sel = int(sel.sum())
    grad = np.zeros_like(pred)
    if n_sel == 0:
        return 0.0, grad
    r = pred[sel] - targets.offset_target[sel]
    grad[sel] = np.sign(r) / (2 * n_sel)
    return float(np.abs(r).sum() / (2 * n_sel)), grad


def boundary_labels(gts, grid: TimeGrid) -> np.ndarray:
    """``(T, 2)`` start/end labels: snippet within half a step of a GT boundary."""
    g = _as_array(gts)
    t = np.arange(grid.num_snippets) * grid.step
    out = np.zeros((grid.num_snippets, 2), dtype=bool)
    for j in range(2):
        if len(g):
            out[:, j] = (np.abs(t[:, None] - g[None, :, j]) <= 0.5 * grid.step).any(axis=1)
    return out


def loss_norm(boundary_pred: np.ndarray, boundary_target: np.ndarray,
              params: Mapping[str, np.ndarray], lambda3: float):
    """Balanced boundary BCE (start + end) plus ``lambda3`` x squared parameter norm.

    Returns ``(value, grad_boundary_pred, grad_params, (boundary, l2))``.
    """
    boundary_pred = np.asarray(boundary_pred, dtype=np.float64)
    boundary_target = np.asarray(boundary_target, dtype=bool)
    if boundary_pred.shape != boundary_target.shape:
        raise ValueError("boundary prediction and target shapes differ")
    bnd = 0.0
    g_b = np.zeros_like(boundary_pred)
    for j in range(boundary_pred.shape[1]):
        v, g = balanced_bce(boundary_pred[:, j], boundary_target[:, j])
        bnd += v
        g_b[:, j] = g
    l2 = float(sum(np.sum(a * a) for a in params.values()))
    g_p = {k: 2.0 * lambda3 * a for k, a in params.items()}
    return bnd + lambda3 * l2, g_b, g_p, (bnd, l2)


class NormTerms(NamedTuple):
    boundary: float
    l2: float
    lambda3: float


@dataclass
class LossReport:
    bce: float
    mse: float
    offset: float
    boundary: float
    l2: float
    total: float
    lambda1: float = 10.0
    lambda2: float = 1.0
    lambda3: float = 1e-5
    stage_weights: tuple = field(default=())

    def recombine(self) -> float:
        return (self.bce + self.lambda1 * self.mse + self.lambda2 * self.offset
                + self.boundary + self.lambda3 * self.l2)

    def as_dict(self) -> dict:
        return {k: getattr(self, k) for k in ("bce", "mse", "offset", "boundary", "l2", "total")}


def stage_weights(alpha: float, m: int) -> np.ndarray:
    return alpha ** np.arange(1, m + 1, dtype=np.float64)


def loss_total(per_iteration: Sequence[tuple[float, float, float]],
               norm: Union[float, NormTerms], alpha: float = 0.8,
               lambda1: float = 10.0, lambda2: float = 1.0) -> LossReport:
    """Geometrically decayed sum of per-stage losses plus the norm term.

    Stage ``m`` (1-based) is weighted by ``alpha ** m``. The report's
    ``bce``/``mse``/``offset`` fields are the decayed sums of the parts.
    """
    if len(per_iteration) == 0:
        raise ValueError("need at least one refinement stage")
    if not 0 < alpha <= 1:
        raise ValueError("alpha must lie in (0, 1]")
    w = stage_weights(alpha, len(per_iteration))
    parts = np.asarray(per_iteration, dtype=np.float64).reshape(-1, 3)
    bce, mse, off = (float(np.dot(w, parts[:, k])) for k in range(3))
    if isinstance(norm, NormTerms):
        boundary, l2, lambda3 = norm
        norm_value = boundary + lambda3 * l2
    else:
        boundary, l2, lambda3 = float(norm), 0.0, 0.0
        norm_value = float(norm)
    reg = [p[0] + lambda1 * p[1] + lambda2 * p[2] for p in parts]
    total = float(np.dot(w, reg)) + norm_value
    return LossReport(bce, mse, off, boundary, l2, total, lambda1, lambda2, lambda3,
                      tuple(w.tolist()))
