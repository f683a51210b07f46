"""Objective evaluation with gradients, and the epoch loop."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .geometry import Segment, TimeGrid
from .model import (AdamState, FeatureSequence, ModelConfig, NumericalError, ScorerParams,
                    adam_step, boundary_backward, boundary_forward, init_params)
from .refine import StageGrad, refine_backward, run_refinement
from .sampling import (DEFAULT_KAPPA, DEFAULT_N_PER_GT, compose_training_batch,
                       grid_samples, scale_invariant_samples, uniform_samples)
from .supervision import (LossReport, NormTerms, assign_target_arrays, boundary_labels,
                          loss_norm, loss_offset, loss_tiou_parts, loss_total,
                          stage_weights, target_jacobians)

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lambda1: float = 10.0
    lambda2: float = 1.0
    lambda3: float = 1e-5
    alpha: float = 0.8
    tau: float = 0.7
    M: int = 10
    lr: float = 1e-3
    epochs: int = 10
    decay_after: int = 5
    batch_size: int = 16
    sampler: str = "continuous"
    grid_per_video: int = 64
    uniform_per_video: int = 64
    n_per_gt: int = DEFAULT_N_PER_GT
    kappa: float = DEFAULT_KAPPA
    offset_positives_only: bool = True
    stop_gradient: bool = True

    def __post_init__(self):
        if self.sampler not in ("continuous", "grid"):
            raise ValueError(f"unknown sampler {self.sampler!r}")
        if self.M < 1 or self.batch_size < 1 or self.epochs < 0:
            raise ValueError("M, batch_size must be >= 1 and epochs >= 0")
        if not 0 < self.lr < float("inf"):
            raise ValueError("lr must be positive and finite")

    def lr_at(self, epoch: int) -> float:
        """Constant rate for ``decay_after`` epochs, then a tenth of it."""
        return self.lr if epoch < self.decay_after else self.lr / 10.0


@dataclass
class Video:
    id: str
    features: FeatureSequence
    gts: np.ndarray  # (K, 2)

    @property
    def grid(self) -> TimeGrid:
        return TimeGrid(self.features.length, self.features.duration)


def objective(params: ScorerParams, video: Video, x0: np.ndarray, cfg: TrainConfig,
              with_grad: bool = True):
    """Full objective for one video and sample batch -> ``(LossReport, grads)``."""
    f = video.features
    traj = run_refinement(x0, params, f, cfg.M, keep_cache=with_grad)
    w = stage_weights(cfg.alpha, cfg.M)
    per_stage, upstream = [], []
    for m, stage in enumerate(traj.stages):
        x = stage.coords_in
        tg = assign_target_arrays(x, video.gts, cfg.tau)
        tl = loss_tiou_parts(stage.output.p1, stage.output.p2, tg, cfg.lambda1)
        off, g_off = loss_offset(stage.output.offset, tg, cfg.offset_positives_only)
        per_stage.append((tl.bce, tl.mse, off))
        if with_grad:
            d_star, d_off = target_jacobians(x, video.gts, tg)
            g_x = (tl.grad_target[:, None] * d_star
                   - cfg.lambda2 * np.einsum("nk,nkj->nj", g_off, d_off))
            upstream.append(StageGrad(w[m] * tl.grad_p1, w[m] * tl.grad_p2,
                                      w[m] * cfg.lambda2 * g_off, w[m] * g_x))
    bprob = boundary_forward(params, f)
    blab = boundary_labels(video.gts, video.grid)
    _, g_b, g_l2, (bnd, l2) = loss_norm(bprob, blab, params, cfg.lambda3)
    report = loss_total(per_stage, NormTerms(bnd, l2, cfg.lambda3), cfg.alpha,
                        cfg.lambda1, cfg.lambda2)
    if not with_grad:
        return report, None
    grads = g_l2
    refine_backward(params, traj, upstream, grads, stop_gradient=cfg.stop_gradient)
    boundary_backward(params, f, bprob, g_b, grads)
    return report, grads


def training_samples(video: Video, cfg: TrainConfig, rng: np.random.Generator) -> np.ndarray:
    """Sample batch for one video: subsampled grid + uniform + scale-invariant draws."""
    grid = video.grid
    gs = grid_samples(grid)
    gts = [Segment(s, e) for s, e in video.gts]
    if cfg.sampler == "grid":
        n = cfg.grid_per_video + cfg.uniform_per_video + cfg.n_per_gt * len(gts)
        pick = rng.choice(len(gs), size=min(n, len(gs)), replace=False)
        return gs.segments[np.sort(pick)]
    us = uniform_samples(grid, rng)
    si = scale_invariant_samples(gts, cfg.n_per_gt, grid, rng, cfg.kappa)
    gi = np.sort(rng.choice(len(gs), size=min(cfg.grid_per_video, len(gs)), replace=False))
    ui = np.sort(rng.choice(len(us), size=min(cfg.uniform_per_video, len(us)), replace=False))
    return compose_training_batch(gs.subset(gi), us.subset(ui), si).segments


@dataclass
class TrainState:
    params: ScorerParams
    opt: AdamState
    epoch: int = 0
    history: list = field(default_factory=list)


def _mean_report(reports: Sequence[LossReport]) -> LossReport:
    keys = ("bce", "mse", "offset", "boundary", "l2", "total")
    vals = {k: float(np.mean([getattr(r, k) for r in reports])) for k in keys}
    r0 = reports[0]
    return LossReport(**vals, lambda1=r0.lambda1, lambda2=r0.lambda2, lambda3=r0.lambda3,
                      stage_weights=r0.stage_weights)


def train_epoch(state: TrainState, dataset: Sequence[Video], cfg: TrainConfig,
                rng: np.random.Generator) -> tuple[TrainState, LossReport]:
    """One pass over ``dataset`` in shuffled mini-batches of videos."""
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    order = rng.permutation(len(dataset))
    lr = cfg.lr_at(state.epoch)
    params, opt = state.params, state.opt
    reports = []
    for b in range(0, len(order), cfg.batch_size):
        batch = order[b:b + cfg.batch_size]
        acc = None
        for i in batch:
            video = dataset[i]
            x0 = training_samples(video, cfg, rng)
            rep, g = objective(params, video, x0, cfg)
            if not np.isfinite(rep.total):
                raise NumericalError(f"non-finite loss on video {video.id}")
            reports.append(rep)
            if acc is None:
                acc = g
            else:
                for k in acc:
                    acc[k] += g[k]
        for k in acc:
            acc[k] /= len(batch)
        params, opt = adam_step(params, acc, opt, lr)
        if not params.is_finite():
            raise NumericalError("parameters became non-finite")
    summary = _mean_report(reports)
    history = state.history + [summary]
    return TrainState(params, opt, state.epoch + 1, history), summary


def epoch_rng(seed: int, epoch: int) -> np.random.Generator:
    return np.random.default_rng([seed, epoch])


def new_state(model_cfg: ModelConfig, seed: int) -> TrainState:
    params = init_params(model_cfg, np.random.default_rng([seed, 2**31 - 1]))
    return TrainState(params, AdamState.zeros(params))


def fit(dataset: Sequence[Video], model_cfg: ModelConfig, cfg: TrainConfig, seed: int,
        state: Optional[TrainState] = None,
        on_epoch: Optional[Callable[[TrainState, LossReport], None]] = None) -> TrainState:
    """Train until ``cfg.epochs``; resumes from ``state.epoch`` when given."""
    state = state or new_state(model_cfg, seed)
    while state.epoch < cfg.epochs:
        state, rep = train_epoch(state, dataset, cfg, epoch_rng(seed, state.epoch))
        log.info("epoch %d  lr %.2e  loss %.5f", state.epoch, cfg.lr_at(state.epoch - 1),
                 rep.total)
        if on_epoch is not None:
            on_epoch(state, rep)
    return state
