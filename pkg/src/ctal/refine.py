"""Recurrent refinement of segment coordinates.

Each stage scores the current coordinates, reads the recurrent state into
the output head, moves the coordinates by the predicted offsets and then
advances the state with a gated cell::

    z  = sigmoid(a Wz + h Uz + bz)
    h~ = tanh(a Wh + h Uh + bh)
    h' = (1 - z) * h + z * h~

where ``a`` is the trunk representation of the stage's conditioning. The
state starts at zero, so a single stage is exactly a plain scoring pass.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .geometry import continuous_offset_arrays, continuous_offset_backward
from .model import (FeatureSequence, ForwardCache, NumericalError, ScorerBatch,
                    ScorerParams, backward_batch, forward_batch, sigmoid)


def cell_forward(params: ScorerParams, a: np.ndarray, h: np.ndarray):
    z = sigmoid(a @ params["cell.Wz"] + h @ params["cell.Uz"] + params["cell.bz"])
    c = np.tanh(a @ params["cell.Wh"] + h @ params["cell.Uh"] + params["cell.bh"])
    return (1.0 - z) * h + z * c, (a, h, z, c)


def cell_backward(params: ScorerParams, cache, g_new: np.ndarray, grads: dict):
    a, h, z, c = cache
    dz = g_new * (c - h) * z * (1.0 - z)
    dc = g_new * z * (1.0 - c * c)
    grads["cell.Wz"] += a.T @ dz
    grads["cell.Uz"] += h.T @ dz
    grads["cell.bz"] += dz.sum(axis=0)
    grads["cell.Wh"] += a.T @ dc
    grads["cell.Uh"] += h.T @ dc
    grads["cell.bh"] += dc.sum(axis=0)
    da = dz @ params["cell.Wz"].T + dc @ params["cell.Wh"].T
    dh = g_new * (1.0 - z) + dz @ params["cell.Uz"].T + dc @ params["cell.Uh"].T
    return da, dh


@dataclass
class RefineState:
    hidden: np.ndarray      # (N, H)
    coords: np.ndarray      # (N, 2)
    iteration: int = 0

    def __post_init__(self):
        if self.iteration < 0:
            raise ValueError("iteration must be non-negative")

    def __len__(self):
        return len(self.coords)


def init_state(samples, hidden_dim: int) -> RefineState:
    if hidden_dim < 1:
        raise ValueError("hidden_dim must be >= 1")
    x = np.array(getattr(samples, "segments", samples), dtype=np.float64).reshape(-1, 2)
    return RefineState(np.zeros((len(x), hidden_dim)), x, 0)


@dataclass
class StageCache:
    scorer: ForwardCache
    offset: object
    cell: tuple


def _stage(params: ScorerParams, f: FeatureSequence, state: RefineState, floor: float,
           keep_cache: bool):
    out, fcache = forward_batch(params, f, state.coords, state.hidden, keep_cache)
    if not np.isfinite(out.offset).all():
        raise NumericalError(f"non-finite offsets at refinement stage {state.iteration + 1}")
    coords, ocache = continuous_offset_arrays(state.coords, out.offset, f.duration, floor)
    hidden, ccache = cell_forward(params, fcache.acts[-1], state.hidden)
    new = RefineState(hidden, coords, state.iteration + 1)
    cache = StageCache(fcache, ocache, ccache) if keep_cache else None
    return new, out, cache


def update_step(state: RefineState, params: ScorerParams, f: FeatureSequence,
                max_iterations: Optional[int] = None, floor: Optional[float] = None):
    """Advance one refinement stage -> ``(new_state, outputs)``."""
    if max_iterations is not None and state.iteration >= max_iterations:
        raise RuntimeError(f"refinement already at iteration {state.iteration} "
                           f"of {max_iterations}")
    if floor is None:
        floor = f.step / params.config.frames_per_snippet
    new, out, _ = _stage(params, f, state, floor, keep_cache=False)
    return new, out


@dataclass
class RefineStage:
    coords_in: np.ndarray
    coords: np.ndarray
    output: ScorerBatch


@dataclass
class RefineTrajectory:
    stages: list
    caches: list = field(default_factory=list, repr=False)
    version: int = 0

    def __len__(self):
        return len(self.stages)

    def __getitem__(self, m):
        return self.stages[m]

    @property
    def final(self) -> RefineStage:
        return self.stages[-1]


def run_refinement(samples, params: ScorerParams, f: FeatureSequence, M: int,
                   keep_cache: bool = False,
                   floor: Optional[float] = None) -> RefineTrajectory:
    """Run ``M`` stages from ``samples``; stage ``m`` records its input and output coords."""
    if M < 1:
        raise ValueError("M must be >= 1")
    if floor is None:
        floor = f.step / params.config.frames_per_snippet
    state = init_state(samples, params.config.state_dim)
    stages, caches = [], []
    for _ in range(M):
        coords_in = state.coords
        state, out, cache = _stage(params, f, state, floor, keep_cache)
        stages.append(RefineStage(coords_in, state.coords, out))
        if keep_cache:
            caches.append(cache)
    return RefineTrajectory(stages, caches, params.version)


@dataclass
class StageGrad:
    """Loss gradients flowing into one stage.

    ``p1``/``p2``/``offset`` are w.r.t. that stage's outputs; ``coords_in`` is
    any direct dependence of the loss on the stage's input coordinates.
    """

    p1: np.ndarray
    p2: np.ndarray
    offset: np.ndarray
    coords_in: Optional[np.ndarray] = None


def refine_backward(params: ScorerParams, traj: RefineTrajectory, upstream: list,
                    grads: Optional[dict] = None, stop_gradient: bool = False,
                    g_final_coords: Optional[np.ndarray] = None):
    """Backpropagate through every stage; returns ``(grads, d_initial_coords)``.

    With ``stop_gradient`` the coordinates are treated as constants between
    stages (truncated unrolling); the recurrent state still carries gradient.
    """
    if not traj.caches:
        raise ValueError("trajectory was run without keep_cache=True")
    if len(upstream) != len(traj.stages):
        raise ValueError("need one StageGrad per stage")
    if grads is None:
        grads = params.zeros_like()
    n = len(traj.stages[0].coords_in)
    g_coords = np.zeros((n, 2)) if g_final_coords is None else g_final_coords.copy()
    g_hidden = np.zeros((n, params.config.state_dim))
    for cache, up in zip(reversed(traj.caches), reversed(upstream)):
        gx_t, gd_t = continuous_offset_backward(cache.offset, g_coords)
        da_cell, dh_cell = cell_backward(params, cache.cell, g_hidden, grads)
        _, gx, dh = backward_batch(params, cache.scorer, up.p1, up.p2, up.offset + gd_t,
                                   grads, extra_da=da_cell)
        gx = gx + gx_t
        if up.coords_in is not None:
            gx = gx + up.coords_in
        g_coords = np.zeros_like(gx) if stop_gradient else gx
        g_hidden = dh + dh_cell
    return grads, g_coords
