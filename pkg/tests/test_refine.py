import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ctal.geometry import TimeGrid, tiou_matrix
from ctal.model import FeatureSequence, ModelConfig, forward_batch, init_params
from ctal.refine import init_state, run_refinement, update_step
from ctal.sampling import grid_samples
from ctal.training import TrainConfig, Video, objective

from oracles import rel_err
from toy import random_toy_video, toy_video


def small(rng, d=3, t=8):
    p = init_params(ModelConfig(d, hidden=(8, 8), state_dim=5, frames_per_snippet=4), rng)
    return p, FeatureSequence(rng.normal(size=(d, t)), 1.0)


def zero_offsets(p):
    q = p.with_flat(p.flat())
    for k in q:
        if k.startswith("head."):
            q[k][..., 2:] = 0.0
    return q


def test_init_state_examples():
    s = init_state(np.arange(10.0).reshape(5, 2), 32)
    assert s.hidden.shape == (5, 32) and np.all(s.hidden == 0)
    assert np.array_equal(s.coords, np.arange(10.0).reshape(5, 2)) and s.iteration == 0
    assert len(init_state(np.zeros((0, 2)), 32)) == 0


def test_zero_offsets_leave_coords_unchanged(rng):
    p, f = small(rng)
    p = zero_offsets(p)
    x = np.array([[1.0, 3.0], [0.0, 8.0], [2.5, 6.25]])
    traj = run_refinement(x, p, f, 4)
    assert np.all(traj.final.output.offset == 0)
    for stage in traj.stages:
        assert np.array_equal(stage.coords, x)


def test_single_stage_equals_plain_forward(rng):
    p, f = small(rng)
    x = np.sort(rng.uniform(0, 8, (6, 2)), axis=1)
    traj = run_refinement(x, p, f, 1)
    out, _ = forward_batch(p, f, x)
    assert np.array_equal(traj.final.output.p1, out.p1)
    assert np.array_equal(traj.final.output.p2, out.p2)
    assert np.array_equal(traj.final.output.offset, out.offset)
    assert np.array_equal(traj[0].coords_in, x)


def test_trajectory_length_and_determinism(rng):
    p, f = small(rng)
    x = np.sort(rng.uniform(0, 8, (6, 2)), axis=1)
    a, b = run_refinement(x, p, f, 3), run_refinement(x, p, f, 3)
    assert len(a) == 3
    for sa, sb in zip(a.stages, b.stages):
        assert np.array_equal(sa.coords, sb.coords)
        assert np.array_equal(sa.output.p1, sb.output.p1)
    for m in range(1, 3):
        assert np.array_equal(a[m].coords_in, a[m - 1].coords)


def test_update_step_matches_trajectory(rng):
    p, f = small(rng)
    x = np.sort(rng.uniform(0, 8, (6, 2)), axis=1)
    s = init_state(x, 5)
    traj = run_refinement(x, p, f, 2)
    for m in range(2):
        s, out = update_step(s, p, f, max_iterations=2)
        assert np.array_equal(s.coords, traj[m].coords)
        assert np.array_equal(out.p2, traj[m].output.p2)
    with pytest.raises(RuntimeError):
        update_step(s, p, f, max_iterations=2)


def test_refinement_rejects_zero_stages(rng):
    p, f = small(rng)
    with pytest.raises(ValueError):
        run_refinement(np.zeros((1, 2)), p, f, 0)


@settings(max_examples=30)
@given(st.integers(0, 2**32 - 1), st.floats(0.01, 30.0))
def test_coords_stay_in_bounds_for_any_params(seed, scale):
    rng = np.random.default_rng(seed)
    p, f = small(rng)
    p = p.with_flat(p.flat() * scale)
    x = np.sort(rng.uniform(0, 8, (10, 2)), axis=1)
    floor = f.step / p.config.frames_per_snippet
    for stage in run_refinement(x, p, f, 5).stages:
        assert np.all((stage.coords >= 0) & (stage.coords <= f.duration))
        assert np.all(stage.coords[:, 1] - stage.coords[:, 0] >= floor - 1e-12)


@pytest.mark.parametrize("trial", range(5))
def test_full_objective_gradient_matches_finite_differences(trial):
    rng = np.random.default_rng(trial)
    cfg = ModelConfig(3, hidden=(8, 8), state_dim=4, bins=8, frames_per_snippet=4)
    p = init_params(cfg, rng)
    video = Video("v", FeatureSequence(rng.normal(size=(3, 8)), 1.0),
                  np.array([[1.3, 4.2], [5.1, 6.7]]))
    x0 = np.sort(rng.uniform(0, 8, (3, 2)), axis=1)
    x0[0] = [1.2, 4.4]
    tc = TrainConfig(M=3, stop_gradient=False)
    _, g = objective(p, video, x0, tc)
    gv = np.concatenate([g[k].ravel() for k in p])
    for _ in range(3):
        v = rng.normal(size=gv.size)
        v /= np.linalg.norm(v)
        lp = objective(p.with_flat(p.flat() + 1e-5 * v), video, x0, tc, False)[0].total
        lm = objective(p.with_flat(p.flat() - 1e-5 * v), video, x0, tc, False)[0].total
        assert rel_err((lp - lm) / 2e-5, gv @ v) <= 1e-4


def test_refinement_converges_on_trained_scorer(toy_scorer):
    rng = np.random.default_rng(99)
    errs = np.zeros(5)
    for _ in range(10):
        v = random_toy_video(rng)
        gs = grid_samples(v.grid).segments
        x0 = gs[tiou_matrix(gs, v.gts)[:, 0] > 0.3]
        traj = run_refinement(x0, toy_scorer, v.features, 4)
        errs += [np.abs(x0 - v.gts[0]).mean()] + \
            [np.abs(s.coords - v.gts[0]).mean() for s in traj.stages]
    errs /= 10
    assert np.all(np.diff(errs) <= 0), errs


@pytest.mark.parametrize("seg", [(8, 16), (3, 10), (15, 27)])
def test_trained_scorer_is_shift_equivariant(toy_scorer, seg):
    found = []
    for pad in (0, 5):
        v = toy_video(np.random.default_rng(5), 32, *seg, pad=pad)
        gs = grid_samples(TimeGrid(v.features.length, v.features.duration)).segments
        out, _ = forward_batch(toy_scorer, v.features, gs)
        found.append(gs[np.argmax(out.p2)])
    assert np.all(np.abs(found[1] - found[0] - 5.0) <= 1.0)
