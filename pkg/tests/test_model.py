import numpy as np
import pytest
from hypothesis import given, strategies as st

from ctal.geometry import OffsetPair, Segment
from ctal.model import (AdamState, FeatureSequence, ModelConfig, ScorerOutput,
                        StaleCacheError, adam_step, backward, backward_batch, checkpoint_bytes, condition,
                        condition_backward, forward, forward_batch, init_params,
                        interp_rows, interpolate_feature, load_checkpoint,
                        parse_checkpoint, save_checkpoint, soi_pool)

from oracles import central_difference, rel_err


def feats(rng, d=3, t=8, step=1.0):
    return FeatureSequence(rng.normal(size=(d, t)), step)


# --------------------------------------------------------------- features

def test_interpolate_at_snippet_centre_is_column(rng):
    f = feats(rng, step=2.5)
    for k in range(f.length):
        assert np.array_equal(interpolate_feature(f, k * 2.5), f.values[:, k])


def test_interpolate_midpoint(rng):
    f = feats(rng)
    assert np.allclose(interpolate_feature(f, 3.5), 0.5 * (f.values[:, 3] + f.values[:, 4]),
                       atol=1e-15)


def test_interpolate_clamps_outside(rng):
    f = feats(rng)
    assert np.array_equal(interpolate_feature(f, -4.0), f.values[:, 0])
    assert np.array_equal(interpolate_feature(f, 100.0), f.values[:, -1])


def test_interpolation_slope_matches_finite_differences(rng):
    f = feats(rng, t=10, step=0.7)
    for t in rng.uniform(0.01, 6.2, 50):
        if abs(t / 0.7 - round(t / 0.7)) < 1e-4:
            continue
        _, slope = interp_rows(f, np.array(t))
        fd = (interpolate_feature(f, t + 1e-7) - interpolate_feature(f, t - 1e-7)) / 2e-7
        assert np.allclose(slope, fd, atol=1e-6)


def test_soi_constant_sequence(rng):
    c = rng.normal(size=(4, 1))
    f = FeatureSequence(np.repeat(c, 9, axis=1), 1.0)
    for s, e in [(0, 8), (2.3, 2.3), (1.1, 6.9)]:
        assert np.allclose(soi_pool(f, Segment(s, e)), c[:, 0], atol=1e-14)


def test_soi_single_bin_is_midpoint(rng):
    f = feats(rng)
    x = Segment(1.3, 5.9)
    assert np.allclose(soi_pool(f, x, bins=1), interpolate_feature(f, x.center), atol=1e-15)


def test_soi_linear_feature_gives_midpoint_value():
    t = np.arange(12) * 0.5
    f = FeatureSequence(np.stack([2.0 * t + 1.0, -t]), 0.5)
    x = Segment(0.7, 4.1)
    ref = np.array([2.0 * x.center + 1.0, -x.center])
    for bins in (1, 3, 16):
        assert np.allclose(soi_pool(f, x, bins), ref, atol=1e-9)


def test_soi_zero_length_equals_point_lookup(rng):
    f = feats(rng)
    assert np.allclose(soi_pool(f, Segment(2.7, 2.7)), interpolate_feature(f, 2.7),
                       atol=1e-15)


def test_soi_converges_to_integral_mean():
    step = 0.25
    t = np.arange(41) * step
    f = FeatureSequence(np.sin(t)[None, :], step)
    x = Segment(0.3, 9.1)
    fine = np.linspace(x.start, x.end, 200_001)
    exact = np.trapezoid(interp_rows(f, fine)[0][:, 0], fine) / x.length
    errs = [abs(soi_pool(f, x, b)[0] - exact) for b in (1, 4, 16, 64)]
    assert all(a > b for a, b in zip(errs, errs[1:]))


def test_condition_matches_scalar_definition(rng):
    f = feats(rng, d=4, t=8)
    x = np.array([[0.5, 3.2], [2.0, 2.0], [1.0, 7.0]])
    c, _ = condition(f, x, 16)
    for row, (s, e) in zip(c, x):
        ref = np.concatenate([interpolate_feature(f, s), interpolate_feature(f, e),
                              soi_pool(f, Segment(s, e), 16), [s / 8.0, e / 8.0]])
        assert np.allclose(row, ref, atol=1e-13)


def test_condition_backward_matches_finite_differences(rng):
    f = feats(rng, d=3, t=8)
    x = np.sort(rng.uniform(0.1, 6.9, (20, 2)), axis=1)
    w = rng.normal(size=(20, 11))
    _, cache = condition(f, x, 16)
    dx = condition_backward(cache, w)
    for n in range(20):
        for j in range(2):
            e = np.zeros_like(x)
            e[n, j] = 1.0
            fd = central_difference(lambda h: np.sum(w * condition(f, x + h * e, 16)[0]),
                                    0.0, 1e-7)
            assert fd == pytest.approx(dx[n, j], rel=1e-4, abs=1e-6)


def test_normalised_coordinates_invariant_to_duration_scaling(rng):
    f1 = FeatureSequence(rng.normal(size=(3, 16)), 1.0)
    f2 = FeatureSequence(f1.values, 2.0)
    x = np.sort(rng.uniform(0, 15, (10, 2)), axis=1)
    c1, _ = condition(f1, x, 8)
    c2, _ = condition(f2, 2 * x, 8)
    assert np.allclose(c1, c2, atol=1e-13)


# ------------------------------------------------------------------ scorer

def test_forward_outputs_in_range_and_pure(rng):
    cfg = ModelConfig(3, hidden=(16, 16), state_dim=4)
    p = init_params(cfg, rng)
    f = feats(rng)
    for _ in range(20):
        s, e = np.sort(rng.uniform(0, 8, 2))
        o1, _ = forward(p, f, Segment(s, e))
        o2, _ = forward(p, f, Segment(s, e))
        assert 0 < o1.p1 < 1 and 0 < o1.p2 < 1
        assert np.isfinite([o1.offset.delta_start, o1.offset.delta_end]).all()
        assert o1 == o2


def test_forward_rejects_dimension_mismatch(rng):
    p = init_params(ModelConfig(3), rng)
    with pytest.raises(ValueError):
        forward(p, feats(rng, d=4), Segment(0, 1))


@pytest.mark.parametrize("trial", range(20))
def test_backward_matches_finite_differences_per_parameter(trial):
    rng = np.random.default_rng(100 + trial)
    cfg = ModelConfig(2, hidden=(5, 4), state_dim=3, bins=4)
    p = init_params(cfg, rng)
    f = feats(rng, d=2, t=6)
    x = np.sort(rng.uniform(0, 6, (4, 2)), axis=1)
    w = rng.normal(size=(4, 4))
    out, cache = forward_batch(p, f, x, rng.normal(size=(4, 3)))
    grads, _, _ = backward_batch(p, cache, w[0], w[1], w[2:4].T)
    hidden = cache.hidden
    flat = p.flat()
    g = np.concatenate([grads[k].ravel() for k in p])

    def loss(v):
        q = p.with_flat(v)
        o, _ = forward_batch(q, f, x, hidden)
        return float(w[0] @ o.p1 + w[1] @ o.p2 + np.sum(w[2:4].T * o.offset))

    for i in range(flat.size):
        if i >= flat.size - 2 * 2 - 2:  # boundary head does not affect the scorer
            assert g[i] == 0.0
            continue
        e = np.zeros_like(flat)
        e[i] = 1e-5
        fd = (loss(flat + e) - loss(flat - e)) / 2e-5
        assert rel_err(fd, g[i], floor=1e-7) <= 1e-4, (i, fd, g[i])


def test_backward_zero_upstream_gives_zero(rng):
    p = init_params(ModelConfig(3, hidden=(8,), state_dim=2), rng)
    out, cache = forward(p, feats(rng), Segment(1, 4))
    g = backward(p, cache, ScorerOutput(0.0, 0.0, OffsetPair(0.0, 0.0)))
    assert all(np.all(v == 0) for v in g.values())


def test_backward_rejects_stale_cache(rng):
    p = init_params(ModelConfig(3, hidden=(8,), state_dim=2), rng)
    _, cache = forward(p, feats(rng), Segment(1, 4))
    newer = p.with_flat(p.flat())
    with pytest.raises(StaleCacheError):
        backward(newer, cache, ScorerOutput(1.0, 0.0, OffsetPair(0.0, 0.0)))


def test_init_is_seeded_and_bounded():
    cfg = ModelConfig(4)
    a = init_params(cfg, np.random.default_rng(0))
    b = init_params(cfg, np.random.default_rng(0))
    assert all(np.array_equal(a[k], b[k]) for k in a)
    assert np.abs(a["trunk.W0"]).max() <= 1 / np.sqrt(cfg.input_dim)
    assert a["trunk.W0"].shape == (3 * 4 + 2, 64)


# -------------------------------------------------------------------- Adam

def test_adam_zero_gradient_keeps_params(rng):
    p = init_params(ModelConfig(3, hidden=(8,), state_dim=2), rng)
    q, st_ = adam_step(p, p.zeros_like(), AdamState.zeros(p), 1e-3)
    assert all(np.array_equal(p[k], q[k]) for k in p)
    assert st_.step == 1


@given(st.floats(1e-6, 1e6), st.floats(1e-5, 1e-1))
def test_adam_first_step_bounded_by_lr(scale, lr):
    rng = np.random.default_rng(0)
    p = init_params(ModelConfig(2, hidden=(3,), state_dim=2), rng)
    g = {k: scale * rng.choice([-1.0, 1.0], size=v.shape) for k, v in p.items()}
    q, _ = adam_step(p, g, AdamState.zeros(p), lr)
    for k in p:
        step = q[k] - p[k]
        assert np.all(np.abs(step) <= lr * (1 + 1e-6))
        assert np.all(np.sign(step) == -np.sign(g[k]))


def test_adam_deterministic(rng):
    p = init_params(ModelConfig(3, hidden=(8,), state_dim=2), rng)
    g = {k: rng.normal(size=v.shape) for k, v in p.items()}
    a, sa = adam_step(p, g, AdamState.zeros(p), 1e-3)
    b, sb = adam_step(p, g, AdamState.zeros(p), 1e-3)
    assert all(np.array_equal(a[k], b[k]) and np.array_equal(sa.v[k], sb.v[k]) for k in a)


# -------------------------------------------------------------- checkpoint

def test_checkpoint_round_trip(tmp_path, rng):
    p = init_params(ModelConfig(5, hidden=(7, 3), state_dim=4, bins=6), rng)
    g = {k: rng.normal(size=v.shape) for k, v in p.items()}
    p2, opt = adam_step(p, g, AdamState.zeros(p), 1e-2)
    save_checkpoint(tmp_path / "m.ckpt", p2, opt, {"epoch": 3})
    q, qopt, meta = load_checkpoint(tmp_path / "m.ckpt")
    assert q.config == p2.config and q.version == p2.version and meta["epoch"] == 3
    assert all(np.array_equal(q[k], p2[k]) for k in p2)
    assert all(np.array_equal(qopt.m[k], opt.m[k]) and np.array_equal(qopt.v[k], opt.v[k])
               for k in p2)
    assert qopt.step == opt.step
    assert checkpoint_bytes(q, qopt, {"epoch": 3}) == (tmp_path / "m.ckpt").read_bytes()


def test_checkpoint_without_optimizer(rng):
    p = init_params(ModelConfig(2, hidden=(3,), state_dim=2), rng)
    q, opt, _ = parse_checkpoint(checkpoint_bytes(p))
    assert opt is None and all(np.array_equal(q[k], p[k]) for k in p)


def test_checkpoint_corruption_is_detected(rng):
    data = checkpoint_bytes(init_params(ModelConfig(2, hidden=(3,), state_dim=2), rng))
    with pytest.raises(ValueError):
        parse_checkpoint(b"XXXXXXXX" + data[8:])
    with pytest.raises(ValueError):
        parse_checkpoint(data[:-5])
    with pytest.raises(ValueError):
        parse_checkpoint(data + b"\0")
