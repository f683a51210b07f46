import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ctal.data import SynthConfig, generate_synthetic
from ctal.geometry import Segment, TimeGrid
from ctal.sampling import (Origin, SampleSet, compose_training_batch, grid_samples,
                           grid_tiou_map, positives_by_gt, scale_invariant_samples,
                           uniform_samples)
from ctal.supervision import assign_targets

from oracles import grid_map_loops


def test_grid_sample_counts():
    assert len(grid_samples(TimeGrid(100, 100.0))) == 5050
    assert len(grid_samples(TimeGrid(1, 3.0))) == 1
    assert len(grid_samples(TimeGrid(4, 8.0))) == 10


@settings(max_examples=40)
@given(st.integers(1, 512))
def test_grid_count_formula(t):
    assert len(grid_samples(TimeGrid(t, float(t)))) == t * (t + 1) // 2


def test_grid_ordering_is_start_major():
    s = grid_samples(TimeGrid(3, 3.0)).segments
    assert s.tolist() == [[0, 1], [0, 2], [0, 3], [1, 2], [1, 3], [2, 3]]
    assert all(p.origin == Origin.GRID and p.gt_hint is None
               for p in grid_samples(TimeGrid(3, 3.0)))


def test_uniform_samples_count_bounds_and_determinism():
    g = TimeGrid(4, 10.0)
    a = uniform_samples(g, np.random.default_rng(7))
    b = uniform_samples(g, np.random.default_rng(7))
    assert len(a) == 10
    assert np.all((a.segments >= 0) & (a.segments <= 10.0))
    assert np.all(a.segments[:, 0] <= a.segments[:, 1])
    assert np.array_equal(a.segments, b.segments)


def test_uniform_zero_jitter_equals_grid():
    g = TimeGrid(2, 5.0)
    u = uniform_samples(g, np.random.default_rng(0), half_width=0.0)
    assert np.array_equal(u.segments, grid_samples(g).segments)


def test_uniform_jitter_bounded_by_half_cell():
    g = TimeGrid(16, 32.0)
    u = uniform_samples(g, np.random.default_rng(1))
    assert np.max(np.abs(np.sort(u.segments, axis=1) - grid_samples(g).segments)) <= 1.0 + 1e-12


def test_scale_invariant_counts_and_tags():
    g = TimeGrid(10, 100.0)
    s = scale_invariant_samples([Segment(30, 50)], 8, g, np.random.default_rng(0))
    assert len(s) == 8
    assert all(p.origin == Origin.GT_LOCAL and p.gt_hint == 0 for p in s)


def test_scale_invariant_empty():
    g = TimeGrid(10, 100.0)
    assert len(scale_invariant_samples([], 8, g, np.random.default_rng(0))) == 0


def test_scale_invariant_rejects_bad_count():
    with pytest.raises(ValueError):
        scale_invariant_samples([Segment(1, 2)], 0, TimeGrid(4, 4.0), np.random.default_rng(0))


def test_scale_invariant_spread_scales_with_length():
    g = TimeGrid(10, 1000.0)
    rng = np.random.default_rng(3)
    long_ = scale_invariant_samples([Segment(500, 510)], 10_000, g, rng, kappa=0.1)
    short = scale_invariant_samples([Segment(500, 501)], 10_000, g, rng, kappa=0.1)
    ratio = long_.segments[:, 0].std() / short.segments[:, 0].std()
    assert ratio == pytest.approx(10.0, rel=0.1)


def test_scale_invariant_degenerate_draws_snap_to_gt():
    # a GT at the very end: most draws clip to [dur, dur] and the retries run out
    g = TimeGrid(4, 10.0)
    s = scale_invariant_samples([Segment(9.999, 10.0)], 200, g, np.random.default_rng(0),
                                kappa=1e6, retry_cap=0)
    assert np.all(s.segments[:, 1] - s.segments[:, 0] > 0)
    assert np.all((s.segments >= 0) & (s.segments <= 10.0))


@given(st.integers(0, 2**32 - 1))
def test_samplers_deterministic(seed):
    g = TimeGrid(8, 40.0)
    gts = [Segment(3, 9), Segment(20, 21)]
    a = scale_invariant_samples(gts, 5, g, np.random.default_rng(seed))
    b = scale_invariant_samples(gts, 5, g, np.random.default_rng(seed))
    assert np.array_equal(a.segments, b.segments)
    assert np.all((a.segments >= 0) & (a.segments <= 40.0))


def test_compose_training_batch():
    g = TimeGrid(4, 8.0)
    rng = np.random.default_rng(0)
    gs, us = grid_samples(g), uniform_samples(g, rng)
    si = scale_invariant_samples([Segment(1, 3)], 8, g, rng)
    batch = compose_training_batch(gs, us, si)
    assert len(batch) == 28
    assert np.all(batch.origins[:10] == Origin.GRID)
    assert np.all(batch.origins[10:20] == Origin.UNIFORM)
    assert np.all(batch.gt_hints[20:] == 0)
    empty = SampleSet.empty(g)
    assert len(compose_training_batch(empty, us, empty)) == 10


def test_compose_rejects_mismatched_grids():
    a, b = grid_samples(TimeGrid(4, 8.0)), grid_samples(TimeGrid(4, 9.0))
    with pytest.raises(ValueError):
        compose_training_batch(a, b, a)


@settings(max_examples=30)
@given(st.integers(1, 24), st.floats(5, 200),
       st.lists(st.tuples(st.floats(0, 1), st.floats(0, 1)), min_size=0, max_size=4))
def test_grid_degeneracy(t, duration, raw):
    g = TimeGrid(t, duration)
    gts = [Segment(min(a, b) * duration, max(a, b) * duration) for a, b in raw]
    targets = assign_targets(grid_samples(g), gts, 0.7)
    i, j = np.triu_indices(t)
    ref = grid_tiou_map(gts, g)
    assert np.array_equal(targets.tiou_star, ref[i, j])
    assert np.allclose(ref, grid_map_loops([s.as_tuple() for s in gts], t, duration),
                       atol=1e-12)


def _decile_ratio(per_gt_counts, lengths):
    order = np.argsort(lengths)
    k = len(order) // 10
    lo = per_gt_counts[order[:k]].sum()
    hi = per_gt_counts[order[-k:]].sum()
    return lo / max(hi, 1)


def test_positive_balance_across_length_deciles():
    cfg = SynthConfig(num_videos=150, length_range=(1.0, 200.0), seed=5)
    records, _ = generate_synthetic(cfg)
    rng = np.random.default_rng(0)
    si_counts, grid_counts, lengths = [], [], []
    for r in records:
        g = TimeGrid(cfg.num_snippets, r.duration)
        si = scale_invariant_samples(r.segments, 16, g, rng)
        si_counts += positives_by_gt(si, r.segments).tolist()
        grid_counts += positives_by_gt(grid_samples(g), r.segments).tolist()
        lengths += [s.length for s in r.segments]
    si_counts, grid_counts = np.array(si_counts), np.array(grid_counts)
    assert _decile_ratio(si_counts, lengths) >= 0.5
    assert _decile_ratio(grid_counts, lengths) <= 0.2
    # per-decile spread under scale-invariant sampling stays within a factor of two
    order = np.argsort(lengths)
    per_decile = [si_counts[c].sum() for c in np.array_split(order, 10)]
    assert max(per_decile) <= 2 * min(per_decile)
