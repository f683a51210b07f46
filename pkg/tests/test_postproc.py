import numpy as np
import pytest
from hypothesis import given, strategies as st

from ctal.geometry import Segment, tiou
from ctal.postproc import (Detection, detections_from_arrays, fuse_scores, group_by_video,
                           soft_nms, top_q)


def det(s, e, score, label="a", video="v"):
    return Detection(Segment(s, e), score, label, video)


def test_fuse_scores_examples():
    assert fuse_scores(0.9, 0.8) == pytest.approx(0.72)
    assert fuse_scores(0.37, 1.0) == 0.37
    assert fuse_scores(0.0, 0.6) == 0.0


def test_detection_rejects_bad_score():
    with pytest.raises(ValueError):
        det(0, 1, 1.5)
    with pytest.raises(ValueError):
        det(0, 1, float("nan"))


def test_soft_nms_single_detection_unchanged():
    assert soft_nms([det(1, 4, 0.6)]) == [det(1, 4, 0.6)]


def test_soft_nms_identical_pair_second_goes_to_zero():
    out = soft_nms([det(0, 10, 0.8), det(0, 10, 0.9)], 0.3, score_floor=0.0)
    assert [d.score for d in out] == [0.9, 0.0]


def test_soft_nms_identical_pair_dropped_below_floor():
    assert soft_nms([det(0, 10, 0.9), det(0, 10, 0.8)], 0.3) == [det(0, 10, 0.9)]


def test_soft_nms_disjoint_unchanged():
    dets = [det(0, 1, 0.5), det(5, 9, 0.7)]
    assert soft_nms(dets, 0.3) == [dets[1], dets[0]]


def test_soft_nms_partial_overlap_linear_decay():
    out = soft_nms([det(0, 4, 0.9), det(2, 6, 0.8)], 0.3)
    assert out[1].score == pytest.approx(0.8 * (1 - 1 / 3))


def test_soft_nms_below_threshold_untouched():
    out = soft_nms([det(0, 4, 0.9), det(3, 7, 0.8)], 0.3)  # tIoU 1/7
    assert out[1].score == 0.8


def test_soft_nms_groups_by_class_and_video():
    dets = [det(0, 10, 0.9), det(0, 10, 0.8, label="b"), det(0, 10, 0.7, video="w")]
    assert sorted(d.score for d in soft_nms(dets)) == [0.7, 0.8, 0.9]


def test_soft_nms_ties_keep_input_order():
    dets = [det(0, 1, 0.5), det(3, 4, 0.5), det(6, 7, 0.5)]
    assert soft_nms(dets) == dets


def test_soft_nms_gaussian_variant():
    out = soft_nms([det(0, 4, 0.9), det(2, 6, 0.8)], method="gaussian", sigma=0.5)
    assert out[1].score == pytest.approx(0.8 * np.exp(-(1 / 9) / 0.5))
    with pytest.raises(ValueError):
        soft_nms([det(0, 4, 0.9), det(2, 6, 0.8)], method="hard")


@st.composite
def detection_sets(draw):
    n = draw(st.integers(0, 25))
    out = []
    for _ in range(n):
        s = draw(st.floats(0, 90))
        length = draw(st.floats(0.5, 30))
        out.append(det(s, s + length, draw(st.floats(0, 1)),
                       draw(st.sampled_from("ab")), draw(st.sampled_from("vw"))))
    return out


@given(detection_sets())
def test_soft_nms_never_increases_scores_and_keeps_segments(dets):
    out = soft_nms(dets, 0.3)
    pool = list(dets)
    for o in out:
        match = [d for d in pool if d.segment == o.segment and d.label == o.label
                 and d.video == o.video and d.score >= o.score]
        assert match
        pool.remove(match[0])
    assert all(o.score >= 1e-4 for o in out)
    assert [o.score for o in out] == sorted((o.score for o in out), reverse=True)
    # the best detection of every group keeps its score
    for key in {(d.video, d.label) for d in dets}:
        best = max(d.score for d in dets if (d.video, d.label) == key)
        if best >= 1e-4:
            assert best in [o.score for o in out if (o.video, o.label) == key]


@given(detection_sets())
def test_soft_nms_idempotent_when_no_pair_exceeds_threshold(dets):
    once = soft_nms(dets, 0.3)
    clash = any(tiou(a.segment, b.segment) > 0.3 for i, a in enumerate(once)
                for b in once[i + 1:] if (a.video, a.label) == (b.video, b.label))
    if not clash:
        assert soft_nms(once, 0.3) == once


def test_top_q_examples():
    dets = [det(i, i + 1, s) for i, s in enumerate([0.1, 0.5, 0.3, 0.9, 0.7])]
    assert [d.score for d in top_q(dets, 3)] == [0.9, 0.7, 0.5]
    assert top_q(dets, 0) == []
    assert top_q(dets[:2], 10) == [dets[1], dets[0]]
    with pytest.raises(ValueError):
        top_q(dets, -1)


def test_top_q_is_per_video():
    dets = [det(0, 1, 0.9), det(1, 2, 0.8), det(0, 1, 0.1, video="w")]
    assert len(top_q(dets, 1)) == 2


def test_detections_from_arrays_fuses_and_skips_absent_classes():
    out = detections_from_arrays("v", np.array([[0.0, 2.0]]), np.array([0.5]),
                                 {"a": 0.8, "b": 0.0})
    assert out == [det(0, 2, 0.4)]
    assert group_by_video(out) == {"v": out}
