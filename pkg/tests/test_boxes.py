import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from driftdet.boxes import (LOG_SCALE_CLAMP, anchor_grid, clip_boxes,
                            decode_deltas, encode_deltas, iou_matrix, nms)

from _oracles import iou_ref, nms_ref


def random_boxes(rng, n, size=64.0):
    x1 = rng.uniform(0, size - 2, n)
    y1 = rng.uniform(0, size - 2, n)
    w = rng.uniform(1, size / 2, n)
    h = rng.uniform(1, size / 2, n)
    return np.stack([x1, y1, x1 + w, y1 + h], axis=1)


def test_iou_matrix_against_scalar_oracle(rng):
    a = random_boxes(rng, 7)
    b = random_boxes(rng, 5)
    m = iou_matrix(a, b)
    assert m.shape == (7, 5)
    for i in range(7):
        for j in range(5):
            assert m[i, j] == pytest.approx(iou_ref(a[i], b[j]))


def test_iou_matrix_degenerate():
    a = np.array([[5.0, 5.0, 5.0, 10.0]])
    b = np.array([[0.0, 0.0, 10.0, 10.0]])
    assert iou_matrix(a, b)[0, 0] == 0.0


def test_nms_matches_bruteforce(rng):
    for trial in range(50):
        n = int(rng.integers(1, 12))
        boxes = random_boxes(rng, n)
        scores = rng.uniform(0, 1, n)
        thr = float(rng.uniform(0.1, 0.9))
        assert nms(boxes, scores, thr) == nms_ref(boxes, scores, thr)


def test_nms_kept_pairwise_iou_bounded(rng):
    boxes = random_boxes(rng, 30)
    scores = rng.uniform(0, 1, 30)
    keep = nms(boxes, scores, 0.4)
    kept = boxes[keep]
    m = iou_matrix(kept, kept)
    np.fill_diagonal(m, 0.0)
    assert m.max() <= 0.4 + 1e-12
    # output is sorted by descending score
    assert all(scores[keep[i]] >= scores[keep[i + 1]] for i in range(len(keep) - 1))


def test_nms_tie_break_prefers_lower_index():
    boxes = np.array([[0, 0, 10, 10], [1, 1, 11, 11], [40, 40, 50, 50]], dtype=float)
    scores = np.array([0.5, 0.5, 0.5])
    assert nms(boxes, scores, 0.3) == [0, 2]


def test_clip_boxes():
    boxes = np.array([[-5.0, -3.0, 70.0, 80.0], [10.0, 10.0, 20.0, 20.0]])
    out = clip_boxes(boxes, 64, 64)
    assert out[0].tolist() == [0.0, 0.0, 64.0, 64.0]
    assert out[1].tolist() == [10.0, 10.0, 20.0, 20.0]


def test_anchor_grid_layout():
    anchors = anchor_grid(64, 8, (8.0, 16.0))
    assert anchors.shape == (8 * 8 * 2, 4)
    # first cell center is at (4, 4); scales vary fastest
    assert anchors[0].tolist() == [0.0, 0.0, 8.0, 8.0]
    assert anchors[1].tolist() == [-4.0, -4.0, 12.0, 12.0]
    # second anchor pair sits one stride to the right
    assert anchors[2].tolist() == [8.0, 0.0, 16.0, 8.0]
    centers_x = (anchors[:, 0] + anchors[:, 2]) / 2
    assert set(np.unique(centers_x)) == {4.0 + 8 * i for i in range(8)}


def test_delta_coding_round_trip(rng):
    anchors = random_boxes(rng, 20)
    boxes = random_boxes(rng, 20)
    deltas = encode_deltas(anchors, boxes)
    back = decode_deltas(anchors, deltas)
    assert np.allclose(back, boxes, atol=1e-9)


def test_encode_identity_is_zero():
    a = np.array([[10.0, 10.0, 26.0, 26.0]])
    assert np.allclose(encode_deltas(a, a), 0.0)


def test_decode_clamps_log_scale():
    anchors = np.array([[0.0, 0.0, 8.0, 8.0]])
    deltas = np.array([[0.0, 0.0, 100.0, -100.0]])
    out = decode_deltas(anchors, deltas)
    w = out[0, 2] - out[0, 0]
    h = out[0, 3] - out[0, 1]
    assert w == pytest.approx(8.0 * np.exp(LOG_SCALE_CLAMP))
    assert h == pytest.approx(8.0 * np.exp(-LOG_SCALE_CLAMP))


@given(st.integers(0, 1000))
@settings(max_examples=30)
def test_nms_invariant_under_permutation(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 10))
    boxes = random_boxes(rng, n)
    scores = rng.uniform(0, 1, n)  # distinct with probability 1
    keep = nms(boxes, scores, 0.5)
    perm = rng.permutation(n)
    keep_p = nms(boxes[perm], scores[perm], 0.5)
    assert sorted(perm[keep_p]) == sorted(keep)
