import math

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from iouesa import tensor as T
from iouesa.geometry import (Box, BoxSet, apply_deltas, decode_boxes, encode_deltas, giou, giou_tensor, iou,
                             pairwise_giou, pairwise_iou, read_boxes_csv, write_boxes_csv)
from iouesa.tensor import Tensor, grad_check


def raster_iou(a: Box, b: Box, res: int = 100) -> float:
    """IoU by counting cell centres of a ``1/res`` grid inside each box."""
    lo_x, hi_x = min(a.x1, b.x1), max(a.x2, b.x2)
    lo_y, hi_y = min(a.y1, b.y1), max(a.y2, b.y2)
    xs = lo_x + (np.arange(int(round((hi_x - lo_x) * res))) + 0.5) / res
    ys = lo_y + (np.arange(int(round((hi_y - lo_y) * res))) + 0.5) / res
    gx, gy = np.meshgrid(xs, ys)
    in_a = (gx > a.x1) & (gx < a.x2) & (gy > a.y1) & (gy < a.y2)
    in_b = (gx > b.x1) & (gx < b.x2) & (gy > b.y1) & (gy < b.y2)
    union = np.count_nonzero(in_a | in_b)
    return np.count_nonzero(in_a & in_b) / union if union else 0.0


@st.composite
def boxes(draw, lo=-50.0, hi=50.0, min_size=0.0):
    # sizes are exactly 0 or >= 1e-6: tinier ones make areas underflow to subnormals
    size = st.floats(max(min_size, 1e-6), 40.0)
    if min_size == 0.0:
        size = st.one_of(st.just(0.0), size)
    x1 = draw(st.floats(lo, hi))
    y1 = draw(st.floats(lo, hi))
    w = draw(size)
    h = draw(size)
    return Box(x1, y1, x1 + w, y1 + h)


def test_iou_examples_against_raster_oracle():
    cases = [
        (Box(0, 0, 2, 2), Box(0, 0, 2, 2), 1.0),
        (Box(0, 0, 1, 1), Box(2, 2, 3, 3), 0.0),
        (Box(0, 0, 2, 2), Box(1, 1, 3, 3), 1 / 7),
    ]
    for a, b, expected in cases:
        oracle = raster_iou(a, b)
        assert oracle == pytest.approx(expected, abs=1e-12)
        assert iou(a, b) == pytest.approx(oracle, abs=1e-6)


def test_pairwise_iou_three_boxes():
    s = BoxSet([[0, 0, 2, 2], [1, 1, 3, 3], [10, 10, 11, 11]], 20, 20)
    expected = [[1, 1 / 7, 0], [1 / 7, 1, 0], [0, 0, 1]]
    for i in range(3):
        for j in range(3):
            assert raster_iou(s[i], s[j]) == pytest.approx(expected[i][j], abs=1e-12)
    np.testing.assert_allclose(pairwise_iou(s).data, expected, atol=1e-6)


def test_degenerate_boxes_have_zero_iou_everywhere():
    point = Box(1, 1, 1, 1)
    assert iou(point, point) == 0.0
    assert iou(point, Box(0, 0, 2, 2)) == 0.0
    assert pairwise_iou([[1, 1, 1, 1], [0, 0, 2, 2]]).data[0, 0] == 0.0
    assert giou(point, Box(3, 3, 3, 3)) == 0.0


def test_giou_examples():
    assert giou(Box(0, 0, 2, 2), Box(0, 0, 2, 2)) == 1.0
    assert giou(Box(0, 0, 1, 1), Box(2, 0, 3, 1)) == pytest.approx(-1 / 3, abs=1e-12)
    assert giou(Box(0, 0, 1, 1), Box(9, 9, 10, 10)) == pytest.approx(-0.98, abs=1e-12)


def test_apply_deltas_examples():
    b = Box(0, 0, 2, 2)
    assert apply_deltas(b, [0, 0, 0, 0], 10, 10) == b
    moved = apply_deltas(b, [0.1, 0, 0, 0], 10, 10)
    np.testing.assert_allclose(moved.as_array(), [0.2, 0, 2.2, 2], atol=1e-12)
    big = Box(400, 400, 402, 404)
    grown = apply_deltas(big, [0, 0, 100, 0], 1e6, 1e6)
    assert grown.width == pytest.approx(2 * math.exp(4.0), rel=1e-12)
    assert grown.height == pytest.approx(4.0, rel=1e-12)


def test_decoded_boxes_are_clamped_and_ordered():
    rng = np.random.default_rng(0)
    src = np.array([[5, 5, 30, 40], [0, 0, 64, 64], [60, 60, 63, 62]], dtype=float)
    for _ in range(50):
        out = decode_boxes(Tensor(src), Tensor(rng.normal(0, 5, (3, 4))), 64, 64).data
        assert np.all(out[:, 0] <= out[:, 2]) and np.all(out[:, 1] <= out[:, 3])
        assert np.all(out >= 0) and np.all(out <= 64)


@settings(max_examples=300, deadline=None)
@given(boxes(), boxes())
def test_iou_properties(a, b):
    v = iou(a, b)
    assert 0.0 <= v <= 1.0
    assert v == iou(b, a)
    if a.area > 0:
        assert iou(a, a) == 1.0


@settings(max_examples=300, deadline=None)
@given(boxes(), boxes(), st.floats(0.01, 100.0))
def test_iou_scale_invariance(a, b, k):
    sa = Box(a.x1 * k, a.y1 * k, a.x2 * k, a.y2 * k)
    sb = Box(b.x1 * k, b.y1 * k, b.x2 * k, b.y2 * k)
    assert iou(sa, sb) == pytest.approx(iou(a, b), abs=1e-9)


@settings(max_examples=300, deadline=None)
@given(boxes(min_size=1e-3), boxes(min_size=1e-3))
def test_giou_bounds(a, b):
    g = giou(a, b)
    assert -1.0 - 1e-12 <= g <= iou(a, b) + 1e-12
    assert g <= 1.0


@settings(max_examples=50, deadline=None)
@given(st.lists(boxes(), min_size=1, max_size=8))
def test_pairwise_iou_matches_scalar_loop_exactly(bs):
    mat = pairwise_iou(np.array([b.as_array() for b in bs])).data
    for i, a in enumerate(bs):
        for j, b in enumerate(bs):
            assert mat[i, j] == iou(a, b)
    assert np.array_equal(mat, mat.T)


def test_pairwise_giou_matches_scalar():
    rng = np.random.default_rng(4)
    xy = rng.uniform(0, 50, (6, 2))
    a = np.hstack([xy, xy + rng.uniform(1, 20, (6, 2))])
    b = a[::-1] + 3.0
    mat = pairwise_giou(a, b)
    for i in range(6):
        for j in range(6):
            assert mat[i, j] == pytest.approx(giou(Box(*a[i]), Box(*b[j])), abs=1e-12)


@settings(max_examples=200, deadline=None)
@given(boxes(lo=20, hi=60, min_size=2.0), st.lists(st.floats(-0.4, 0.4), min_size=2, max_size=2),
       st.lists(st.floats(-0.5, 0.5), min_size=2, max_size=2))
def test_apply_then_encode_recovers_deltas(b, shift, scale):
    deltas = np.array(shift + scale)
    out = apply_deltas(b, deltas, 1000.0, 1000.0)
    assume(out.x1 > 0 and out.y1 > 0)
    np.testing.assert_allclose(encode_deltas(b, out), deltas, atol=1e-9)


def test_giou_tensor_matches_scalar_and_passes_grad_check():
    rng = np.random.default_rng(8)
    pred = np.hstack([rng.uniform(0, 10, (5, 2)), rng.uniform(0, 10, (5, 2)) + 12])
    gt = np.hstack([rng.uniform(0, 10, (5, 2)), rng.uniform(0, 10, (5, 2)) + 11])
    vals = giou_tensor(Tensor(pred), gt).data
    for k in range(5):
        assert vals[k] == pytest.approx(giou(Box(*pred[k]), Box(*gt[k])), abs=1e-12)
    assert grad_check(lambda p: T.tsum(giou_tensor(p, gt)), Tensor(pred)) < 1e-5


def test_decode_grad_check():
    rng = np.random.default_rng(9)
    src = Tensor(np.array([[10, 12, 30, 40], [20, 5, 50, 25]], dtype=float))
    deltas = Tensor(rng.normal(0, 0.2, (2, 4)))
    c = rng.normal(size=(2, 4))
    assert grad_check(lambda d: T.tsum(decode_boxes(src, d, 100, 100) * c), deltas) < 1e-5
    assert grad_check(lambda b: T.tsum(decode_boxes(b, deltas, 100, 100) * c), src) < 1e-5


def test_boxset_csv_round_trip(tmp_path):
    s = BoxSet([[0, 0, 2.5, 2], [1, 1, 3, 3.25]], 10, 10)
    path = tmp_path / "boxes.csv"
    write_boxes_csv(path, s, [0, 3])
    text = path.read_text().splitlines()
    assert text[0] == "x1,y1,x2,y2,class_id"
    back, classes = read_boxes_csv(path, 10, 10)
    assert np.array_equal(back.xyxy, s.xyxy)
    assert classes == [0, 3]
    write_boxes_csv(path, s)
    back, classes = read_boxes_csv(path, 10, 10)
    assert classes is None and np.array_equal(back.xyxy, s.xyxy)


def test_boxset_clamping_keeps_boxes_in_image():
    s = BoxSet([[-5, 2, 30, 50], [12, 12, 8, 8]], 20, 20).clamped()
    assert np.all(s.xyxy >= 0) and np.all(s.xyxy <= 20)
    assert np.all(s.xyxy[:, :2] <= s.xyxy[:, 2:])
