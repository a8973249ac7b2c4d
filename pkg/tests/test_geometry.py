import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hoidet.geometry import (SENTINEL, Box, as_box, iou, is_sentinel,
                             l1_box_distance)


def _grid_iou_oracle(a: Box, b: Box, res: int = 400) -> float:
    """Rasterize both boxes on a fine lattice and count cells."""
    lo = min(a.corners()[0], a.corners()[1], b.corners()[0], b.corners()[1]) - 0.1
    hi = max(a.corners()[2], a.corners()[3], b.corners()[2], b.corners()[3]) + 0.1
    xs = np.linspace(lo, hi, res)
    ys = np.linspace(lo, hi, res)
    gx, gy = np.meshgrid(xs, ys)

    def inside(box):
        x0, y0, x1, y1 = box.corners()
        return (gx >= x0) & (gx <= x1) & (gy >= y0) & (gy <= y1)

    ia, ib = inside(a), inside(b)
    inter = (ia & ib).sum()
    union = (ia | ib).sum()
    return inter / union


def test_iou_identical():
    b = Box(0.4, 0.5, 0.2, 0.3)
    assert iou(b, b) == 1.0


def test_iou_disjoint():
    assert iou(Box(0.2, 0.2, 0.1, 0.1), Box(0.8, 0.8, 0.1, 0.1)) == 0.0


def test_iou_corner_shift_one_seventh():
    # 2x2 boxes shifted by one unit in both axes overlap 1 of 7 cells
    a = Box(0.0, 0.0, 2.0, 2.0)
    b = Box(1.0, 1.0, 2.0, 2.0)
    assert iou(a, b) == pytest.approx(1 / 7, abs=1e-12)
    assert _grid_iou_oracle(a, b) == pytest.approx(1 / 7, abs=5e-3)


def test_iou_random_vs_grid_oracle():
    rng = np.random.default_rng(2)
    for _ in range(20):
        a = Box(*rng.uniform(0.2, 0.8, 2), *rng.uniform(0.1, 0.4, 2))
        b = Box(*rng.uniform(0.2, 0.8, 2), *rng.uniform(0.1, 0.4, 2))
        assert iou(a, b) == pytest.approx(_grid_iou_oracle(a, b), abs=2e-2)


def test_iou_zero_area_rules():
    assert iou(SENTINEL, SENTINEL) == 1.0
    assert iou(SENTINEL, Box(0.1, 0.0, 0.0, 0.0)) == 0.0
    assert iou(SENTINEL, Box(0.5, 0.5, 0.2, 0.2)) == 0.0


@given(st.integers(0, 2 ** 31 - 1))
@settings(max_examples=50, deadline=None)
def test_iou_symmetric_and_bounded(seed):
    rng = np.random.default_rng(seed)
    a = Box(*rng.uniform(0, 1, 2), *rng.uniform(0, 0.5, 2))
    b = Box(*rng.uniform(0, 1, 2), *rng.uniform(0, 0.5, 2))
    assert iou(a, b) == iou(b, a)
    assert 0.0 <= iou(a, b) <= 1.0


def test_l1_zero_on_equal():
    b = Box(0.1, 0.2, 0.3, 0.4)
    assert l1_box_distance(b, b) == 0.0


def test_l1_coordinate_swap_linearity():
    d = 0.07
    a = Box(0.5, 0.5, 0.2, 0.2)
    b = Box(0.5 + d, 0.5 - d, 0.2, 0.2)
    assert l1_box_distance(a, b) == pytest.approx(2 * d, abs=1e-12)


def test_l1_per_coordinate_oracle():
    rng = np.random.default_rng(4)
    for _ in range(50):
        x = rng.uniform(0, 1, 4)
        y = rng.uniform(0, 1, 4)
        want = float(sum(abs(u - v) for u, v in zip(x, y)))
        assert l1_box_distance(Box(*x), Box(*y)) == pytest.approx(want, abs=1e-12)


def test_l1_is_a_metric():
    rng = np.random.default_rng(5)
    for _ in range(100):
        a, b, c = (Box(*rng.uniform(0, 1, 4)) for _ in range(3))
        assert l1_box_distance(a, b) >= 0.0
        assert l1_box_distance(a, b) == l1_box_distance(b, a)
        assert (l1_box_distance(a, c)
                <= l1_box_distance(a, b) + l1_box_distance(b, c) + 1e-12)


def test_sentinel_tolerance():
    assert is_sentinel(Box(5e-4, -5e-4, 1e-3, 0.0))
    assert not is_sentinel(Box(0.002, 0.0, 0.0, 0.0))


def test_as_box_from_sequence():
    assert as_box([0.1, 0.2, 0.3, 0.4]) == Box(0.1, 0.2, 0.3, 0.4)
