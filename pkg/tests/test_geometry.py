import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from embedmask.geometry import (BitMask, Box, box_iou, centerness_target,
                                expand_box, ltrb_targets, mask_iou,
                                rasterize_box, rle_decode, rle_encode)


def test_box_validates_extents():
    with pytest.raises(ValueError):
        Box(3, 0, 1, 2)


def test_box_iou_identical():
    b = Box(1, 2, 5, 7)
    assert box_iou(b, b) == pytest.approx(1.0)


def test_box_iou_disjoint():
    assert box_iou(Box(0, 0, 1, 1), Box(2, 2, 3, 3)) == 0.0


def test_box_iou_hand_case():
    # intersection 1, union 7
    assert box_iou(Box(0, 0, 2, 2), Box(1, 1, 3, 3)) == pytest.approx(1.0 / 7.0)


def test_box_iou_degenerate():
    assert box_iou(Box(1, 1, 1, 1), Box(1, 1, 1, 1)) == 0.0


@given(st.lists(st.floats(0, 50), min_size=8, max_size=8))
@settings(max_examples=100, deadline=None)
def test_box_iou_symmetric_bounded(vals):
    a = Box(min(vals[0], vals[1]), min(vals[2], vals[3]),
            max(vals[0], vals[1]), max(vals[2], vals[3]))
    b = Box(min(vals[4], vals[5]), min(vals[6], vals[7]),
            max(vals[4], vals[5]), max(vals[6], vals[7]))
    i1, i2 = box_iou(a, b), box_iou(b, a)
    assert i1 == pytest.approx(i2)
    assert 0.0 <= i1 <= 1.0


def test_mask_iou_cases():
    a = BitMask(np.array([[1, 1], [1, 1]]))
    sub = BitMask(np.array([[1, 1], [0, 0]]))
    empty = BitMask(np.zeros((2, 2)))
    other = BitMask(np.array([[0, 0], [1, 1]]))
    assert mask_iou(a, a) == 1.0
    assert mask_iou(sub, other) == 0.0
    assert mask_iou(a, sub) == 0.5
    assert mask_iou(empty, empty) == 1.0
    with pytest.raises(ValueError, match="extents"):
        mask_iou(a, BitMask(np.zeros((3, 2))))


def test_expand_box_identity():
    b = Box(10, 10, 30, 30)
    assert expand_box(b, 1.0, (100, 100)) == b


def test_expand_box_hand_case():
    assert expand_box(Box(10, 10, 30, 30), 1.2, (100, 100)) == Box(8, 8, 32, 32)


def test_expand_box_clips():
    out = expand_box(Box(0, 0, 30, 30), 1.5, (100, 100))
    assert out == Box(0.0, 0.0, 37.5, 37.5)


def test_expand_box_rejects_shrink():
    with pytest.raises(ValueError, match="factor"):
        expand_box(Box(0, 0, 1, 1), 0.9, (10, 10))


@given(st.integers(0, 10 ** 6), st.floats(1.0, 3.0))
@settings(max_examples=100, deadline=None)
def test_expand_box_never_shrinks_and_stays_inside(seed, factor):
    rng = np.random.default_rng(seed)
    x1, y1 = rng.uniform(0, 50, 2)
    w, h = rng.uniform(0.1, 40, 2)
    b = Box(x1, y1, x1 + w, y1 + h)
    out = expand_box(b, factor, (64, 64))
    assert out.x1 <= max(b.x1, 0.0) + 1e-9 and out.y1 <= max(b.y1, 0.0) + 1e-9
    assert 0 <= out.x1 and 0 <= out.y1 and out.x2 <= 64 and out.y2 <= 64


def test_rle_all_zeros():
    assert rle_encode(BitMask(np.zeros((2, 2)))) == [4]


def test_rle_all_ones():
    assert rle_encode(BitMask(np.ones((2, 2)))) == [0, 4]


def test_rle_column_major():
    m = np.array([[1, 0], [0, 0]])
    # column-major flattening: [1, 0, 0, 0] -> zero-run 0, one-run 1, zero-run 3
    assert rle_encode(BitMask(m)) == [0, 1, 3]


def test_rle_rejects_bad_total():
    with pytest.raises(ValueError, match="sum"):
        rle_decode([3], 2, 2)


@given(st.integers(0, 10 ** 9))
@settings(max_examples=200, deadline=None)
def test_rle_roundtrip(seed):
    rng = np.random.default_rng(seed)
    m = BitMask(rng.random((16, 16)) < rng.uniform(0, 1))
    assert rle_decode(rle_encode(m), 16, 16) == m


def test_ltrb_and_centerness():
    b = Box(0, 0, 10, 10)
    l, t, r, bt = ltrb_targets((2, 5), b)
    assert (l, t, r, bt) == (2, 5, 8, 5)
    assert centerness_target(l, t, r, bt) == pytest.approx(0.5)
    assert centerness_target(*ltrb_targets((5, 5), b)) == pytest.approx(1.0)
    assert centerness_target(*ltrb_targets((0, 5), b)) == 0.0
    with pytest.raises(ValueError, match="outside"):
        ltrb_targets((11, 5), b)


def test_rasterize_box_pixel_centers():
    m = rasterize_box(Box(1.0, 1.0, 3.0, 2.0), 4, 4)
    expect = np.zeros((4, 4), dtype=bool)
    expect[1, 1:3] = True  # centers (1.5, 1.5) and (2.5, 1.5)
    assert np.array_equal(m.bits, expect)


def test_tight_box_roundtrip():
    bits = np.zeros((6, 6), dtype=bool)
    bits[2:4, 1:5] = True
    assert BitMask(bits).tight_box() == Box(1, 2, 5, 4)
