import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pairdet.geometry import (
    AnchorConfig,
    Box,
    Detection,
    IGNORED,
    LabeledBox,
    NEGATIVE,
    assign_anchors,
    count_anchors,
    decode_box,
    decode_boxes,
    encode_box,
    generate_anchors,
    iou,
    iou_matrix,
    nms,
)

from oracles import grid_iou, random_int_boxes, reference_assign, reference_nms


def test_iou_examples():
    a = Box(0, 0, 2, 2)
    assert iou(a, a) == 1.0
    assert iou(a, Box(5, 5, 6, 6)) == 0.0
    assert iou(a, Box(1, 1, 3, 3)) == pytest.approx(1 / 7, abs=1e-12)


def test_iou_matches_cell_counting():
    rng = np.random.default_rng(0)
    boxes = random_int_boxes(rng, 60)
    for a, b in zip(boxes[:30], boxes[30:]):
        assert iou(Box.from_array(a), Box.from_array(b)) == pytest.approx(grid_iou(a, b), abs=1e-12)


def test_box_rejects_degenerate():
    with pytest.raises(ValueError):
        Box(1, 0, 1, 2)
    with pytest.raises(ValueError):
        Box(0, 0, float("inf"), 2)


coord = st.integers(min_value=0, max_value=50)


@st.composite
def boxes(draw):
    x1, y1 = draw(coord), draw(coord)
    return Box(x1, y1, x1 + draw(st.integers(1, 20)), y1 + draw(st.integers(1, 20)))


@given(boxes(), boxes())
def test_iou_symmetric_bounded(a, b):
    v = iou(a, b)
    assert v == iou(b, a)
    assert 0.0 <= v <= 1.0
    assert (v == 1.0) == (a == b)


def test_anchor_counts():
    cfg = AnchorConfig(pyramid_strides=(8,), scales=(1, 1.5, 2), aspect_ratios=(0.5, 1, 2), base_size=8)
    assert len(generate_anchors(cfg, (64, 64))) == 576
    cfg2 = AnchorConfig(pyramid_strides=(8, 16), scales=(1, 1.5, 2), aspect_ratios=(0.5, 1, 2), base_size=8)
    assert len(generate_anchors(cfg2, (64, 64))) == 720
    assert count_anchors(cfg2, (64, 64)) == 720


def test_first_anchor_definition():
    cfg = AnchorConfig(pyramid_strides=(8,), scales=(1.0,), aspect_ratios=(1.0,), base_size=8)
    anchors = generate_anchors(cfg, (64, 64))
    np.testing.assert_allclose(anchors[0], [0, 0, 8, 8])
    # next anchor along the row
    np.testing.assert_allclose(anchors[1], [8, 0, 16, 8])


def test_anchor_padding():
    cfg = AnchorConfig(pyramid_strides=(8,), scales=(1.0,), aspect_ratios=(1.0,), base_size=8)
    assert len(generate_anchors(cfg, (60, 57))) == 64


def test_anchor_config_validation():
    with pytest.raises(ValueError):
        AnchorConfig(scales=())
    with pytest.raises(ValueError):
        AnchorConfig(pyramid_strides=(8, 4))


def test_encode_decode_examples():
    anchor = Box(0, 0, 10, 10)
    np.testing.assert_allclose(encode_box(anchor, anchor), [0, 0, 0, 0], atol=0)
    t = encode_box(anchor, Box(0, 0, 20, 20))
    np.testing.assert_allclose(t, [0.5, 0.5, math.log(2), math.log(2)], atol=1e-12)
    back = decode_box(anchor, [0.5, 0.5, math.log(2), math.log(2)])
    np.testing.assert_allclose(back.as_array(), [0, 0, 20, 20], atol=1e-9)
    assert decode_box(anchor, [0, 0, 0, 0]) == anchor


@given(boxes(), boxes())
def test_roundtrip(a, g):
    np.testing.assert_allclose(decode_box(a, encode_box(a, g)).as_array(), g.as_array(), atol=1e-9)


def test_decode_rejects_overflow_and_clips():
    with pytest.raises(ValueError):
        decode_boxes(np.array([0, 0, 10, 10.0]), np.array([0, 0, 25.0, 0]))
    out = decode_boxes(np.array([0, 0, 10, 10.0]), np.array([0, 0, 1.0, 1.0]), clip=(12, 12))
    assert out.min() >= 0 and out.max() <= 12


def test_assign_trivial():
    anchors = np.array([[0, 0, 10, 10], [20, 20, 30, 30.0]])
    a = assign_anchors(anchors, [])
    assert np.all(a.matched == NEGATIVE)
    a = assign_anchors(anchors, [LabeledBox(Box(20, 20, 30, 30), 2)])
    assert a.matched[1] == 0 and a.matched[0] == NEGATIVE
    assert a.anchor_classes().tolist() == [-1, 2]


def test_assign_matches_bruteforce():
    rng = np.random.default_rng(1)
    for _ in range(20):
        anchors = random_int_boxes(rng, 20)
        gts = random_int_boxes(rng, 3)
        res = assign_anchors(anchors, [LabeledBox(Box.from_array(g), 0) for g in gts], 0.5, 0.4)
        assert res.matched.tolist() == reference_assign(anchors, gts, 0.5, 0.4)


def test_assign_partition_and_targets():
    rng = np.random.default_rng(2)
    anchors = random_int_boxes(rng, 40)
    gts = [LabeledBox(Box.from_array(g), 1) for g in random_int_boxes(rng, 4)]
    a = assign_anchors(anchors, gts)
    assert np.all(a.positive.astype(int) + a.negative + a.ignored == 1)
    assert set(np.unique(a.matched)) <= {IGNORED, NEGATIVE, 0, 1, 2, 3}
    pos = np.nonzero(a.positive)[0]
    for i in pos:
        decoded = decode_boxes(anchors[i], a.targets[i])
        np.testing.assert_allclose(decoded, gts[a.matched[i]].box.as_array(), atol=1e-9)


def test_assign_threshold_order():
    with pytest.raises(ValueError):
        assign_anchors(np.zeros((0, 4)), [], pos_thr=0.3, neg_thr=0.4)


def _dets(boxes_, scores, classes):
    return [Detection(Box.from_array(b), int(c), float(s)) for b, s, c in zip(boxes_, scores, classes)]


def test_nms_examples():
    b = Box(0, 0, 10, 10)
    out = nms([Detection(b, 0, 0.8), Detection(b, 0, 0.9)], 0.5)
    assert [d.score for d in out] == [0.9]
    disjoint = [Detection(Box(i * 20, 0, i * 20 + 10, 10), 0, 0.5) for i in range(4)]
    assert nms(disjoint, 0.5) == disjoint
    # different classes never suppress each other
    assert len(nms([Detection(b, 0, 0.9), Detection(b, 1, 0.8)], 0.5)) == 2


def test_nms_matches_reference():
    rng = np.random.default_rng(3)
    for _ in range(20):
        bx = random_int_boxes(rng, 30)
        scores = np.round(rng.random(30), 2)  # coarse rounding forces ties
        classes = rng.integers(0, 2, 30)
        got = nms(_dets(bx, scores, classes), 0.4)
        want = reference_nms(bx, scores, classes, 0.4)
        assert got == [_dets(bx, scores, classes)[i] for i in want]


@settings(max_examples=50)
@given(st.integers(0, 10_000))
def test_nms_properties(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(0, 25))
    dets = _dets(random_int_boxes(rng, n), rng.random(n), rng.integers(0, 3, n))
    out = nms(dets, 0.3)
    assert all(d in dets for d in out)
    assert [d.score for d in out] == sorted((d.score for d in out), reverse=True)
    assert nms(out, 0.3) == out
    arr = np.array([d.box.as_array() for d in out]).reshape(-1, 4)
    m = iou_matrix(arr, arr)
    for i in range(len(out)):
        for j in range(i + 1, len(out)):
            if out[i].class_id == out[j].class_id:
                assert m[i, j] <= 0.3
