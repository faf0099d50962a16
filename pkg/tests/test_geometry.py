import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ultrafast_cade.geometry import (
    BoundingBox3D,
    BoxOffsets,
    Detection,
    InvalidInputError,
    decode_box,
    decode_boxes,
    encode_box,
    encode_boxes,
    iou3d,
    iou_matrix,
    nms,
)

from .oracles import brute_force_nms, random_box


def voxel_count_iou(a, b, step=0.1):
    """Count sample points of a regular grid falling in each box."""
    lo = np.minimum(a.to_array()[:3], b.to_array()[:3])
    hi = np.maximum(a.to_array()[3:], b.to_array()[3:])
    axes = [np.arange(l + step / 2, h, step) for l, h in zip(lo, hi)]
    z, y, x = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([z, y, x], -1).reshape(-1, 3)

    def inside(box):
        return np.all((pts >= box.min_corner) & (pts < box.max_corner), axis=1)

    ia, ib = inside(a), inside(b)
    return (ia & ib).sum() / (ia | ib).sum()


boxes = st.builds(
    lambda lo, size: BoundingBox3D(tuple(lo), tuple(l + s for l, s in zip(lo, size))),
    st.lists(st.floats(-20, 20), min_size=3, max_size=3),
    st.lists(st.floats(0.1, 15), min_size=3, max_size=3),
)


class TestBox:
    def test_degenerate_rejected(self):
        with pytest.raises(InvalidInputError):
            BoundingBox3D((0, 0, 0), (1, 0, 1))
        with pytest.raises(InvalidInputError):
            BoundingBox3D((0, 0, 0), (1, float("nan"), 1))

    def test_volume_center(self):
        b = BoundingBox3D((0, 1, 2), (2, 4, 6))
        assert b.volume == 24
        assert b.center == (1, 2.5, 4)

    def test_score_range(self):
        with pytest.raises(InvalidInputError):
            Detection(BoundingBox3D((0, 0, 0), (1, 1, 1)), 1.5, "b")


class TestIoU:
    def test_identical(self):
        b = BoundingBox3D((0, 0, 0), (1, 2, 3))
        assert iou3d(b, b) == 1.0

    def test_disjoint(self):
        assert iou3d(BoundingBox3D((0, 0, 0), (1, 1, 1)), BoundingBox3D((5, 5, 5), (6, 6, 6))) == 0.0

    def test_hand_case(self):
        a = BoundingBox3D((0, 0, 0), (2, 2, 2))
        b = BoundingBox3D((1, 1, 1), (3, 3, 3))
        assert iou3d(a, b) == pytest.approx(1 / 15, abs=1e-12)
        assert voxel_count_iou(a, b) == pytest.approx(1 / 15, abs=1e-12)

    @given(boxes, boxes)
    def test_symmetric_bounded(self, a, b):
        v = iou3d(a, b)
        assert v == iou3d(b, a)
        assert 0.0 <= v <= 1.0

    def test_matches_voxel_counting(self):
        rng = np.random.default_rng(4)
        for _ in range(20):
            a = BoundingBox3D(tuple(rng.integers(0, 5, 3)), tuple(rng.integers(6, 10, 3)))
            b = BoundingBox3D(tuple(rng.integers(2, 7, 3)), tuple(rng.integers(8, 12, 3)))
            assert iou3d(a, b) == pytest.approx(voxel_count_iou(a, b, step=0.5), abs=1e-12)

    def test_matrix_agrees(self):
        rng = np.random.default_rng(0)
        a = [random_box(rng) for _ in range(7)]
        b = [random_box(rng) for _ in range(5)]
        m = iou_matrix(np.stack([x.to_array() for x in a]), np.stack([x.to_array() for x in b]))
        for i, x in enumerate(a):
            for j, y in enumerate(b):
                assert m[i, j] == pytest.approx(iou3d(x, y), abs=1e-12)


class TestNms:
    box = BoundingBox3D((0, 0, 0), (4, 4, 4))

    def test_duplicates(self):
        out = nms([Detection(self.box, 0.8, "b"), Detection(self.box, 0.9, "b")], 0.5)
        assert [d.score for d in out] == [0.9]

    def test_disjoint_kept(self):
        other = BoundingBox3D((10, 10, 10), (12, 12, 12))
        out = nms([Detection(self.box, 0.3, "b"), Detection(other, 0.6, "b")], 0.5)
        assert [d.score for d in out] == [0.6, 0.3]

    def test_empty(self):
        assert nms([], 0.5) == []

    def test_five_random_boxes(self):
        rng = np.random.default_rng(11)
        dets = [Detection(random_box(rng, 10, 6), float(rng.random()), "b") for _ in range(5)]
        assert nms(dets, 0.3) == brute_force_nms(dets, 0.3)

    def test_brute_force_and_order_invariance(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            n = int(rng.integers(0, 11))
            dets = [Detection(random_box(rng, 12, 8), float(rng.random()), "b") for _ in range(n)]
            thr = float(rng.uniform(0.05, 0.7))
            out = nms(dets, thr)
            assert out == brute_force_nms(dets, thr)
            perm = [dets[i] for i in rng.permutation(n)]
            assert nms(perm, thr) == out
            for i, a in enumerate(out):
                for b in out[i + 1:]:
                    assert iou3d(a.box, b.box) <= thr
            assert [d.score for d in out] == sorted((d.score for d in out), reverse=True)

    def test_tie_break_by_min_corner(self):
        a = Detection(BoundingBox3D((1, 0, 0), (5, 4, 4)), 0.5, "b")
        b = Detection(BoundingBox3D((0, 0, 0), (4, 4, 4)), 0.5, "b")
        assert nms([a, b], 0.1) == [b]
        assert nms([b, a], 0.1) == [b]


class TestCodec:
    anchor = BoundingBox3D((2, 4, 6), (6, 12, 20))

    def test_identity(self):
        assert np.allclose(encode_box(self.anchor, self.anchor), 0.0)
        assert decode_box(self.anchor, BoxOffsets(0, 0, 0, 0, 0, 0)) == self.anchor

    def test_scaled_by_two(self):
        c = np.array(self.anchor.center)
        s = np.array(self.anchor.size)
        gt = BoundingBox3D(tuple(c - s), tuple(c + s))
        off = encode_box(self.anchor, gt)
        assert np.allclose(off[:3], 0.0, atol=1e-15)
        assert np.allclose(off[3:], math.log(2), atol=1e-15)

    def test_non_finite(self):
        with pytest.raises(InvalidInputError):
            decode_box(self.anchor, [0, 0, float("inf"), 0, 0, 0])

    def test_clamped_log_ratio(self):
        out = decode_box(self.anchor, [0, 0, 0, 10, 0, 0])
        assert out.size[0] == pytest.approx(self.anchor.size[0] * math.exp(4.0))

    def test_round_trip_random(self):
        rng = np.random.default_rng(2)
        anchors = np.stack([random_box(rng).to_array() for _ in range(1000)])
        gts = np.stack([random_box(rng).to_array() for _ in range(1000)])
        back = decode_boxes(anchors, encode_boxes(anchors, gts))
        assert np.all(np.abs(back - gts) <= 1e-5 * np.maximum(np.abs(gts), 1.0))

    @settings(max_examples=200)
    @given(boxes, boxes)
    def test_round_trip_property(self, a, g):
        ratio = np.log(np.array(g.size) / np.array(a.size))
        if np.any(np.abs(ratio) > 4):
            return
        back = decode_box(a, encode_box(a, g)).to_array()
        assert np.allclose(back, g.to_array(), rtol=1e-5, atol=1e-9)
