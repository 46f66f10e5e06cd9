import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sspot.geometry import (
    AnchorGrid,
    Box,
    BoxParam,
    assign_targets,
    build_anchor_grid,
    decode_box,
    decode_grid,
    encode_box,
    iou,
)

FRAMES = (0, 2, 4, 6)


@pytest.mark.parametrize("h,w,rows,cols", [(768, 1152, 12, 18), (64, 64, 1, 1), (128, 192, 2, 3)])
def test_anchor_grid_sizes(h, w, rows, cols):
    g = build_anchor_grid(h, w, 64)
    assert (g.rows, g.cols, g.n_anchors) == (rows, cols, rows * cols)


def test_anchors_tile_image():
    g = build_anchor_grid(128, 192, 64)
    cover = np.zeros((128, 192), int)
    for r in range(g.rows):
        for c in range(g.cols):
            x0, y0, x1, y1 = g.anchor(r, c).corners
            cover[int(y0):int(y1), int(x0):int(x1)] += 1
    assert (cover == 1).all()


def test_anchor_grid_rejects_tiny_image():
    with pytest.raises(ValueError):
        build_anchor_grid(32, 128, 64)


def test_box_rejects_nonpositive_size():
    with pytest.raises(ValueError):
        Box(0, 0, 0, 5)
    with pytest.raises(ValueError):
        Box(0, 0, 5, -1)


class TestEncodeDecode:
    anchor = Box(32, 32, 64, 64)

    def test_identity(self):
        assert encode_box(self.anchor, self.anchor).as_tuple() == (0.0, 0.0, 0.0, 0.0)

    def test_hand_evaluated(self):
        t = encode_box(Box(48, 40, 32, 16), self.anchor).as_tuple()
        expected = (0.25, 0.125, math.log(0.5), math.log(0.25))
        np.testing.assert_allclose(t, expected, rtol=0, atol=1e-12)
        assert round(t[2], 4) == -0.6931 and round(t[3], 4) == -1.3863

    def test_double_size(self):
        t = encode_box(Box(32, 32, 128, 128), self.anchor).as_tuple()
        np.testing.assert_allclose(t, (0, 0, math.log(2), math.log(2)), atol=1e-15)

    def test_zero_params_give_anchor(self):
        a = Box(160, 96, 64, 64)
        b = decode_box(BoxParam(0, 0, 0, 0), a)
        assert (b.x, b.y, b.w, b.h) == (a.x, a.y, a.w, a.h)

    def test_zero_size_params_give_64_box(self):
        g = build_anchor_grid(128, 192)
        out = decode_grid(np.zeros((4, 2, 3)) + np.array([0.3, -0.2, 0, 0])[:, None, None], g)
        assert (out[2] == 64).all() and (out[3] == 64).all()

    @settings(max_examples=300, deadline=None)
    @given(
        st.floats(-500, 1500), st.floats(-500, 1500), st.floats(0.5, 800), st.floats(0.5, 800),
        st.floats(0, 1100), st.floats(0, 700), st.floats(8, 128), st.floats(8, 128),
    )
    def test_roundtrip_property(self, x, y, w, h, ax, ay, aw, ah):
        b, a = Box(x, y, w, h), Box(ax, ay, aw, ah)
        d = decode_box(encode_box(b, a), a)
        for got, want in zip((d.x, d.y, d.w, d.h), (x, y, w, h)):
            assert abs(got - want) <= 1e-9 * max(abs(want), 1.0)

    def test_decode_grid_matches_decode_box(self):
        g = build_anchor_grid(128, 192)
        rng = np.random.default_rng(3)
        p = rng.normal(size=(4, 2, 2, 3))
        out = decode_grid(p, g)
        for k in range(2):
            for r in range(2):
                for c in range(3):
                    b = decode_box(BoxParam(*p[:, k, r, c]), g.anchor(r, c))
                    np.testing.assert_allclose(out[:, k, r, c], (b.x, b.y, b.w, b.h), rtol=1e-14)


class TestIou:
    def test_self(self):
        a = Box(10, 10, 7, 3)
        assert iou(a, a) == 1.0

    def test_disjoint(self):
        assert iou(Box(0, 0, 10, 10), Box(50, 50, 10, 10)) == 0.0

    def test_touching_edges(self):
        assert iou(Box(0, 0, 10, 10), Box(10, 0, 10, 10)) == 0.0

    def test_third(self):
        assert abs(iou(Box(32, 32, 64, 64), Box(64, 32, 64, 64)) - 1 / 3) <= 1e-12
        assert abs(iou(Box(32, 32, 64, 64), Box(64, 32, 64, 64)) - 2048 / 6144) <= 1e-12

    boxes = st.builds(Box, st.floats(-50, 50), st.floats(-50, 50), st.floats(0.1, 40), st.floats(0.1, 40))

    @settings(max_examples=200, deadline=None)
    @given(boxes, boxes)
    def test_bounds_and_symmetry(self, a, b):
        v = iou(a, b)
        assert 0.0 <= v <= 1.0
        assert v == iou(b, a)


class TestAssignTargets:
    grid = build_anchor_grid(128, 192)

    def test_floor_cell(self):
        assert self.grid.cell_of(100, 50) == (0, 1)
        t = assign_targets([Box(100, 50, 20, 20, 2, 0)], self.grid, FRAMES)
        assert t.obj[0, 0, 1] == 1 and t.obj.sum() == 1
        assert t.class_onehot[2, 0, 0, 1] == 1

    def test_boundary_goes_to_higher_cell(self):
        # floor(64 / 64) = 1
        assert self.grid.cell_of(64.0, 64.0) == (1, 1)

    def test_outside_image_rejected(self):
        with pytest.raises(ValueError):
            self.grid.cell_of(192.0, 10.0)

    def test_empty(self):
        t = assign_targets([], self.grid, FRAMES)
        assert t.obj.sum() == 0 and t.params.sum() == 0 and t.class_onehot.sum() == 0
        assert (t.class_ids == -1).all()

    def test_bijection_count(self):
        boxes = [Box(30 + 64 * c, 30 + 64 * r, 20, 20, (r + c) % 4, f) for f in FRAMES for r in range(2) for c in range(3)]
        t = assign_targets(boxes, self.grid, FRAMES)
        assert t.obj.sum() == len(boxes)

    def test_collision_keeps_largest(self, caplog):
        small, big = Box(10, 10, 10, 10, 0, 0), Box(20, 20, 30, 30, 1, 0)
        t = assign_targets([small, big], self.grid, FRAMES)
        assert t.collisions == 1 and t.obj.sum() == 1
        assert t.class_ids[0, 0, 0] == 1
        assert "shared a cell" in caplog.text

    def test_unlabeled_frame_rejected(self):
        with pytest.raises(ValueError, match="labeled frames"):
            assign_targets([Box(10, 10, 5, 5, 0, 1)], self.grid, FRAMES)

    def test_bad_class_rejected(self):
        with pytest.raises(ValueError, match="class_id"):
            assign_targets([Box(10, 10, 5, 5, 4, 0)], self.grid, FRAMES, num_classes=4)

    def test_params_only_where_obj(self):
        t = assign_targets([Box(70, 90, 40, 30, 3, 4)], self.grid, FRAMES)
        assert (t.params[:, t.obj == 0] == 0).all()
        assert (t.class_onehot[:, t.obj == 0] == 0).all()

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.tuples(st.floats(1, 127.9), st.floats(1, 63.9), st.integers(0, 3), st.sampled_from(FRAMES)),
                    max_size=6))
    def test_translation_by_one_cell(self, specs):
        boxes = [Box(x, y, 10, 10, k, f) for x, y, k, f in specs]
        shifted = [Box(b.x + 64, b.y + 64, b.w, b.h, b.class_id, b.frame) for b in boxes]
        a = assign_targets(boxes, self.grid, FRAMES)
        b = assign_targets(shifted, self.grid, FRAMES)
        np.testing.assert_array_equal(b.obj[:, 1:, 1:], a.obj[:, :-1, :-1])
        assert b.obj.sum() == a.obj.sum()

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.tuples(st.floats(0, 191.99), st.floats(0, 127.99)), min_size=1, max_size=8))
    def test_center_lies_in_assigned_cell(self, centers):
        boxes = [Box(x, y, 12, 12, 0, 0) for x, y in centers]
        t = assign_targets(boxes, self.grid, FRAMES)
        for b in t.boxes:
            r, c = self.grid.cell_of(b.x, b.y)
            assert t.obj[0, r, c] == 1
            assert 64 * c <= b.x < 64 * (c + 1) and 64 * r <= b.y < 64 * (r + 1)


def test_anchor_grid_dataclass_values():
    g = AnchorGrid(2, 3, 64)
    assert g.anchor(1, 2).x == 160 and g.anchor(1, 2).y == 96
    assert g.image_shape == (128, 192)
