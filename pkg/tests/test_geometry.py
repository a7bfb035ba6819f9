import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ppegate.geometry import (
    EPSILON,
    BoundingBox,
    GeometryError,
    NormalizedBox,
    expand_and_clamp,
    iou,
    letterbox,
    to_normalized,
    to_pixel,
    translate_box,
)
from tests.oracles import frac_iou

coord = st.floats(min_value=-500, max_value=1500, allow_nan=False)


@st.composite
def boxes(draw, lo=-500.0, hi=1500.0):
    x0 = draw(st.floats(lo, hi))
    y0 = draw(st.floats(lo, hi))
    w = draw(st.floats(0, 600))
    h = draw(st.floats(0, 600))
    return BoundingBox(x0, y0, x0 + w, y0 + h)


@st.composite
def int_boxes(draw):
    x0 = draw(st.integers(0, 30))
    y0 = draw(st.integers(0, 30))
    return BoundingBox(x0, y0, x0 + draw(st.integers(0, 20)), y0 + draw(st.integers(0, 20)))


class TestIou:
    def test_identity(self):
        b = BoundingBox(0, 0, 10, 10)
        assert iou(b, b) == 1.0

    def test_disjoint(self):
        assert iou(BoundingBox(0, 0, 1, 1), BoundingBox(5, 5, 6, 6)) == 0.0

    def test_partial_overlap(self):
        # intersection 1, union 4 + 4 - 1
        assert iou(BoundingBox(0, 0, 2, 2), BoundingBox(1, 1, 3, 3)) == pytest.approx(1 / 7, abs=1e-12)

    def test_zero_area_boxes(self):
        p = BoundingBox(3, 3, 3, 3)
        assert iou(p, p) == 0.0
        assert iou(p, BoundingBox(0, 0, 10, 10)) == 0.0

    @given(int_boxes(), int_boxes())
    def test_matches_exact_fraction_oracle(self, a, b):
        assert iou(a, b) == pytest.approx(float(frac_iou(a.as_tuple(), b.as_tuple())), abs=1e-12)

    @given(boxes(), boxes())
    def test_symmetric_and_bounded(self, a, b):
        v = iou(a, b)
        assert v == iou(b, a)
        assert 0.0 <= v <= 1.0

    @given(boxes())
    def test_self_iou_is_one(self, a):
        if a.area > 1e-6:
            assert iou(a, a) == pytest.approx(1.0)


class TestBoxValidation:
    def test_inverted_rejected(self):
        with pytest.raises(GeometryError):
            BoundingBox(5, 0, 4, 1)

    def test_non_finite_rejected(self):
        with pytest.raises(GeometryError):
            BoundingBox(0, 0, math.inf, 1)

    def test_normalized_out_of_range(self):
        with pytest.raises(GeometryError):
            NormalizedBox(0.5, 0.5, 1.2, 0.1)

    def test_normalized_extent_outside_image(self):
        with pytest.raises(GeometryError):
            NormalizedBox(0.95, 0.5, 0.3, 0.1)


class TestPixelNormalized:
    def test_full_frame(self):
        assert to_pixel(NormalizedBox(0.5, 0.5, 1, 1), 476, 476) == BoundingBox(0, 0, 476, 476)

    def test_formula(self):
        b = to_pixel(NormalizedBox(0.5, 0.5, 0.2, 0.1), 476, 476)
        assert b.as_tuple() == pytest.approx((190.4, 214.2, 285.6, 261.8), abs=1e-9)

    def test_to_normalized_full(self):
        assert to_normalized(BoundingBox(0, 0, 476, 476), 476, 476) == NormalizedBox(0.5, 0.5, 1, 1)

    def test_to_normalized_quarter(self):
        n = to_normalized(BoundingBox(119, 119, 357, 357), 476, 476)
        assert n.as_tuple() == pytest.approx((0.5, 0.5, 0.5, 0.5), abs=1e-12)

    def test_spill_within_epsilon_is_clamped(self):
        n = to_normalized(BoundingBox(100, 100, 476 + 0.5 * EPSILON * 476, 200), 476, 476)
        assert n.cx + n.w / 2 == pytest.approx(1.0)
        assert to_pixel(n, 476, 476).x_max == pytest.approx(476.0)

    def test_spill_beyond_epsilon_rejected(self):
        with pytest.raises(GeometryError):
            to_normalized(BoundingBox(100, 100, 476 + 2 * EPSILON * 476, 200), 476, 476)

    def test_bad_size(self):
        with pytest.raises(GeometryError):
            to_pixel(NormalizedBox(0.5, 0.5, 0.1, 0.1), 0, 10)

    @given(
        st.floats(0, 1), st.floats(0, 1), st.floats(0, 1), st.floats(0, 1),
        st.integers(1, 4000), st.integers(1, 4000),
    )
    def test_round_trip(self, a, b, c, d, width, height):
        x0, x1 = sorted((a, b))
        y0, y1 = sorted((c, d))
        n = NormalizedBox((x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0)
        back = to_normalized(to_pixel(n, width, height), width, height)
        assert back.as_tuple() == pytest.approx(n.as_tuple(), abs=1e-9)


class TestLetterbox:
    def test_square_identity(self):
        t = letterbox((476, 476))
        assert (t.scale, t.pad_x, t.pad_y) == (1.0, 0.0, 0.0)
        b = BoundingBox(10, 20, 30, 40)
        assert t.map_box(b) == b

    def test_wide_frame(self):
        t = letterbox((952, 476), (476, 476))
        assert t.scale == 0.5
        assert t.pad_x == 0
        assert t.pad_y == 119
        assert t.map_point(952, 476) == (476, 357)

    @settings(max_examples=300)
    @given(boxes(-100, 3000), st.integers(1, 4000), st.integers(1, 4000), st.integers(32, 1024))
    def test_round_trip(self, b, sw, sh, target):
        t = letterbox((sw, sh), (target, target))
        back = t.unmap_box(t.map_box(b))
        assert back.as_tuple() == pytest.approx(b.as_tuple(), abs=1e-6)


class TestExpandTranslate:
    def test_margin(self):
        assert expand_and_clamp(BoundingBox(100, 100, 200, 300), 0.10, (476, 476)) == BoundingBox(90, 80, 210, 320)

    def test_clamped_at_origin(self):
        assert expand_and_clamp(BoundingBox(0, 0, 50, 50), 0.10, (476, 476)) == BoundingBox(0, 0, 55, 55)

    def test_zero_margin(self):
        b = BoundingBox(12.5, 3, 40, 41)
        assert expand_and_clamp(b, 0.0, (476, 476)) == b

    def test_negative_margin_rejected(self):
        with pytest.raises(GeometryError):
            expand_and_clamp(BoundingBox(0, 0, 1, 1), -0.1, (10, 10))

    @given(boxes(), st.floats(0, 2), st.integers(1, 2000), st.integers(1, 2000))
    def test_inside_frame_and_covers_visible_part(self, b, m, w, h):
        out = expand_and_clamp(b, m, (w, h))
        assert 0 <= out.x_min <= out.x_max <= w
        assert 0 <= out.y_min <= out.y_max <= h
        vis = b.intersection(BoundingBox(0, 0, w, h))
        if vis is not None:
            assert out.x_min <= vis.x_min and out.y_min <= vis.y_min
            assert out.x_max >= vis.x_max and out.y_max >= vis.y_max

    def test_translate(self):
        assert translate_box(BoundingBox(10, 10, 30, 30), (90, 80)) == BoundingBox(100, 90, 120, 110)
        b = BoundingBox(1, 2, 3, 4)
        assert translate_box(b, (0, 0)) == b

    @given(boxes(), coord, coord)
    def test_translate_round_trip(self, b, dx, dy):
        back = translate_box(translate_box(b, (dx, dy)), (-dx, -dy))
        assert back.as_tuple() == pytest.approx(b.as_tuple(), abs=1e-6)
