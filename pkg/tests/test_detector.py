import itertools
from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ppegate.classes import PERSON, PpeClass
from ppegate.detector import (
    BackendError,
    BackendShapeError,
    ConfigurationError,
    Detection,
    DetectorConfig,
    DetectorInput,
    FixtureBackend,
    FixtureFormatError,
    Frame,
    ModelBackend,
    PixelCostBackend,
    WholeFrameBackend,
    detect,
    format_detection_lines,
    letterbox_image,
    load_backend,
    load_fixture_backend,
    load_model_backend,
    nms,
    parse_detection_lines,
)
from ppegate.geometry import BoundingBox, iou, letterbox
from tests.conftest import blank_frame, det
from tests.onnx_models import write_constant_model

PPE_NAMES = ["hardhat", "safety_vest", "safety_gloves", "safety_glasses", "hearing_protection"]


class TestFixtureBackend:
    def test_pass_through(self, tmp_path):
        f = tmp_path / "fx.txt"
        f.write_text("img1 hardhat 0.98 10 10 50 50\n")
        backend = load_fixture_backend(f)
        out = detect(backend, blank_frame("img1", 640, 480), DetectorConfig())
        assert len(out) == 1
        assert out[0].label is PpeClass.HARDHAT and out[0].confidence == 0.98
        assert out[0].box.as_tuple() == pytest.approx((10, 10, 50, 50), abs=1e-9)

    def test_unknown_image(self, tmp_path):
        f = tmp_path / "fx.txt"
        f.write_text("img1 hardhat 0.98 10 10 50 50\n")
        assert detect(load_fixture_backend(f), blank_frame("other"), DetectorConfig()) == []

    def test_empty_fixture(self):
        assert detect(FixtureBackend({}), blank_frame("x"), DetectorConfig()) == []

    @pytest.mark.parametrize(
        "line,msg",
        [
            ("img1 hardhat 1.5 0 0 1 1", "confidence"),
            ("img1 hardhat 0.5 0 0 1", "7 fields"),
            ("img1 cap 0.5 0 0 1 1", "unknown class"),
            ("img1 hardhat 0.5 5 0 1 1", "inverted"),
        ],
    )
    def test_malformed(self, line, msg):
        with pytest.raises(FixtureFormatError, match=msg) as err:
            parse_detection_lines("img0 person 0.9 0 0 5 5\n" + line)
        assert err.value.line == 2

    def test_letterbox_round_trip(self):
        # a 952x476 frame is letterboxed with pad_y 119; boxes must come back unchanged
        box = (300.0, 100.0, 420.0, 260.0)
        backend = FixtureBackend({"w": [det("hardhat", 0.9, box)]})
        seen = {}
        orig = backend.infer

        def spy(inp):
            out = orig(inp)
            seen["raw"] = out[0].box
            return out

        backend.infer = spy
        out = detect(backend, blank_frame("w", 952, 476), DetectorConfig())
        t = letterbox((952, 476))
        assert seen["raw"].as_tuple() == pytest.approx(t.map_box(BoundingBox(*box)).as_tuple())
        assert out[0].box.as_tuple() == pytest.approx(box, abs=1e-9)

    def test_threshold_filters(self):
        backend = FixtureBackend({"x": [det("hardhat", 0.2, (0, 0, 9, 9)), det("safety_vest", 0.3, (0, 0, 9, 9))]})
        out = detect(backend, blank_frame("x"), DetectorConfig(confidence_threshold=0.25))
        assert [d.label for d in out] == [PpeClass.SAFETY_VEST]

    def test_results_clamped_and_sorted(self):
        backend = FixtureBackend(
            {"x": [det("hardhat", 0.5, (-20, -5, 30, 30)), det("safety_gloves", 0.9, (100, 100, 400, 200))]}
        )
        out = detect(backend, blank_frame("x", 320, 240), DetectorConfig())
        assert [d.confidence for d in out] == [0.9, 0.5]
        for d in out:
            assert 0 <= d.box.x_min and d.box.x_max <= 320 and 0 <= d.box.y_min and d.box.y_max <= 240

    def test_crop_view(self):
        backend = FixtureBackend({"x": [det("hardhat", 0.9, (110, 90, 130, 110)), det("safety_vest", 0.9, (0, 0, 20, 20))]})
        crop = Frame("x", np.zeros((100, 100, 3), np.uint8), origin=(100, 80))
        out = detect(backend, crop, DetectorConfig())
        assert len(out) == 1
        assert out[0].box.as_tuple() == pytest.approx((10, 10, 30, 30), abs=1e-9)

    def test_format_round_trip(self):
        d = {"a": [det("hardhat", 0.5, (1, 2, 3, 4))], "b": [det("person", 0.25, (0, 0, 10, 20))]}
        again = parse_detection_lines(format_detection_lines(d))
        assert again == d


class TestWholeFrame:
    def test_full_box(self):
        out = detect(WholeFrameBackend(), blank_frame("x", 640, 360), DetectorConfig())
        assert len(out) == 1 and out[0].label == PERSON
        assert out[0].box.as_tuple() == pytest.approx((0, 0, 640, 360), abs=1e-9)

    def test_spec_string(self):
        assert isinstance(load_backend("fallback"), WholeFrameBackend)
        with pytest.raises(ConfigurationError):
            load_backend("magic:thing")


# Three boxes on a line: IoU(A,B)=0.67, IoU(B,C)=0.54, IoU(A,C)=0.33, so the
# thresholds used below exercise chained suppression.
NMS_BOXES = [BoundingBox(0, 0, 10, 10), BoundingBox(2, 0, 12, 10), BoundingBox(5, 0, 15, 10)]
NMS_VOCAB = [
    Detection(label, conf, box)
    for label in (PpeClass.HARDHAT, PpeClass.SAFETY_VEST)
    for conf in (0.4, 0.8)
    for box in NMS_BOXES
]


def _nms_cases():
    """Every multiset of up to five detections drawn from NMS_VOCAB."""
    for n in range(1, 6):
        for combo in itertools.combinations_with_replacement(NMS_VOCAB, n):
            yield list(combo)


class TestNms:
    def test_identical_same_class(self):
        a = det("hardhat", 0.9, (0, 0, 10, 10))
        b = det("hardhat", 0.8, (0, 0, 10, 10))
        assert nms([b, a], 0.45) == [a]

    def test_cross_class_kept(self):
        a = det("hardhat", 0.9, (0, 0, 10, 10))
        b = det("safety_vest", 0.8, (0, 0, 10, 10))
        assert nms([a, b], 0.45) == [a, b]

    def test_disjoint_kept(self):
        a = det("hardhat", 0.9, (0, 0, 10, 10))
        b = det("hardhat", 0.8, (50, 50, 60, 60))
        assert nms([a, b], 0.45) == [a, b]

    def test_tie_break(self):
        a = det("hardhat", 0.9, (5, 0, 15, 10))
        b = det("hardhat", 0.9, (4, 0, 14, 10))
        assert nms([a, b], 0.45) == [b]


def _check_nms_properties(dets, thr):
    kept = nms(dets, thr)
    # subset, idempotent, and no surviving same-class pair overlaps past the threshold
    assert all(k in dets for k in kept)
    assert nms(kept, thr) == kept
    for a, b in itertools.combinations(kept, 2):
        if a.label == b.label:
            assert iou(a.box, b.box) <= thr
    # every dropped detection is covered by a kept same-class one of at least its confidence
    for d in dets:
        if d not in kept:
            assert any(k.label == d.label and k.confidence >= d.confidence and iou(k.box, d.box) > thr for k in kept)
    # classes are independent
    for label in {d.label for d in dets}:
        own = [d for d in dets if d.label == label]
        assert nms(own, thr) == [k for k in kept if k.label == label]
    return kept


class TestNmsProperties:
    @pytest.mark.parametrize("thr", [0.45, 0.6])
    def test_small_instances(self, thr):
        for dets in _nms_cases():
            _check_nms_properties(dets, thr)

    @settings(max_examples=200, deadline=None)
    @given(
        st.lists(
            st.tuples(
                st.sampled_from(list(PpeClass)[:3]),
                st.floats(0.01, 1.0),
                st.integers(0, 40),
                st.integers(0, 40),
                st.integers(1, 30),
                st.integers(1, 30),
            ),
            max_size=12,
        ),
        st.floats(0.05, 0.95),
    )
    def test_random(self, rows, thr):
        dets = [Detection(c, p, BoundingBox(x, y, x + w, y + h)) for c, p, x, y, w, h in rows]
        _check_nms_properties(dets, thr)

    def test_confidence_filter_monotone(self):
        for dets in _nms_cases():
            backend = FixtureBackend({"x": dets})
            frame = blank_frame("x", 64, 64)
            low = detect(backend, frame, DetectorConfig(confidence_threshold=0.3, nms_iou_threshold=0.45))
            high = detect(backend, frame, DetectorConfig(confidence_threshold=0.6, nms_iou_threshold=0.45))
            assert high == [d for d in low if d.confidence >= 0.6]

    @settings(max_examples=100, deadline=None)
    @given(
        st.lists(
            st.tuples(st.sampled_from(list(PpeClass)[:2]), st.floats(0.01, 1.0), st.integers(0, 30), st.integers(1, 20)),
            max_size=10,
        ),
        st.floats(0.0, 1.0),
        st.floats(0.0, 1.0),
    )
    def test_confidence_filter_monotone_random(self, rows, t1, t2):
        lo, hi = sorted((t1, t2))
        dets = [Detection(c, p, BoundingBox(x, 0, x + w, 10)) for c, p, x, w in rows]
        backend = FixtureBackend({"x": dets})
        frame = blank_frame("x", 64, 64)
        low = detect(backend, frame, DetectorConfig(confidence_threshold=lo))
        high = detect(backend, frame, DetectorConfig(confidence_threshold=hi))
        assert len(high) <= len(low)
        assert all(d in low for d in high)


class TestModelBackend:
    def test_five_classes(self, tmp_path):
        rows = [[238, 238, 100, 100, 0.9, 0.1, 0.8, 0.05, 0.0, 0.0]]
        model = write_constant_model(tmp_path / "m.onnx", rows, 10, PPE_NAMES)
        backend = load_model_backend(model)
        assert backend.classes == frozenset(PpeClass)
        out = detect(backend, blank_frame("x", 952, 476), DetectorConfig())
        assert len(out) == 1
        d = out[0]
        assert d.label is PpeClass.SAFETY_VEST
        assert d.confidence == pytest.approx(0.72, abs=1e-6)
        # input-space box (188, 188, 288, 288) in a letterbox with scale 0.5, pad_y 119
        assert d.box.as_tuple() == pytest.approx((376, 138, 576, 338), abs=1e-3)

    def test_zero_rows(self, tmp_path):
        model = write_constant_model(tmp_path / "m.onnx", np.zeros((0, 10)), 10, PPE_NAMES)
        assert detect(load_model_backend(model), blank_frame("x"), DetectorConfig()) == []

    def test_runtime_shape_error(self):
        class StubSession:
            def get_inputs(self):
                return [SimpleNamespace(name="images")]

            def run(self, names, feeds):
                return [np.ones((1, 1, 8), np.float32)]

        backend = ModelBackend(StubSession(), list(PpeClass))
        with pytest.raises(BackendShapeError, match="expected 4\\+1\\+5 = 10"):
            detect(backend, blank_frame("x"), DetectorConfig())

    def test_declared_class_mismatch(self, tmp_path):
        model = write_constant_model(tmp_path / "m.onnx", [[1] * 8], 8, PPE_NAMES)
        with pytest.raises(ConfigurationError):
            load_model_backend(model)

    def test_missing_model(self, tmp_path):
        (tmp_path / "m.json").write_text('{"classes": ["person"]}')
        with pytest.raises(BackendError):
            load_model_backend(tmp_path / "m.onnx")

    def test_person_model_via_backend_string(self, tmp_path):
        model = write_constant_model(tmp_path / "p.onnx", [[238, 238, 200, 400, 1.0, 0.9]], 6, ["person"])
        backend = load_backend(f"model:{model}")
        assert backend.classes == frozenset({PERSON})


class TestLetterboxImage:
    def test_content_and_padding(self):
        img = np.full((476, 952, 3), 200, np.uint8)
        t = letterbox((952, 476))
        out = letterbox_image(img, t)
        assert out.shape == (476, 476, 3)
        assert np.all(out[:119] == 114) and np.all(out[-119:] == 114)
        assert np.all(out[119:357] == 200)

    def test_lazy_pixels(self):
        class Probe(FixtureBackend):
            pass

        inp = DetectorInput(blank_frame("x", 100, 50), letterbox((100, 50)))
        assert "pixels" not in inp.__dict__
        assert inp.pixels.shape == (476, 476, 3)


class TestPixelCost:
    def test_counts_pixels(self):
        inner = FixtureBackend({"x": [det("hardhat", 0.9, (0, 0, 5, 5))]})
        b = PixelCostBackend(inner)
        detect(b, blank_frame("x", 40, 30), DetectorConfig())
        detect(b, blank_frame("x", 10, 10), DetectorConfig())
        assert b.pixels_processed == 1300 and b.calls == 2
