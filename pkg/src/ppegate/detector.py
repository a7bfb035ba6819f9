"""Detector interface, backends and shared postprocessing."""

from __future__ import annotations

import json
import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass, replace
from functools import cached_property
from pathlib import Path
from typing import Dict, FrozenSet, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image as PILImage

from ppegate.classes import ALL_CLASSES, PERSON, Label, PpeClass, label_name, parse_label
from ppegate.geometry import BoundingBox, LetterboxTransform, iou, letterbox

log = logging.getLogger(__name__)

PAD_VALUE = 114


class BackendError(RuntimeError):
    pass


class BackendShapeError(BackendError):
    pass


class ConfigurationError(ValueError):
    pass


class FixtureFormatError(ValueError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


@dataclass(frozen=True)
class Detection:
    label: Label
    confidence: float
    box: BoundingBox

    def __post_init__(self) -> None:
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence {self.confidence} outside [0, 1]")
        if not (isinstance(self.label, PpeClass) or self.label == PERSON):
            raise ValueError(f"bad label {self.label!r}")

    @property
    def is_person(self) -> bool:
        return self.label == PERSON

    def with_box(self, box: BoundingBox) -> "Detection":
        return replace(self, box=box)

    def to_json(self) -> dict:
        return {
            "class": label_name(self.label),
            "confidence": self.confidence,
            "box": list(self.box.as_tuple()),
        }


@dataclass(frozen=True)
class DetectorConfig:
    input_size: int = 476
    confidence_threshold: float = 0.25
    nms_iou_threshold: float = 0.45

    def __post_init__(self) -> None:
        if self.input_size <= 0:
            raise ConfigurationError("input_size must be positive")
        for name in ("confidence_threshold", "nms_iou_threshold"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigurationError(f"{name}={v} outside [0, 1]")


@dataclass
class Frame:
    """Pixels handed to a detector.

    ``origin`` is the position of this image's top-left corner in the frame
    it was cut from, so crops keep their relation to ``image_id``.
    """

    image_id: str
    pixels: np.ndarray
    origin: Tuple[float, float] = (0.0, 0.0)

    @property
    def size(self) -> Tuple[int, int]:
        return (int(self.pixels.shape[1]), int(self.pixels.shape[0]))


@dataclass
class DetectorInput:
    frame: Frame
    transform: LetterboxTransform

    @cached_property
    def pixels(self) -> np.ndarray:
        """Letterboxed ``uint8`` image at the detector input size, built on demand."""
        return letterbox_image(self.frame.pixels, self.transform)


def letterbox_image(pixels: np.ndarray, t: LetterboxTransform) -> np.ndarray:
    tw, th = t.target_size
    cw, ch = t.content_size
    canvas = np.full((th, tw, 3), PAD_VALUE, dtype=np.uint8)
    if (cw, ch) == t.source_size:
        content = pixels
    else:
        content = np.asarray(PILImage.fromarray(pixels).resize((cw, ch), PILImage.BILINEAR))
    x0 = int(round(t.pad_x))
    y0 = int(round(t.pad_y))
    cw, ch = min(cw, tw - x0), min(ch, th - y0)
    canvas[y0 : y0 + ch, x0 : x0 + cw] = content[:ch, :cw]
    return canvas


class DetectorBackend(ABC):
    """A raw detector.

    ``infer`` returns boxes in the letterboxed input coordinates of ``inp``;
    :func:`detect` undoes the letterbox and applies the shared filtering.
    """

    classes: FrozenSet[Label] = frozenset()

    @abstractmethod
    def infer(self, inp: DetectorInput) -> List[Detection]:
        ...


class FixtureBackend(DetectorBackend):
    """Replays detections recorded per image id, in original frame pixels.

    When run on a crop (a frame with a non-zero ``origin``), only detections
    whose centre falls inside the crop are returned, shifted into crop
    coordinates.
    """

    def __init__(self, detections: Dict[str, List[Detection]], classes: Optional[Iterable[Label]] = None):
        self.detections = detections
        if classes is None:
            classes = {d.label for ds in detections.values() for d in ds}
        self.classes = frozenset(classes)

    def infer(self, inp: DetectorInput) -> List[Detection]:
        frame = inp.frame
        ox, oy = frame.origin
        w, h = frame.size
        region = BoundingBox(ox, oy, ox + w, oy + h)
        out = []
        for d in self.detections.get(frame.image_id, ()):
            if d.label not in self.classes:
                continue
            cx, cy = d.box.center
            if not region.contains_point(cx, cy):
                continue
            local = BoundingBox(d.box.x_min - ox, d.box.y_min - oy, d.box.x_max - ox, d.box.y_max - oy)
            out.append(d.with_box(inp.transform.map_box(local)))
        return out


class WholeFrameBackend(DetectorBackend):
    """Person fallback: one full-frame person box with confidence 1."""

    classes = frozenset({PERSON})

    def infer(self, inp: DetectorInput) -> List[Detection]:
        w, h = inp.frame.size
        return [Detection(PERSON, 1.0, inp.transform.map_box(BoundingBox(0, 0, w, h)))]


class PixelCostBackend(DetectorBackend):
    """Wraps a backend and does work proportional to the source pixel count.

    Used for benchmarks with fixture backends, whose own cost is negligible.
    ``pixels_processed`` accumulates the pixels of every frame seen.
    """

    def __init__(self, inner: DetectorBackend, passes: int = 1):
        self.inner = inner
        self.passes = passes
        self.classes = inner.classes
        self.pixels_processed = 0
        self.calls = 0

    def infer(self, inp: DetectorInput) -> List[Detection]:
        px = inp.frame.pixels
        self.pixels_processed += int(px.shape[0] * px.shape[1])
        self.calls += 1
        acc = 0.0
        for _ in range(self.passes):
            acc += float(np.square(px.astype(np.float32)).sum())
        self._sink = acc
        return self.inner.infer(inp)


class ModelBackend(DetectorBackend):
    """ONNX graph emitting pre-decoded rows ``cx, cy, w, h, objectness, scores...``.

    Boxes are centre-form in input-space pixels. Score = objectness x best
    class score.
    """

    def __init__(self, session, class_labels: Sequence[Label], input_size: int = 476):
        self.session = session
        self.labels = list(class_labels)
        self.classes = frozenset(self.labels)
        self.input_size = input_size
        self.input_name = session.get_inputs()[0].name

    @property
    def expected_width(self) -> int:
        return 5 + len(self.labels)

    def infer(self, inp: DetectorInput) -> List[Detection]:
        blob = inp.pixels.astype(np.float32).transpose(2, 0, 1)[None] / 255.0
        try:
            raw = self.session.run(None, {self.input_name: blob})[0]
        except Exception as exc:
            raise BackendError(f"inference failed: {exc}") from exc
        out = np.asarray(raw, dtype=np.float64)
        if out.ndim == 3 and out.shape[0] == 1:
            out = out[0]
        if out.ndim != 2 or (out.shape[0] > 0 and out.shape[1] != self.expected_width):
            width = out.shape[-1] if out.ndim else None
            raise BackendShapeError(
                f"model output width {width} (shape {tuple(out.shape)}), expected 4+1+{len(self.labels)}"
                f" = {self.expected_width}"
            )
        dets = []
        for row in out:
            cx, cy, w, h, obj = row[:5]
            scores = row[5:]
            k = int(np.argmax(scores))
            conf = float(np.clip(obj * scores[k], 0.0, 1.0))
            x0, y0, x1, y1 = cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2
            if not (np.isfinite([x0, y0, x1, y1]).all() and x1 >= x0 and y1 >= y0):
                continue
            dets.append(Detection(self.labels[k], conf, BoundingBox(float(x0), float(y0), float(x1), float(y1))))
        return dets


def parse_detection_lines(text: str) -> Dict[str, List[Detection]]:
    """Parse ``image_id class confidence x_min y_min x_max y_max`` lines."""
    out: Dict[str, List[Detection]] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        fields = line.split()
        if not fields or fields[0].startswith("#"):
            continue
        if len(fields) != 7:
            raise FixtureFormatError(lineno, f"expected 7 fields, got {len(fields)}")
        image_id, name = fields[0], fields[1]
        try:
            label = parse_label(name)
        except ValueError:
            raise FixtureFormatError(lineno, f"unknown class {name!r}") from None
        try:
            conf, x0, y0, x1, y1 = (float(v) for v in fields[2:])
        except ValueError:
            raise FixtureFormatError(lineno, "non-numeric field") from None
        if not 0.0 <= conf <= 1.0:
            raise FixtureFormatError(lineno, f"confidence {conf} outside [0, 1]")
        try:
            box = BoundingBox(x0, y0, x1, y1)
        except ValueError as exc:
            raise FixtureFormatError(lineno, str(exc)) from None
        out.setdefault(image_id, []).append(Detection(label, conf, box))
    return out


def format_detection_lines(detections: Dict[str, Sequence[Detection]]) -> str:
    lines = []
    for image_id in sorted(detections):
        for d in detections[image_id]:
            b = d.box
            lines.append(
                f"{image_id} {label_name(d.label)} {d.confidence:.6f} "
                f"{b.x_min:.3f} {b.y_min:.3f} {b.x_max:.3f} {b.y_max:.3f}"
            )
    return "\n".join(lines) + ("\n" if lines else "")


def load_fixture_backend(path: "str | Path", classes: Optional[Iterable[Label]] = None) -> FixtureBackend:
    text = Path(path).read_text(encoding="utf-8")
    return FixtureBackend(parse_detection_lines(text), classes)


def load_model_backend(model_path: "str | Path", metadata_path: "str | Path | None" = None) -> ModelBackend:
    model_path = Path(model_path)
    metadata_path = Path(metadata_path) if metadata_path else model_path.with_suffix(".json")
    try:
        meta = json.loads(metadata_path.read_text(encoding="utf-8"))
    except (OSError, ValueError) as exc:
        raise ConfigurationError(f"cannot read model metadata {metadata_path}: {exc}") from exc
    try:
        labels = [parse_label(n) for n in meta["classes"]]
    except (KeyError, ValueError) as exc:
        raise ConfigurationError(f"bad class list in {metadata_path}: {exc}") from exc
    input_size = int(meta.get("input_size", 476))
    try:
        import onnxruntime as ort
    except ImportError as exc:  # optional dependency
        raise BackendError("onnxruntime is required for model backends (pip install 'artifact[model]')") from exc
    if not model_path.is_file():
        raise BackendError(f"model file not found: {model_path}")
    try:
        session = ort.InferenceSession(str(model_path), providers=["CPUExecutionProvider"])
    except Exception as exc:
        raise BackendError(f"cannot load model {model_path}: {exc}") from exc
    backend = ModelBackend(session, labels, input_size)
    declared = session.get_outputs()[0].shape
    if declared and isinstance(declared[-1], int) and declared[-1] != backend.expected_width:
        raise ConfigurationError(
            f"model declares {declared[-1] - 5} classes, metadata lists {len(labels)}"
        )
    return backend


def load_backend(spec: str) -> DetectorBackend:
    """Build a backend from ``fallback``, ``fixture:PATH`` or ``model:PATH[,META]``."""
    kind, _, arg = spec.partition(":")
    kind = kind.strip().lower()
    if kind in ("fallback", "whole_frame", "wholeframe"):
        return WholeFrameBackend()
    if kind == "fixture" and arg:
        return load_fixture_backend(arg)
    if kind == "model" and arg:
        model, _, meta = arg.partition(",")
        return load_model_backend(model, meta or None)
    raise ConfigurationError(f"bad backend spec {spec!r}")


def _order_key(d: Detection):
    return (-d.confidence, d.box.x_min, d.box.y_min)


def nms(detections: Sequence[Detection], iou_threshold: float) -> List[Detection]:
    """Greedy per-class suppression; overlaps strictly above the threshold are dropped."""
    kept: List[Detection] = []
    for d in sorted(detections, key=_order_key):
        if any(k.label == d.label and iou(k.box, d.box) > iou_threshold for k in kept):
            continue
        kept.append(d)
    return kept


def postprocess(detections: Iterable[Detection], config: DetectorConfig) -> List[Detection]:
    kept = [d for d in detections if d.confidence >= config.confidence_threshold]
    return sorted(nms(kept, config.nms_iou_threshold), key=_order_key)


def detect(backend: DetectorBackend, image: Frame, config: DetectorConfig = DetectorConfig()) -> List[Detection]:
    """Letterbox, infer, map back to ``image`` pixels, filter and suppress."""
    t = letterbox(image.size, (config.input_size, config.input_size))
    raw = backend.infer(DetectorInput(image, t))
    mapped = [d.with_box(t.unmap_box(d.box).clamp(image.size)) for d in raw]
    return postprocess(mapped, config)


__all__ = [
    "ALL_CLASSES",
    "BackendError",
    "BackendShapeError",
    "ConfigurationError",
    "Detection",
    "DetectorBackend",
    "DetectorConfig",
    "DetectorInput",
    "FixtureBackend",
    "FixtureFormatError",
    "Frame",
    "ModelBackend",
    "PixelCostBackend",
    "WholeFrameBackend",
    "detect",
    "format_detection_lines",
    "letterbox_image",
    "load_backend",
    "load_fixture_backend",
    "load_model_backend",
    "nms",
    "parse_detection_lines",
]
