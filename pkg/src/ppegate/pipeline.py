"""Person detection, cropping, PPE detection and compliance decisions."""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field
from typing import Deque, Dict, FrozenSet, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from ppegate.classes import ALL_CLASSES, PpeClass
from ppegate.detector import (
    Detection,
    DetectorBackend,
    DetectorConfig,
    Frame,
    PixelCostBackend,
    WholeFrameBackend,
    detect,
    load_backend,
)
from ppegate.geometry import BoundingBox, expand_and_clamp, translate_box

log = logging.getLogger(__name__)

HEAD_CLASSES = frozenset({PpeClass.HARDHAT, PpeClass.SAFETY_GLASSES, PpeClass.HEARING_PROTECTION})


class PipelineError(RuntimeError):
    pass


class DegenerateCropError(PipelineError):
    pass


@dataclass(frozen=True)
class ComplianceDecision:
    required: FrozenSet[PpeClass]
    missing: FrozenSet[PpeClass]

    @property
    def compliant(self) -> bool:
        return not self.missing

    def to_json(self) -> dict:
        return {
            "compliant": self.compliant,
            "required": sorted(c.slug for c in self.required),
            "missing": [c.slug for c in sorted(self.missing)],
        }


@dataclass
class PersonResult:
    person_box: BoundingBox
    ppe: List[Detection] = field(default_factory=list)
    crop_box: Optional[BoundingBox] = None
    decision: Optional[ComplianceDecision] = None
    error: Optional[str] = None

    @property
    def present_classes(self) -> FrozenSet[PpeClass]:
        return frozenset(d.label for d in self.ppe if isinstance(d.label, PpeClass))

    def to_json(self) -> dict:
        return {
            "person_box": list(self.person_box.as_tuple()),
            "ppe": [d.to_json() for d in self.ppe],
            "present": [c.slug for c in sorted(self.present_classes)],
            "decision": self.decision.to_json() if self.decision else None,
            "error": self.error,
        }


@dataclass(frozen=True)
class RegionPriorConfig:
    enabled: bool = False
    head_band: float = 0.40
    torso_band: Tuple[float, float] = (0.20, 0.70)

    def __post_init__(self) -> None:
        lo, hi = self.torso_band
        if not (0.0 <= self.head_band <= 1.0 and 0.0 <= lo < hi <= 1.0):
            raise ValueError("region prior bands must be fractions with a non-empty torso interval")


class FusionWindow:
    """Sliding window of per-frame present sets with a K-of-N quorum."""

    def __init__(self, capacity: int = 1, quorum: int = 1):
        if not 1 <= quorum <= capacity:
            raise ValueError("need 1 <= K <= N")
        self.capacity = capacity
        self.quorum = quorum
        self.frames: Deque[FrozenSet[PpeClass]] = deque(maxlen=capacity)

    def counts(self) -> Dict[PpeClass, int]:
        return {c: sum(c in f for f in self.frames) for c in PpeClass}

    def fused(self) -> FrozenSet[PpeClass]:
        return frozenset(c for c, n in self.counts().items() if n >= self.quorum)

    def reset(self) -> None:
        self.frames.clear()


def fuse_frames(window: FusionWindow, new_present: Iterable[PpeClass]) -> FrozenSet[PpeClass]:
    window.frames.append(frozenset(new_present))
    return window.fused()


def check_compliance(present: Iterable[PpeClass], required: Iterable[PpeClass]) -> ComplianceDecision:
    req = frozenset(required)
    return ComplianceDecision(req, req - frozenset(present))


@dataclass(frozen=True)
class PipelineConfig:
    margin_frac: float = 0.10
    crop: bool = True
    fusion_n: int = 1
    fusion_k: int = 1
    region_priors: RegionPriorConfig = RegionPriorConfig()
    required_classes: FrozenSet[PpeClass] = ALL_CLASSES
    detector: DetectorConfig = DetectorConfig()
    person_backend: str = "fallback"
    ppe_backend: str = ""
    pixel_cost_passes: int = 0  # >0 wraps the PPE backend in PixelCostBackend

    def __post_init__(self) -> None:
        if self.margin_frac < 0:
            raise ValueError("margin_frac must be >= 0")
        if not 1 <= self.fusion_k <= self.fusion_n:
            raise ValueError("fusion needs 1 <= K <= N")

    @classmethod
    def from_mapping(cls, doc: Mapping) -> "PipelineConfig":
        doc = dict(doc or {})
        fusion = doc.get("fusion") or {}
        priors = doc.get("region_priors") or {}
        det = doc.get("detector") or {}
        required = doc.get("required_classes")
        kwargs = {}
        if "margin_frac" in doc:
            kwargs["margin_frac"] = float(doc["margin_frac"])
        if "crop" in doc:
            kwargs["crop"] = bool(doc["crop"])
        if fusion:
            kwargs["fusion_n"] = int(fusion.get("n", fusion.get("N", 1)))
            kwargs["fusion_k"] = int(fusion.get("k", fusion.get("K", 1)))
        if priors:
            kwargs["region_priors"] = RegionPriorConfig(
                enabled=bool(priors.get("enabled", False)),
                head_band=float(priors.get("head_band", 0.40)),
                torso_band=tuple(float(v) for v in priors.get("torso_band", (0.20, 0.70))),
            )
        if required is not None:
            kwargs["required_classes"] = frozenset(PpeClass.parse(c) for c in required)
        if det:
            kwargs["detector"] = DetectorConfig(
                input_size=int(det.get("input_size", 476)),
                confidence_threshold=float(det.get("confidence_threshold", 0.25)),
                nms_iou_threshold=float(det.get("nms_iou_threshold", 0.45)),
            )
        for key in ("person_backend", "ppe_backend"):
            if doc.get(key):
                kwargs[key] = str(doc[key])
        if "pixel_cost_passes" in doc:
            kwargs["pixel_cost_passes"] = int(doc["pixel_cost_passes"])
        unknown = set(doc) - {
            "margin_frac", "crop", "fusion", "region_priors", "required_classes", "detector",
            "person_backend", "ppe_backend", "pixel_cost_passes",
        }
        if unknown:
            raise ValueError(f"unknown pipeline config keys: {', '.join(sorted(unknown))}")
        return cls(**kwargs)


@dataclass
class Backends:
    person: DetectorBackend
    ppe: DetectorBackend

    @classmethod
    def from_config(cls, config: PipelineConfig) -> "Backends":
        if not config.ppe_backend:
            raise ValueError("pipeline config needs a ppe_backend")
        person = load_backend(config.person_backend)
        ppe = load_backend(config.ppe_backend)
        if config.pixel_cost_passes > 0:
            ppe = PixelCostBackend(ppe, config.pixel_cost_passes)
        return cls(person, ppe)


@dataclass
class FrameResult:
    image_id: str
    persons: List[PersonResult] = field(default_factory=list)
    fused_present: Optional[FrozenSet[PpeClass]] = None
    fused_decision: Optional[ComplianceDecision] = None
    ppe_pixels: int = 0

    @property
    def primary(self) -> Optional[PersonResult]:
        """Largest person box; the airlock is a one-person checkpoint."""
        if not self.persons:
            return None
        return max(self.persons, key=lambda p: p.person_box.area)

    def to_json(self) -> dict:
        return {
            "image_id": self.image_id,
            "persons": [p.to_json() for p in self.persons],
            "fused_present": None
            if self.fused_present is None
            else [c.slug for c in sorted(self.fused_present)],
            "fused_decision": self.fused_decision.to_json() if self.fused_decision else None,
            "ppe_pixels": self.ppe_pixels,
        }


def detect_persons(frame: Frame, person_backend: DetectorBackend, config: DetectorConfig) -> List[BoundingBox]:
    if isinstance(person_backend, WholeFrameBackend):
        w, h = frame.size
        return [BoundingBox(0, 0, w, h)]
    dets = detect(person_backend, frame, config)
    return [d.box for d in dets if d.is_person]


def crop_person(frame: Frame, person_box: BoundingBox, margin_frac: float = 0.10) -> Tuple[Frame, Tuple[int, int]]:
    """Cut the expanded person region out of ``frame``.

    The crop is snapped outward to whole pixels; the returned offset is the
    crop's top-left corner in frame coordinates.
    """
    w, h = frame.size
    inter = person_box.intersection(BoundingBox(0, 0, w, h))
    if inter is None or inter.area <= 0:
        raise DegenerateCropError(f"person box {person_box.as_tuple()} does not overlap the frame")
    region = expand_and_clamp(person_box, margin_frac, (w, h))
    x0, y0 = int(np.floor(region.x_min)), int(np.floor(region.y_min))
    x1, y1 = int(np.ceil(region.x_max)), int(np.ceil(region.y_max))
    if x1 <= x0 or y1 <= y0:
        raise DegenerateCropError(f"empty crop for {person_box.as_tuple()}")
    ox, oy = frame.origin
    crop = Frame(frame.image_id, frame.pixels[y0:y1, x0:x1], (ox + x0, oy + y0))
    return crop, (x0, y0)


def detect_ppe_on_person(
    crop: Frame, offset: Tuple[float, float], ppe_backend: DetectorBackend, config: DetectorConfig
) -> List[Detection]:
    dets = detect(ppe_backend, crop, config)
    return [d.with_box(translate_box(d.box, offset)) for d in dets if isinstance(d.label, PpeClass)]


def region_prior_filter(person: PersonResult, cfg: RegionPriorConfig) -> PersonResult:
    """Drop head-worn PPE below the head band and vests outside the torso band."""
    if not cfg.enabled:
        return person
    box = person.person_box
    kept = []
    for d in person.ppe:
        rel = (d.box.center[1] - box.y_min) / box.height if box.height > 0 else 0.0
        if d.label in HEAD_CLASSES and rel > cfg.head_band:
            continue
        if d.label == PpeClass.SAFETY_VEST and not cfg.torso_band[0] <= rel <= cfg.torso_band[1]:
            continue
        kept.append(d)
    return PersonResult(person.person_box, kept, person.crop_box, person.decision, person.error)


def _assign_whole_frame(dets: Sequence[Detection], region: BoundingBox) -> List[Detection]:
    return [d for d in dets if region.contains_point(*d.box.center)]


def process_frame(
    frame: Frame,
    backends: Backends,
    config: PipelineConfig = PipelineConfig(),
    window: Optional[FusionWindow] = None,
) -> FrameResult:
    """Run every stage for each detected person.

    Per-person failures are recorded on that person; only a person-detection
    failure propagates. When ``window`` is given, the primary person's
    present set is pushed into it and the fused decision is reported.
    """
    det_cfg = config.detector
    person_boxes = detect_persons(frame, backends.person, det_cfg)
    result = FrameResult(frame.image_id)
    full_frame_dets: Optional[List[Detection]] = None
    w, h = frame.size
    for box in person_boxes:
        try:
            if config.crop:
                crop, offset = crop_person(frame, box, config.margin_frac)
                result.ppe_pixels += crop.size[0] * crop.size[1]
                ppe = detect_ppe_on_person(crop, offset, backends.ppe, det_cfg)
                region = BoundingBox(offset[0], offset[1], offset[0] + crop.size[0], offset[1] + crop.size[1])
            else:
                if full_frame_dets is None:
                    result.ppe_pixels += w * h
                    full_frame_dets = [
                        d for d in detect(backends.ppe, frame, det_cfg) if isinstance(d.label, PpeClass)
                    ]
                region = expand_and_clamp(box, config.margin_frac, (w, h))
                ppe = _assign_whole_frame(full_frame_dets, region)
            person = region_prior_filter(PersonResult(box, ppe, region), config.region_priors)
            person.decision = check_compliance(person.present_classes, config.required_classes)
        except Exception as exc:
            log.warning("person %s in %s failed: %s", box.as_tuple(), frame.image_id, exc)
            person = PersonResult(box, [], None, None, str(exc))
        result.persons.append(person)

    if window is not None:
        primary = result.primary
        if primary is not None and primary.error is None:
            result.fused_present = fuse_frames(window, primary.present_classes)
            result.fused_decision = check_compliance(result.fused_present, config.required_classes)
    return result


class Pipeline:
    """Backends, config and one fusion window bundled for sequential use."""

    def __init__(self, backends: Backends, config: PipelineConfig = PipelineConfig()):
        self.backends = backends
        self.config = config
        self.window = FusionWindow(config.fusion_n, config.fusion_k)

    @classmethod
    def from_config(cls, config: PipelineConfig) -> "Pipeline":
        return cls(Backends.from_config(config), config)

    def new_window(self) -> FusionWindow:
        return FusionWindow(self.config.fusion_n, self.config.fusion_k)

    def process(self, frame: Frame, window: Optional[FusionWindow] = None) -> FrameResult:
        return process_frame(frame, self.backends, self.config, window or self.window)


__all__ = [
    "Backends",
    "ComplianceDecision",
    "DegenerateCropError",
    "FrameResult",
    "FusionWindow",
    "PersonResult",
    "Pipeline",
    "PipelineConfig",
    "RegionPriorConfig",
    "check_compliance",
    "crop_person",
    "detect_persons",
    "detect_ppe_on_person",
    "fuse_frames",
    "process_frame",
    "region_prior_filter",
]
