"""Annotation files, dataset manifests and class-occurrence statistics."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Sequence

from PIL import Image as PILImage

from ppegate.classes import PpeClass
from ppegate.geometry import BoundingBox, GeometryError, NormalizedBox, to_pixel

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".jpg", ".jpeg", ".png", ".bmp")


class AnnotationFormatError(ValueError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


@dataclass(frozen=True)
class Annotation:
    cls: PpeClass
    box: NormalizedBox

    def to_pixel(self, width: int, height: int) -> BoundingBox:
        return to_pixel(self.box, width, height)


@dataclass
class ImageRecord:
    image_id: str
    path: str
    width: int
    height: int
    annotations: List[Annotation] = field(default_factory=list)

    def __post_init__(self) -> None:
        if self.width <= 0 or self.height <= 0:
            raise ValueError(f"{self.image_id}: image size must be positive")

    @property
    def is_negative(self) -> bool:
        return not self.annotations


@dataclass
class Manifest:
    images: List[ImageRecord] = field(default_factory=list)
    # record-level problems collected while loading (unreadable images, orphans)
    errors: List[str] = field(default_factory=list)
    warnings: List[str] = field(default_factory=list)

    def __post_init__(self) -> None:
        seen = set()
        for r in self.images:
            if r.image_id in seen:
                raise ValueError(f"duplicate image id {r.image_id!r}")
            seen.add(r.image_id)

    def __len__(self) -> int:
        return len(self.images)

    def __iter__(self):
        return iter(self.images)

    def by_id(self) -> Dict[str, ImageRecord]:
        return {r.image_id: r for r in self.images}

    @property
    def ids(self) -> List[str]:
        return [r.image_id for r in self.images]

    def to_json(self) -> dict:
        stats = class_stats(self)
        return {
            "images": [
                {
                    "id": r.image_id,
                    "path": r.path,
                    "width": r.width,
                    "height": r.height,
                    "annotations": [
                        {
                            "class": a.cls.slug,
                            "cx": a.box.cx,
                            "cy": a.box.cy,
                            "w": a.box.w,
                            "h": a.box.h,
                        }
                        for a in r.annotations
                    ],
                }
                for r in self.images
            ],
            "stats": stats.to_json(),
        }

    @classmethod
    def from_json(cls, doc: Mapping) -> "Manifest":
        images = []
        for item in doc.get("images", []):
            anns = [
                Annotation(
                    PpeClass.parse(a["class"]),
                    NormalizedBox(float(a["cx"]), float(a["cy"]), float(a["w"]), float(a["h"])),
                )
                for a in item.get("annotations", [])
            ]
            images.append(
                ImageRecord(
                    image_id=str(item["id"]),
                    path=str(item.get("path", "")),
                    width=int(item["width"]),
                    height=int(item["height"]),
                    annotations=anns,
                )
            )
        return cls(images)

    def save(self, path: "str | Path") -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: "str | Path") -> "Manifest":
        return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


def parse_annotation_file(text: str, class_count: int = 5) -> List[Annotation]:
    """Parse ``class_id cx cy w h`` lines; an empty file is a negative image."""
    if not 0 < class_count <= len(PpeClass):
        raise ValueError(f"class_count must be in 1..{len(PpeClass)}")
    out = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        fields = line.split()
        if not fields:
            continue
        if len(fields) != 5:
            raise AnnotationFormatError(lineno, f"expected 5 fields, got {len(fields)}")
        try:
            class_id = int(fields[0])
        except ValueError:
            raise AnnotationFormatError(lineno, f"non-integer class id {fields[0]!r}") from None
        if not 0 <= class_id < class_count:
            raise AnnotationFormatError(lineno, f"unknown class {class_id}")
        try:
            values = [float(v) for v in fields[1:]]
        except ValueError:
            raise AnnotationFormatError(lineno, "non-numeric box field") from None
        if any(not math.isfinite(v) or not 0.0 <= v <= 1.0 for v in values):
            raise AnnotationFormatError(lineno, "box field outside [0, 1]")
        try:
            box = NormalizedBox(*values)
        except GeometryError as exc:
            raise AnnotationFormatError(lineno, str(exc)) from None
        out.append(Annotation(PpeClass(class_id), box))
    return out


def serialize_annotation_file(annotations: Iterable[Annotation]) -> str:
    return "".join(
        f"{int(a.cls)} {a.box.cx:.6f} {a.box.cy:.6f} {a.box.w:.6f} {a.box.h:.6f}\n"
        for a in annotations
    )


def load_manifest(root: "str | Path") -> Manifest:
    """Build a manifest from a directory of images with sibling ``.txt`` labels.

    Images without a label file are negatives. Unreadable images and label
    files without an image are reported in ``errors``/``warnings`` instead of
    raising.
    """
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"not a directory: {root}")
    images = sorted(p for p in root.rglob("*") if p.suffix.lower() in IMAGE_SUFFIXES and p.is_file())
    stems = {p.with_suffix("") for p in images}
    records, errors, warnings = [], [], []
    for path in images:
        rel = path.relative_to(root).with_suffix("").as_posix()
        try:
            with PILImage.open(path) as im:
                width, height = im.size
        except Exception as exc:  # PIL raises a variety of types on bad headers
            errors.append(f"{path}: unreadable image ({exc})")
            continue
        label = path.with_suffix(".txt")
        try:
            anns = parse_annotation_file(label.read_text(encoding="utf-8")) if label.exists() else []
        except AnnotationFormatError as exc:
            errors.append(f"{label}: {exc}")
            continue
        records.append(ImageRecord(rel, str(path), width, height, anns))
    for label in sorted(root.rglob("*.txt")):
        if label.with_suffix("") not in stems:
            warnings.append(f"{label}: orphan annotation file (no image)")
    for w in warnings:
        log.warning(w)
    for e in errors:
        log.error(e)
    return Manifest(records, errors=errors, warnings=warnings)


def largest_remainder_percentages(counts: Sequence[int]) -> List[int]:
    """Integer percentages summing to 100, apportioned by largest remainder.

    Floors of the exact shares are topped up one point at a time in order of
    decreasing fractional remainder (ties go to the earlier class). Exact
    integer arithmetic, so no float rounding can flip a boundary case.
    """
    total = sum(counts)
    if total == 0:
        return [0] * len(counts)
    floors = [100 * c // total for c in counts]
    remainders = [100 * c % total for c in counts]
    short = 100 - sum(floors)
    order = sorted(range(len(counts)), key=lambda i: (-remainders[i], i))
    for i in order[:short]:
        floors[i] += 1
    return floors


def half_up_percentages(counts: Sequence[int]) -> List[int]:
    total = sum(counts)
    if total == 0:
        return [0] * len(counts)
    return [(200 * c + total) // (2 * total) for c in counts]


@dataclass(frozen=True)
class ClassStats:
    occurrences: Dict[PpeClass, int]
    total: int
    percentage: Dict[PpeClass, int]
    empty: bool = False
    n_images: int = 0
    n_negative: int = 0

    @classmethod
    def from_counts(
        cls,
        counts: "Mapping[PpeClass, int] | Sequence[int]",
        n_images: int = 0,
        n_negative: int = 0,
        method: str = "largest_remainder",
    ) -> "ClassStats":
        if not isinstance(counts, Mapping):
            counts = dict(zip(PpeClass, counts))
        occ = {c: int(counts.get(c, 0)) for c in PpeClass}
        if any(v < 0 for v in occ.values()):
            raise ValueError("occurrence counts must be non-negative")
        values = [occ[c] for c in PpeClass]
        if method == "largest_remainder":
            pct = largest_remainder_percentages(values)
        elif method == "half_up":
            pct = half_up_percentages(values)
        else:
            raise ValueError(f"unknown percentage method {method!r}")
        total = sum(values)
        return cls(occ, total, dict(zip(PpeClass, pct)), total == 0, n_images, n_negative)

    def counts(self) -> List[int]:
        return [self.occurrences[c] for c in PpeClass]

    def percentages(self) -> List[int]:
        return [self.percentage[c] for c in PpeClass]

    def to_json(self) -> dict:
        return {
            "occurrences": {c.slug: self.occurrences[c] for c in PpeClass},
            "percentage": {c.slug: self.percentage[c] for c in PpeClass},
            "total": self.total,
            "empty": self.empty,
            "images": self.n_images,
            "negative_images": self.n_negative,
        }


def class_stats(manifest: "Manifest | Iterable[ImageRecord]", method: str = "largest_remainder") -> ClassStats:
    counts = {c: 0 for c in PpeClass}
    n_images = n_negative = 0
    for record in manifest:
        n_images += 1
        if record.is_negative:
            n_negative += 1
        for a in record.annotations:
            counts[a.cls] += 1
    return ClassStats.from_counts(counts, n_images, n_negative, method=method)


def render_stats(stats: ClassStats) -> str:
    lines = ["| Object | Occurrences | Percentage |", "|---|---:|---:|"]
    for c in PpeClass:
        lines.append(f"| {c.title} | {stats.occurrences[c]} | {stats.percentage[c]}% |")
    lines.append(f"| Total | {stats.total} | |")
    return "\n".join(lines) + "\n"


def stats_for(counts: Sequence[int], method: str = "largest_remainder") -> ClassStats:
    """Shortcut for tables given as five occurrence counts in class order."""
    return ClassStats.from_counts(list(counts), method=method)


__all__ = [
    "Annotation",
    "AnnotationFormatError",
    "ClassStats",
    "ImageRecord",
    "Manifest",
    "class_stats",
    "load_manifest",
    "parse_annotation_file",
    "render_stats",
    "serialize_annotation_file",
    "stats_for",
]
