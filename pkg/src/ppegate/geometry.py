"""Box types, IoU and coordinate transforms.

Boxes use corner coordinates in pixels, x to the right and y down.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Tuple

Size = Tuple[int, int]  # (width, height)
Point = Tuple[float, float]

# Out-of-frame tolerance, as a fraction of the frame dimension.
EPSILON = 1e-3


class GeometryError(ValueError):
    pass


def _check_finite(*values: float) -> None:
    for v in values:
        if not math.isfinite(v):
            raise GeometryError(f"non-finite coordinate {v!r}")


@dataclass(frozen=True)
class BoundingBox:
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self) -> None:
        _check_finite(self.x_min, self.y_min, self.x_max, self.y_max)
        if self.x_min > self.x_max or self.y_min > self.y_max:
            raise GeometryError(f"inverted box {self.as_tuple()}")

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> Point:
        return ((self.x_min + self.x_max) / 2, (self.y_min + self.y_max) / 2)

    def as_tuple(self) -> Tuple[float, float, float, float]:
        return (self.x_min, self.y_min, self.x_max, self.y_max)

    def intersection(self, other: "BoundingBox") -> "BoundingBox | None":
        x0 = max(self.x_min, other.x_min)
        y0 = max(self.y_min, other.y_min)
        x1 = min(self.x_max, other.x_max)
        y1 = min(self.y_max, other.y_max)
        if x0 > x1 or y0 > y1:
            return None
        return BoundingBox(x0, y0, x1, y1)

    def contains_point(self, x: float, y: float) -> bool:
        return self.x_min <= x <= self.x_max and self.y_min <= y <= self.y_max

    def clamp(self, frame: Size) -> "BoundingBox":
        w, h = frame
        x0 = min(max(self.x_min, 0.0), w)
        y0 = min(max(self.y_min, 0.0), h)
        x1 = min(max(self.x_max, 0.0), w)
        y1 = min(max(self.y_max, 0.0), h)
        return BoundingBox(x0, y0, x1, y1)


@dataclass(frozen=True)
class NormalizedBox:
    """Center/size box as fractions of the image width and height."""

    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self) -> None:
        _check_finite(self.cx, self.cy, self.w, self.h)
        for name in ("cx", "cy", "w", "h"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise GeometryError(f"{name}={v} outside [0, 1]")
        if (
            self.cx - self.w / 2 < -EPSILON
            or self.cy - self.h / 2 < -EPSILON
            or self.cx + self.w / 2 > 1 + EPSILON
            or self.cy + self.h / 2 > 1 + EPSILON
        ):
            raise GeometryError(f"box {self.as_tuple()} extends outside the image")

    def as_tuple(self) -> Tuple[float, float, float, float]:
        return (self.cx, self.cy, self.w, self.h)


def iou(a: BoundingBox, b: BoundingBox) -> float:
    """Intersection over union; 0 for disjoint boxes and for a zero union."""
    iw = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    ih = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = a.area + b.area - inter
    if union <= 0:
        return 0.0
    return min(1.0, inter / union)


def _check_size(width: float, height: float) -> None:
    if not (width > 0 and height > 0):
        raise GeometryError(f"frame size must be positive, got {width}x{height}")


def to_pixel(n: NormalizedBox, width: int, height: int) -> BoundingBox:
    _check_size(width, height)
    _check_finite(n.cx, n.cy, n.w, n.h)
    x0 = (n.cx - n.w / 2) * width
    y0 = (n.cy - n.h / 2) * height
    x1 = (n.cx + n.w / 2) * width
    y1 = (n.cy + n.h / 2) * height
    return BoundingBox(x0, y0, x1, y1)


def to_normalized(b: BoundingBox, width: int, height: int) -> NormalizedBox:
    """Inverse of :func:`to_pixel`.

    Boxes that spill past the frame by at most ``EPSILON`` of the frame
    dimension are clamped first; larger spills raise ``GeometryError``.
    """
    _check_size(width, height)
    tol_x = EPSILON * width
    tol_y = EPSILON * height
    if (
        b.x_min < -tol_x
        or b.y_min < -tol_y
        or b.x_max > width + tol_x
        or b.y_max > height + tol_y
    ):
        raise GeometryError(f"box {b.as_tuple()} outside {width}x{height} frame")
    c = b.clamp((width, height))
    return NormalizedBox(
        cx=min(1.0, (c.x_min + c.x_max) / 2 / width),
        cy=min(1.0, (c.y_min + c.y_max) / 2 / height),
        w=min(1.0, c.width / width),
        h=min(1.0, c.height / height),
    )


@dataclass(frozen=True)
class LetterboxTransform:
    """Aspect-preserving resize of ``source_size`` into ``target_size``.

    Content is scaled by ``scale`` and centred; ``pad_x``/``pad_y`` are the
    (possibly fractional) margins on each side in the target frame.
    """

    scale: float
    pad_x: float
    pad_y: float
    source_size: Size
    target_size: Size

    def map_point(self, x: float, y: float) -> Point:
        return (x * self.scale + self.pad_x, y * self.scale + self.pad_y)

    def unmap_point(self, x: float, y: float) -> Point:
        return ((x - self.pad_x) / self.scale, (y - self.pad_y) / self.scale)

    def map_box(self, b: BoundingBox) -> BoundingBox:
        x0, y0 = self.map_point(b.x_min, b.y_min)
        x1, y1 = self.map_point(b.x_max, b.y_max)
        return BoundingBox(x0, y0, x1, y1)

    def unmap_box(self, b: BoundingBox) -> BoundingBox:
        x0, y0 = self.unmap_point(b.x_min, b.y_min)
        x1, y1 = self.unmap_point(b.x_max, b.y_max)
        return BoundingBox(x0, y0, x1, y1)

    @property
    def content_size(self) -> Size:
        """Integer size of the scaled content, as used for pixel resampling."""
        sw, sh = self.source_size
        return (max(1, round(sw * self.scale)), max(1, round(sh * self.scale)))


def letterbox(source_size: Size, target_size: Size = (476, 476)) -> LetterboxTransform:
    sw, sh = source_size
    tw, th = target_size
    _check_size(sw, sh)
    _check_size(tw, th)
    scale = min(tw / sw, th / sh)
    return LetterboxTransform(
        scale=scale,
        pad_x=(tw - sw * scale) / 2,
        pad_y=(th - sh * scale) / 2,
        source_size=(sw, sh),
        target_size=(tw, th),
    )


def expand_and_clamp(b: BoundingBox, margin_frac: float, frame: Size) -> BoundingBox:
    """Grow each side by ``margin_frac`` of the box's own extent, then clamp."""
    if margin_frac < 0:
        raise GeometryError("margin_frac must be >= 0")
    dx = b.width * margin_frac
    dy = b.height * margin_frac
    return BoundingBox(b.x_min - dx, b.y_min - dy, b.x_max + dx, b.y_max + dy).clamp(frame)


def translate_box(b: BoundingBox, offset: Point) -> BoundingBox:
    dx, dy = offset
    return BoundingBox(b.x_min + dx, b.y_min + dy, b.x_max + dx, b.y_max + dy)
