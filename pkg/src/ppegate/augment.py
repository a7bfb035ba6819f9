"""Deterministic photometric augmentation and the built-in recipes.

All kernels work on ``uint8`` arrays of shape ``(H, W, 3)`` and use exact
integer arithmetic where possible, so repeated runs are bit-identical on
any platform.
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from PIL import Image as PILImage

from ppegate.classes import PpeClass
from ppegate.dataset import ClassStats, ImageRecord, Manifest

log = logging.getLogger(__name__)


class AugmentError(ValueError):
    pass


def check_image(img: np.ndarray) -> np.ndarray:
    if not isinstance(img, np.ndarray) or img.ndim != 3 or img.shape[2] != 3:
        raise AugmentError(f"expected an HxWx3 array, got shape {getattr(img, 'shape', None)}")
    if img.shape[0] == 0 or img.shape[1] == 0:
        raise AugmentError("image has zero size")
    if img.dtype != np.uint8:
        raise AugmentError(f"expected uint8 pixels, got {img.dtype}")
    return img


def _check_pct(pct: float) -> None:
    if not -100 <= pct <= 100:
        raise AugmentError(f"percentage {pct} outside [-100, 100]")


def _round_half_away(num: np.ndarray, den: int) -> np.ndarray:
    """Round ``num / den`` half away from zero for integer arrays."""
    mag = (np.abs(num) * 2 + den) // (2 * den)
    return np.where(num < 0, -mag, mag)


def _as_ratio(pct: float) -> Fraction:
    # percent values like 12.5 stay exact
    return Fraction(100 + Fraction(pct).limit_denominator(10**6), 100)


def apply_brightness(img: np.ndarray, pct: float) -> np.ndarray:
    """Scale every channel by ``1 + pct/100``."""
    check_image(img)
    _check_pct(pct)
    if pct == 0:
        return img.copy()
    r = _as_ratio(pct)
    out = _round_half_away(img.astype(np.int64) * r.numerator, r.denominator)
    return np.clip(out, 0, 255).astype(np.uint8)


def apply_contrast(img: np.ndarray, pct: float) -> np.ndarray:
    """Scale every channel about the midpoint 128 by ``1 + pct/100``."""
    check_image(img)
    _check_pct(pct)
    if pct == 0:
        return img.copy()
    r = _as_ratio(pct)
    num = 128 * r.denominator + (img.astype(np.int64) - 128) * r.numerator
    out = _round_half_away(num, r.denominator)
    return np.clip(out, 0, 255).astype(np.uint8)


def _blur_sum(img: np.ndarray) -> np.ndarray:
    """16 x 3x3 Gaussian response with replicate border (exact integers)."""
    p = np.pad(img.astype(np.int64), ((1, 1), (1, 1), (0, 0)), mode="edge")
    rows = p[:-2] + 2 * p[1:-1] + p[2:]
    return rows[:, :-2] + 2 * rows[:, 1:-1] + rows[:, 2:]


def apply_blur(img: np.ndarray) -> np.ndarray:
    check_image(img)
    s = _blur_sum(img)
    return ((s + 8) // 16).astype(np.uint8)


def apply_sharpen(img: np.ndarray) -> np.ndarray:
    """Unsharp mask with amount 1: ``2*in - blur(in)`` using the unrounded blur.

    Not an inverse of :func:`apply_blur`.
    """
    check_image(img)
    num = 32 * img.astype(np.int64) - _blur_sum(img)
    return np.clip(_round_half_away(num, 16), 0, 255).astype(np.uint8)


@dataclass(frozen=True)
class Brightness:
    pct: float

    def __post_init__(self) -> None:
        _check_pct(self.pct)

    def apply(self, img: np.ndarray) -> np.ndarray:
        return apply_brightness(img, self.pct)


@dataclass(frozen=True)
class Contrast:
    pct: float

    def __post_init__(self) -> None:
        _check_pct(self.pct)

    def apply(self, img: np.ndarray) -> np.ndarray:
        return apply_contrast(img, self.pct)


@dataclass(frozen=True)
class Sharpen:
    def apply(self, img: np.ndarray) -> np.ndarray:
        return apply_sharpen(img)


@dataclass(frozen=True)
class Blur:
    def apply(self, img: np.ndarray) -> np.ndarray:
        return apply_blur(img)


@dataclass(frozen=True)
class Saturation:
    """Placeholder; saturation is never part of a recipe and is rejected on parse."""

    pct: float = 0.0

    def apply(self, img: np.ndarray) -> np.ndarray:
        raise AugmentError("saturation is not supported")


Step = Union[Brightness, Contrast, Sharpen, Blur]
Steps = Tuple[Step, ...]


def apply_recipe(img: np.ndarray, steps: Sequence[Step]) -> np.ndarray:
    check_image(img)
    out = img.copy()
    for step in steps:
        if isinstance(step, Saturation):
            raise AugmentError("saturation is not supported in recipes")
        out = step.apply(out)
    return out


@dataclass(frozen=True)
class RecipeEntry:
    steps: Steps
    count: int
    classes: Tuple[PpeClass, ...] = ()  # classes the augmented images are meant to boost


@dataclass(frozen=True)
class Recipe:
    name: str
    entries: Tuple[RecipeEntry, ...] = ()

    @property
    def image_count(self) -> int:
        return sum(e.count for e in self.entries)


_H, _V, _G, _S, _E = (
    PpeClass.HARDHAT,
    PpeClass.SAFETY_VEST,
    PpeClass.SAFETY_GLOVES,
    PpeClass.SAFETY_GLASSES,
    PpeClass.HEARING_PROTECTION,
)


def _e(count: int, cls: Tuple[PpeClass, ...], *steps: Step) -> RecipeEntry:
    return RecipeEntry(tuple(steps), count, cls)


PHASE2 = Recipe(
    "PHASE2",
    (
        _e(269, (_H,), Brightness(20), Contrast(10), Sharpen()),
        _e(114, (_V,), Brightness(10), Contrast(-20), Blur()),
        _e(265, (_G,), Brightness(40), Contrast(30), Sharpen()),
        _e(264, (_G,), Brightness(-20), Contrast(-30), Blur()),
        _e(260, (_S,), Brightness(25), Contrast(-25), Blur()),
        _e(261, (_S,), Brightness(-15), Contrast(40), Sharpen()),
        _e(311, (_E,), Brightness(30), Contrast(-40), Blur()),
        _e(311, (_E,), Brightness(-30), Contrast(10), Sharpen()),
    ),
)

PHASE4_A = Recipe(
    "PHASE4_A",
    (
        _e(110, (_S, _E), Brightness(30), Contrast(30), Sharpen()),
        _e(110, (_S, _E), Brightness(-40), Contrast(20), Sharpen()),
        _e(110, (_S, _E), Brightness(20), Contrast(-10), Sharpen()),
        _e(110, (_S, _E), Brightness(30), Contrast(60), Blur()),
    ),
)

PHASE4_B = Recipe(
    "PHASE4_B",
    (
        _e(111, (_S, _E), Brightness(-10), Contrast(-20), Blur()),
        _e(111, (_S, _E), Brightness(-40), Sharpen()),
        _e(111, (_S, _E), Brightness(50), Contrast(50), Sharpen()),
        _e(111, (_S, _E), Brightness(40), Blur()),
    ),
)

# un-augmented new captures that accompany the fourth-phase recipes (110 + 111)
PHASE4_ORIGINALS = {_S: 221, _E: 221}


def builtin_recipes() -> Dict[str, Recipe]:
    return {r.name: r for r in (PHASE2, PHASE4_A, PHASE4_B)}


_STEP_OPS = {"brightness": Brightness, "contrast": Contrast, "sharpen": Sharpen, "blur": Blur}


def parse_step(doc: "Mapping | str") -> Step:
    """Parse ``{"op": "brightness", "pct": 20}``; a bare op name stands for a parameterless step."""
    if isinstance(doc, str):
        doc = {"op": doc}
    if not isinstance(doc, Mapping):
        raise AugmentError(f"recipe step must be an object, got {doc!r}")
    op = str(doc.get("op", "")).lower()
    if op == "saturation":
        raise AugmentError("saturation is not supported in recipes")
    if op not in _STEP_OPS:
        raise AugmentError(f"unknown augmentation op {doc.get('op')!r}")
    if op in ("brightness", "contrast"):
        if "pct" not in doc:
            raise AugmentError(f"{op} needs a 'pct' value")
        return _STEP_OPS[op](float(doc["pct"]))
    return _STEP_OPS[op]()


def step_to_json(step: Step) -> dict:
    if isinstance(step, (Brightness, Contrast)):
        return {"op": type(step).__name__.lower(), "pct": step.pct}
    return {"op": type(step).__name__.lower()}


def recipe_from_json(doc: Mapping) -> Recipe:
    entries = []
    for i, e in enumerate(doc.get("entries", [])):
        count = int(e.get("count", 0))
        if count < 0:
            raise AugmentError(f"entry {i}: negative count")
        steps = tuple(parse_step(s) for s in e.get("steps", []))
        classes = tuple(PpeClass.parse(c) for c in e.get("classes", []))
        entries.append(RecipeEntry(steps, count, classes))
    return Recipe(str(doc.get("name", "custom")), tuple(entries))


def recipe_to_json(recipe: Recipe) -> dict:
    return {
        "name": recipe.name,
        "entries": [
            {
                "steps": [step_to_json(s) for s in e.steps],
                "count": e.count,
                "classes": [c.slug for c in e.classes],
            }
            for e in recipe.entries
        ],
    }


def load_recipe(name_or_path: str) -> Recipe:
    """Resolve a built-in recipe name or read a recipe JSON file."""
    builtins = builtin_recipes()
    if name_or_path.upper() in builtins:
        return builtins[name_or_path.upper()]
    path = Path(name_or_path)
    if not path.is_file():
        raise AugmentError(f"unknown recipe {name_or_path!r}")
    try:
        return recipe_from_json(json.loads(path.read_text(encoding="utf-8")))
    except (OSError, ValueError, TypeError, AttributeError) as exc:
        raise AugmentError(f"bad recipe file {path}: {exc}") from exc


@dataclass(frozen=True)
class OccurrenceProjection:
    before: Dict[PpeClass, int]
    after: Dict[PpeClass, int]

    @property
    def delta(self) -> Dict[PpeClass, int]:
        return {c: self.after[c] - self.before[c] for c in PpeClass}

    def after_stats(self) -> ClassStats:
        return ClassStats.from_counts(self.after)


PerImageCounts = Mapping[PpeClass, int]


def project_occurrences(
    before: "ClassStats | Mapping[PpeClass, int] | Sequence[int]",
    recipe: "Recipe | Sequence[Recipe]",
    per_image_class_counts: "Optional[Sequence[PerImageCounts] | PerImageCounts]" = None,
    extra: Optional[PerImageCounts] = None,
) -> OccurrenceProjection:
    """Project per-class occurrence totals after applying ``recipe``.

    ``per_image_class_counts`` gives, for each recipe entry, the occurrences one
    augmented image contributes. A single mapping applies to every entry; when
    omitted each entry adds one occurrence of each of its target classes.
    ``extra`` adds plain (un-augmented) new occurrences.
    """
    if isinstance(before, ClassStats):
        base = dict(before.occurrences)
    elif isinstance(before, Mapping):
        base = {c: int(before.get(c, 0)) for c in PpeClass}
    else:
        base = dict(zip(PpeClass, (int(v) for v in before)))
    for c in PpeClass:
        base.setdefault(c, 0)
    recipes = [recipe] if isinstance(recipe, Recipe) else list(recipe)
    entries = [e for r in recipes for e in r.entries]

    if per_image_class_counts is None:
        per_entry = [{c: 1 for c in e.classes} for e in entries]
    elif isinstance(per_image_class_counts, Mapping):
        per_entry = [per_image_class_counts] * len(entries)
    else:
        per_entry = list(per_image_class_counts)
        if len(per_entry) != len(entries):
            raise AugmentError(f"need {len(entries)} per-entry counts, got {len(per_entry)}")

    after = dict(base)
    if any(v < 0 for v in base.values()):
        raise AugmentError("negative occurrence count")
    for entry, counts in zip(entries, per_entry):
        if entry.count < 0:
            raise AugmentError("negative image count in recipe")
        for c, n in counts.items():
            if n < 0:
                raise AugmentError("negative per-image occurrence count")
            after[PpeClass.parse(c)] += entry.count * n
    for c, n in (extra or {}).items():
        if n < 0:
            raise AugmentError("negative extra occurrence count")
        after[PpeClass.parse(c)] += n
    return OccurrenceProjection(before=base, after=after)


# image_id -> [(recipe entry index, steps), ...]
Assignments = Mapping[str, Sequence[Tuple[int, Sequence[Step]]]]


def assign_recipe(manifest: Manifest, recipe: Recipe) -> Tuple[Dict[str, List[Tuple[int, Steps]]], List[str]]:
    """Pick source images for every recipe entry.

    Each entry takes the first ``count`` images (manifest order) that contain
    one of its target classes and have not been used by an earlier entry
    sharing a target class. Entries without target classes draw from all
    images. Shortfalls are reported as warnings, never padded by reuse.
    """
    assignments: Dict[str, List[Tuple[int, Steps]]] = {}
    used: Dict[PpeClass, set] = {c: set() for c in PpeClass}
    used_any: set = set()
    warnings = []
    for idx, entry in enumerate(recipe.entries):
        wanted = set(entry.classes)
        picked = []
        for rec in manifest.images:
            if len(picked) >= entry.count:
                break
            present = {a.cls for a in rec.annotations}
            if wanted:
                if not (present & wanted) or any(rec.image_id in used[c] for c in wanted):
                    continue
            elif rec.image_id in used_any:
                continue
            picked.append(rec.image_id)
        for image_id in picked:
            assignments.setdefault(image_id, []).append((idx, entry.steps))
            used_any.add(image_id)
            for c in wanted:
                used[c].add(image_id)
        if len(picked) < entry.count:
            warnings.append(f"entry {idx}: wanted {entry.count} images, found {len(picked)}")
    return assignments, warnings


def read_image(path: "str | Path") -> np.ndarray:
    with PILImage.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8).copy()


def write_png(img: np.ndarray, path: "str | Path") -> None:
    check_image(img)
    PILImage.fromarray(img, mode="RGB").save(path, format="PNG")


def augmented_id(source_id: str, entry_index: int) -> str:
    return f"{source_id}__aug{entry_index:02d}"


def expand_dataset(
    manifest: Manifest,
    assignments: Assignments,
    out_dir: "str | Path",
    workers: int = 1,
) -> Manifest:
    """Append one transformed copy per assignment; boxes are copied verbatim.

    Transformed pixels are written as PNG into ``out_dir``. The output order is
    the source order with each image's augmentations following it.
    """
    by_id = manifest.by_id()
    missing = sorted(set(assignments) - set(by_id))
    if missing:
        raise AugmentError(f"assigned images not in manifest: {', '.join(missing)}")
    if not assignments:
        return Manifest(list(manifest.images))
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    jobs = []
    for rec in manifest.images:
        for entry_index, steps in assignments.get(rec.image_id, ()):
            jobs.append((rec, entry_index, tuple(steps)))

    def run(job) -> ImageRecord:
        rec, entry_index, steps = job
        new_id = augmented_id(rec.image_id, entry_index)
        pixels = apply_recipe(read_image(rec.path), steps)
        target = out_dir / (new_id.replace("/", "__") + ".png")
        write_png(pixels, target)
        h, w = pixels.shape[:2]
        return ImageRecord(new_id, str(target), w, h, list(rec.annotations))

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            new_records = list(pool.map(run, jobs))
    else:
        new_records = [run(j) for j in jobs]

    by_source: Dict[str, List[ImageRecord]] = {}
    for (rec, _, _), new in zip(jobs, new_records):
        by_source.setdefault(rec.image_id, []).append(new)
    images: List[ImageRecord] = []
    for rec in manifest.images:
        images.append(rec)
        images.extend(by_source.get(rec.image_id, ()))
    return Manifest(images)


__all__ = [
    "PHASE2",
    "PHASE4_A",
    "PHASE4_B",
    "PHASE4_ORIGINALS",
    "AugmentError",
    "Blur",
    "Brightness",
    "Contrast",
    "OccurrenceProjection",
    "Recipe",
    "RecipeEntry",
    "Saturation",
    "Sharpen",
    "apply_blur",
    "apply_brightness",
    "apply_contrast",
    "apply_recipe",
    "apply_sharpen",
    "assign_recipe",
    "builtin_recipes",
    "expand_dataset",
    "load_recipe",
    "project_occurrences",
    "read_image",
    "recipe_from_json",
    "write_png",
]
