"""Detection evaluation: IoU matching, precision/recall, AP and mAP."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

from ppegate.classes import PpeClass
from ppegate.dataset import Annotation, ClassStats, Manifest
from ppegate.detector import Detection
from ppegate.geometry import BoundingBox, iou


class EvaluationError(ValueError):
    pass


@dataclass(frozen=True)
class GroundTruth:
    cls: PpeClass
    box: BoundingBox


@dataclass(frozen=True)
class ScoredMatch:
    confidence: float
    is_true_positive: bool
    cls: PpeClass
    iou: float = 0.0


@dataclass(frozen=True)
class ClassReport:
    cls: PpeClass
    precision: Optional[float]  # None when there were no detections
    recall: Optional[float]  # None when there is no ground truth
    average_precision: Optional[float]
    n_ground_truth: int
    n_detections: int
    tp: int = 0
    fp: int = 0

    @property
    def fn(self) -> int:
        return self.n_ground_truth - self.tp


@dataclass
class EvalReport:
    classes: Dict[PpeClass, ClassReport]
    mAP: Optional[float]
    iou_threshold: float = 0.5
    confidence_threshold: float = 0.0
    dataset_id: str = ""

    @classmethod
    def from_class_reports(cls, reports: Iterable[ClassReport], **meta) -> "EvalReport":
        by_cls = {r.cls: r for r in reports}
        aps = [r.average_precision for r in by_cls.values() if r.n_ground_truth > 0]
        return cls(by_cls, mean_ap(aps) if aps else None, **meta)

    def to_json(self) -> dict:
        return {
            "classes": {
                c.slug: {
                    "precision": r.precision,
                    "recall": r.recall,
                    "ap": r.average_precision,
                    "n_ground_truth": r.n_ground_truth,
                    "n_detections": r.n_detections,
                    "tp": r.tp,
                    "fp": r.fp,
                }
                for c, r in sorted(self.classes.items())
            },
            "mAP": self.mAP,
            "iou_threshold": self.iou_threshold,
            "confidence_threshold": self.confidence_threshold,
            "dataset_id": self.dataset_id,
        }


def _sort_key(d: Detection):
    return (-d.confidence, d.box.x_min, d.box.y_min)


def match_detections(
    preds: Sequence[Detection],
    gts: Sequence[GroundTruth],
    iou_threshold: float = 0.5,
) -> Tuple[List[ScoredMatch], Dict[PpeClass, int]]:
    """Greedy one-to-one matching within a single image.

    Predictions are visited by confidence (ties: x_min, then y_min). Each one
    takes the still-unmatched same-class ground truth of highest IoU if that
    IoU reaches the threshold; otherwise it is a false positive. Returns the
    matches in visiting order and the false-negative count per class.
    """
    matched = [False] * len(gts)
    out: List[ScoredMatch] = []
    for d in sorted((p for p in preds if isinstance(p.label, PpeClass)), key=_sort_key):
        best, best_iou = -1, -1.0
        for j, g in enumerate(gts):
            if matched[j] or g.cls != d.label:
                continue
            v = iou(d.box, g.box)
            if v > best_iou:
                best, best_iou = j, v
        if best >= 0 and best_iou >= iou_threshold:
            matched[best] = True
            out.append(ScoredMatch(d.confidence, True, d.label, best_iou))
        else:
            out.append(ScoredMatch(d.confidence, False, d.label, max(best_iou, 0.0)))
    fn = {c: 0 for c in PpeClass}
    for j, g in enumerate(gts):
        if not matched[j]:
            fn[g.cls] += 1
    return out, fn


def precision_recall(tp: int, fp: int, fn: int) -> Tuple[Optional[float], Optional[float]]:
    if min(tp, fp, fn) < 0:
        raise EvaluationError("counts must be non-negative")
    precision = tp / (tp + fp) if tp + fp else None
    recall = tp / (tp + fn) if tp + fn else None
    return precision, recall


def average_precision(matches: Sequence[ScoredMatch], n_gt: int, presorted: bool = False) -> Optional[float]:
    """Area under the precision envelope over recall (all-point interpolation).

    ``matches`` must come from one matching pass; unless ``presorted`` they are
    stably sorted by confidence descending.
    """
    if n_gt < 0:
        raise EvaluationError("n_gt must be non-negative")
    if n_gt == 0:
        return None
    seq = list(matches) if presorted else sorted(matches, key=lambda m: -m.confidence)
    tp = fp = 0
    recalls, precisions = [], []
    for m in seq:
        if m.is_true_positive:
            tp += 1
        else:
            fp += 1
        recalls.append(tp / n_gt)
        precisions.append(tp / (tp + fp))
    if tp == 0:
        return 0.0
    # right-to-left running maximum gives the envelope
    for i in range(len(precisions) - 2, -1, -1):
        precisions[i] = max(precisions[i], precisions[i + 1])
    ap, prev_r = 0.0, 0.0
    for r, p in zip(recalls, precisions):
        if r > prev_r:
            ap += (r - prev_r) * p
            prev_r = r
    return min(1.0, ap)


def mean_ap(class_aps: Iterable[Optional[float]]) -> float:
    values = [v for v in class_aps if v is not None]
    if not values:
        raise EvaluationError("mAP needs at least one defined class AP")
    return math.fsum(values) / len(values)


def ground_truths(record_annotations: Iterable[Annotation], width: int, height: int) -> List[GroundTruth]:
    return [GroundTruth(a.cls, a.to_pixel(width, height)) for a in record_annotations]


def evaluate(
    detections: Mapping[str, Sequence[Detection]],
    manifest: Manifest,
    iou_threshold: float = 0.5,
    confidence_threshold: float = 0.0,
    dataset_id: str = "",
) -> EvalReport:
    """Aggregate per-image matching into per-class P/R, AP and mAP.

    AP uses every detection; precision and recall are the operating point at
    ``confidence_threshold``. Since matching is greedy by confidence, the
    above-threshold prefix is matched exactly as if the rest were absent.
    """
    records = manifest.by_id()
    unknown = sorted(set(detections) - set(records))
    if unknown:
        raise EvaluationError(f"detections for unknown image ids: {', '.join(unknown)}")

    per_class: Dict[PpeClass, List[Tuple[Tuple, ScoredMatch]]] = {c: [] for c in PpeClass}
    n_gt = {c: 0 for c in PpeClass}
    for image_id in sorted(records):
        rec = records[image_id]
        gts = ground_truths(rec.annotations, rec.width, rec.height)
        for g in gts:
            n_gt[g.cls] += 1
        preds = detections.get(image_id, ())
        matches, _ = match_detections(preds, gts, iou_threshold)
        ordered = sorted((p for p in preds if isinstance(p.label, PpeClass)), key=_sort_key)
        for d, m in zip(ordered, matches):
            per_class[m.cls].append(((-d.confidence, d.box.x_min, d.box.y_min, image_id), m))

    reports = []
    for c in PpeClass:
        items = [m for _, m in sorted(per_class[c], key=lambda t: t[0])]
        at_thr = [m for m in items if m.confidence >= confidence_threshold]
        tp = sum(m.is_true_positive for m in at_thr)
        fp = len(at_thr) - tp
        p, r = precision_recall(tp, fp, n_gt[c] - tp)
        ap = average_precision(items, n_gt[c], presorted=True)
        reports.append(ClassReport(c, p, r, ap, n_gt[c], len(items), tp, fp))
    return EvalReport.from_class_reports(
        reports,
        iou_threshold=iou_threshold,
        confidence_threshold=confidence_threshold,
        dataset_id=dataset_id,
    )


def pct(value: Optional[float]) -> str:
    """Integer percent, round half up; ``–`` when undefined."""
    if value is None:
        return "–"
    return f"{math.floor(value * 100 + 0.5 + 1e-9)}%"


Reports = Union[EvalReport, Mapping[str, EvalReport]]


def _columns(reports: Reports) -> List[Tuple[str, EvalReport]]:
    if isinstance(reports, EvalReport):
        return [(reports.dataset_id or "result", reports)]
    return list(reports.items())


def _stats_cells(stats: Optional[ClassStats], c: PpeClass) -> List[str]:
    if stats is None:
        return []
    return [str(stats.occurrences[c]), f"{stats.percentage[c]}%"]


def render_report(reports: Reports, layout: str = "table45", stats: Optional[ClassStats] = None) -> str:
    """Render one or more reports (keyed by column label, e.g. distance).

    ``table2``: precision/recall per column. ``table45``: precision/recall and
    AP per column, with a closing mAP row. ``csv``: one row per class and
    column plus an mAP row per column.
    """
    cols = _columns(reports)
    if layout == "csv":
        return _render_csv(cols)
    if layout not in ("table2", "table45"):
        raise EvaluationError(f"unknown layout {layout!r}")
    with_ap = layout == "table45"
    header = ["Object"]
    for label, _ in cols:
        header.append(f"{label} Prec/Rec")
        if with_ap:
            header.append(f"{label} AP")
    if stats is not None:
        header += ["Occurrences", "Percentage"]
    rows = [header]
    for c in PpeClass:
        row = [c.title]
        for _, rep in cols:
            r = rep.classes.get(c)
            row.append(f"{pct(r.precision if r else None)} / {pct(r.recall if r else None)}")
            if with_ap:
                row.append(pct(r.average_precision if r else None))
        row += _stats_cells(stats, c)
        rows.append(row)
    if with_ap:
        last = [""]
        for _, rep in cols:
            last += ["", f"mAP: {pct(rep.mAP)}"]
        if stats is not None:
            last += ["", ""]
        rows.append(last)
    out = ["| " + " | ".join(rows[0]) + " |", "|" + "---|" * len(rows[0])]
    out += ["| " + " | ".join(r) + " |" for r in rows[1:]]
    return "\n".join(out) + "\n"


def _fmt(v: Optional[float]) -> str:
    return "" if v is None else repr(float(v))


def _render_csv(cols: List[Tuple[str, EvalReport]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["column", "class", "precision", "recall", "ap", "n_ground_truth", "n_detections"])
    for label, rep in cols:
        for c in PpeClass:
            r = rep.classes.get(c)
            if r is None:
                continue
            w.writerow(
                [label, c.slug, _fmt(r.precision), _fmt(r.recall), _fmt(r.average_precision),
                 r.n_ground_truth, r.n_detections]
            )
        w.writerow([label, "mAP", "", "", _fmt(rep.mAP), "", ""])
    return buf.getvalue()


def report_from_aps(aps: Sequence[Optional[float]], dataset_id: str = "") -> EvalReport:
    """Report holding only per-class APs (given in class order), such as a reference AP column."""
    reports = [
        ClassReport(c, None, None, ap, 1 if ap is not None else 0, 0)
        for c, ap in zip(PpeClass, aps)
    ]
    return EvalReport.from_class_reports(reports, dataset_id=dataset_id)


__all__ = [
    "ClassReport",
    "EvalReport",
    "EvaluationError",
    "GroundTruth",
    "ScoredMatch",
    "average_precision",
    "evaluate",
    "match_detections",
    "mean_ap",
    "precision_recall",
    "render_report",
    "report_from_aps",
]
