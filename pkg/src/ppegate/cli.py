"""``ppegate`` command line.

Exit codes: 0 success, 1 internal error, 2 usage or input error.
"""

from __future__ import annotations

import argparse
import json
import logging
import statistics
import sys
import time
from dataclasses import replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence

from ppegate import augment as aug
from ppegate.classes import PpeClass
from ppegate.config import ConfigError, load_config
from ppegate.dataset import Manifest, class_stats, load_manifest, render_stats
from ppegate.detector import (
    BackendError,
    ConfigurationError,
    DetectorConfig,
    FixtureFormatError,
    Frame,
    detect,
    load_backend,
    parse_detection_lines,
)
from ppegate.evaluation import EvaluationError, evaluate, render_report
from ppegate.pipeline import Pipeline, PipelineConfig

log = logging.getLogger("ppegate")

FRAME_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp")


class UsageError(Exception):
    """Bad input from the user; exit code 2."""


def _emit(args, doc: dict, text: str) -> None:
    if args.json:
        sys.stdout.write(json.dumps(doc, sort_keys=True) + "\n")
    else:
        sys.stdout.write(text if text.endswith("\n") else text + "\n")


def _load_manifest(path: str) -> Manifest:
    p = Path(path)
    if p.is_dir():
        return load_manifest(p)
    if p.is_file():
        try:
            return Manifest.load(p)
        except (ValueError, KeyError) as exc:
            raise UsageError(f"bad manifest {p}: {exc}") from exc
    raise UsageError(f"manifest not found: {p}")


def _counts_line(counts: Dict[PpeClass, int]) -> str:
    return " ".join(f"{c.slug}={counts[c]}" for c in PpeClass)


# --- commands ---------------------------------------------------------------


def cmd_stats(args) -> int:
    manifest = _load_manifest(args.manifest)
    stats = class_stats(manifest)
    if stats.empty:
        log.warning("no annotations in manifest (%d images)", len(manifest))
    text = render_stats(stats) + f"\nimages: {stats.n_images} (negative: {stats.n_negative})\n"
    _emit(args, stats.to_json(), text)
    return 0


def cmd_augment(args) -> int:
    try:
        recipe = aug.load_recipe(args.recipe)
    except (aug.AugmentError, ValueError) as exc:
        raise UsageError(str(exc)) from exc
    manifest = _load_manifest(args.manifest)
    before = class_stats(manifest)
    projection = aug.project_occurrences(before, recipe)
    doc = {
        "recipe": recipe.name,
        "before": {c.slug: projection.before[c] for c in PpeClass},
        "projected": {c.slug: projection.after[c] for c in PpeClass},
        "projected_percentage": {c.slug: v for c, v in projection.after_stats().percentage.items()},
    }
    lines = [
        f"recipe {recipe.name}: {len(recipe.entries)} entries, {recipe.image_count} images",
        f"before:    {_counts_line(projection.before)}",
        f"projected: {_counts_line(projection.after)}",
    ]
    if not args.dry_run:
        if not args.out:
            raise UsageError("--out is required unless --dry-run is given")
        out = Path(args.out)
        try:
            out.mkdir(parents=True, exist_ok=True)
            probe = out / ".write-test"
            probe.write_text("")
            probe.unlink()
        except OSError as exc:
            raise UsageError(f"output directory not writable: {out} ({exc})") from exc
        assignments, warnings = aug.assign_recipe(manifest, recipe)
        for w in warnings:
            log.warning(w)
        expanded = aug.expand_dataset(manifest, assignments, out / "images", workers=args.workers)
        expanded.save(out / "manifest.json")
        after = class_stats(expanded)
        doc["after"] = {c.slug: after.occurrences[c] for c in PpeClass}
        doc["images"] = len(expanded)
        doc["warnings"] = warnings
        lines.append(f"after:     {_counts_line(after.occurrences)}")
        lines.append(f"wrote {len(expanded)} records to {out / 'manifest.json'}")
    _emit(args, doc, "\n".join(lines))
    return 0


def _read_detections(spec: str):
    label, sep, path = spec.partition("=")
    if not sep:
        label, path = Path(spec).stem, spec
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"detections file not found: {p}")
    try:
        return label, parse_detection_lines(p.read_text(encoding="utf-8"))
    except FixtureFormatError as exc:
        raise UsageError(f"{p}: {exc}") from exc


def cmd_evaluate(args) -> int:
    manifest = _load_manifest(args.manifest)
    reports = {}
    for spec in args.detections:
        label, dets = _read_detections(spec)
        try:
            reports[label] = evaluate(dets, manifest, args.iou, args.conf, dataset_id=label)
        except EvaluationError as exc:
            raise UsageError(str(exc)) from exc
    stats = class_stats(manifest) if args.with_stats else None
    text = render_report(reports, args.layout, stats)
    _emit(args, {k: r.to_json() for k, r in reports.items()}, text)
    return 0


def _pipeline_config(args) -> PipelineConfig:
    try:
        return load_config(args.config).pipeline
    except ConfigError as exc:
        raise UsageError(str(exc)) from exc


def _build_pipeline(config: PipelineConfig) -> Pipeline:
    try:
        return Pipeline.from_config(config)
    except (BackendError, ConfigurationError, FixtureFormatError, OSError, ValueError) as exc:
        raise UsageError(f"cannot load backends: {exc}") from exc


def _read_frame(path: Path) -> Frame:
    return Frame(path.stem, aug.read_image(path))


def _frame_paths(directory: str) -> List[Path]:
    d = Path(directory)
    if not d.is_dir():
        raise UsageError(f"frames directory not found: {d}")
    return sorted(p for p in d.iterdir() if p.suffix.lower() in FRAME_SUFFIXES)


def cmd_detect(args) -> int:
    cfg = _pipeline_config(args).detector if args.config else DetectorConfig()
    overrides = {}
    if args.conf is not None:
        overrides["confidence_threshold"] = args.conf
    if args.nms is not None:
        overrides["nms_iou_threshold"] = args.nms
    if args.input_size is not None:
        overrides["input_size"] = args.input_size
    try:
        cfg = replace(cfg, **overrides)
        backend = load_backend(args.backend)
    except (BackendError, ConfigurationError, FixtureFormatError, OSError, ValueError) as exc:
        raise UsageError(f"cannot load backend: {exc}") from exc
    path = Path(args.image)
    if not path.is_file():
        raise UsageError(f"image not found: {path}")
    frame = _read_frame(path)
    dets = detect(backend, frame, cfg)
    doc = {"image_id": frame.image_id, "detections": [d.to_json() for d in dets]}
    text = "\n".join(
        f"{d.to_json()['class']} {d.confidence:.3f} " + " ".join(f"{v:.1f}" for v in d.box.as_tuple())
        for d in dets
    ) or "(no detections)"
    _emit(args, doc, text)
    return 0


def cmd_run(args) -> int:
    config = _pipeline_config(args)
    if args.fusion:
        n, k = args.fusion
        config = replace(config, fusion_n=n, fusion_k=k)
    pipeline = _build_pipeline(config)
    results = []
    lines = []
    for path in _frame_paths(args.frames):
        r = pipeline.process(_read_frame(path))
        results.append(r)
        primary = r.primary
        single = primary.decision if primary else None
        fused = r.fused_decision
        lines.append(
            f"{r.image_id}: persons={len(r.persons)} "
            f"frame={'-' if single is None else _verdict(single)} "
            f"fused={'-' if fused is None else _verdict(fused)}"
        )
    final = results[-1].fused_decision if results else None
    lines.append(f"final fused compliance: {'-' if final is None else _verdict(final)}")
    doc = {"frames": [r.to_json() for r in results], "final": final.to_json() if final else None}
    _emit(args, doc, "\n".join(lines))
    return 0


def _verdict(decision) -> str:
    if decision.compliant:
        return "compliant"
    return "missing[" + ",".join(c.slug for c in sorted(decision.missing)) + "]"


def _bench_once(pipeline: Pipeline, blobs) -> float:
    start = time.perf_counter()
    for image_id, path in blobs:
        pipeline.process(Frame(image_id, aug.read_image(path)), pipeline.new_window())
    return len(blobs) / max(time.perf_counter() - start, 1e-9)


def run_bench(config: PipelineConfig, frame_paths: Sequence[Path], repeat: int = 5, warmup: int = 1) -> dict:
    """Median frames/sec with and without person cropping, plus PPE-stage pixels."""
    blobs = [(p.stem, p) for p in frame_paths]
    out = {}
    for name, crop in (("crop", True), ("no_crop", False)):
        pipeline = _build_pipeline(replace(config, crop=crop))
        for _ in range(warmup):
            _bench_once(pipeline, blobs)
        fps = [_bench_once(pipeline, blobs) for _ in range(repeat)]
        pixels = [
            pipeline.process(Frame(i, aug.read_image(p)), pipeline.new_window()).ppe_pixels for i, p in blobs
        ]
        out[name] = {
            "fps": statistics.median(fps),
            "fps_runs": fps,
            "ppe_pixels_per_frame": statistics.fmean(pixels) if pixels else 0.0,
        }
    out["fps_ratio"] = out["crop"]["fps"] / out["no_crop"]["fps"] if out["no_crop"]["fps"] else None
    out["frames"] = len(blobs)
    out["repeat"] = repeat
    return out


def cmd_bench(args) -> int:
    config = _pipeline_config(args)
    paths = _frame_paths(args.frames)
    if not paths:
        raise UsageError(f"no frames in {args.frames}")
    if args.repeat < 1:
        raise UsageError("--repeat must be >= 1")
    res = run_bench(config, paths, args.repeat, args.warmup)
    text = "\n".join(
        [
            f"frames: {res['frames']}  repeats: {res['repeat']}",
            f"crop enabled:  {res['crop']['fps']:.2f} fps, {res['crop']['ppe_pixels_per_frame']:.0f} PPE px/frame",
            f"crop disabled: {res['no_crop']['fps']:.2f} fps, {res['no_crop']['ppe_pixels_per_frame']:.0f} PPE px/frame",
            f"ratio: {res['fps_ratio']:.2f}x" if res["fps_ratio"] else "ratio: -",
        ]
    )
    _emit(args, res, text)
    return 0


def cmd_serve(args) -> int:  # pragma: no cover - blocking
    from ppegate.service import serve

    try:
        config = load_config(args.config)
    except ConfigError as exc:
        raise UsageError(str(exc)) from exc
    if args.port is not None:
        config.server.port = args.port
    try:
        serve(config)
    except (BackendError, ConfigurationError, FixtureFormatError, OSError) as exc:
        raise UsageError(f"cannot start service: {exc}") from exc
    return 0


# --- parser ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ppegate", description="PPE compliance toolkit")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging on stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name: str, help: str, fn):
        p = sub.add_parser(name, help=help)
        p.add_argument("--config", help="YAML/JSON config file")
        p.add_argument("--json", action="store_true", help="print one JSON document")
        p.set_defaults(fn=fn)
        return p

    p = add("stats", "class occurrence statistics", cmd_stats)
    p.add_argument("--manifest", required=True, help="manifest JSON or dataset directory")

    p = add("augment", "expand a dataset with an augmentation recipe", cmd_augment)
    p.add_argument("--manifest", required=True)
    p.add_argument("--recipe", required=True, help="PHASE2, PHASE4_A, PHASE4_B or a recipe JSON file")
    p.add_argument("--out", help="output directory")
    p.add_argument("--dry-run", action="store_true", help="only print the occurrence projection")
    p.add_argument("--workers", type=int, default=1)

    p = add("evaluate", "precision/recall/AP report", cmd_evaluate)
    p.add_argument("--manifest", required=True)
    p.add_argument(
        "--detections", required=True, action="append", metavar="[LABEL=]PATH",
        help="detection dump; repeat for several report columns",
    )
    p.add_argument("--iou", type=float, default=0.5)
    p.add_argument("--conf", type=float, default=0.0, help="confidence for the P/R operating point")
    p.add_argument("--layout", choices=["table2", "table45", "csv"], default="table45")
    p.add_argument("--with-stats", action="store_true", help="append occurrence columns")

    p = add("detect", "run a detector on one image", cmd_detect)
    p.add_argument("--image", required=True)
    p.add_argument("--backend", required=True, help="fixture:PATH, model:PATH[,META] or fallback")
    p.add_argument("--conf", type=float)
    p.add_argument("--nms", type=float)
    p.add_argument("--input-size", type=int)

    p = add("run", "run the pipeline over a directory of frames", cmd_run)
    p.add_argument("--frames", required=True)
    p.add_argument("--fusion", type=int, nargs=2, metavar=("N", "K"))

    p = add("serve", "start the gate service", cmd_serve)
    p.add_argument("--port", type=int)

    p = add("bench", "frames/sec with and without person cropping", cmd_bench)
    p.add_argument("--frames", required=True)
    p.add_argument("--repeat", type=int, default=5)
    p.add_argument("--warmup", type=int, default=1)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.WARNING,
        stream=sys.stderr,
        format="%(levelname)s %(name)s: %(message)s",
    )
    needs_config = args.command in ("run", "bench", "serve")
    if needs_config and not args.config:
        parser.error(f"{args.command} requires --config")
    try:
        return args.fn(args)
    except UsageError as exc:
        print(f"ppegate {args.command}: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - top-level guard for the exit-code contract
        log.exception("internal error: %s", exc)
        return 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
