"""``helmetkit`` command line: evaluate, evolve, sample, fuse, validate, report.

Exit codes: 0 success, 1 internal error, 2 input or usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path
from typing import Dict, List, Optional, Sequence

from . import __version__
from .annotations import (
    CLASS_IDS,
    CLASS_NAMES,
    FrameGeometry,
    ParseError,
    class_histogram,
    class_id_of,
    parse_detections,
    parse_ground_truth,
    serialize_ground_truth,
    validate,
)
from .fusion import METHODS, FusionConfig, ensemble_files
from .ga_evolve import (
    CommandEvaluator,
    EvolutionConfig,
    default_space,
    evolve,
    export_scatter,
    format_hyp,
    format_log,
    format_scatter,
    parse_log,
    parse_space,
)
from .metrics import evaluate
from .report import SUMMARY_FILE, comparison_table, parse_summary, write_report
from .sampling import (
    AugmentSpec,
    FrameRef,
    SamplingPlan,
    SplitSpec,
    Stage,
    discard_background,
    frame_of,
    near_duplicate_filter,
    oversample_plan,
    random_sample,
    read_similarity_file,
    records_in,
    split_train_val,
    undersample_plan,
    uniform_sample,
    write_manifest,
)

logger = logging.getLogger("helmetkit")

EXIT_OK, EXIT_INTERNAL, EXIT_INPUT = 0, 1, 2


class InputError(Exception):
    """Bad input files or arguments; reported with exit code 2."""


def _read(path) -> str:
    p = Path(path)
    if not p.is_file():
        raise InputError(f"no such file: {p}")
    return p.read_text(encoding="utf-8")


def _parse_file(parser, path, geometry, mode):
    try:
        return parser(_read(path), geometry, mode)
    except ParseError as exc:
        raise InputError(str(exc.with_path(str(path)))) from None


def parse_id_set(text: str) -> set:
    """``"1-90,100"`` -> {1, ..., 90, 100}."""
    out = set()
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        if "-" in part:
            lo, hi = part.split("-", 1)
            out.update(range(int(lo), int(hi) + 1))
        else:
            out.add(int(part))
    return out


def _frame_size(text: str) -> FrameGeometry:
    try:
        w, h = text.lower().split("x")
        return FrameGeometry(int(w), int(h))
    except ValueError:
        raise argparse.ArgumentTypeError(f"frame size must look like 1920x1080, got {text!r}") from None


def _write_manifest(out: Path, args, counts: Dict, started: float):
    config = {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items() if k != "func"}
    for k, v in config.items():
        if isinstance(v, FrameGeometry):
            config[k] = f"{v.width}x{v.height}"
    manifest = {
        "tool": "helmetkit",
        "version": __version__,
        "command": args.command,
        "config": config,
        "counts": counts,
        "timing_seconds": round(time.perf_counter() - started, 3),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n")


def cmd_evaluate(args) -> int:
    started = time.perf_counter()
    mode = "strict" if args.strict else "lenient"
    gts = _parse_file(parse_ground_truth, args.gt, args.frame_size, mode)
    dets = _parse_file(parse_detections, args.det, args.frame_size, mode)
    report = evaluate(gts, dets, report_confidence=args.conf, iou_threshold=args.iou, jobs=args.jobs)
    out = Path(args.out)
    written = write_report(report, out)
    _write_manifest(out, args, {"ground_truth": len(gts), "detections": len(dets), "files": len(written) + 1}, started)
    sys.stdout.write((out / SUMMARY_FILE).read_text())
    return EXIT_OK


def cmd_evolve(args) -> int:
    started = time.perf_counter()
    space = parse_space(_read(args.space)) if args.space else default_space()
    config = EvolutionConfig(
        generations=args.generations,
        population_per_generation=args.population,
        parent_pool=args.pool,
        mutation_probability=args.prob,
        mutation_sigma=args.sigma,
        seed=args.seed,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    log_path = out / "evolve_log.csv"
    previous = parse_log(log_path.read_text()) if args.resume and log_path.exists() else None
    evaluator = CommandEvaluator(args.evaluator_cmd, out / "candidates", timeout=args.timeout)

    def checkpoint(log):
        log_path.write_text(format_log(log, space))

    best, log = evolve(space, config, evaluator, jobs=args.jobs, log=previous, on_generation=checkpoint)
    checkpoint(log)
    (out / "best.hyp").write_text(format_hyp(best.values))
    scatter, best_rows = format_scatter(export_scatter(log))
    (out / "scatter.csv").write_text(scatter)
    (out / "scatter_best.csv").write_text(best_rows)
    failed = sum(c.failed for c in log.candidates)
    _write_manifest(
        out,
        args,
        {"candidates": len(log.candidates), "failed": failed, "best_fitness": best.fitness, "best_generation": best.generation},
        started,
    )
    print(f"best fitness {best.fitness} (generation {best.generation}); {failed} failed evaluations")
    return EXIT_OK


def _universe(gts, args) -> List[FrameRef]:
    annotated = {frame_of(r) for r in gts}
    if args.frame_count is None:
        return sorted(annotated)
    videos = parse_id_set(args.videos) if args.videos else {r.video_id for r in gts}
    frames = {FrameRef(v, f) for v in videos for f in range(1, args.frame_count + 1)}
    return sorted(frames | annotated)


def cmd_sample(args) -> int:
    started = time.perf_counter()
    gts = _parse_file(parse_ground_truth, args.gt, args.frame_size, "lenient")
    annotated = {frame_of(r) for r in gts}
    frames = _universe(gts, args)
    stages: List[Stage] = []
    dropped: List = []

    def stage(name, before, after, note=""):
        stages.append(Stage(name, len(before), len(after), note))
        survivors = set(after)
        dropped.extend((f, name) for f in before if f not in survivors)
        return after

    if args.uniform_fps is not None:
        frames = stage("uniform", frames, uniform_sample(frames, args.fps, args.uniform_fps))
    if args.random_count is not None:
        frames = stage("random", frames, random_sample(frames, args.random_count, args.seed))
    if args.dup_threshold is not None:
        similarity = read_similarity_file(_read(args.similarity)) if args.similarity else None
        frames = stage("near_duplicate", frames, near_duplicate_filter(frames, args.dup_threshold, similarity, gts))
    if args.keep_background is not None:
        frames = stage("background", frames, discard_background(frames, annotated, args.keep_background, args.seed))

    if args.no_split:
        train, val = list(frames), []
    else:
        spec = SplitSpec(parse_id_set(args.train_videos), parse_id_set(args.val_videos))
        try:
            train, val = split_train_val(frames, spec)
        except ValueError as exc:
            raise InputError(str(exc)) from None
        stages.append(Stage("split", len(frames), len(train) + len(val), f"train {len(train)} val {len(val)}"))

    train_records = records_in(gts, train)
    plan = SamplingPlan([], seed=args.seed)
    if args.undersample_cap:
        caps = {}
        for item in args.undersample_cap.split(","):
            name, cap = item.split("=")
            caps[int(name) if name.strip().isdigit() else class_id_of(name.strip())] = int(cap)
        under = undersample_plan(train_records, caps, args.seed, frames=train)
        train = stage("undersample", train, under.kept_frames)
        train_records = records_in(gts, train)
    if args.oversample:
        minority = None
        if args.minority:
            minority = {int(c) if c.strip().isdigit() else class_id_of(c.strip()) for c in args.minority.split(",")}
        specs = [AugmentSpec.parse(s) for s in args.augment.split(",")]
        over = oversample_plan(train_records, minority=minority, specs=specs, seed=args.seed, geometry=args.frame_size)
        plan.augmented = over.augmented
        stages.extend(over.provenance)

    kept = set(train) | set(val)
    plan.kept_frames = sorted(kept)
    plan.dropped = dropped
    plan.provenance = stages

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "kept_gt.txt").write_text(serialize_ground_truth(records_in(gts, kept)))
    (out / "train_gt.txt").write_text(serialize_ground_truth(records_in(gts, train)))
    (out / "val_gt.txt").write_text(serialize_ground_truth(records_in(gts, val)))
    (out / "augmented_gt.txt").write_text(serialize_ground_truth(plan.augmented_records()))
    (out / "plan.manifest").write_text(write_manifest(plan))
    rows = ["stage,before,after,dropped"] + [f"{s.name},{s.before},{s.after},{s.dropped}" for s in stages]
    (out / "stage_counts.csv").write_text("\n".join(rows) + "\n")
    hist = class_histogram(records_in(gts, train) + plan.augmented_records())
    counts = {
        "input_frames": len(_universe(gts, args)),
        "kept_frames": len(kept),
        "train_frames": len(train),
        "val_frames": len(val),
        "augmented_frames": len(plan.augmented),
        "stages": [vars(s) for s in stages],
        "train_histogram": {CLASS_NAMES[c - 1]: hist[c] for c in CLASS_IDS},
    }
    _write_manifest(out, args, counts, started)
    for s in stages:
        print(f"{s.name}: {s.before} -> {s.after}" + (f" ({s.note})" if s.note else ""))
    return EXIT_OK


def cmd_fuse(args) -> int:
    started = time.perf_counter()
    for p in args.input:
        if not Path(p).is_file():
            raise InputError(f"no such file: {p}")
    config = FusionConfig(args.method, args.cluster_iou, args.confidence_floor, not args.no_count_scaling)
    weights = [float(w) for w in args.weights.split(",")] if args.weights else None
    try:
        text = ensemble_files(args.input, config, args.frame_size, weights)
    except ParseError as exc:
        raise InputError(str(exc)) from None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "fused.txt").write_text(text)
    _write_manifest(out, args, {"inputs": len(args.input), "fused_detections": text.count("\n")}, started)
    return EXIT_OK


def cmd_validate(args) -> int:
    if bool(args.gt) == bool(args.det):
        raise InputError("give exactly one of --gt or --det")
    try:
        if args.gt:
            records = parse_ground_truth(_read(args.gt), args.frame_size, "raw")
        else:
            records = parse_detections(_read(args.det), args.frame_size, "raw")
    except ParseError as exc:
        raise InputError(str(exc.with_path(str(args.gt or args.det)))) from None
    report = validate(records, args.frame_size)
    text = report.render()
    sys.stdout.write(text)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "validation.txt").write_text(text)
    return EXIT_OK if report.ok else EXIT_INPUT


def cmd_report(args) -> int:
    labels = list(args.label or [])
    runs = []
    for i, path in enumerate(args.input):
        p = Path(path)
        summary_path = p / SUMMARY_FILE if p.is_dir() else p
        summary = parse_summary(_read(summary_path))
        label = labels[i] if i < len(labels) else (p.name if p.is_dir() else p.parent.name)
        runs.append((label, summary))
    table = comparison_table(runs)
    sys.stdout.write(table)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.txt").write_text(table)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="helmetkit", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_required=True):
        p.add_argument("--out", required=out_required, help="output directory")
        p.add_argument("--frame-size", type=_frame_size, default=FrameGeometry(), help="WIDTHxHEIGHT (default 1920x1080)")

    p = sub.add_parser("evaluate", help="score detections against ground truth")
    p.add_argument("--gt", required=True)
    p.add_argument("--det", required=True)
    p.add_argument("--iou", type=float, default=0.5, help="IoU for precision/recall/F1 and the confusion matrix")
    p.add_argument("--conf", type=float, default=0.25, help="confidence cutoff for the reported precision/recall")
    p.add_argument("--strict", action="store_true", help="reject out-of-frame boxes instead of clipping")
    p.add_argument("--jobs", type=int, default=1)
    common(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("evolve", help="genetic hyperparameter search")
    p.add_argument("--space", help="space file (default: built-in YOLOv5 space)")
    p.add_argument("--evaluator-cmd", required=True, help="command template using {hyp}, {workdir}, {metrics}")
    p.add_argument("--generations", type=int, default=200)
    p.add_argument("--population", type=int, default=1)
    p.add_argument("--pool", type=int, default=5)
    p.add_argument("--prob", type=float, default=0.8)
    p.add_argument("--sigma", type=float, default=0.2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--timeout", type=float, default=None, help="seconds per evaluator run")
    p.add_argument("--resume", action="store_true", help="continue from OUT/evolve_log.csv")
    common(p)
    p.set_defaults(func=cmd_evolve)

    p = sub.add_parser("sample", help="frame selection, split and class balancing")
    p.add_argument("--gt", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--frame-count", type=int, help="frames per video; enables background frames")
    p.add_argument("--videos", help="video ids for --frame-count, e.g. 1-100 (default: videos in GT)")
    p.add_argument("--fps", type=float, default=10.0)
    p.add_argument("--uniform-fps", type=float)
    p.add_argument("--random-count", type=int)
    p.add_argument("--dup-threshold", type=float)
    p.add_argument("--similarity", help="'video frame_a frame_b similarity' file")
    p.add_argument("--keep-background", type=float, help="fraction of background frames kept, e.g. 0.05")
    p.add_argument("--train-videos", default="1-90,100")
    p.add_argument("--val-videos", default="91-99")
    p.add_argument("--no-split", action="store_true")
    p.add_argument("--oversample", action="store_true")
    p.add_argument("--minority", help="comma list of class names or ids (default: < 20%% of largest class)")
    p.add_argument("--augment", default="flip,rot15,rot-15")
    p.add_argument("--undersample-cap", help="class=cap pairs, e.g. motorbike=20000,DHelmet=15000")
    common(p)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("fuse", help="ensemble detection files")
    p.add_argument("--input", action="append", required=True)
    p.add_argument("--method", choices=METHODS, default="weighted_fusion")
    p.add_argument("--cluster-iou", type=float, default=0.55)
    p.add_argument("--confidence-floor", type=float, default=0.001)
    p.add_argument("--no-count-scaling", action="store_true")
    p.add_argument("--weights", help="comma list, one per --input")
    common(p)
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser("validate", help="report annotation problems")
    p.add_argument("--gt")
    p.add_argument("--det")
    common(p, out_required=False)
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("report", help="compare stored evaluation runs")
    p.add_argument("--input", action="append", required=True, help="run directory or summary file")
    p.add_argument("--label", action="append")
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if isinstance(exc.code, int) else EXIT_INPUT
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (InputError, ParseError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except Exception as exc:  # stable contract: anything unexpected is exit 1
        logger.exception("internal error")
        print(f"internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
