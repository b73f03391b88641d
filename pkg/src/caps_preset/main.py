"""Command-line entry point for CAPS."""

import argparse
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path
from typing import Iterator, List, Optional, Sequence

import pandas as pd

from .config import RunConfig, apply_overrides, build_run_config, load_config
from .evaluation import compare_runs
from .harness import PerfectPredictor, build_dataset
from .model_store import read_model_set, save_model_set
from .orchestrator import (
    SEGMENT_COLUMNS,
    Predictor,
    analyze_segment,
    check_coverage,
    plan_segment,
    run_ladder,
)
from .selector import preset_name
from .timing_model import evaluate_model_set, load_dataset_csv, train_model_set
from .utils import CapsError, ConfigurationError, InputError, run_log, setup_logging
from .yuv import Segment, iter_segments, synthetic_segment

logger = logging.getLogger("CAPS")

SYNTHETIC_PREFIX = "synthetic:"
SYNTHETIC_SIZE = 128


# =============================================================================
# Inputs
# =============================================================================


def _synthetic_segments(spec: str, cfg: RunConfig, frames: int) -> Iterator[Segment]:
    try:
        count = int(spec[len(SYNTHETIC_PREFIX):])
    except ValueError as e:
        raise InputError(f"Expected synthetic:N, got '{spec}'") from e
    if count < 1:
        raise InputError(f"Synthetic segment count must be positive, got {count}")
    for seed in range(count):
        yield synthetic_segment(
            seed,
            width=SYNTHETIC_SIZE,
            height=SYNTHETIC_SIZE,
            frames=frames,
            bit_depth=cfg.analyzer.bit_depth,
            framerate=cfg.ladder.framerate,
        )


def iter_inputs(inputs: Sequence[str], cfg: RunConfig, args: argparse.Namespace) -> Iterator[Segment]:
    """Segments of every input, with ids made unique across files."""
    prefix_ids = len(inputs) > 1
    segment_frames = getattr(args, "segment_frames", None) or cfg.ladder.segment_frames
    for spec in inputs:
        if spec.startswith(SYNTHETIC_PREFIX):
            segments = _synthetic_segments(spec, cfg, segment_frames)
            tag = spec.replace(":", "")
        else:
            if not os.path.exists(spec):
                raise InputError(f"Input not found: {spec}")
            segments = iter_segments(
                spec,
                segment_frames,
                raw=getattr(args, "raw", False),
                width=getattr(args, "width", None),
                height=getattr(args, "height", None),
                bit_depth=getattr(args, "bit_depth", None) or cfg.analyzer.bit_depth,
                framerate=cfg.ladder.framerate,
            )
            tag = Path(spec).stem
        for segment in segments:
            if prefix_ids:
                segment = replace(segment, segment_id=f"{tag}_{segment.segment_id}")
            yield segment


def _load_predictor(cfg: RunConfig, perfect: bool) -> Predictor:
    if perfect:
        if not cfg.backend.is_mock:
            raise ConfigurationError("--perfect-model only works with the mock backend")
        logger.info("Using perfect predictor over the mock time function")
        return PerfectPredictor(cfg.backend.mock, cfg.ladder.threads_per_instance, cfg.ladder.preset_range)
    if not cfg.run.model_path:
        raise ConfigurationError("No model file given (use --models or run.modelPath)")
    models = read_model_set(cfg.run.model_path)
    if models.framerate is not None and models.framerate != cfg.ladder.framerate:
        logger.warning(f"Models were trained for {models.framerate} fps, ladder runs at {cfg.ladder.framerate} fps")
    if models.threads is not None and models.threads != cfg.ladder.threads_per_instance:
        logger.warning(
            f"Models were trained with {models.threads} threads, ladder uses {cfg.ladder.threads_per_instance}"
        )
    return models


# =============================================================================
# Commands
# =============================================================================


def cmd_analyze(args: argparse.Namespace, cfg: RunConfig) -> int:
    analyzer = replace(cfg.analyzer, block_size=args.block_size) if args.block_size else cfg.analyzer
    rows = []
    for segment in iter_inputs([args.input], cfg, args):
        features, _ = analyze_segment(segment, analyzer, cfg.analyzer_workers)
        rows.append(features.to_row(segment.segment_id, segment.width, segment.height))
    df = pd.DataFrame(rows, columns=SEGMENT_COLUMNS)
    if args.output:
        df.to_csv(args.output, index=False)
        logger.info(f"Wrote features of {len(df)} segments to {args.output}")
    else:
        print(df.to_csv(index=False), end="")
    return 0


def cmd_dataset(args: argparse.Namespace, cfg: RunConfig) -> int:
    analyzed = []
    for segment in iter_inputs(args.inputs, cfg, args):
        features, _ = analyze_segment(segment, cfg.analyzer, cfg.analyzer_workers)
        analyzed.append((segment, features))
    build_dataset(
        analyzed,
        cfg.ladder,
        cfg.ladder.presets,
        cfg.backend,
        args.output,
        jobs=args.jobs,
        retry_failed=args.retry_failed,
    )
    return 0


def cmd_train(args: argparse.Namespace, cfg: RunConfig) -> int:
    dataset = load_dataset_csv(args.dataset)
    holdout = args.holdout if args.holdout is not None else cfg.holdout
    train, test = dataset.split(holdout, seed=cfg.hyperparams.seed)
    if len(test):
        logger.info(f"Holding out {len(test)} of {len(dataset)} rows for accuracy")

    models = train_model_set(
        train,
        cfg.ladder.widths,
        cfg.ladder.preset_range,
        cfg.hyperparams,
        jobs=args.jobs or cfg.training_jobs,
        framerate=cfg.ladder.framerate,
        threads=cfg.ladder.threads_per_instance,
    )
    save_model_set(models, args.output)

    accuracy = evaluate_model_set(models, test if len(test) else train)
    accuracy_path = str(Path(args.output).with_suffix("")) + ".accuracy.csv"
    accuracy.to_csv(accuracy_path, index=False)
    for rec in accuracy.itertuples(index=False):
        logger.info(f"p={rec.preset} ({preset_name(int(rec.preset))}): R²={rec.r2:.3f} MAE={rec.mae:.3f}s")
    logger.info(f"Accuracy report written to {accuracy_path}")
    return 0


def cmd_predict(args: argparse.Namespace, cfg: RunConfig) -> int:
    predictor = _load_predictor(cfg, args.perfect_model)
    check_coverage(predictor, cfg.ladder)
    rows = []
    for segment in iter_inputs([args.input], cfg, args):
        features, _ = analyze_segment(segment, cfg.analyzer, cfg.analyzer_workers)
        deadline = segment.frame_count / cfg.ladder.framerate
        for plan in plan_segment(features, deadline, cfg.ladder, predictor, segment.segment_id):
            rows.append(
                {
                    "segment_id": segment.segment_id,
                    "rung": plan.rung,
                    "width": plan.representation.width,
                    "bitrate_kbps": plan.representation.bitrate_kbps,
                    "preset": plan.decision.preset,
                    "preset_name": preset_name(plan.decision.preset),
                    "predicted_time": plan.decision.predicted_time,
                    "deadline_met": plan.decision.deadline_met,
                    "margin": plan.decision.margin,
                }
            )
    df = pd.DataFrame(rows)
    if args.output:
        df.to_csv(args.output, index=False)
        logger.info(f"Wrote {len(df)} decisions to {args.output}")
    else:
        print(df.to_string(index=False))
    return 0


def _run_dir(args: argparse.Namespace, cfg: RunConfig, name: str) -> str:
    return args.output or os.path.join(cfg.run.output_dir, name)


def cmd_encode_ladder(args: argparse.Namespace, cfg: RunConfig) -> int:
    predictor = _load_predictor(cfg, args.perfect_model)
    out_dir = _run_dir(args, cfg, "caps")
    with run_log(out_dir):
        _, summary = run_ladder(
            iter_inputs([args.input], cfg, args),
            cfg.ladder,
            cfg.backend,
            out_dir,
            models=predictor,
            analyzer=cfg.analyzer,
            workers=cfg.analyzer_workers,
            slots=cfg.run.slots,
            serial=cfg.run.serial,
            latency_budget=cfg.run.latency_budget_seconds,
        )
    print(summary.to_text(), end="")
    return 0


def cmd_encode_baseline(args: argparse.Namespace, cfg: RunConfig) -> int:
    out_dir = _run_dir(args, cfg, "baseline")
    with run_log(out_dir):
        _, summary = run_ladder(
            iter_inputs([args.input], cfg, args),
            cfg.ladder,
            cfg.backend,
            out_dir,
            analyzer=cfg.analyzer,
            workers=cfg.analyzer_workers,
            slots=cfg.run.slots,
            serial=cfg.run.serial,
        )
    print(summary.to_text(), end="")
    return 0


def cmd_evaluate(args: argparse.Namespace, cfg: RunConfig) -> int:
    out_dir = args.output or os.path.join(cfg.run.output_dir, "evaluation")
    with run_log(out_dir):
        report = compare_runs(args.baseline_dir, args.caps_dir, out_dir, args.vmaf_baseline, args.vmaf_caps)
    print(report.to_string(index=False))
    return 0


# =============================================================================
# Parser
# =============================================================================


def _add_input_options(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--raw", action="store_true", help="Input is headerless planar YUV 4:2:0")
    parser.add_argument("--width", type=int, help="Raw input width")
    parser.add_argument("--height", type=int, help="Raw input height")
    parser.add_argument("--bit-depth", type=int, choices=(8, 10), help="Raw input bit depth")
    parser.add_argument("--segment-frames", type=int, help="Frames per segment (n)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="caps",
        description="Content-adaptive encoder preset prediction for live ladders",
    )
    parser.add_argument("--config", help="Run config JSON (default: $CAPS_CONFIG or ./caps_config.json)")
    parser.add_argument("--threads", type=int, help="CPU threads per encoding instance (c)")
    parser.add_argument("--mock", action="store_true", help="Force the mock encoder backend")
    parser.add_argument("--output-dir", help="Base directory for run outputs (run.outputDir)")
    parser.add_argument(
        "--log-level", default="INFO", choices=("DEBUG", "INFO", "WARNING", "ERROR"), help="Log level"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("analyze", help="Compute E, h, L per segment")
    p.add_argument("input", help="Y4M/YUV file or synthetic:N")
    _add_input_options(p)
    p.add_argument("--block-size", type=int, help="DCT block size (w)")
    p.add_argument("-o", "--output", help="Output CSV (default: stdout)")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("dataset", help="Encode segments at every rung and preset and record times")
    p.add_argument("inputs", nargs="+", help="Y4M/YUV files or synthetic:N")
    _add_input_options(p)
    p.add_argument("-o", "--output", required=True, help="Dataset CSV")
    p.add_argument("--jobs", type=int, default=1, help="Concurrent encodes")
    p.add_argument("--retry-failed", action="store_true", help="Rerun jobs that failed before")
    p.set_defaults(func=cmd_dataset)

    p = sub.add_parser("train", help="Train the model set")
    p.add_argument("dataset", help="Dataset CSV")
    p.add_argument("-o", "--output", required=True, help="Model file")
    p.add_argument("--holdout", type=float, help="Fraction of segments held out for accuracy")
    p.add_argument("--jobs", type=int, help="Worker processes")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="Show per-rung preset decisions without encoding")
    p.add_argument("input", help="Y4M/YUV file or synthetic:N")
    _add_input_options(p)
    p.add_argument("--models", help="Model file")
    p.add_argument("--perfect-model", action="store_true", help="Predict with the mock time function")
    p.add_argument("-o", "--output", help="Output CSV (default: stdout)")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("encode-ladder", help="Encode the ladder with predicted presets")
    p.add_argument("input", help="Y4M/YUV file or synthetic:N")
    _add_input_options(p)
    p.add_argument("--models", help="Model file")
    p.add_argument("--perfect-model", action="store_true", help="Predict with the mock time function")
    p.add_argument("--serial", action="store_true", default=None, help="Encode rungs one at a time")
    p.add_argument("--slots", type=int, help="Concurrent rung encodes")
    p.add_argument("-o", "--output", help="Run directory")
    p.set_defaults(func=cmd_encode_ladder)

    p = sub.add_parser("encode-baseline", help="Encode the ladder at the fastest preset")
    p.add_argument("input", help="Y4M/YUV file or synthetic:N")
    _add_input_options(p)
    p.add_argument("--serial", action="store_true", default=None, help="Encode rungs one at a time")
    p.add_argument("--slots", type=int, help="Concurrent rung encodes")
    p.add_argument("-o", "--output", help="Run directory")
    p.set_defaults(func=cmd_encode_baseline)

    p = sub.add_parser("evaluate", help="Compare a baseline run with a CAPS run")
    p.add_argument("baseline_dir", help="Baseline run directory")
    p.add_argument("caps_dir", help="CAPS run directory")
    p.add_argument("--vmaf-baseline", help="VMAF scores of the baseline encodes")
    p.add_argument("--vmaf-caps", help="VMAF scores of the CAPS encodes")
    p.add_argument("-o", "--output", help="Report directory")
    p.set_defaults(func=cmd_evaluate)

    return parser


def main(argv: Optional[List[str]] = None) -> int:
    """Main entry point for the caps command."""
    args = build_parser().parse_args(argv)
    setup_logging(level=getattr(logging, args.log_level))

    try:
        cfg = build_run_config(load_config(args.config))
        cfg = apply_overrides(
            cfg,
            threads=args.threads,
            mock=args.mock,
            serial=getattr(args, "serial", None),
            slots=getattr(args, "slots", None),
            output_dir=args.output_dir,
            model_path=getattr(args, "models", None),
        )
        return args.func(args, cfg)
    except CapsError as e:
        logger.error(f"❌ {e}")
        return 1
    except KeyboardInterrupt:
        logger.info("Interrupted by user")
        return 130


if __name__ == "__main__":
    sys.exit(main())
