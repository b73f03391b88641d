"""Live-style encoding pipeline: analyze, predict, select, encode, report."""

import asyncio
import logging
import math
import os
import time
from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional, Protocol, Sequence, Tuple

import numpy as np
import pandas as pd

from .complexity import DEFAULT_BLOCK_SIZE, AnalyzerConfig, SegmentFeatures, segment_features
from .harness import EncodeJob, EncodeResult, EncoderBackend, run_job
from .ladder import LadderConfig, Representation
from .ledger import STATUS_OK
from .selector import PresetDecision, select_preset
from .timing_model import FeatureVector
from .utils import ConfigurationError
from .yuv import Segment

logger = logging.getLogger("CAPS")

DECISION_COLUMNS = [
    "segment_id", "rung", "width", "bitrate_kbps", "preset", "predicted_time",
    "deadline_met", "margin", "wall_time", "idle_time", "status", "output_bytes",
    "achieved_kbps", "psnr", "output",
]
SEGMENT_COLUMNS = ["segment_id", "E", "h", "L", "frames", "width", "height"]


class Predictor(Protocol):
    """Anything that maps a feature vector to per-preset encoding times."""

    @property
    def presets(self) -> range: ...

    def predict_all_presets(self, fv: FeatureVector, r: int) -> Dict[int, float]: ...


@dataclass(frozen=True)
class RungPlan:
    """Decision for one rung before encoding."""

    rung: str
    representation: Representation
    times: Dict[int, float]
    decision: PresetDecision


@dataclass(frozen=True)
class RungOutcome:
    """A rung's decision together with its measured encode."""

    rung: str
    representation: Representation
    decision: PresetDecision
    result: EncodeResult
    idle_time: float
    output: str


@dataclass(frozen=True)
class SegmentReport:
    """Per-segment outcome of a ladder encode.

    Attributes:
        segment_id: Segment identifier
        features: Complexity features at source resolution
        frames: Frames in the segment
        width: Source width
        height: Source height
        deadline: Target encoding time T in seconds
        outcomes: Per-rung decisions and measurements, in ladder order
        extraction_seconds: Feature extraction latency
        inference_seconds: Prediction and selection latency
    """

    segment_id: str
    features: SegmentFeatures
    frames: int
    width: int
    height: int
    deadline: float
    outcomes: Tuple[RungOutcome, ...]
    extraction_seconds: float = 0.0
    inference_seconds: float = 0.0

    @property
    def decisions(self) -> Tuple[PresetDecision, ...]:
        return tuple(o.decision for o in self.outcomes)

    @property
    def violations(self) -> int:
        """Rungs that failed or finished after the deadline."""
        return sum(1 for o in self.outcomes if not _delivered(o.result, self.deadline))

    @property
    def failures(self) -> int:
        return sum(1 for o in self.outcomes if not o.result.ok)

    @property
    def total_idle_time(self) -> float:
        return float(sum(o.idle_time for o in self.outcomes))

    @property
    def extraction_fps(self) -> Optional[float]:
        if self.extraction_seconds <= 0:
            return None
        return self.frames / self.extraction_seconds


def _delivered(result: EncodeResult, deadline: float) -> bool:
    return result.ok and result.wall_time <= deadline


def idle_time(result: EncodeResult, deadline: float) -> float:
    """Slack left before the deadline; a failed encode leaves none."""
    if not result.ok:
        return 0.0
    return max(0.0, deadline - result.wall_time)


def check_coverage(predictor: Predictor, ladder: LadderConfig) -> None:
    """Fail before any encode when the predictor cannot serve the ladder.

    Raises:
        ConfigurationError: If a ladder width or preset has no model
    """
    resolutions = getattr(predictor, "resolutions", None)
    if resolutions is not None:
        missing = [w for w in ladder.widths if w not in resolutions]
        if missing:
            raise ConfigurationError(
                f"No models for ladder widths {missing}; model set covers {list(resolutions)}"
            )
    available = set(predictor.presets)
    missing_presets = [p for p in ladder.presets if p not in available]
    if missing_presets:
        raise ConfigurationError(
            f"No models for presets {missing_presets}; model set covers "
            f"{min(available)}-{max(available)}"
        )


def analyze_segment(
    segment: Segment,
    analyzer: Optional[AnalyzerConfig] = None,
    workers: int = 1,
) -> Tuple[SegmentFeatures, float]:
    """Features of a segment and the seconds it took to compute them.

    The bit depth always comes from the segment; ``analyzer`` supplies the
    block size.
    """
    block_size = analyzer.block_size if analyzer is not None else DEFAULT_BLOCK_SIZE
    cfg = AnalyzerConfig(block_size=block_size, bit_depth=segment.bit_depth)
    start = time.perf_counter()
    features = segment_features(segment.frames, cfg, workers)
    elapsed = time.perf_counter() - start
    logger.info(
        f"[{segment.segment_id}] Analyzed {segment.frame_count} frames: "
        f"E={features.E:.4f} h={features.h:.4f} L={features.L:.4f}"
    )
    return features, elapsed


def plan_segment(
    features: SegmentFeatures,
    deadline: float,
    ladder: LadderConfig,
    predictor: Predictor,
    segment_id: str = "",
) -> List[RungPlan]:
    """Predict every preset for every rung and select one per rung."""
    plans = []
    for index, rep in enumerate(ladder.rungs):
        label = ladder.rung_label(index)
        fv = FeatureVector.build(features.E, features.h, features.L, rep.width, rep.bitrate_kbps)
        all_times = predictor.predict_all_presets(fv, rep.width)
        times = {p: all_times[p] for p in ladder.presets}
        logger.debug(f"[{segment_id}|r{label}] Predicted times: {times}")
        decision = select_preset(times, deadline)
        if not decision.deadline_met:
            logger.warning(
                f"[{segment_id}|r{label}] No preset meets T={deadline:.2f}s "
                f"(fastest predicted {decision.predicted_time:.2f}s), using p={decision.preset}"
            )
        plans.append(RungPlan(label, rep, times, decision))
    return plans


def _dispatch(jobs: Sequence[EncodeJob], backend: EncoderBackend, slots: int, serial: bool) -> List[EncodeResult]:
    if serial or slots == 1:
        return [run_job(job, backend, measure_cpu=True) for job in jobs]

    async def dispatch_all() -> List[EncodeResult]:
        semaphore = asyncio.Semaphore(slots)

        async def one(job: EncodeJob) -> EncodeResult:
            async with semaphore:
                logger.debug(f"[{job.label}] Dispatched")
                return await asyncio.to_thread(run_job, job, backend, False)

        return list(await asyncio.gather(*(one(job) for job in jobs)))

    return asyncio.run(dispatch_all())


def _output_path(output_dir: Optional[str], segment_id: str, rung: str) -> str:
    name = f"{segment_id}_r{rung}.hevc"
    return os.path.join(output_dir, "encodes", name) if output_dir else name


def _encode_plans(
    segment: Segment,
    features: SegmentFeatures,
    deadline: float,
    plans: Sequence[Tuple[str, Representation, int]],
    ladder: LadderConfig,
    backend: EncoderBackend,
    output_dir: Optional[str],
    slots: Optional[int],
    serial: bool,
) -> List[Tuple[EncodeJob, EncodeResult]]:
    jobs = [
        EncodeJob(
            segment=segment,
            representation=rep,
            preset=preset,
            threads=ladder.threads_per_instance,
            output=_output_path(output_dir, segment.segment_id, rung),
            features=features,
            deadline=deadline,
            rung=rung,
        )
        for rung, rep, preset in plans
    ]
    results = _dispatch(jobs, backend, slots or len(jobs), serial)
    for job, result in zip(jobs, results):
        if not result.ok:
            logger.warning(f"[{segment.segment_id}|r{job.rung}] Encode {result.status}")
        elif result.wall_time > deadline:
            logger.warning(
                f"[{segment.segment_id}|r{job.rung}] Deadline missed: "
                f"{result.wall_time:.3f}s > T={deadline:.3f}s at p={job.preset}"
            )
    return list(zip(jobs, results))


def run_segment(
    segment: Segment,
    ladder: LadderConfig,
    models: Predictor,
    backend: EncoderBackend,
    features: Optional[SegmentFeatures] = None,
    analyzer: Optional[AnalyzerConfig] = None,
    workers: int = 1,
    output_dir: Optional[str] = None,
    slots: Optional[int] = None,
    serial: bool = False,
    latency_budget: Optional[float] = None,
) -> SegmentReport:
    """Encode one segment across the ladder with predicted presets.

    Features are computed once at source resolution unless given. Every
    rung's preset is :func:`select_preset` of its prediction map.

    Args:
        segment: Segment to encode
        ladder: Ladder and encoding conditions
        models: Model set or any other predictor
        backend: Encoder backend
        features: Precomputed features
        analyzer: Analyzer configuration
        workers: Analyzer worker threads
        output_dir: Run directory for encoder outputs
        slots: Concurrent encodes (default: one per rung)
        serial: Encode rungs one after another
        latency_budget: Seconds allowed for extraction plus inference

    Returns:
        The segment report

    Raises:
        ConfigurationError: If the models do not cover the ladder
    """
    check_coverage(models, ladder)
    deadline = segment.frame_count / ladder.framerate

    extraction = 0.0
    if features is None:
        features, extraction = analyze_segment(segment, analyzer, workers)

    start = time.perf_counter()
    plans = plan_segment(features, deadline, ladder, models, segment.segment_id)
    inference = time.perf_counter() - start
    _check_latency(segment, extraction, inference, latency_budget)

    encoded = _encode_plans(
        segment, features, deadline,
        [(plan.rung, plan.representation, plan.decision.preset) for plan in plans],
        ladder, backend, output_dir, slots, serial,
    )
    outcomes = tuple(
        RungOutcome(
            rung=plan.rung,
            representation=plan.representation,
            decision=plan.decision,
            result=result,
            idle_time=idle_time(result, deadline),
            output=job.output,
        )
        for plan, (job, result) in zip(plans, encoded)
    )
    return _report(segment, features, deadline, outcomes, extraction, inference)


def run_baseline(
    segment: Segment,
    ladder: LadderConfig,
    backend: EncoderBackend,
    features: Optional[SegmentFeatures] = None,
    analyzer: Optional[AnalyzerConfig] = None,
    workers: int = 1,
    output_dir: Optional[str] = None,
    slots: Optional[int] = None,
    serial: bool = False,
) -> SegmentReport:
    """Encode one segment across the ladder at the fastest preset.

    There is no prediction: ``predicted_time`` is NaN and ``deadline_met``
    reflects the measured time.
    """
    deadline = segment.frame_count / ladder.framerate
    extraction = 0.0
    if features is None:
        features, extraction = analyze_segment(segment, analyzer, workers)

    p_min = ladder.preset_range[0]
    encoded = _encode_plans(
        segment, features, deadline,
        [(ladder.rung_label(i), rep, p_min) for i, rep in enumerate(ladder.rungs)],
        ladder, backend, output_dir, slots, serial,
    )
    outcomes = tuple(
        RungOutcome(
            rung=job.rung,
            representation=job.representation,
            decision=PresetDecision(p_min, math.nan, _delivered(result, deadline), math.nan),
            result=result,
            idle_time=idle_time(result, deadline),
            output=job.output,
        )
        for job, result in encoded
    )
    return _report(segment, features, deadline, outcomes, extraction, 0.0)


def _check_latency(segment: Segment, extraction: float, inference: float, budget: Optional[float]) -> None:
    fps = segment.frame_count / extraction if extraction > 0 else float("inf")
    logger.debug(
        f"[{segment.segment_id}] Extraction {extraction * 1000:.1f} ms ({fps:.0f} fps), "
        f"inference {inference * 1000:.1f} ms"
    )
    if budget is not None and extraction + inference > budget:
        logger.warning(
            f"[{segment.segment_id}] Prediction latency {extraction + inference:.3f}s "
            f"exceeds budget {budget:.3f}s"
        )


def _report(
    segment: Segment,
    features: SegmentFeatures,
    deadline: float,
    outcomes: Tuple[RungOutcome, ...],
    extraction: float,
    inference: float,
) -> SegmentReport:
    report = SegmentReport(
        segment_id=segment.segment_id,
        features=features,
        frames=segment.frame_count,
        width=segment.width,
        height=segment.height,
        deadline=deadline,
        outcomes=outcomes,
        extraction_seconds=extraction,
        inference_seconds=inference,
    )
    presets = " ".join(str(o.decision.preset) for o in outcomes)
    logger.info(
        f"[{segment.segment_id}] Encoded {len(outcomes)} rungs, presets [{presets}], "
        f"idle {report.total_idle_time:.2f}s, {report.violations} deadline violations, "
        f"{report.failures} failed"
    )
    return report


# =============================================================================
# Reporting
# =============================================================================


def decision_rows(report: SegmentReport) -> List[Dict[str, object]]:
    """``decisions.csv`` rows of one report."""
    rows = []
    for o in report.outcomes:
        rows.append(
            {
                "segment_id": report.segment_id,
                "rung": o.rung,
                "width": o.representation.width,
                "bitrate_kbps": o.representation.bitrate_kbps,
                "preset": o.decision.preset,
                "predicted_time": o.decision.predicted_time,
                "deadline_met": o.decision.deadline_met,
                "margin": o.decision.margin,
                "wall_time": o.result.wall_time,
                "idle_time": o.idle_time,
                "status": o.result.status,
                "output_bytes": o.result.output_bytes,
                "achieved_kbps": o.result.achieved_kbps,
                "psnr": o.result.psnr,
                "output": o.output,
            }
        )
    return rows


@dataclass(frozen=True)
class RunSummary:
    """Per-rung averages plus run totals."""

    table: pd.DataFrame
    segments: int
    total_idle_time: float
    violations: int
    failures: int
    clamped_dc_blocks: int
    mean_extraction_fps: Optional[float]

    def to_text(self) -> str:
        fps = f"{self.mean_extraction_fps:.1f}" if self.mean_extraction_fps else "n/a"
        lines = [
            self.table.to_string(index=False, float_format=lambda v: f"{v:.3f}"),
            "",
            f"segments:             {self.segments}",
            f"total idle time (s):  {self.total_idle_time:.3f}",
            f"deadline violations:  {self.violations}",
            f"failed encodes:       {self.failures}",
            f"clamped DC blocks:    {self.clamped_dc_blocks}",
            f"mean extraction fps:  {fps}",
        ]
        return "\n".join(lines) + "\n"


def summarize(reports: Sequence[SegmentReport]) -> RunSummary:
    """Average preset, time, idle time, violation rate and PSNR per rung."""
    rows = [row for report in reports for row in decision_rows(report)]
    df = pd.DataFrame(rows, columns=DECISION_COLUMNS)
    deadlines = {r.segment_id: r.deadline for r in reports}
    df["failed"] = df["status"] != STATUS_OK
    df["violation"] = df["failed"] | (df["wall_time"] > df["segment_id"].map(deadlines))
    df["psnr"] = pd.to_numeric(df["psnr"], errors="coerce")

    table = (
        df.groupby(["rung", "width", "bitrate_kbps"], sort=True)
        .agg(
            mean_preset=("preset", "mean"),
            mean_predicted_time=("predicted_time", "mean"),
            mean_wall_time=("wall_time", "mean"),
            mean_idle_time=("idle_time", "mean"),
            violation_rate=("violation", "mean"),
            failure_rate=("failed", "mean"),
            mean_psnr=("psnr", "mean"),
        )
        .reset_index()
    )
    fps_values = [r.extraction_fps for r in reports if r.extraction_fps is not None]
    return RunSummary(
        table=table,
        segments=len(reports),
        total_idle_time=float(sum(r.total_idle_time for r in reports)),
        violations=int(sum(r.violations for r in reports)),
        failures=int(sum(r.failures for r in reports)),
        clamped_dc_blocks=int(sum(r.features.clamped_dc_blocks for r in reports)),
        mean_extraction_fps=float(np.mean(fps_values)) if fps_values else None,
    )


def write_run(reports: Sequence[SegmentReport], output_dir: str) -> RunSummary:
    """Write ``segments.csv``, ``decisions.csv``, ``summary.csv`` and ``summary.txt``."""
    os.makedirs(output_dir, exist_ok=True)
    segments = pd.DataFrame(
        [r.features.to_row(r.segment_id, r.width, r.height) for r in reports],
        columns=SEGMENT_COLUMNS,
    )
    segments.to_csv(os.path.join(output_dir, "segments.csv"), index=False)
    decisions = pd.DataFrame(
        [row for r in reports for row in decision_rows(r)], columns=DECISION_COLUMNS
    )
    decisions.to_csv(os.path.join(output_dir, "decisions.csv"), index=False)

    summary = summarize(reports)
    summary.table.to_csv(os.path.join(output_dir, "summary.csv"), index=False)
    with open(os.path.join(output_dir, "summary.txt"), "w", encoding="utf-8") as f:
        f.write(summary.to_text())
    logger.info(f"✅ Run written to {output_dir} ({summary.segments} segments)")
    return summary


def run_ladder(
    segments: Iterable[Segment],
    ladder: LadderConfig,
    backend: EncoderBackend,
    output_dir: str,
    models: Optional[Predictor] = None,
    analyzer: Optional[AnalyzerConfig] = None,
    workers: int = 1,
    slots: Optional[int] = None,
    serial: bool = False,
    latency_budget: Optional[float] = None,
) -> Tuple[List[SegmentReport], RunSummary]:
    """Encode every segment, adaptively with ``models`` or at the fixed fastest preset.

    Segments are processed one after another as they arrive.
    """
    backend.check_programs()
    if models is not None:
        check_coverage(models, ladder)
    mode = "CAPS" if models is not None else "baseline"
    logger.info(
        f"Starting {mode} run: {len(ladder.rungs)} rungs, T={ladder.target_time:.2f}s, "
        f"{'serial' if serial else f'{slots or len(ladder.rungs)} slots'}"
    )

    reports = []
    for segment in segments:
        if models is not None:
            report = run_segment(
                segment, ladder, models, backend, analyzer=analyzer, workers=workers,
                output_dir=output_dir,
                slots=slots, serial=serial, latency_budget=latency_budget,
            )
        else:
            report = run_baseline(
                segment, ladder, backend, analyzer=analyzer, workers=workers,
                output_dir=output_dir, slots=slots, serial=serial,
            )
        reports.append(report)
    return reports, write_run(reports, output_dir)
