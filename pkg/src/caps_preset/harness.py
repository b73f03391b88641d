"""Encoding harness: timed encodes and training data generation.

Two backends are supported. The command backend runs a real encoder
(``ffmpeg``/``x265``) as a child process and measures wall-clock time
around it. The mock backend evaluates a deterministic time function of
the segment features and encoding parameters on a simulated clock.
"""

import asyncio
import logging
import math
import os
import subprocess
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from .complexity import AnalyzerConfig, SegmentFeatures, segment_features
from .encoder import (
    COMMAND_TEMPLATES,
    DECODE_TEMPLATES,
    DEFAULT_COMMAND,
    build_child_env,
    build_command,
    require_executable,
    resolve_template,
)
from .ladder import LadderConfig, Representation
from .ledger import STATUS_OK, JobLedger
from .selector import PRESET_NAMES, preset_name
from .timing_model import DATASET_COLUMNS, MIN_PREDICTION, FeatureVector, TrainingDataset
from .utils import ConfigurationError, DatasetError, InputError
from .yuv import Segment, read_y4m, write_y4m

try:
    import resource
except ImportError:  # Windows
    resource = None  # type: ignore[assignment]

logger = logging.getLogger("CAPS")

STATUS_FAILED = "failed"
STATUS_TIMEOUT = "timeout"

BACKEND_KINDS = ("mock", "command")

# Characters of encoder stderr kept in failure diagnostics
DIAGNOSTIC_TAIL = 2000

AnalyzedSegment = Tuple[Segment, SegmentFeatures]


# =============================================================================
# Mock encoder
# =============================================================================


@dataclass(frozen=True)
class MockParams:
    """Parameters of the mock time and quality functions.

    Time is ``(alpha*E + beta*h + gamma) * exp(rho*(log r - log r_ref))
    * exp(kappa*(log b - log b_ref)) * (p+1)**preset_exponent
    * threads_ref / c`` seconds.
    """

    alpha: float = 0.01
    beta: float = 0.02
    gamma: float = 3.4
    r_ref: float = 1920.0
    rho: float = 2.0
    b_ref: float = 1000.0
    kappa: float = 0.3
    preset_exponent: float = 2.15
    threads_ref: float = 8.0
    psnr_base: float = 20.0
    psnr_per_decade: float = 8.0
    psnr_per_preset: float = 0.25
    psnr_per_energy: float = 0.01

    def __post_init__(self) -> None:
        if not (self.r_ref > 0 and self.b_ref > 0 and self.threads_ref > 0):
            raise ConfigurationError(f"Mock reference values must be positive: {self}")


def mock_encode_time(
    E: float,
    h: float,
    log_r: float,
    log_b: float,
    preset: int,
    threads: int,
    params: MockParams,
) -> float:
    """Deterministic mock encoding time in seconds.

    Resolution and bitrate enter through their natural logs, the same
    values a :class:`FeatureVector` carries, so a predictor built on this
    function reproduces the mock clock exactly.
    """
    content = params.alpha * E + params.beta * h + params.gamma
    scale = math.exp(params.rho * (log_r - math.log(params.r_ref)))
    rate = math.exp(params.kappa * (log_b - math.log(params.b_ref)))
    slow = (preset + 1) ** params.preset_exponent
    t = content * scale * rate * slow * (params.threads_ref / threads)
    return max(MIN_PREDICTION, t)


def mock_psnr(E: float, bitrate_kbps: float, preset: int, params: MockParams, ceiling: float) -> float:
    """Deterministic mock PSNR in dB, clipped to ``[1, ceiling]``."""
    value = (
        params.psnr_base
        + params.psnr_per_decade * math.log10(bitrate_kbps)
        + params.psnr_per_preset * preset
        - params.psnr_per_energy * E
    )
    return min(max(value, 1.0), ceiling)


@dataclass(frozen=True)
class PerfectPredictor:
    """Predicts exactly what the mock backend will measure.

    Offers the same ``predict_all_presets`` contract as a model set.
    """

    params: MockParams
    threads: int
    preset_range: Tuple[int, int] = (0, 8)

    @property
    def presets(self) -> range:
        return range(self.preset_range[0], self.preset_range[1] + 1)

    def predict_all_presets(self, fv: FeatureVector, r: int) -> Dict[int, float]:
        return {
            p: mock_encode_time(fv.E, fv.h, fv.log_r, fv.log_b, p, self.threads, self.params)
            for p in self.presets
        }


# =============================================================================
# Jobs and backends
# =============================================================================


@dataclass(frozen=True)
class EncodeJob:
    """One encode of a segment at one ladder rung and preset.

    Attributes:
        segment: Source segment
        representation: Target (width, bitrate)
        preset: Preset index
        threads: CPU threads c for the encoder instance
        output: Output bitstream path
        features: Segment features; computed on demand by the mock backend
        deadline: Target encoding time T in seconds, for timeouts
        rung: Rung label used in logs
    """

    segment: Segment
    representation: Representation
    preset: int
    threads: int
    output: str
    features: Optional[SegmentFeatures] = None
    deadline: Optional[float] = None
    rung: str = ""

    def __post_init__(self) -> None:
        if self.threads < 1:
            raise ConfigurationError(f"Encoder needs at least one thread, got {self.threads}")
        if not 0 <= self.preset < len(PRESET_NAMES):
            raise ConfigurationError(f"Preset index {self.preset} out of range")

    @property
    def key(self) -> Tuple[str, int, float, int]:
        rep = self.representation
        return (self.segment.segment_id, rep.width, float(rep.bitrate_kbps), self.preset)

    @property
    def label(self) -> str:
        rep = self.representation
        rung = f" rung {self.rung}" if self.rung else ""
        return f"{self.segment.segment_id}{rung} {rep.width}/{rep.bitrate_kbps:g}k p={self.preset}"


@dataclass(frozen=True)
class EncodeResult:
    """Outcome of a job.

    Attributes:
        wall_time: Measured seconds around the encode
        status: ``ok``, ``failed`` or ``timeout``
        output_bytes: Size of the produced bitstream
        psnr: Segment luma PSNR in dB, when computed
        cpu_time: Child CPU seconds, when the platform exposes them
        achieved_kbps: Bitrate of the produced bitstream
        diagnostics: Captured encoder error output on failure
        lossless: PSNR was capped because the decode matched exactly
    """

    wall_time: float
    status: str
    output_bytes: int = 0
    psnr: Optional[float] = None
    cpu_time: Optional[float] = None
    achieved_kbps: Optional[float] = None
    diagnostics: str = ""
    lossless: bool = False

    @property
    def ok(self) -> bool:
        return self.status == STATUS_OK


@dataclass(frozen=True)
class EncoderBackend:
    """How jobs are executed.

    Attributes:
        kind: ``mock`` or ``command``
        command: Template name or argument list for the command backend
        decode_command: Template used to decode outputs for internal PSNR
        timeout_factor: Jobs are aborted after ``timeout_factor * T``
        repetitions: Timed runs per job; the median is reported
        env: Extra environment for encoder processes
        mock: Mock time and quality parameters
        realtime: Mock backend sleeps for the simulated duration
        compute_psnr: Measure PSNR of every encode
        psnr_ceiling: PSNR reported for exact reconstructions
    """

    kind: str = "mock"
    command: Optional[Union[str, Sequence[str]]] = None
    decode_command: Optional[Union[str, Sequence[str]]] = None
    timeout_factor: float = 3.0
    repetitions: int = 1
    env: Mapping[str, str] = field(default_factory=dict)
    mock: MockParams = field(default_factory=MockParams)
    realtime: bool = False
    compute_psnr: bool = True
    psnr_ceiling: float = 100.0

    def __post_init__(self) -> None:
        if self.kind not in BACKEND_KINDS:
            raise ConfigurationError(
                f"Unknown backend type '{self.kind}'; expected one of {', '.join(BACKEND_KINDS)}"
            )
        if self.repetitions < 1:
            raise ConfigurationError(f"Repetitions must be >= 1, got {self.repetitions}")
        if not self.timeout_factor > 0:
            raise ConfigurationError(f"Timeout factor must be positive, got {self.timeout_factor}")
        if self.kind == "command":
            resolve_template(self.command, COMMAND_TEMPLATES, DEFAULT_COMMAND)
            if self.decode_command is not None:
                resolve_template(self.decode_command, DECODE_TEMPLATES, "ffmpeg")

    @property
    def is_mock(self) -> bool:
        return self.kind == "mock"

    def check_programs(self) -> None:
        """Fail early when an encoder or decoder program is missing.

        Raises:
            ConfigurationError: If a command backend program is not on PATH
        """
        if self.is_mock:
            return
        require_executable(resolve_template(self.command, COMMAND_TEMPLATES, DEFAULT_COMMAND))
        if self.compute_psnr:
            require_executable(resolve_template(self.decode_command, DECODE_TEMPLATES, "ffmpeg"))


def _job_features(job: EncodeJob) -> SegmentFeatures:
    if job.features is not None:
        return job.features
    return segment_features(job.segment.frames, AnalyzerConfig(bit_depth=job.segment.bit_depth))


def _segment_duration(segment: Segment) -> float:
    return segment.frame_count / segment.framerate


def _run_mock(job: EncodeJob, backend: EncoderBackend) -> EncodeResult:
    features = _job_features(job)
    rep = job.representation
    seconds = mock_encode_time(
        features.E,
        features.h,
        math.log(rep.width),
        math.log(rep.bitrate_kbps),
        job.preset,
        job.threads,
        backend.mock,
    )
    if backend.realtime:
        start = time.monotonic()
        time.sleep(seconds)
        seconds = time.monotonic() - start

    output_bytes = max(1, int(round(rep.bitrate_kbps * 1000 / 8 * _segment_duration(job.segment))))
    psnr = None
    if backend.compute_psnr:
        psnr = mock_psnr(features.E, rep.bitrate_kbps, job.preset, backend.mock, backend.psnr_ceiling)
    return EncodeResult(
        wall_time=seconds,
        status=STATUS_OK,
        output_bytes=output_bytes,
        psnr=psnr,
        achieved_kbps=float(rep.bitrate_kbps),
    )


def _children_cpu_time() -> Optional[float]:
    if resource is None:
        return None
    usage = resource.getrusage(resource.RUSAGE_CHILDREN)
    return usage.ru_utime + usage.ru_stime


def _source_for(job: EncodeJob) -> Tuple[str, int]:
    """Input path and first frame for the encoder.

    Y4M sources are read in place. Generated segments and raw YUV sources,
    which carry no header the encoder could read, are written next to the
    output once as Y4M.
    """
    segment = job.segment
    source = segment.source
    if source is not None and source.lower().endswith(".y4m") and os.path.exists(source):
        return segment.source, segment.start_frame
    path = Path(job.output).with_name(f"{segment.segment_id}.src.y4m")
    if not path.exists():
        write_y4m(str(path), segment.frames, segment.framerate, segment.bit_depth)
    return str(path), 0


def _command_values(job: EncodeJob, source: str, start: int) -> Dict[str, object]:
    rep = job.representation
    n = job.segment.frame_count
    return {
        "input": source,
        "output": job.output,
        "width": rep.width,
        "bitrate_kbps": float(rep.bitrate_kbps),
        "preset": job.preset,
        "preset_name": preset_name(job.preset),
        "threads": job.threads,
        "start_frame": start,
        "end_frame": start + n,
        "frames": n,
        "framerate": float(job.segment.framerate),
    }


def _tail(text: Optional[Union[str, bytes]]) -> str:
    if text is None:
        return ""
    if isinstance(text, bytes):
        text = text.decode("utf-8", errors="replace")
    return text.strip()[-DIAGNOSTIC_TAIL:]


def _measure_psnr(job: EncodeJob, backend: EncoderBackend, values: Dict[str, object]) -> Tuple[Optional[float], bool]:
    # Imported here: evaluation pulls in matplotlib.
    from .evaluation import psnr

    template = resolve_template(backend.decode_command, DECODE_TEMPLATES, "ffmpeg")
    segment = job.segment
    decoded = f"{job.output}.dec.y4m"
    decode_values = dict(values)
    decode_values.update(
        {
            "decoded": decoded,
            "source_width": segment.width,
            "source_height": segment.height,
            "pix_fmt": "yuv420p" if segment.bit_depth == 8 else "yuv420p10le",
        }
    )
    cmd = build_command(template, decode_values)
    try:
        completed = subprocess.run(
            cmd,
            stdout=subprocess.DEVNULL,
            stderr=subprocess.PIPE,
            env=build_child_env(backend.env),
        )
        if completed.returncode != 0:
            logger.warning(f"[{job.label}] Decode for PSNR failed: {_tail(completed.stderr)}")
            return None, False
        _, frames = read_y4m(decoded)
        return psnr(segment.frames, list(frames), segment.bit_depth, backend.psnr_ceiling)
    except (OSError, InputError) as e:
        logger.warning(f"[{job.label}] Cannot compute PSNR: {e}")
        return None, False
    finally:
        if os.path.exists(decoded):
            os.remove(decoded)


def _run_command(job: EncodeJob, backend: EncoderBackend, measure_cpu: bool) -> EncodeResult:
    template = resolve_template(backend.command, COMMAND_TEMPLATES, DEFAULT_COMMAND)
    os.makedirs(os.path.dirname(os.path.abspath(job.output)), exist_ok=True)
    source, start = _source_for(job)
    values = _command_values(job, source, start)
    cmd = build_command(template, values)
    deadline = job.deadline if job.deadline is not None else _segment_duration(job.segment)
    timeout = backend.timeout_factor * deadline
    env = build_child_env(backend.env)

    logger.debug(f"[{job.label}] Running: {' '.join(cmd)}")
    cpu_before = _children_cpu_time() if measure_cpu else None
    start_time = time.monotonic()
    try:
        completed = subprocess.run(
            cmd,
            stdout=subprocess.DEVNULL,
            stderr=subprocess.PIPE,
            env=env,
            timeout=timeout,
        )
    except subprocess.TimeoutExpired as e:
        elapsed = time.monotonic() - start_time
        logger.error(f"[{job.label}] Encoder timed out after {elapsed:.2f}s (limit {timeout:.2f}s)")
        return EncodeResult(elapsed, STATUS_TIMEOUT, diagnostics=_tail(e.stderr))
    except OSError as e:
        elapsed = time.monotonic() - start_time
        logger.error(f"[{job.label}] Cannot start encoder '{cmd[0]}': {e}")
        return EncodeResult(elapsed, STATUS_FAILED, diagnostics=str(e))
    elapsed = time.monotonic() - start_time

    cpu_time = None
    if cpu_before is not None:
        cpu_after = _children_cpu_time()
        cpu_time = cpu_after - cpu_before if cpu_after is not None else None

    if completed.returncode != 0:
        diagnostics = _tail(completed.stderr)
        logger.error(f"[{job.label}] Encoder exited with code {completed.returncode}: {diagnostics}")
        return EncodeResult(elapsed, STATUS_FAILED, cpu_time=cpu_time, diagnostics=diagnostics)

    output_bytes = os.path.getsize(job.output) if os.path.exists(job.output) else 0
    if output_bytes == 0:
        logger.error(f"[{job.label}] Encoder produced no output at {job.output}")
        return EncodeResult(elapsed, STATUS_FAILED, cpu_time=cpu_time, diagnostics="empty output")

    achieved = output_bytes * 8 / 1000 / _segment_duration(job.segment)
    psnr_value, lossless = None, False
    if backend.compute_psnr:
        psnr_value, lossless = _measure_psnr(job, backend, values)

    return EncodeResult(
        wall_time=elapsed,
        status=STATUS_OK,
        output_bytes=output_bytes,
        psnr=psnr_value,
        cpu_time=cpu_time,
        achieved_kbps=achieved,
        lossless=lossless,
    )


def run_job(job: EncodeJob, backend: EncoderBackend, measure_cpu: bool = True) -> EncodeResult:
    """Run one encode and measure its wall-clock time.

    With ``repetitions > 1`` the job runs that many times and the median
    wall time is reported; any failed repetition fails the job.

    Args:
        job: Job to run
        backend: Backend to run it on
        measure_cpu: Record child CPU time; only meaningful when no other
            encoder runs at the same time

    Returns:
        Result of the job; failures are reported, not raised
    """
    runs: List[EncodeResult] = []
    for _ in range(backend.repetitions):
        if backend.is_mock:
            result = _run_mock(job, backend)
        else:
            result = _run_command(job, backend, measure_cpu)
        if not result.ok:
            return result
        runs.append(result)

    if len(runs) == 1:
        return runs[0]
    median = float(np.median([r.wall_time for r in runs]))
    last = runs[-1]
    cpu_times = [r.cpu_time for r in runs if r.cpu_time is not None]
    return EncodeResult(
        wall_time=median,
        status=STATUS_OK,
        output_bytes=last.output_bytes,
        psnr=last.psnr,
        cpu_time=float(np.median(cpu_times)) if cpu_times else None,
        achieved_kbps=last.achieved_kbps,
        lossless=last.lossless,
    )


# =============================================================================
# Dataset building
# =============================================================================


def _dataset_row(segment_id: str, features: SegmentFeatures, job: EncodeJob, seconds: float) -> Dict[str, object]:
    rep = job.representation
    return {
        "segment_id": segment_id,
        "E": features.E,
        "h": features.h,
        "L": features.L,
        "width": rep.width,
        "bitrate_kbps": float(rep.bitrate_kbps),
        "preset": job.preset,
        "time_seconds": seconds,
    }


def ledger_path_for(out_csv: str) -> str:
    """Ledger file kept next to a dataset CSV."""
    return str(Path(out_csv).with_suffix("")) + ".ledger.db"


async def _build_async(
    jobs_todo: List[Tuple[EncodeJob, SegmentFeatures]],
    backend: EncoderBackend,
    ledger: JobLedger,
    jobs: int,
) -> Tuple[int, int]:
    semaphore = asyncio.Semaphore(jobs)
    queue: asyncio.Queue = asyncio.Queue()
    measure_cpu = jobs == 1

    async def worker(job: EncodeJob, features: SegmentFeatures) -> None:
        async with semaphore:
            result = await asyncio.to_thread(run_job, job, backend, measure_cpu)
        await queue.put((job, features, result))

    async def writer() -> Tuple[int, int]:
        done, failed = 0, 0
        while True:
            item = await queue.get()
            if item is None:
                return done, failed
            job, features, result = item
            if result.ok:
                row = _dataset_row(job.segment.segment_id, features, job, result.wall_time)
                ledger.record(job.key, STATUS_OK, result.wall_time, result.cpu_time, dataset_row=row)
                done += 1
            else:
                logger.warning(f"[{job.label}] Job {result.status}, omitted from dataset")
                ledger.record(job.key, result.status, result.wall_time, result.cpu_time, result.diagnostics)
                failed += 1
            if not backend.is_mock and os.path.exists(job.output):
                os.remove(job.output)

    writer_task = asyncio.create_task(writer())
    await asyncio.gather(*(worker(job, features) for job, features in jobs_todo))
    await queue.put(None)
    return await writer_task


def build_dataset(
    segments: Sequence[AnalyzedSegment],
    ladder: LadderConfig,
    presets: range,
    backend: EncoderBackend,
    out_csv: str,
    jobs: int = 1,
    retry_failed: bool = False,
) -> TrainingDataset:
    """Encode every (segment, rung, preset) triple and record the times.

    Outcomes are stored in a ledger next to ``out_csv`` as they arrive, so
    an interrupted build picks up where it stopped. The CSV is rewritten
    from the ledger at the end in job-key order.

    Args:
        segments: Segments with their precomputed features
        ladder: Ladder whose rungs are encoded
        presets: Presets to encode
        backend: Encoder backend
        out_csv: Dataset CSV path
        jobs: Encodes run at the same time
        retry_failed: Rerun jobs that failed in an earlier build

    Returns:
        The dataset of all successful jobs

    Raises:
        DatasetError: If no job succeeded
        ConfigurationError: If the encoder program is not on PATH
    """
    if jobs < 1:
        raise ConfigurationError(f"Job count must be >= 1, got {jobs}")
    ids = [segment.segment_id for segment, _ in segments]
    if len(set(ids)) != len(ids):
        raise InputError("Segment ids must be unique within a dataset build")
    backend.check_programs()

    ledger = JobLedger(ledger_path_for(out_csv))
    finished = ledger.finished_jobs(include_failed=not retry_failed)
    encode_dir = Path(out_csv).with_suffix("").as_posix() + "_encodes"

    todo: List[Tuple[EncodeJob, SegmentFeatures]] = []
    skipped = 0
    for segment, features in segments:
        deadline = segment.frame_count / ladder.framerate
        for index, rep in enumerate(ladder.rungs):
            for p in presets:
                job = EncodeJob(
                    segment=segment,
                    representation=rep,
                    preset=p,
                    threads=ladder.threads_per_instance,
                    output=os.path.join(
                        encode_dir, f"{segment.segment_id}_r{ladder.rung_label(index)}_p{p}.hevc"
                    ),
                    features=features,
                    deadline=deadline,
                    rung=ladder.rung_label(index),
                )
                if job.key in finished:
                    skipped += 1
                    continue
                todo.append((job, features))

    total = skipped + len(todo)
    logger.info(
        f"Dataset build: {total} jobs ({len(segments)} segments x {len(ladder.rungs)} rungs x "
        f"{len(presets)} presets), {skipped} already in ledger, {len(todo)} to run"
    )
    done, failed = asyncio.run(_build_async(todo, backend, ledger, jobs))

    rows = ledger.dataset_rows()
    if not rows:
        raise DatasetError("Dataset build produced no successful rows")
    df = pd.DataFrame(rows, columns=["segment_id", *DATASET_COLUMNS])
    os.makedirs(os.path.dirname(os.path.abspath(out_csv)), exist_ok=True)
    df.to_csv(out_csv, index=False, float_format="%.17g")
    logger.info(
        f"✅ Dataset written to {out_csv}: {len(df)} rows "
        f"({done} new, {failed} failed this run, {ledger.failure_count()} failed in total)"
    )
    return TrainingDataset.from_frame(df)
