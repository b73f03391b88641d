"""Rate-quality evaluation: Bjøntegaard deltas, PSNR and VMAF ingestion."""

import json
import logging
import math
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402

from .complexity import LumaFrame  # noqa: E402
from .utils import EvaluationError, InputError  # noqa: E402

logger = logging.getLogger("CAPS")

MIN_CURVE_POINTS = 4
VMAF_RANGE = (0.0, 100.0)
DEFAULT_PSNR_CEILING = 100.0

DECISIONS_FILE = "decisions.csv"

FrameLike = Union[LumaFrame, np.ndarray]


@dataclass(frozen=True)
class RdPoint:
    """Achieved bitrate in kbps and a quality value."""

    bitrate: float
    quality: float

    def __post_init__(self) -> None:
        if not (math.isfinite(self.bitrate) and self.bitrate > 0):
            raise InputError(f"RD point bitrate must be positive, got {self.bitrate}")
        if not math.isfinite(self.quality):
            raise InputError(f"RD point quality must be finite, got {self.quality}")


@dataclass(frozen=True)
class RdCurve:
    """Rate-quality curve with at least four points of strictly increasing bitrate."""

    points: Tuple[RdPoint, ...]

    def __post_init__(self) -> None:
        if len(self.points) < MIN_CURVE_POINTS:
            raise InputError(
                f"RD curve needs at least {MIN_CURVE_POINTS} points, got {len(self.points)}"
            )
        rates = [p.bitrate for p in self.points]
        if any(b <= a for a, b in zip(rates, rates[1:])):
            raise InputError(f"RD curve bitrates must strictly increase, got {rates}")

    @classmethod
    def from_pairs(cls, pairs: Sequence[Tuple[float, float]]) -> "RdCurve":
        """Curve from (bitrate, quality) pairs in any order."""
        return cls(tuple(RdPoint(float(b), float(q)) for b, q in sorted(pairs)))

    @property
    def log_rates(self) -> np.ndarray:
        return np.log10([p.bitrate for p in self.points])

    @property
    def qualities(self) -> np.ndarray:
        return np.array([p.quality for p in self.points], dtype=np.float64)


def _mean_over_interval(x1: np.ndarray, y1: np.ndarray, x2: np.ndarray, y2: np.ndarray) -> float:
    """Mean of ``fit2 - fit1`` over the common x range of two cubic fits."""
    low = max(float(x1.min()), float(x2.min()))
    high = min(float(x1.max()), float(x2.max()))
    if not high > low:
        raise EvaluationError(f"RD curves do not overlap (common range [{low}, {high}])")

    # Fitting in coordinates relative to the interval start keeps the
    # polynomials well conditioned and makes the result shift-invariant.
    poly1 = np.polyfit(x1 - low, y1, 3)
    poly2 = np.polyfit(x2 - low, y2, 3)
    int1 = np.polyint(poly1)
    int2 = np.polyint(poly2)
    width = high - low
    area1 = np.polyval(int1, width) - np.polyval(int1, 0.0)
    area2 = np.polyval(int2, width) - np.polyval(int2, 0.0)
    return float((area2 - area1) / width)


def bd_quality(reference: RdCurve, test: RdCurve) -> float:
    """Bjøntegaard quality delta of ``test`` over ``reference``.

    Quality is fitted as a cubic in log10(bitrate) for each curve; the
    difference of the fits is averaged over the common log-bitrate range.

    Returns:
        Mean quality difference (positive means ``test`` is better)

    Raises:
        EvaluationError: If the bitrate ranges do not overlap
    """
    return _mean_over_interval(
        reference.log_rates, reference.qualities, test.log_rates, test.qualities
    )


def bd_rate(reference: RdCurve, test: RdCurve) -> float:
    """Bjøntegaard bitrate difference in percent at equal quality.

    Negative values mean ``test`` needs less bitrate.

    Raises:
        EvaluationError: If the quality ranges do not overlap
    """
    ref_q, test_q = reference.qualities, test.qualities
    if len(set(ref_q.tolist())) < MIN_CURVE_POINTS or len(set(test_q.tolist())) < MIN_CURVE_POINTS:
        raise EvaluationError("BD-rate needs at least four distinct quality values per curve")
    delta = _mean_over_interval(ref_q, reference.log_rates, test_q, test.log_rates)
    return (10.0 ** min(delta, 200.0) - 1.0) * 100.0


# =============================================================================
# PSNR
# =============================================================================


def _samples(frame: FrameLike) -> np.ndarray:
    return frame.samples if isinstance(frame, LumaFrame) else np.asarray(frame)


def frame_mse(reference: FrameLike, distorted: FrameLike) -> float:
    """Mean squared luma error of one frame pair."""
    a, b = _samples(reference), _samples(distorted)
    if a.shape != b.shape:
        raise InputError(f"Frame dimensions differ: {a.shape} vs {b.shape}")
    return float(np.mean(np.square(np.subtract(a, b, dtype=np.float64))))


def psnr(
    reference: Sequence[FrameLike],
    distorted: Sequence[FrameLike],
    bit_depth: int = 8,
    ceiling: float = DEFAULT_PSNR_CEILING,
) -> Tuple[float, bool]:
    """Segment luma PSNR: the mean of per-frame PSNR values.

    Frames reconstructed exactly have infinite PSNR; they count as
    ``ceiling`` and set the lossless flag.

    Returns:
        Tuple of (PSNR in dB, lossless flag)

    Raises:
        InputError: If frame counts or dimensions differ
    """
    if len(reference) != len(distorted):
        raise InputError(f"Frame counts differ: {len(reference)} vs {len(distorted)}")
    if not reference:
        raise InputError("PSNR needs at least one frame")

    peak = float((1 << bit_depth) - 1)
    values = []
    lossless = False
    for ref, dist in zip(reference, distorted):
        mse = frame_mse(ref, dist)
        if mse == 0:
            lossless = True
            values.append(ceiling)
        else:
            values.append(min(ceiling, 10.0 * math.log10(peak * peak / mse)))
    return float(np.mean(values)), lossless


# =============================================================================
# VMAF ingestion
# =============================================================================


def _libvmaf_score(document: dict) -> Optional[float]:
    pooled = document.get("pooled_metrics", {}).get("vmaf")
    if isinstance(pooled, dict) and "mean" in pooled:
        return float(pooled["mean"])
    frames = document.get("frames")
    if isinstance(frames, list) and frames:
        return float(np.mean([f["metrics"]["vmaf"] for f in frames]))
    return None


def _read_json_scores(path: Path) -> Dict[str, float]:
    with open(path, "r", encoding="utf-8") as f:
        document = json.load(f)
    if isinstance(document, dict):
        score = _libvmaf_score(document)
        if score is not None:
            return {path.stem: score}
        return {str(k): float(v) for k, v in document.items()}
    if isinstance(document, list):
        return {str(entry["key"]): float(entry["vmaf"]) for entry in document}
    raise InputError(f"Unrecognized VMAF JSON layout in {path}")


def _read_csv_scores(path: Path) -> Dict[str, float]:
    df = pd.read_csv(path)
    if "vmaf" not in df.columns:
        raise InputError(f"VMAF CSV {path} has no 'vmaf' column")
    for key_column in ("key", "output", "segment_id"):
        if key_column in df.columns:
            return {
                Path(str(k)).stem if key_column == "output" else str(k): float(v)
                for k, v in zip(df[key_column], df["vmaf"])
            }
    raise InputError(f"VMAF CSV {path} needs a 'key', 'output' or 'segment_id' column")


def ingest_vmaf(path: str) -> Dict[str, float]:
    """Read VMAF scores computed by an external tool.

    Accepted inputs: a libvmaf JSON log (keyed by its file stem), a
    directory of such logs, a JSON object mapping keys to scores, or a CSV
    with a ``vmaf`` column and a ``key``/``output``/``segment_id`` column.
    Keys are encode output stems such as ``seg0000_r01``.

    Raises:
        InputError: If the file is unreadable or a score lies outside [0, 100]
    """
    source = Path(path)
    try:
        if source.is_dir():
            scores: Dict[str, float] = {}
            for log in sorted(source.glob("*.json")):
                scores.update(_read_json_scores(log))
        elif source.suffix.lower() == ".csv":
            scores = _read_csv_scores(source)
        else:
            scores = _read_json_scores(source)
    except (OSError, ValueError, KeyError, TypeError, pd.errors.ParserError) as e:
        raise InputError(f"Cannot read VMAF scores from {path}: {e}") from e

    low, high = VMAF_RANGE
    for key, value in scores.items():
        if not low <= value <= high:
            raise InputError(f"VMAF score {value} for '{key}' outside [{low:g}, {high:g}]")
    logger.info(f"Ingested {len(scores)} VMAF scores from {path}")
    return scores


# =============================================================================
# Run comparison
# =============================================================================


def read_decisions(run_dir: str) -> pd.DataFrame:
    """Load ``decisions.csv`` of a run directory.

    Raises:
        EvaluationError: If the file is missing or unreadable
    """
    path = os.path.join(run_dir, DECISIONS_FILE)
    try:
        df = pd.read_csv(path, dtype={"segment_id": str, "rung": str})
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise EvaluationError(f"Cannot read run directory {run_dir}: {e}") from e
    df["rung"] = df["rung"].str.zfill(2)
    return df


def _attach_vmaf(df: pd.DataFrame, scores: Optional[Dict[str, float]]) -> pd.DataFrame:
    df = df.copy()
    if not scores:
        df["vmaf"] = np.nan
        return df
    keys = df["output"].fillna("").map(lambda p: Path(str(p)).stem)
    df["vmaf"] = keys.map(scores)
    missing = int(df["vmaf"].isna().sum())
    if missing:
        logger.warning(f"No VMAF score for {missing} encodes")
    return df


def _segment_curve(rows: pd.DataFrame, metric: str) -> Optional[RdCurve]:
    rows = rows[(rows["status"] == "ok") & rows[metric].notna() & rows["achieved_kbps"].notna()]
    pairs = list(zip(rows["achieved_kbps"].astype(float), rows[metric].astype(float)))
    try:
        return RdCurve.from_pairs(pairs)
    except InputError as e:
        logger.warning(f"Skipping {metric} curve: {e}")
        return None


def _bd_pair(reference: Optional[RdCurve], test: Optional[RdCurve], fn) -> float:
    if reference is None or test is None:
        return float("nan")
    try:
        return fn(reference, test)
    except EvaluationError as e:
        logger.warning(f"Skipping BD value: {e}")
        return float("nan")


def bd_report(baseline: pd.DataFrame, caps: pd.DataFrame) -> pd.DataFrame:
    """Per-segment BD-PSNR, BD-rate and BD-VMAF of ``caps`` over ``baseline``.

    The aggregate is the uniform mean over segments.
    """
    with_vmaf = bool(baseline["vmaf"].notna().any() and caps["vmaf"].notna().any())
    records = []
    for segment_id in sorted(set(baseline["segment_id"]) & set(caps["segment_id"])):
        base_rows = baseline[baseline["segment_id"] == segment_id]
        caps_rows = caps[caps["segment_id"] == segment_id]
        base_psnr, caps_psnr = _segment_curve(base_rows, "psnr"), _segment_curve(caps_rows, "psnr")
        base_vmaf, caps_vmaf = None, None
        if with_vmaf:
            base_vmaf = _segment_curve(base_rows, "vmaf")
            caps_vmaf = _segment_curve(caps_rows, "vmaf")
        records.append(
            {
                "segment_id": segment_id,
                "bd_psnr": _bd_pair(base_psnr, caps_psnr, bd_quality),
                "bd_rate_psnr": _bd_pair(base_psnr, caps_psnr, bd_rate),
                "bd_vmaf": _bd_pair(base_vmaf, caps_vmaf, bd_quality),
            }
        )
    report = pd.DataFrame(records, columns=["segment_id", "bd_psnr", "bd_rate_psnr", "bd_vmaf"])
    if report.empty:
        raise EvaluationError("Baseline and CAPS runs share no segments")
    mean = report[["bd_psnr", "bd_rate_psnr", "bd_vmaf"]].mean(skipna=True)
    report.loc[len(report)] = ["mean", mean["bd_psnr"], mean["bd_rate_psnr"], mean["bd_vmaf"]]
    return report


def rung_table(baseline: pd.DataFrame, caps: pd.DataFrame, metric: str) -> pd.DataFrame:
    """Per-rung mean of ``metric`` for both runs."""
    keys = ["rung", "width", "bitrate_kbps"]
    base = baseline[baseline["status"] == "ok"].groupby(keys)[metric].mean().rename("baseline")
    test = caps[caps["status"] == "ok"].groupby(keys)[metric].mean().rename("caps")
    return pd.concat([base, test], axis=1).reset_index().sort_values("rung")


def plot_rung_table(table: pd.DataFrame, ylabel: str, path: str) -> None:
    """Line chart of a rung table, baseline against CAPS, as SVG."""
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(table["rung"], table["baseline"], marker="o", label="baseline (fixed preset)")
    ax.plot(table["rung"], table["caps"], marker="s", label="CAPS")
    ax.set_xlabel("Representation")
    ax.set_ylabel(ylabel)
    ax.grid(True, alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)


def compare_runs(
    baseline_dir: str,
    caps_dir: str,
    out_dir: str,
    vmaf_baseline: Optional[str] = None,
    vmaf_caps: Optional[str] = None,
) -> pd.DataFrame:
    """Compare a fixed-preset run with a CAPS run.

    Writes ``bd_report.csv``, per-rung tables ``rung_time.csv``,
    ``rung_psnr.csv`` and (with VMAF scores) ``rung_vmaf.csv`` plus an SVG
    chart of each into ``out_dir``.

    Returns:
        The BD report
    """
    baseline = _attach_vmaf(read_decisions(baseline_dir), ingest_vmaf(vmaf_baseline) if vmaf_baseline else None)
    caps = _attach_vmaf(read_decisions(caps_dir), ingest_vmaf(vmaf_caps) if vmaf_caps else None)
    os.makedirs(out_dir, exist_ok=True)

    report = bd_report(baseline, caps)
    report.to_csv(os.path.join(out_dir, "bd_report.csv"), index=False)

    tables: List[Tuple[str, str, str]] = [
        ("wall_time", "time", "Encoding time (s)"),
        ("psnr", "psnr", "PSNR (dB)"),
    ]
    if baseline["vmaf"].notna().any() and caps["vmaf"].notna().any():
        tables.append(("vmaf", "vmaf", "VMAF"))
    for metric, name, label in tables:
        table = rung_table(baseline, caps, metric)
        table.to_csv(os.path.join(out_dir, f"rung_{name}.csv"), index=False)
        plot_rung_table(table, label, os.path.join(out_dir, f"rung_{name}.svg"))

    mean = report[report["segment_id"] == "mean"].iloc[0]
    logger.info(
        f"📊 BD-PSNR {mean['bd_psnr']:.3f} dB, BD-rate {mean['bd_rate_psnr']:.2f}%, "
        f"BD-VMAF {mean['bd_vmaf']:.3f} over {len(report) - 1} segments -> {out_dir}"
    )
    return report
