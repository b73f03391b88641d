"""Tests for the ladder encoding pipeline."""

import math
import os
import sys
from dataclasses import replace

import pandas as pd
import pytest
from conftest import constant_segment

from caps_preset import orchestrator
from caps_preset.complexity import AnalyzerConfig, segment_features
from caps_preset.harness import EncoderBackend, PerfectPredictor
from caps_preset.ladder import HLS_LADDER, LadderConfig
from caps_preset.orchestrator import (
    DECISION_COLUMNS,
    check_coverage,
    plan_segment,
    run_baseline,
    run_ladder,
    run_segment,
    summarize,
    write_run,
)
from caps_preset.utils import ConfigurationError
from caps_preset.yuv import synthetic_segment

ANALYZER = AnalyzerConfig(block_size=16)


def perfect(backend: EncoderBackend, ladder: LadderConfig) -> PerfectPredictor:
    return PerfectPredictor(backend.mock, ladder.threads_per_instance, ladder.preset_range)


@pytest.fixture(scope="module")
def analyzed():
    segments = [synthetic_segment(seed, width=64, height=64, frames=120) for seed in range(20)]
    return [(s, segment_features(s.frames, ANALYZER)) for s in segments]


@pytest.fixture(scope="module")
def caps_and_baseline(analyzed):
    ladder = LadderConfig()
    backend = EncoderBackend()
    predictor = perfect(backend, ladder)
    caps = [run_segment(s, ladder, predictor, backend, features=f) for s, f in analyzed]
    base = [run_baseline(s, ladder, backend, features=f) for s, f in analyzed]
    return caps, base


def test_perfect_model_never_misses_a_feasible_deadline(caps_and_baseline):
    caps, _ = caps_and_baseline
    for report in caps:
        assert report.deadline == 5.0
        for outcome in report.outcomes:
            assert outcome.result.wall_time == outcome.decision.predicted_time
            if outcome.decision.deadline_met:
                assert outcome.result.wall_time <= report.deadline


def test_adaptive_idle_time_not_above_baseline(caps_and_baseline):
    caps, base = caps_and_baseline
    for adaptive, fixed in zip(caps, base):
        assert adaptive.total_idle_time <= fixed.total_idle_time
        for a, b in zip(adaptive.outcomes, fixed.outcomes):
            assert a.idle_time <= b.idle_time
    assert sum(r.total_idle_time for r in caps) < sum(r.total_idle_time for r in base)


def test_presets_fall_along_the_ladder(caps_and_baseline):
    caps, _ = caps_and_baseline
    for report in caps:
        presets = [d.preset for d in report.decisions]
        assert presets == sorted(presets, reverse=True)
        assert presets[-2:] == [0, 0]
        assert presets[0] > presets[-1]

    table = summarize(caps).table
    means = list(table["mean_preset"])
    assert all(a >= b for a, b in zip(means, means[1:]))


def test_selection_is_the_slowest_feasible_preset(caps_and_baseline):
    caps, _ = caps_and_baseline
    backend = EncoderBackend()
    ladder = LadderConfig()
    predictor = perfect(backend, ladder)
    for report in caps:
        plans = plan_segment(report.features, report.deadline, ladder, predictor)
        for plan, outcome in zip(plans, report.outcomes):
            feasible = [p for p, t in plan.times.items() if t <= report.deadline]
            expected = max(feasible) if feasible else min(plan.times)
            assert outcome.decision.preset == expected
            assert outcome.decision.margin == pytest.approx(
                report.deadline - outcome.decision.predicted_time
            )


def test_flat_segment_decisions():
    ladder = LadderConfig()
    backend = EncoderBackend()
    segment = constant_segment(0)
    report = run_segment(segment, ladder, perfect(backend, ladder), backend, analyzer=ANALYZER)

    first, last = report.outcomes[0], report.outcomes[-1]
    assert first.decision.preset == 6
    assert first.decision.deadline_met
    assert last.decision.preset == 0
    assert not last.decision.deadline_met
    assert last.idle_time == 0.0
    assert report.violations >= 2
    assert report.extraction_seconds > 0


def test_baseline_uses_fastest_preset_and_no_prediction(caps_and_baseline):
    _, base = caps_and_baseline
    for report in base:
        for outcome in report.outcomes:
            assert outcome.decision.preset == 0
            assert math.isnan(outcome.decision.predicted_time)
            assert math.isnan(outcome.decision.margin)
            assert outcome.decision.deadline_met == (outcome.result.wall_time <= report.deadline)


def test_baseline_honours_preset_floor():
    ladder = LadderConfig(preset_range=(2, 8))
    report = run_baseline(constant_segment(0, frames=24), ladder, EncoderBackend(), analyzer=ANALYZER)
    assert {d.preset for d in report.decisions} == {2}


def test_serial_and_concurrent_runs_agree(analyzed):
    ladder = LadderConfig()
    backend = EncoderBackend()
    predictor = perfect(backend, ladder)
    segment, features = analyzed[0]
    concurrent = run_segment(segment, ladder, predictor, backend, features=features, slots=3)
    serial = run_segment(segment, ladder, predictor, backend, features=features, serial=True)
    assert concurrent.decisions == serial.decisions
    assert [o.result.wall_time for o in concurrent.outcomes] == [o.result.wall_time for o in serial.outcomes]


class NarrowPredictor:
    resolutions = (360, 432, 540, 720, 1080, 1440)
    presets = range(0, 9)

    def predict_all_presets(self, fv, r):
        return {p: 1.0 for p in self.presets}


def test_missing_resolution_fails_before_encoding(monkeypatch):
    calls = []
    monkeypatch.setattr(orchestrator, "run_job", lambda *a, **k: calls.append(a))
    with pytest.raises(ConfigurationError, match="2160"):
        run_segment(constant_segment(0, frames=24), LadderConfig(), NarrowPredictor(), EncoderBackend())
    with pytest.raises(ConfigurationError):
        run_ladder([constant_segment(0, frames=24)], LadderConfig(), EncoderBackend(), "unused", NarrowPredictor())
    assert calls == []


def test_missing_presets_are_reported():
    predictor = PerfectPredictor(EncoderBackend().mock, 8, preset_range=(0, 5))
    with pytest.raises(ConfigurationError, match="presets"):
        check_coverage(predictor, LadderConfig(rungs=HLS_LADDER))


def test_segment_length_sets_deadline():
    ladder = LadderConfig()
    backend = EncoderBackend()
    short = constant_segment(0, frames=60)
    report = run_segment(short, ladder, perfect(backend, ladder), backend, analyzer=ANALYZER)
    assert report.deadline == 2.5


def test_run_ladder_writes_run_files(tmp_path, analyzed):
    ladder = LadderConfig()
    backend = EncoderBackend()
    segments = [s for s, _ in analyzed[:3]]
    reports, summary = run_ladder(
        segments, ladder, backend, str(tmp_path), models=perfect(backend, ladder), analyzer=ANALYZER
    )
    for name in ("segments.csv", "decisions.csv", "summary.csv", "summary.txt"):
        assert (tmp_path / name).exists()

    decisions = pd.read_csv(tmp_path / "decisions.csv", dtype={"rung": str})
    assert list(decisions.columns) == DECISION_COLUMNS
    assert len(decisions) == 3 * len(ladder.rungs)
    assert set(decisions["rung"]) == {f"{i:02d}" for i in range(1, 13)}
    assert decisions["output"].iloc[0].endswith(os.path.join("encodes", "syn0000_r01.hevc"))

    segments_csv = pd.read_csv(tmp_path / "segments.csv")
    assert list(segments_csv["frames"]) == [120, 120, 120]

    assert summary.segments == 3
    assert summary.violations == sum(r.violations for r in reports)
    assert summary.total_idle_time == pytest.approx(sum(r.total_idle_time for r in reports))
    assert "deadline violations" in (tmp_path / "summary.txt").read_text()


def test_summary_rates(caps_and_baseline):
    caps, _ = caps_and_baseline
    table = summarize(caps).table
    assert len(table) == 12
    assert table["violation_rate"].between(0, 1).all()
    assert table.iloc[-1]["violation_rate"] == 1.0
    assert table.iloc[0]["violation_rate"] == 0.0
    assert (table["mean_psnr"] > 0).all()


def test_write_run_for_baseline(tmp_path, caps_and_baseline):
    _, base = caps_and_baseline
    summary = write_run(base, str(tmp_path))
    decisions = pd.read_csv(tmp_path / "decisions.csv")
    assert decisions["predicted_time"].isna().all()
    assert summary.segments == len(base)


def test_failed_encodes_leave_no_idle_time(tmp_path):
    ladder = LadderConfig(rungs=(HLS_LADDER[0],), segment_frames=24)
    backend = EncoderBackend(
        kind="command",
        command=[sys.executable, "-c", "import sys; sys.exit(1)"],
        compute_psnr=False,
        timeout_factor=100.0,
    )
    segment = synthetic_segment(0, width=64, height=64, frames=24)
    report = run_baseline(segment, ladder, backend, analyzer=ANALYZER, output_dir=str(tmp_path))

    outcome = report.outcomes[0]
    assert outcome.result.status == "failed"
    assert outcome.idle_time == 0.0
    assert not outcome.decision.deadline_met
    assert (report.violations, report.failures) == (1, 1)

    summary = write_run([report], str(tmp_path / "run"))
    assert (summary.violations, summary.failures) == (1, 1)
    assert summary.total_idle_time == 0.0
    row = summary.table.iloc[0]
    assert (row["violation_rate"], row["failure_rate"], row["mean_idle_time"]) == (1.0, 1.0, 0.0)
    assert "failed encodes:       1" in (tmp_path / "run" / "summary.txt").read_text()


def test_missing_encoder_fails_before_the_run(tmp_path, monkeypatch):
    backend = EncoderBackend(kind="command", command=["caps-no-such-encoder", "{output}"], compute_psnr=False)
    monkeypatch.setattr(orchestrator, "run_job", lambda *a, **k: pytest.fail("encode started"))
    segments = [synthetic_segment(0, width=64, height=64, frames=24)]
    with pytest.raises(ConfigurationError, match="not found on PATH"):
        run_ladder(segments, LadderConfig(segment_frames=24), backend, str(tmp_path))


def test_summary_reports_clamped_dc_blocks(tmp_path, caps_and_baseline):
    caps, _ = caps_and_baseline
    assert summarize(caps).clamped_dc_blocks == 0
    flagged = replace(caps[0], features=replace(caps[0].features, clamped_dc_blocks=3))
    summary = write_run([flagged, caps[1]], str(tmp_path))
    assert summary.clamped_dc_blocks == 3
    assert "clamped DC blocks:    3" in (tmp_path / "summary.txt").read_text()
