"""Tests for the encoding harness and dataset builder."""

import logging
import math
import os
import sys

import pandas as pd
import pytest
from conftest import constant_segment

from caps_preset.complexity import SegmentFeatures
from caps_preset.encoder import COMMAND_TEMPLATES, build_command, resolve_template
from caps_preset.harness import (
    STATUS_FAILED,
    STATUS_TIMEOUT,
    EncodeJob,
    EncoderBackend,
    MockParams,
    PerfectPredictor,
    build_dataset,
    ledger_path_for,
    mock_encode_time,
    run_job,
)
from caps_preset.ladder import LadderConfig, Representation
from caps_preset.ledger import JobLedger
from caps_preset.timing_model import FeatureVector
from caps_preset.utils import ConfigurationError, DatasetError, InputError
from caps_preset.yuv import iter_segments, synthetic_segment

ZERO = SegmentFeatures(E=0.0, h=0.0, L=0.0, frame_count=120, blocks_per_frame=4)
SMALL_LADDER = LadderConfig(
    rungs=(Representation(360, 145), Representation(540, 900), Representation(1080, 4500)),
    preset_range=(0, 2),
    segment_frames=8,
)


def job_for(rep, preset, features=ZERO, threads=8, segment=None, output="out.hevc", deadline=None):
    return EncodeJob(
        segment=segment or constant_segment(0, frames=8),
        representation=rep,
        preset=preset,
        threads=threads,
        output=output,
        features=features,
        deadline=deadline,
    )


def python_command(code, *args):
    return [sys.executable, "-c", code, *args]


def small_segments(count, frames=8):
    from caps_preset.complexity import AnalyzerConfig, segment_features

    out = []
    for seed in range(count):
        segment = synthetic_segment(seed, width=32, height=32, frames=frames)
        out.append((segment, segment_features(segment.frames, AnalyzerConfig(block_size=8))))
    return out


# Mock backend


def test_mock_square_root_example():
    params = MockParams(alpha=0.0, beta=0.0, gamma=0.2, rho=0.0, kappa=0.5, preset_exponent=1.0)
    backend = EncoderBackend(kind="mock", mock=params)
    result = run_job(job_for(Representation(1080, 1600), 0), backend)
    assert result.ok
    assert result.wall_time == pytest.approx(0.2 * math.sqrt(1.6), rel=1e-12)
    assert result.wall_time == pytest.approx(0.253, abs=1e-3)


def test_mock_slower_presets_take_longer(mock_backend):
    rep = Representation(720, 2400)
    assert run_job(job_for(rep, 8), mock_backend).wall_time > run_job(job_for(rep, 0), mock_backend).wall_time


def test_mock_is_bit_deterministic(mock_backend):
    features = SegmentFeatures(E=12.345, h=0.678, L=9.1, frame_count=120, blocks_per_frame=4)
    job = job_for(Representation(1440, 8100), 3, features=features)
    times = {run_job(job, mock_backend).wall_time for _ in range(5)}
    assert len(times) == 1


def test_mock_default_calibration(mock_backend):
    first, top = Representation(360, 145), Representation(2160, 11600)
    assert run_job(job_for(first, 6), mock_backend).wall_time <= 5.0
    assert run_job(job_for(first, 7), mock_backend).wall_time > 5.0
    assert run_job(job_for(top, 0), mock_backend).wall_time > 5.0
    assert run_job(job_for(Representation(2160, 16800), 0), mock_backend).wall_time > 5.0


def test_mock_scales_with_threads(mock_backend):
    rep = Representation(720, 2400)
    eight = run_job(job_for(rep, 2, threads=8), mock_backend).wall_time
    four = run_job(job_for(rep, 2, threads=4), mock_backend).wall_time
    assert four == pytest.approx(2 * eight)


def test_mock_reports_size_and_quality(mock_backend):
    result = run_job(job_for(Representation(720, 2400), 2), mock_backend)
    assert result.output_bytes == round(2400 * 1000 / 8 * (8 / 24))
    assert result.achieved_kbps == 2400
    assert 1.0 <= result.psnr <= 100.0


def test_mock_repetitions_keep_value():
    rep = Representation(720, 2400)
    once = run_job(job_for(rep, 1), EncoderBackend()).wall_time
    thrice = run_job(job_for(rep, 1), EncoderBackend(repetitions=3)).wall_time
    assert once == thrice


def test_mock_computes_missing_features(mock_backend):
    job = EncodeJob(constant_segment(0, frames=8), Representation(360, 145), 0, 8, "x.hevc")
    direct = run_job(job_for(Representation(360, 145), 0), mock_backend)
    assert run_job(job, mock_backend).wall_time == direct.wall_time


def test_perfect_predictor_matches_mock(mock_backend):
    features = SegmentFeatures(E=40.0, h=3.0, L=5.0, frame_count=120, blocks_per_frame=4)
    predictor = PerfectPredictor(mock_backend.mock, threads=8)
    for rep in LadderConfig().rungs:
        fv = FeatureVector.build(features.E, features.h, features.L, rep.width, rep.bitrate_kbps)
        times = predictor.predict_all_presets(fv, rep.width)
        for p, t in times.items():
            assert run_job(job_for(rep, p, features=features), mock_backend).wall_time == t


def test_invalid_jobs_and_backends():
    with pytest.raises(ConfigurationError):
        job_for(Representation(360, 145), 0, threads=0)
    with pytest.raises(ConfigurationError):
        EncoderBackend(kind="gpu")
    with pytest.raises(ConfigurationError):
        EncoderBackend(repetitions=0)
    with pytest.raises(ConfigurationError):
        EncoderBackend(kind="command", command="no-such-template")


def test_mock_time_never_below_floor():
    params = MockParams(gamma=0.0, alpha=0.0, beta=0.0)
    assert mock_encode_time(0.0, 0.0, math.log(360), math.log(145), 0, 8, params) == 0.001


# Command backend


def test_command_templates_substitute_placeholders():
    template = resolve_template("x265", COMMAND_TEMPLATES, "x265")
    cmd = build_command(
        template,
        {
            "input": "in.y4m", "output": "out.hevc", "width": 720, "bitrate_kbps": 2400.0,
            "preset": 3, "preset_name": "faster", "threads": 8, "start_frame": 120,
            "end_frame": 240, "frames": 120, "framerate": 24.0,
        },
    )
    assert cmd[cmd.index("--bitrate") + 1] == "2400"
    assert cmd[cmd.index("--seek") + 1] == "120"
    assert cmd[cmd.index("--preset") + 1] == "3"


def test_unknown_placeholder_rejected():
    with pytest.raises(ConfigurationError, match="nope"):
        build_command(["enc", "{nope}"], {"input": "x"})


def test_command_success(tmp_path):
    code = "import sys; open(sys.argv[1], 'wb').write(b'x' * 1000)"
    backend = EncoderBackend(
        kind="command", command=python_command(code, "{output}"), compute_psnr=False, timeout_factor=100.0
    )
    output = tmp_path / "enc" / "seg_r01.hevc"
    result = run_job(job_for(Representation(360, 145), 0, output=str(output)), backend)
    assert result.ok
    assert result.wall_time > 0
    assert result.output_bytes == 1000
    assert result.achieved_kbps == pytest.approx(1000 * 8 / 1000 / (8 / 24))
    # generated segments are written out for the encoder
    assert (tmp_path / "enc" / "flat.src.y4m").exists()


def test_raw_sources_reach_the_encoder_as_y4m(tmp_path):
    raw = tmp_path / "clip.yuv"
    raw.write_bytes((bytes(range(256)) + bytes([128]) * 128) * 2)
    segment = next(iter_segments(str(raw), 2, raw=True, width=16, height=16))
    code = (
        "import sys; head = open(sys.argv[1], 'rb').read(9); "
        "sys.exit(2) if head != b'YUV4MPEG2' else open(sys.argv[2], 'wb').write(b'x' * 10)"
    )
    backend = EncoderBackend(
        kind="command", command=python_command(code, "{input}", "{output}"), compute_psnr=False,
        timeout_factor=100.0,
    )
    output = tmp_path / "enc" / "seg0000_r01.hevc"
    output.parent.mkdir()
    result = run_job(job_for(Representation(360, 145), 0, segment=segment, output=str(output)), backend)
    assert result.ok, result.diagnostics
    wrapped = tmp_path / "enc" / "seg0000.src.y4m"
    assert wrapped.read_bytes().startswith(b"YUV4MPEG2 W16 H16")


def test_command_failure_captures_stderr(tmp_path):
    code = "import sys; sys.stderr.write('encoder exploded'); sys.exit(3)"
    backend = EncoderBackend(
        kind="command", command=python_command(code), compute_psnr=False, timeout_factor=100.0
    )
    result = run_job(job_for(Representation(360, 145), 0, output=str(tmp_path / "o.hevc")), backend)
    assert result.status == STATUS_FAILED
    assert "encoder exploded" in result.diagnostics


def test_command_missing_program(tmp_path):
    backend = EncoderBackend(kind="command", command=["caps-no-such-encoder", "{output}"], compute_psnr=False)
    result = run_job(job_for(Representation(360, 145), 0, output=str(tmp_path / "o.hevc")), backend)
    assert result.status == STATUS_FAILED


def test_missing_program_stops_dataset_before_any_job(tmp_path):
    backend = EncoderBackend(kind="command", command=["caps-no-such-encoder", "{output}"], compute_psnr=False)
    out = tmp_path / "d.csv"
    with pytest.raises(ConfigurationError, match="caps-no-such-encoder"):
        build_dataset(small_segments(1), SMALL_LADDER, SMALL_LADDER.presets, backend, str(out))
    assert not os.path.exists(ledger_path_for(str(out)))


def test_decoder_checked_only_when_measuring_psnr():
    encoder = python_command("pass", "{output}")
    decoder = ["caps-no-such-decoder"]
    EncoderBackend(kind="command", command=encoder, decode_command=decoder, compute_psnr=False).check_programs()
    with pytest.raises(ConfigurationError, match="caps-no-such-decoder"):
        EncoderBackend(kind="command", command=encoder, decode_command=decoder).check_programs()
    EncoderBackend().check_programs()


def test_command_timeout(tmp_path):
    backend = EncoderBackend(
        kind="command",
        command=python_command("import time; time.sleep(10)"),
        timeout_factor=1.0,
        compute_psnr=False,
    )
    job = job_for(Representation(360, 145), 0, output=str(tmp_path / "o.hevc"), deadline=0.2)
    result = run_job(job, backend)
    assert result.status == STATUS_TIMEOUT
    assert result.wall_time < 5


# Dataset building


def test_build_dataset_row_count(tmp_path, mock_backend):
    segments = small_segments(3)
    out = tmp_path / "dataset.csv"
    dataset = build_dataset(segments, SMALL_LADDER, SMALL_LADDER.presets, mock_backend, str(out))
    assert len(dataset) == 3 * 3 * 3
    df = pd.read_csv(out)
    assert list(df.columns) == ["segment_id", "E", "h", "L", "width", "bitrate_kbps", "preset", "time_seconds"]
    assert (df["time_seconds"] > 0).all()


def test_resume_is_idempotent(tmp_path, mock_backend):
    segments = small_segments(3)
    partial = tmp_path / "partial.csv"
    build_dataset(segments[:2], SMALL_LADDER, SMALL_LADDER.presets, mock_backend, str(partial))
    build_dataset(segments, SMALL_LADDER, SMALL_LADDER.presets, mock_backend, str(partial))
    build_dataset(segments, SMALL_LADDER, SMALL_LADDER.presets, mock_backend, str(partial))

    whole = tmp_path / "whole.csv"
    build_dataset(segments, SMALL_LADDER, SMALL_LADDER.presets, mock_backend, str(whole), jobs=4)
    assert partial.read_text() == whole.read_text()


def test_failed_jobs_are_omitted_and_logged_once(tmp_path, caplog):
    code = "import sys; p = int(sys.argv[1]); sys.exit(1) if p == 1 else open(sys.argv[2], 'wb').write(b'x' * 64)"
    backend = EncoderBackend(
        kind="command", command=python_command(code, "{preset}", "{output}"), compute_psnr=False,
        timeout_factor=100.0,
    )
    ladder = LadderConfig(rungs=(Representation(360, 145),), preset_range=(0, 2), segment_frames=8)
    segments = small_segments(2)
    out = tmp_path / "dataset.csv"

    with caplog.at_level(logging.WARNING, logger="CAPS"):
        dataset = build_dataset(segments, ladder, ladder.presets, backend, str(out))
    assert len(dataset) == 2 * 2
    assert sum("omitted" in r.message for r in caplog.records) == 2
    assert JobLedger(ledger_path_for(str(out))).failure_count() == 2

    caplog.clear()
    with caplog.at_level(logging.WARNING, logger="CAPS"):
        build_dataset(segments, ladder, ladder.presets, backend, str(out))
    assert not any("omitted" in r.message for r in caplog.records)

    caplog.clear()
    with caplog.at_level(logging.WARNING, logger="CAPS"):
        build_dataset(segments, ladder, ladder.presets, backend, str(out), retry_failed=True)
    assert sum("omitted" in r.message for r in caplog.records) == 2
    assert not any(p.suffix == ".hevc" for p in tmp_path.rglob("*"))


def test_all_jobs_failing_is_an_error(tmp_path):
    backend = EncoderBackend(kind="command", command=python_command("import sys; sys.exit(1)"), compute_psnr=False)
    ladder = LadderConfig(rungs=(Representation(360, 145),), preset_range=(0, 0), segment_frames=8)
    with pytest.raises(DatasetError):
        build_dataset(small_segments(1), ladder, ladder.presets, backend, str(tmp_path / "d.csv"))


def test_duplicate_segment_ids_rejected(tmp_path, mock_backend):
    segments = small_segments(1) * 2
    with pytest.raises(InputError):
        build_dataset(segments, SMALL_LADDER, SMALL_LADDER.presets, mock_backend, str(tmp_path / "d.csv"))
    assert not os.path.exists(tmp_path / "d.csv")
