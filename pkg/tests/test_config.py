"""Tests for run configuration loading."""

import json

import pytest

from caps_preset.config import (
    RunConfig,
    apply_overrides,
    build_run_config,
    get_config_path,
    get_enabled_rungs,
    load_config,
)
from caps_preset.ladder import HLS_LADDER, Representation
from caps_preset.utils import ConfigurationError


def write_config(tmp_path, data):
    path = tmp_path / "caps_config.json"
    path.write_text(json.dumps(data) if not isinstance(data, str) else data)
    return str(path)


def test_missing_file_means_defaults(tmp_path):
    assert load_config(str(tmp_path / "absent.json")) == {}
    cfg = build_run_config({})
    assert cfg.ladder.rungs == HLS_LADDER
    assert cfg.ladder.target_time == 5.0
    assert cfg.backend.is_mock
    assert cfg.analyzer.block_size == 32
    assert cfg.hyperparams.n_trees == 200
    assert cfg.run.output_dir == "runs"


def test_config_path_resolution(monkeypatch, tmp_path):
    monkeypatch.setenv("CAPS_CONFIG", "/etc/caps.json")
    assert get_config_path("cli.json") == "cli.json"
    assert get_config_path() == "/etc/caps.json"
    monkeypatch.delenv("CAPS_CONFIG")
    monkeypatch.chdir(tmp_path)
    assert get_config_path() == str(tmp_path / "caps_config.json")


def test_environment_variables_are_expanded(tmp_path, monkeypatch):
    monkeypatch.setenv("CAPS_TEST_OUT", "/data/runs")
    path = write_config(tmp_path, {"run": {"outputDir": "${CAPS_TEST_OUT}/live"}})
    cfg = build_run_config(load_config(path))
    assert cfg.run.output_dir == "/data/runs/live"


def test_invalid_json(tmp_path):
    with pytest.raises(ConfigurationError):
        load_config(write_config(tmp_path, "{broken"))
    with pytest.raises(ConfigurationError):
        load_config(write_config(tmp_path, "[1, 2]"))


def test_disabled_rungs_are_skipped():
    config = {
        "ladder": {
            "rungs": [
                {"width": 360, "bitrateKbps": 145},
                {"width": 720, "bitrateKbps": 2400},
                {"width": 2160, "bitrateKbps": 16800, "disabled": True},
            ]
        }
    }
    enabled, disabled = get_enabled_rungs(config)
    assert enabled == [Representation(360, 145), Representation(720, 2400)]
    assert disabled == [Representation(2160, 16800)]
    assert build_run_config(config).ladder.widths == (360, 720)


def test_ladder_and_training_sections():
    cfg = build_run_config(
        {
            "ladder": {"framerate": 30, "segmentFrames": 60, "threadsPerInstance": 4, "presetRange": [1, 6]},
            "analyzer": {"blockSize": 16, "workers": 2},
            "training": {"nTrees": 50, "maxDepth": 3, "jobs": 4, "holdout": 0.2, "seed": 9},
        }
    )
    assert cfg.ladder.target_time == 2.0
    assert cfg.ladder.threads_per_instance == 4
    assert list(cfg.ladder.presets) == [1, 2, 3, 4, 5, 6]
    assert cfg.analyzer.block_size == 16
    assert cfg.analyzer_workers == 2
    assert (cfg.hyperparams.n_trees, cfg.hyperparams.max_depth, cfg.hyperparams.seed) == (50, 3, 9)
    assert (cfg.training_jobs, cfg.holdout) == (4, 0.2)


def test_mock_parameters():
    cfg = build_run_config({"backend": {"type": "mock", "mock": {"gamma": 1.5, "presetExponent": 2}}})
    assert cfg.backend.mock.gamma == 1.5
    assert cfg.backend.mock.preset_exponent == 2.0
    assert cfg.backend.mock.alpha == 0.01


@pytest.mark.parametrize(
    "config",
    [
        {"backend": {"mock": {"speed": 2}}},
        {"backend": {"type": "gpu"}},
        {"backend": {"type": "command", "command": "handbrake"}},
        {"ladder": {"rungs": [{"width": 360}]}},
        {"ladder": {"rungs": [{"width": 720, "bitrateKbps": 2400}, {"width": 360, "bitrateKbps": 145}]}},
        {"ladder": {"presetRange": [3, 12]}},
        {"analyzer": {"blockSize": 12}},
        {"run": "fast"},
        {"run": {"slots": "many"}},
    ],
)
def test_invalid_values(config):
    with pytest.raises(ConfigurationError):
        build_run_config(config)


def test_command_backend():
    cfg = build_run_config(
        {
            "backend": {
                "type": "command",
                "command": "x265",
                "timeoutFactor": 2,
                "repetitions": 3,
                "env": {"X265_LOG": 1},
            },
            "run": {"psnrCeiling": 90},
        }
    )
    assert not cfg.backend.is_mock
    assert cfg.backend.repetitions == 3
    assert cfg.backend.env == {"X265_LOG": "1"}
    assert cfg.backend.psnr_ceiling == 90.0


def test_overrides():
    cfg = build_run_config({"backend": {"type": "command"}})
    cfg = apply_overrides(cfg, threads=2, mock=True, serial=True, slots=3, output_dir="out", model_path="m.json")
    assert isinstance(cfg, RunConfig)
    assert cfg.backend.is_mock
    assert cfg.ladder.threads_per_instance == 2
    assert (cfg.run.serial, cfg.run.slots, cfg.run.output_dir, cfg.run.model_path) == (True, 3, "out", "m.json")

    with pytest.raises(ConfigurationError):
        apply_overrides(cfg, threads=0)
