"""Configuration loading for CAPS."""

import json
import logging
import os
from dataclasses import dataclass, field, replace
from typing import Any, Dict, List, Optional, Tuple

from dotenv import load_dotenv

from .complexity import AnalyzerConfig
from .harness import EncoderBackend, MockParams
from .ladder import HLS_LADDER, LadderConfig, Representation
from .timing_model import Hyperparams
from .utils import CapsError, ConfigurationError

# Auto-load environment variables from a .env file if present
# override=False ensures system env vars take precedence over .env file
load_dotenv(override=False)

logger = logging.getLogger("CAPS")

CONFIG_ENV = "CAPS_CONFIG"
DEFAULT_CONFIG_FILE = "caps_config.json"

# camelCase config key -> MockParams field
MOCK_KEYS = {
    "alpha": "alpha",
    "beta": "beta",
    "gamma": "gamma",
    "rRef": "r_ref",
    "rho": "rho",
    "bRef": "b_ref",
    "kappa": "kappa",
    "presetExponent": "preset_exponent",
    "threadsRef": "threads_ref",
    "psnrBase": "psnr_base",
    "psnrPerDecade": "psnr_per_decade",
    "psnrPerPreset": "psnr_per_preset",
    "psnrPerEnergy": "psnr_per_energy",
}


@dataclass(frozen=True)
class RunOptions:
    """Options of ``encode-ladder``/``encode-baseline`` runs."""

    model_path: Optional[str] = None
    output_dir: str = "runs"
    slots: Optional[int] = None
    serial: bool = False
    latency_budget_seconds: float = 0.5
    realtime: bool = False
    psnr_ceiling: float = 100.0


@dataclass(frozen=True)
class RunConfig:
    """Everything a CAPS command needs, resolved from file and defaults."""

    ladder: LadderConfig = field(default_factory=LadderConfig)
    analyzer: AnalyzerConfig = field(default_factory=AnalyzerConfig)
    analyzer_workers: int = 1
    hyperparams: Hyperparams = field(default_factory=Hyperparams)
    training_jobs: int = 1
    holdout: float = 0.0
    backend: EncoderBackend = field(default_factory=EncoderBackend)
    run: RunOptions = field(default_factory=RunOptions)


def get_config_path(cli_path: Optional[str] = None) -> str:
    """Get the path to the run config file.

    Args:
        cli_path: Path given with ``--config``

    Returns:
        ``cli_path``, else ``$CAPS_CONFIG``, else ``./caps_config.json``
    """
    return cli_path or os.environ.get(CONFIG_ENV) or os.path.join(os.getcwd(), DEFAULT_CONFIG_FILE)


def load_config(path: Optional[str] = None) -> Dict[str, Any]:
    """Load the JSON run config.

    Environment references (``${VAR}`` or ``$VAR``) are expanded before
    parsing.

    Returns:
        Configuration dictionary, empty if the file does not exist

    Raises:
        ConfigurationError: If the file exists but is not valid JSON
    """
    path = get_config_path(path)
    if not os.path.exists(path):
        logger.info(f"No config file at {path}, using defaults")
        return {}

    try:
        with open(path, "r", encoding="utf-8") as f:
            expanded_content = os.path.expandvars(f.read())
        config = json.loads(expanded_content)
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigurationError(f"Failed to load config {path}: {e}") from e
    if not isinstance(config, dict):
        raise ConfigurationError(f"Config {path} must hold a JSON object")
    logger.info(f"Loaded config from {path}")
    return config


def get_enabled_rungs(config: Dict[str, Any]) -> Tuple[List[Representation], List[Representation]]:
    """Get enabled and disabled ladder rungs from config.

    Args:
        config: Configuration dictionary

    Returns:
        Tuple of (enabled_rungs, disabled_rungs); the built-in ladder when
        the config lists no rungs
    """
    ladder_cfg = config.get("ladder", {}) if isinstance(config, dict) else {}
    entries = ladder_cfg.get("rungs")
    if entries is None:
        return list(HLS_LADDER), []

    enabled: List[Representation] = []
    disabled: List[Representation] = []
    for entry in entries:
        try:
            rung = Representation(int(entry["width"]), float(entry["bitrateKbps"]))
        except (KeyError, TypeError, ValueError) as e:
            raise ConfigurationError(f"Invalid ladder rung {entry}: {e}") from e
        if (entry or {}).get("disabled"):
            disabled.append(rung)
        else:
            enabled.append(rung)
    return enabled, disabled


def _section(config: Dict[str, Any], name: str) -> Dict[str, Any]:
    section = config.get(name) or {}
    if not isinstance(section, dict):
        raise ConfigurationError(f"Config section '{name}' must be an object")
    return section


def _ladder(config: Dict[str, Any]) -> LadderConfig:
    section = _section(config, "ladder")
    enabled, disabled = get_enabled_rungs(config)
    if disabled:
        labels = ", ".join(f"{r.width}/{r.bitrate_kbps:g}k" for r in disabled)
        logger.info(f"Skipping disabled rungs: {labels}")
    p_range = section.get("presetRange", [0, 8])
    return LadderConfig(
        rungs=tuple(enabled),
        framerate=float(section.get("framerate", 24.0)),
        segment_frames=int(section.get("segmentFrames", 120)),
        threads_per_instance=int(section.get("threadsPerInstance", 8)),
        preset_range=(int(p_range[0]), int(p_range[1])),
    )


def _mock_params(section: Dict[str, Any]) -> MockParams:
    unknown = sorted(set(section) - set(MOCK_KEYS))
    if unknown:
        raise ConfigurationError(f"Unknown mock parameters: {', '.join(unknown)}")
    return MockParams(**{MOCK_KEYS[k]: float(v) for k, v in section.items()})


def _backend(config: Dict[str, Any], psnr_ceiling: float, realtime: bool) -> EncoderBackend:
    section = _section(config, "backend")
    return EncoderBackend(
        kind=str(section.get("type", "mock")),
        command=section.get("command"),
        decode_command=section.get("decodeCommand"),
        timeout_factor=float(section.get("timeoutFactor", 3.0)),
        repetitions=int(section.get("repetitions", 1)),
        env={str(k): str(v) for k, v in (section.get("env") or {}).items()},
        mock=_mock_params(section.get("mock") or {}),
        realtime=realtime,
        psnr_ceiling=psnr_ceiling,
    )


def build_run_config(config: Dict[str, Any]) -> RunConfig:
    """Turn a loaded config dictionary into a :class:`RunConfig`.

    Raises:
        ConfigurationError: If any value is missing, malformed or invalid
    """
    try:
        analyzer = _section(config, "analyzer")
        training = _section(config, "training")
        run = _section(config, "run")
        slots = run.get("slots")
        options = RunOptions(
            model_path=run.get("modelPath"),
            output_dir=str(run.get("outputDir", "runs")),
            slots=int(slots) if slots is not None else None,
            serial=bool(run.get("serial", False)),
            latency_budget_seconds=float(run.get("latencyBudgetSeconds", 0.5)),
            realtime=bool(run.get("realtime", False)),
            psnr_ceiling=float(run.get("psnrCeiling", 100.0)),
        )
        return RunConfig(
            ladder=_ladder(config),
            analyzer=AnalyzerConfig(
                block_size=int(analyzer.get("blockSize", 32)),
                bit_depth=int(analyzer.get("bitDepth", 8)),
            ),
            analyzer_workers=int(analyzer.get("workers", 1)),
            hyperparams=Hyperparams(
                n_trees=int(training.get("nTrees", 200)),
                max_depth=int(training.get("maxDepth", 4)),
                learning_rate=float(training.get("learningRate", 0.1)),
                min_samples_leaf=int(training.get("minSamplesLeaf", 5)),
                subsample=float(training.get("subsample", 1.0)),
                seed=int(training.get("seed", 0)),
            ),
            training_jobs=int(training.get("jobs", 1)),
            holdout=float(training.get("holdout", 0.0)),
            backend=_backend(config, options.psnr_ceiling, options.realtime),
            run=options,
        )
    except ConfigurationError:
        raise
    except (CapsError, TypeError, ValueError, IndexError) as e:
        raise ConfigurationError(f"Invalid configuration: {e}") from e


def apply_overrides(
    cfg: RunConfig,
    threads: Optional[int] = None,
    mock: bool = False,
    serial: Optional[bool] = None,
    slots: Optional[int] = None,
    output_dir: Optional[str] = None,
    model_path: Optional[str] = None,
) -> RunConfig:
    """Apply command-line overrides on top of file values."""
    try:
        if threads is not None:
            cfg = replace(cfg, ladder=replace(cfg.ladder, threads_per_instance=threads))
        if mock and not cfg.backend.is_mock:
            logger.info("Using mock encoder backend (--mock)")
            cfg = replace(cfg, backend=replace(cfg.backend, kind="mock"))
    except CapsError as e:
        raise ConfigurationError(str(e)) from e

    run = cfg.run
    if serial is not None:
        run = replace(run, serial=serial)
    if slots is not None:
        run = replace(run, slots=slots)
    if output_dir is not None:
        run = replace(run, output_dir=output_dir)
    if model_path is not None:
        run = replace(run, model_path=model_path)
    return replace(cfg, run=run)
