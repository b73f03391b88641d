"""Shared utilities for CAPS preset prediction."""

import logging
import os
from contextlib import contextmanager
from typing import Iterator


class CapsError(Exception):
    """Base exception for CAPS errors."""

    pass


class ConfigurationError(CapsError):
    """Configuration-related errors (analyzer, ladder, backend, model coverage)."""

    pass


class InputError(CapsError):
    """Invalid input data (frames, segments, time maps, curves)."""

    pass


class TrainingError(CapsError):
    """Model training errors."""

    pass


class ModelLookupError(CapsError, KeyError):
    """A (resolution, preset) model requested that the model set does not hold."""

    def __str__(self) -> str:
        return str(self.args[0]) if self.args else ""


class ModelLoadError(CapsError):
    """Model file could not be loaded (version, topology)."""

    pass


class DatasetError(CapsError):
    """Training dataset errors."""

    pass


class EvaluationError(CapsError):
    """Rate-quality evaluation errors."""

    pass


LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"
RUN_LOG_NAME = "caps.log"


def setup_logging(level: int = logging.INFO) -> logging.Logger:
    """Send ``CAPS`` records to stderr at ``level`` and return the logger."""
    logging.basicConfig(level=level, format=LOG_FORMAT)
    logger = logging.getLogger("CAPS")
    logger.setLevel(level)
    return logger


@contextmanager
def run_log(run_dir: str) -> Iterator[str]:
    """Copy ``CAPS`` records into ``<run_dir>/caps.log`` while the block runs.

    The file is appended to, so resumed or repeated runs keep their history.

    Yields:
        Path of the log file
    """
    os.makedirs(run_dir, exist_ok=True)
    path = os.path.join(run_dir, RUN_LOG_NAME)
    handler = logging.FileHandler(path, encoding="utf-8")
    handler.setFormatter(logging.Formatter(LOG_FORMAT))
    logger = logging.getLogger("CAPS")
    logger.addHandler(handler)
    try:
        yield path
    finally:
        logger.removeHandler(handler)
        handler.close()
