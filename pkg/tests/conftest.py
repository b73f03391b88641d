"""Shared fixtures for the CAPS test suite."""

import os
import sys
from typing import List

import numpy as np
import pytest

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from caps_preset.complexity import LumaFrame  # noqa: E402
from caps_preset.harness import EncoderBackend  # noqa: E402
from caps_preset.ladder import HLS_LADDER, LadderConfig  # noqa: E402
from caps_preset.yuv import Segment, synthetic_segment  # noqa: E402


def random_frames(rng: np.random.Generator, width: int, height: int, count: int, peak: int = 255) -> List[LumaFrame]:
    """Independent uniformly random frames."""
    return [
        LumaFrame.from_array(rng.integers(0, peak + 1, size=(height, width)).astype(np.uint16))
        for _ in range(count)
    ]


def constant_segment(value: int, width: int = 64, height: int = 64, frames: int = 120, segment_id: str = "flat") -> Segment:
    """Segment whose every sample equals ``value``."""
    plane = np.full((height, width), value, dtype=np.uint8)
    return Segment(segment_id, tuple(LumaFrame.from_array(plane) for _ in range(frames)))


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(20240601)


@pytest.fixture
def hls_ladder() -> LadderConfig:
    return LadderConfig(rungs=HLS_LADDER)


@pytest.fixture
def mock_backend() -> EncoderBackend:
    return EncoderBackend(kind="mock")


@pytest.fixture
def synthetic_segments() -> List[Segment]:
    """Full-length (120 frame) small synthetic segments."""
    return [synthetic_segment(seed, width=64, height=64, frames=120) for seed in range(4)]
