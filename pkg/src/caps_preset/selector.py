"""Deadline-constrained preset selection."""

import math
from dataclasses import dataclass
from typing import Mapping

from .utils import InputError

# x265 preset names by index
PRESET_NAMES = (
    "ultrafast",
    "superfast",
    "veryfast",
    "faster",
    "fast",
    "medium",
    "slow",
    "slower",
    "veryslow",
    "placebo",
)


def preset_name(preset: int) -> str:
    """x265 name of a preset index."""
    if not 0 <= preset < len(PRESET_NAMES):
        raise InputError(f"Preset index {preset} outside 0..{len(PRESET_NAMES) - 1}")
    return PRESET_NAMES[preset]


@dataclass(frozen=True)
class DeadlineSpec:
    """Live deadline of a segment: ``n`` frames at ``f`` frames per second."""

    n: int
    f: float

    def __post_init__(self) -> None:
        target_time(self.n, self.f)

    @property
    def T(self) -> float:
        return self.n / self.f


@dataclass(frozen=True)
class PresetDecision:
    """Selected preset and its predicted encoding time.

    Attributes:
        preset: Selected preset index
        predicted_time: Predicted encoding time of ``preset`` in seconds
        deadline_met: Whether ``predicted_time <= T``
        margin: ``T - predicted_time`` in seconds
    """

    preset: int
    predicted_time: float
    deadline_met: bool
    margin: float


def target_time(n: int, f: float) -> float:
    """Target encoding time ``T = n / f`` in seconds.

    Raises:
        InputError: If ``n < 1`` or ``f <= 0``
    """
    if n < 1:
        raise InputError(f"Segment must hold at least one frame, got n={n}")
    if not (math.isfinite(f) and f > 0):
        raise InputError(f"Framerate must be positive, got f={f}")
    return n / f


def select_preset(times: Mapping[int, float], T: float) -> PresetDecision:
    """Pick the preset whose predicted time is closest to ``T`` without exceeding it.

    Equal distances go to the higher (slower) preset. When no preset meets
    the deadline, the lowest preset is returned with ``deadline_met=False``.

    Args:
        times: Preset index -> predicted seconds, contiguous range
        T: Target encoding time in seconds

    Returns:
        The decision

    Raises:
        InputError: If ``times`` is empty or holds non-positive times
    """
    if not times:
        raise InputError("No preset predictions to choose from")
    presets = sorted(times)
    if presets != list(range(presets[0], presets[-1] + 1)):
        raise InputError(f"Preset range is not contiguous: {presets}")
    for p in presets:
        if not times[p] > 0:
            raise InputError(f"Predicted time for preset {p} must be positive, got {times[p]}")

    best = None
    for p in presets:
        t = times[p]
        if t > T:
            continue
        if best is None or T - t <= T - times[best]:
            best = p

    if best is None:
        p_min = presets[0]
        return PresetDecision(p_min, times[p_min], False, T - times[p_min])
    return PresetDecision(best, times[best], True, T - times[best])
