"""Bitrate ladder definitions."""

from dataclasses import dataclass
from typing import Tuple

from .selector import PRESET_NAMES, target_time
from .utils import ConfigurationError


@dataclass(frozen=True)
class Representation:
    """One (width, bitrate) rung of a ladder; bitrate in kbps."""

    width: int
    bitrate_kbps: float

    def __post_init__(self) -> None:
        if self.width <= 0 or not self.bitrate_kbps > 0:
            raise ConfigurationError(
                f"Representation needs positive width and bitrate, got {self.width}/{self.bitrate_kbps}"
            )


# HLS authoring ladder: widths in pixels, bitrates in kbps
HLS_LADDER: Tuple[Representation, ...] = (
    Representation(360, 145),
    Representation(432, 300),
    Representation(540, 600),
    Representation(540, 900),
    Representation(540, 1600),
    Representation(720, 2400),
    Representation(720, 3400),
    Representation(1080, 4500),
    Representation(1080, 5800),
    Representation(1440, 8100),
    Representation(2160, 11600),
    Representation(2160, 16800),
)


@dataclass(frozen=True)
class LadderConfig:
    """Ladder plus the live encoding conditions it is encoded under.

    Attributes:
        rungs: Representations ordered by strictly increasing bitrate
        framerate: Target encoding speed f in frames per second
        segment_frames: Frames per segment n
        threads_per_instance: CPU threads c per encoding instance
        preset_range: Inclusive (p_min, p_max)
    """

    rungs: Tuple[Representation, ...] = HLS_LADDER
    framerate: float = 24.0
    segment_frames: int = 120
    threads_per_instance: int = 8
    preset_range: Tuple[int, int] = (0, 8)

    def __post_init__(self) -> None:
        if not self.rungs:
            raise ConfigurationError("Ladder has no rungs")
        bitrates = [rung.bitrate_kbps for rung in self.rungs]
        if any(b2 <= b1 for b1, b2 in zip(bitrates, bitrates[1:])):
            raise ConfigurationError(f"Ladder bitrates must strictly increase, got {bitrates}")
        if not self.framerate > 0 or self.segment_frames < 1:
            raise ConfigurationError(
                f"Invalid framerate/segment length: f={self.framerate}, n={self.segment_frames}"
            )
        if self.threads_per_instance < 1:
            raise ConfigurationError(f"Threads per instance must be >= 1, got {self.threads_per_instance}")
        p_min, p_max = self.preset_range
        if not 0 <= p_min <= p_max < len(PRESET_NAMES):
            raise ConfigurationError(f"Invalid preset range {self.preset_range}")

    @property
    def target_time(self) -> float:
        """Deadline T = n / f for a full segment."""
        return target_time(self.segment_frames, self.framerate)

    @property
    def widths(self) -> Tuple[int, ...]:
        return tuple(sorted({rung.width for rung in self.rungs}))

    @property
    def presets(self) -> range:
        return range(self.preset_range[0], self.preset_range[1] + 1)

    @staticmethod
    def rung_label(index: int) -> str:
        """Two-digit representation id, ``01`` for the first rung."""
        return f"{index + 1:02d}"
