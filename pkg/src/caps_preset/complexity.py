"""DCT-energy complexity features of a video segment.

Each luma frame is cut into non-overlapping ``w x w`` blocks. Every block is
transformed with an orthonormal type-II 2-D DCT and summarized by

- its texture energy ``H``: the exponentially weighted sum of AC coefficient
  magnitudes,
- its luminescence: the square root of the DC coefficient.

A segment is then described by the average texture energy ``E``, the average
frame-to-frame change of block texture ``h`` and the average luminescence ``L``.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from functools import lru_cache
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.fft import dctn

from .utils import ConfigurationError, InputError

logger = logging.getLogger("CAPS")

SUPPORTED_BIT_DEPTHS = (8, 10)
DEFAULT_BLOCK_SIZE = 32


@dataclass(frozen=True)
class AnalyzerConfig:
    """Feature extraction settings.

    Attributes:
        block_size: Block side ``w`` in pixels (power of two, at least 4)
        bit_depth: Bits per luma sample (8 or 10)
    """

    block_size: int = DEFAULT_BLOCK_SIZE
    bit_depth: int = 8

    def __post_init__(self) -> None:
        w = self.block_size
        if w < 4 or w & (w - 1):
            raise ConfigurationError(f"Block size must be a power of two >= 4, got {w}")
        if self.bit_depth not in SUPPORTED_BIT_DEPTHS:
            raise ConfigurationError(
                f"Bit depth must be one of {SUPPORTED_BIT_DEPTHS}, got {self.bit_depth}"
            )


@dataclass(frozen=True, eq=False)
class LumaFrame:
    """One luma plane, ``samples`` shaped (height, width)."""

    width: int
    height: int
    samples: np.ndarray

    def __post_init__(self) -> None:
        if self.samples.shape != (self.height, self.width):
            raise InputError(
                f"Luma plane shape {self.samples.shape} does not match "
                f"{self.height}x{self.width}"
            )

    @classmethod
    def from_array(cls, samples: np.ndarray) -> "LumaFrame":
        """Wrap a 2-D array of unsigned samples."""
        if samples.ndim != 2:
            raise InputError(f"Luma plane must be 2-D, got {samples.ndim} dimensions")
        height, width = samples.shape
        return cls(width=width, height=height, samples=samples)


@dataclass(frozen=True)
class BlockTexture:
    """Texture energy of one block."""

    value: float

    def __post_init__(self) -> None:
        if not self.value >= 0:
            raise InputError(f"Block texture must be non-negative, got {self.value}")


@dataclass(frozen=True)
class SegmentFeatures:
    """Complexity features of one segment.

    Attributes:
        E: Average texture energy
        h: Average temporal energy (0 for single-frame segments)
        L: Average luminescence
        frame_count: Number of frames S
        blocks_per_frame: Number of blocks K per frame
        clamped_dc_blocks: Blocks whose negative DC was clamped to 0
    """

    E: float
    h: float
    L: float
    frame_count: int
    blocks_per_frame: int
    clamped_dc_blocks: int = 0

    def to_row(self, segment_id: str, width: int, height: int) -> dict:
        """Row for the ``segment_id,E,h,L,frames,width,height`` CSV."""
        return {
            "segment_id": segment_id,
            "E": self.E,
            "h": self.h,
            "L": self.L,
            "frames": self.frame_count,
            "width": width,
            "height": height,
        }


@lru_cache(maxsize=None)
def texture_weights(w: int) -> np.ndarray:
    """Weights ``exp(|((i*j)/w^2)^2 - 1|)`` with the DC position zeroed."""
    i = np.arange(w, dtype=np.float64)[:, None]
    j = np.arange(w, dtype=np.float64)[None, :]
    weights = np.exp(np.abs(((i * j) / (w * w)) ** 2 - 1.0))
    weights[0, 0] = 0.0
    weights.setflags(write=False)
    return weights


def _check_square(matrix: np.ndarray, w: Optional[int] = None) -> int:
    if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
        raise ConfigurationError(f"Expected a square block, got shape {matrix.shape}")
    if w is not None and matrix.shape[0] != w:
        raise ConfigurationError(f"Expected a {w}x{w} block, got shape {matrix.shape}")
    return matrix.shape[0]


def dct2d(block: np.ndarray, w: Optional[int] = None) -> np.ndarray:
    """Orthonormal type-II 2-D DCT of a square block.

    Args:
        block: ``w x w`` real matrix
        w: Expected block side, checked when given

    Returns:
        Coefficient matrix; element (0, 0) is the DC component

    Raises:
        ConfigurationError: If the block is not ``w x w``
    """
    block = np.asarray(block, dtype=np.float64)
    _check_square(block, w)
    if not np.all(np.isfinite(block)):
        raise InputError("Block contains non-finite values")
    return dctn(block, type=2, norm="ortho")


def block_texture(coeffs: np.ndarray) -> BlockTexture:
    """Weighted AC magnitude sum of one block's DCT coefficients."""
    coeffs = np.asarray(coeffs, dtype=np.float64)
    w = _check_square(coeffs)
    return BlockTexture(float(np.sum(texture_weights(w) * np.abs(coeffs))))


def block_luminescence(coeffs: np.ndarray) -> float:
    """Square root of the DC coefficient, negative DC clamped to 0."""
    coeffs = np.asarray(coeffs, dtype=np.float64)
    _check_square(coeffs)
    dc = float(coeffs[0, 0])
    if dc < 0:
        logger.debug(f"Negative DC {dc} clamped to 0")
        return 0.0
    return float(np.sqrt(dc))


def _frame_block_stats(samples: np.ndarray, w: int) -> Tuple[np.ndarray, np.ndarray]:
    """Per-block texture energy and DC for one frame, row-major block order.

    Frames whose sides are not multiples of ``w`` are cropped to the
    largest whole-block region.
    """
    rows, cols = samples.shape[0] // w, samples.shape[1] // w
    cropped = samples[: rows * w, : cols * w].astype(np.float64)
    blocks = cropped.reshape(rows, w, cols, w).swapaxes(1, 2)
    coeffs = dctn(blocks, type=2, norm="ortho", axes=(-2, -1))
    texture = np.sum(texture_weights(w) * np.abs(coeffs), axis=(-2, -1)).reshape(-1)
    dc = coeffs[..., 0, 0].reshape(-1)
    return texture, dc


def _validate_frames(frames: Sequence[LumaFrame], cfg: AnalyzerConfig) -> Tuple[int, int]:
    if len(frames) == 0:
        raise InputError("Segment has no frames")

    width, height = frames[0].width, frames[0].height
    w = cfg.block_size
    if width < w or height < w:
        raise InputError(f"Frame {width}x{height} is smaller than one {w}x{w} block")

    limit = 1 << cfg.bit_depth
    for index, frame in enumerate(frames):
        if (frame.width, frame.height) != (width, height):
            raise InputError(
                f"Frame {index} is {frame.width}x{frame.height}, expected {width}x{height}"
            )
        if frame.samples.size and (frame.samples.min() < 0 or frame.samples.max() >= limit):
            raise InputError(f"Frame {index} has samples outside [0, {limit})")
    return width, height


def segment_features(
    frames: Sequence[LumaFrame],
    cfg: AnalyzerConfig,
    workers: int = 1,
) -> SegmentFeatures:
    """Compute E, h and L for a segment of luma frames.

    Frames may be analyzed by several worker threads; the reduction always
    runs over the stacked per-frame results in frame order, so the output
    does not depend on ``workers``.

    Args:
        frames: Luma frames of one segment, all the same size
        cfg: Analyzer configuration
        workers: Worker threads for per-frame block analysis

    Returns:
        Segment features

    Raises:
        InputError: If the segment is empty or a frame is smaller than a block
    """
    _validate_frames(frames, cfg)
    w = cfg.block_size

    if workers > 1 and len(frames) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            stats: List[Tuple[np.ndarray, np.ndarray]] = list(
                pool.map(lambda f: _frame_block_stats(f.samples, w), frames)
            )
    else:
        stats = [_frame_block_stats(frame.samples, w) for frame in frames]

    texture = np.stack([t for t, _ in stats])  # (S, K)
    dc = np.stack([d for _, d in stats])

    frame_count, blocks = texture.shape
    norm = float(w * w)

    energy = float(np.sum(texture) / (frame_count * blocks * norm))
    if frame_count > 1:
        temporal = float(
            np.sum(np.abs(np.diff(texture, axis=0))) / ((frame_count - 1) * blocks * norm)
        )
    else:
        temporal = 0.0

    negative = dc < 0
    clamped = int(np.count_nonzero(negative))
    if clamped:
        logger.warning(f"⚠️ Clamped {clamped} negative DC coefficients to 0")
    luminescence = float(
        np.sum(np.sqrt(np.where(negative, 0.0, dc))) / (frame_count * blocks * norm)
    )

    return SegmentFeatures(
        E=energy,
        h=temporal,
        L=luminescence,
        frame_count=frame_count,
        blocks_per_frame=blocks,
        clamped_dc_blocks=clamped,
    )
