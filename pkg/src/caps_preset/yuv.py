"""Raw video input: Y4M and planar YUV 4:2:0 readers, segmentation, synthetic clips."""

import logging
import os
from dataclasses import dataclass, field
from fractions import Fraction
from typing import BinaryIO, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from .complexity import LumaFrame
from .utils import InputError

logger = logging.getLogger("CAPS")

Y4M_MAGIC = b"YUV4MPEG2"
FRAME_MAGIC = b"FRAME"

# colorspace tag -> (bit depth, chroma (width divisor, height divisor) or None for mono)
Y4M_COLORSPACES: Dict[str, Tuple[int, Optional[Tuple[int, int]]]] = {
    "420": (8, (2, 2)),
    "420jpeg": (8, (2, 2)),
    "420paldv": (8, (2, 2)),
    "420mpeg2": (8, (2, 2)),
    "422": (8, (2, 1)),
    "444": (8, (1, 1)),
    "mono": (8, None),
    "420p10": (10, (2, 2)),
    "422p10": (10, (2, 1)),
    "444p10": (10, (1, 1)),
    "mono10": (10, None),
}
DEFAULT_COLORSPACE = "420jpeg"


@dataclass(frozen=True)
class Y4mHeader:
    """Parsed stream header of a Y4M file."""

    width: int
    height: int
    framerate: Fraction
    colorspace: str = DEFAULT_COLORSPACE
    interlace: str = "p"

    @property
    def bit_depth(self) -> int:
        return Y4M_COLORSPACES[self.colorspace][0]

    @property
    def chroma_samples(self) -> int:
        subsampling = Y4M_COLORSPACES[self.colorspace][1]
        if subsampling is None:
            return 0
        dx, dy = subsampling
        return 2 * (-(-self.width // dx)) * (-(-self.height // dy))


@dataclass(frozen=True, eq=False)
class Segment:
    """A run of consecutive frames encoded as one unit.

    Attributes:
        segment_id: Stable identifier (``seg0000``, ...)
        frames: Luma frames of the segment
        framerate: Source framerate in frames per second
        bit_depth: Bits per luma sample
        source: Path of the source file, None for generated segments
        start_frame: Index of the first frame within the source
    """

    segment_id: str
    frames: Tuple[LumaFrame, ...] = field(repr=False)
    framerate: float = 24.0
    bit_depth: int = 8
    source: Optional[str] = None
    start_frame: int = 0

    @property
    def frame_count(self) -> int:
        return len(self.frames)

    @property
    def width(self) -> int:
        return self.frames[0].width

    @property
    def height(self) -> int:
        return self.frames[0].height


def parse_y4m_header(line: bytes) -> Y4mHeader:
    """Parse a ``YUV4MPEG2`` stream header line.

    Raises:
        InputError: If the header is malformed, interlaced or uses an
            unsupported colorspace
    """
    tokens = line.strip().split(b" ")
    if not tokens or tokens[0] != Y4M_MAGIC:
        raise InputError(f"Invalid Y4M file: starts with {tokens[0]!r}")

    params: Dict[str, str] = {}
    for token in tokens[1:]:
        if not token:
            continue
        try:
            key, value = chr(token[0]), token[1:].decode("ascii")
        except UnicodeDecodeError as e:
            raise InputError(f"Y4M header is not ASCII: {token!r}") from e
        if key == "X":
            continue
        params[key] = value

    for required in ("W", "H", "F"):
        if required not in params:
            raise InputError(f"Y4M header is missing the '{required}' parameter")

    num, _, den = params["F"].partition(":")
    try:
        framerate = Fraction(int(num), int(den or 1))
    except (ValueError, ZeroDivisionError) as e:
        raise InputError(f"Invalid Y4M frame rate '{params['F']}': {e}") from e

    interlace = params.get("I", "p")
    if interlace == "?":
        logger.warning("Y4M interlace mode unknown, assuming progressive")
    elif interlace != "p":
        raise InputError(f"Interlaced Y4M input is not supported (I{interlace})")

    colorspace = params.get("C", DEFAULT_COLORSPACE)
    if colorspace not in Y4M_COLORSPACES:
        raise InputError(f"Unsupported Y4M colorspace 'C{colorspace}'")

    try:
        width, height = int(params["W"]), int(params["H"])
    except ValueError as e:
        raise InputError(f"Invalid Y4M frame size W{params['W']} H{params['H']}") from e
    if width < 1 or height < 1 or framerate <= 0:
        raise InputError(f"Invalid Y4M header: {width}x{height} at {params['F']} fps")

    return Y4mHeader(
        width=width,
        height=height,
        framerate=framerate,
        colorspace=colorspace,
        interlace=interlace,
    )


def _read_plane(stream: BinaryIO, width: int, height: int, bit_depth: int) -> Optional[np.ndarray]:
    dtype = np.dtype(np.uint8) if bit_depth == 8 else np.dtype("<u2")
    size = width * height * dtype.itemsize
    data = stream.read(size)
    if not data:
        return None
    if len(data) != size:
        raise InputError(f"Truncated frame: expected {size} bytes, got {len(data)}")
    return np.frombuffer(data, dtype=dtype).reshape(height, width)


def _skip(stream: BinaryIO, count: int) -> None:
    if count and len(stream.read(count)) != count:
        raise InputError("Truncated chroma planes")


def read_y4m(path: str) -> Tuple[Y4mHeader, Iterator[LumaFrame]]:
    """Open a Y4M file and return its header and a luma frame iterator.

    Chroma planes are skipped.
    """
    stream = open(path, "rb")
    try:
        header = parse_y4m_header(stream.readline())
    except Exception:
        stream.close()
        raise

    bytes_per_sample = 1 if header.bit_depth == 8 else 2

    def frames() -> Iterator[LumaFrame]:
        with stream:
            index = 0
            while True:
                marker = stream.readline()
                if not marker:
                    return
                if not marker.startswith(FRAME_MAGIC):
                    raise InputError(f"Frame {index}: missing FRAME marker")
                luma = _read_plane(stream, header.width, header.height, header.bit_depth)
                if luma is None:
                    raise InputError(f"Frame {index}: missing luma plane")
                _skip(stream, header.chroma_samples * bytes_per_sample)
                yield LumaFrame.from_array(luma)
                index += 1

    return header, frames()


def read_raw_yuv(path: str, width: int, height: int, bit_depth: int = 8) -> Iterator[LumaFrame]:
    """Iterate over the luma planes of a planar YUV 4:2:0 file.

    10-bit samples are little-endian 16-bit words.
    """
    if width <= 0 or height <= 0:
        raise InputError(f"Raw YUV input needs positive dimensions, got {width}x{height}")
    if bit_depth not in (8, 10):
        raise InputError(f"Unsupported raw YUV bit depth {bit_depth}")

    chroma = 2 * (-(-width // 2)) * (-(-height // 2)) * (1 if bit_depth == 8 else 2)
    with open(path, "rb") as stream:
        while True:
            luma = _read_plane(stream, width, height, bit_depth)
            if luma is None:
                return
            _skip(stream, chroma)
            yield LumaFrame.from_array(luma)


def iter_segments(
    path: str,
    segment_frames: int,
    raw: bool = False,
    width: Optional[int] = None,
    height: Optional[int] = None,
    bit_depth: int = 8,
    framerate: float = 24.0,
) -> Iterator[Segment]:
    """Split a Y4M or raw YUV file into segments of ``segment_frames`` frames.

    A trailing short segment is kept.

    Args:
        path: Input file
        segment_frames: Frames per segment (n)
        raw: Treat the input as headerless planar YUV 4:2:0
        width: Raw input width
        height: Raw input height
        bit_depth: Raw input bit depth
        framerate: Raw input framerate

    Yields:
        Segments in source order
    """
    if segment_frames < 1:
        raise InputError(f"Segment length must be at least one frame, got {segment_frames}")

    if raw:
        if width is None or height is None:
            raise InputError("Raw YUV input requires --width and --height")
        frames = read_raw_yuv(path, width, height, bit_depth)
        rate = float(framerate)
    else:
        header, frames = read_y4m(path)
        bit_depth = header.bit_depth
        rate = float(header.framerate)

    buffer: List[LumaFrame] = []
    index = 0
    start = 0
    for frame in frames:
        buffer.append(frame)
        if len(buffer) == segment_frames:
            yield Segment(f"seg{index:04d}", tuple(buffer), rate, bit_depth, path, start)
            index += 1
            start += len(buffer)
            buffer = []
    if buffer:
        yield Segment(f"seg{index:04d}", tuple(buffer), rate, bit_depth, path, start)


def write_y4m(path: str, frames: Sequence[LumaFrame], framerate: float, bit_depth: int = 8) -> None:
    """Write luma frames as a 4:2:0 Y4M file with neutral chroma."""
    if not frames:
        raise InputError("Nothing to write")
    width, height = frames[0].width, frames[0].height
    rate = Fraction(framerate).limit_denominator(1001000)
    colorspace = "420jpeg" if bit_depth == 8 else "420p10"
    dtype = np.dtype(np.uint8) if bit_depth == 8 else np.dtype("<u2")
    chroma = np.full(
        2 * (-(-width // 2)) * (-(-height // 2)), 1 << (bit_depth - 1), dtype=dtype
    ).tobytes()

    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "wb") as f:
        f.write(
            f"YUV4MPEG2 W{width} H{height} F{rate.numerator}:{rate.denominator} "
            f"Ip A1:1 C{colorspace}\n".encode("ascii")
        )
        for frame in frames:
            f.write(FRAME_MAGIC + b"\n")
            f.write(np.ascontiguousarray(frame.samples, dtype=dtype).tobytes())
            f.write(chroma)


def synthetic_segment(
    seed: int,
    width: int = 128,
    height: int = 128,
    frames: int = 8,
    motion: Optional[int] = None,
    bit_depth: int = 8,
    framerate: float = 24.0,
    segment_id: Optional[str] = None,
) -> Segment:
    """Deterministic moving-texture segment.

    A canvas of oriented gratings plus noise is panned by ``motion`` pixels
    per frame; the seed picks texture strength and motion when not given.
    """
    rng = np.random.default_rng(seed)
    peak = float((1 << bit_depth) - 1)
    if motion is None:
        motion = int(rng.integers(0, 6))

    canvas_h = height + motion * frames + 1
    canvas_w = width + motion * frames + 1
    y, x = np.mgrid[0:canvas_h, 0:canvas_w].astype(np.float64)

    canvas = np.full((canvas_h, canvas_w), rng.uniform(0.3, 0.7))
    for _ in range(3):
        fx, fy = rng.uniform(0.01, 0.4, size=2)
        canvas += rng.uniform(0.02, 0.2) * np.sin(fx * x + fy * y + rng.uniform(0, np.pi))
    canvas += rng.uniform(0.0, 0.15) * rng.standard_normal(canvas.shape)
    canvas = np.clip(canvas, 0.0, 1.0) * peak

    dtype = np.uint8 if bit_depth == 8 else np.uint16
    planes = []
    for s in range(frames):
        offset = s * motion
        window = canvas[offset : offset + height, offset : offset + width]
        planes.append(LumaFrame.from_array(np.rint(window).astype(dtype)))

    return Segment(
        segment_id=segment_id or f"syn{seed:04d}",
        frames=tuple(planes),
        framerate=framerate,
        bit_depth=bit_depth,
    )
