"""Encoder command builder for real encoding backends."""

import logging
import os
import shutil
from typing import Dict, List, Mapping, Optional, Sequence, Union

from .utils import ConfigurationError

logger = logging.getLogger("CAPS")

# Named command templates. Placeholders:
#   {input} {output} {width} {bitrate_kbps} {preset} {preset_name} {threads}
#   {start_frame} {end_frame} {frames} {framerate}
COMMAND_TEMPLATES: Dict[str, List[str]] = {
    "ffmpeg-libx265": [
        "ffmpeg", "-hide_banner", "-loglevel", "error", "-y",
        "-i", "{input}",
        "-vf", "trim=start_frame={start_frame}:end_frame={end_frame},setpts=PTS-STARTPTS,scale={width}:-2",
        "-c:v", "libx265",
        "-preset", "{preset_name}",
        "-b:v", "{bitrate_kbps}k",
        "-x265-params", "pools={threads}:log-level=error",
        "-an", "-f", "hevc", "{output}",
    ],
    # The standalone x265 CLI cannot rescale; use it with sources already at rung size.
    "x265": [
        "x265", "--input", "{input}",
        "--seek", "{start_frame}", "--frames", "{frames}",
        "--preset", "{preset}",
        "--bitrate", "{bitrate_kbps}",
        "--pools", "{threads}",
        "--log-level", "error",
        "--output", "{output}",
    ],
}

# Decodes an encode back to source size for internal PSNR. Extra placeholders:
#   {source_width} {source_height} {decoded} {pix_fmt}
DECODE_TEMPLATES: Dict[str, List[str]] = {
    "ffmpeg": [
        "ffmpeg", "-hide_banner", "-loglevel", "error", "-y",
        "-i", "{output}",
        "-vf", "scale={source_width}:{source_height}:flags=bicubic",
        "-pix_fmt", "{pix_fmt}",
        "-f", "yuv4mpegpipe", "{decoded}",
    ],
}

DEFAULT_COMMAND = "ffmpeg-libx265"

Template = Union[str, Sequence[str]]


def format_number(value: float) -> str:
    """Render integral floats without a trailing ``.0``."""
    return str(int(value)) if float(value).is_integer() else repr(float(value))


def resolve_template(template: Optional[Template], named: Mapping[str, List[str]], default: str) -> List[str]:
    """Turn a template name or argument list into an argument list.

    Raises:
        ConfigurationError: If a named template is unknown or the list is empty
    """
    if template is None:
        template = default
    if isinstance(template, str):
        if template not in named:
            raise ConfigurationError(
                f"Unknown command template '{template}'; known: {', '.join(sorted(named))}"
            )
        return list(named[template])
    args = [str(a) for a in template]
    if not args:
        raise ConfigurationError("Command template is empty")
    return args


def build_command(template: Sequence[str], values: Mapping[str, object]) -> List[str]:
    """Substitute ``{placeholder}`` fields into every argument.

    Raises:
        ConfigurationError: If an argument names an unknown placeholder
    """
    rendered = {
        key: format_number(value) if isinstance(value, float) else str(value)
        for key, value in values.items()
    }
    try:
        return [arg.format_map(rendered) for arg in template]
    except KeyError as e:
        raise ConfigurationError(
            f"Command template uses unknown placeholder {e}; available: {', '.join(sorted(rendered))}"
        ) from e
    except (ValueError, IndexError) as e:
        raise ConfigurationError(f"Malformed command template: {e}") from e


def build_child_env(extra: Optional[Mapping[str, object]] = None) -> Dict[str, str]:
    """Environment for encoder processes: ours plus configured overrides."""
    child_env = os.environ.copy()
    for k, v in (extra or {}).items():
        child_env[str(k)] = str(v)
    return child_env


def require_executable(command: Sequence[str]) -> str:
    """Full path of the program that runs ``command``.

    Raises:
        ConfigurationError: If the program is not on PATH
    """
    program = command[0]
    found = shutil.which(program)
    if found is None:
        raise ConfigurationError(f"Encoder program '{program}' not found on PATH")
    logger.debug(f"Using {program} at {found}")
    return found
