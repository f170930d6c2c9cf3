"""Binary portable graymap/pixmap output of episodes and predictions."""

import logging
from pathlib import Path
from typing import List, Union

import numpy as np

from CobNet.episodes import Episode
from CobNet.errors import DimensionError, TensorFormatError
from CobNet.model import CobNetModel, EpisodeResult

logger = logging.getLogger(__name__)

OVERLAY_COLOUR = np.array([1.0, 0.0, 0.0]).reshape(3, 1, 1)
OVERLAY_ALPHA = 0.5

RENDERED_FILES = (
    "support_overlay.ppm",
    "query.ppm",
    "ground_truth.pgm",
    "prediction.pgm",
    "align_mask.pgm",
    "attention.pgm",
)


def to_bytes(values: np.ndarray) -> np.ndarray:
    """Map [0, 1] to 0..255 with rounding."""
    return np.rint(np.clip(values, 0.0, 1.0) * 255).astype(np.uint8)


def write_pgm(path: Union[str, Path], values: np.ndarray) -> Path:
    """Write an h x w array in [0, 1] as a binary P5 graymap."""
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 2:
        raise DimensionError(f"graymap needs h x w values, got {values.shape}")
    h, w = values.shape
    path = Path(path)
    path.write_bytes(f"P5\n{w} {h}\n255\n".encode() + to_bytes(values).tobytes())
    return path


def write_ppm(path: Union[str, Path], image: np.ndarray) -> Path:
    """Write a 3 x h x w image in [0, 1] as a binary P6 pixmap."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[0] != 3:
        raise DimensionError(f"pixmap needs 3 x h x w values, got {image.shape}")
    _, h, w = image.shape
    path = Path(path)
    pixels = to_bytes(image).transpose(1, 2, 0)
    path.write_bytes(f"P6\n{w} {h}\n255\n".encode() + pixels.tobytes())
    return path


def read_pnm(path: Union[str, Path]) -> np.ndarray:
    """Read a binary P5/P6 file as raw 0..255 values (h x w or 3 x h x w)."""
    payload = Path(path).read_bytes()
    tokens: List[bytes] = []
    offset = 0
    while len(tokens) < 4:
        while payload[offset : offset + 1].isspace():
            offset += 1
        if payload[offset : offset + 1] == b"#":
            offset = payload.index(b"\n", offset) + 1
            continue
        end = offset
        while end < len(payload) and not payload[end : end + 1].isspace():
            end += 1
        tokens.append(payload[offset:end])
        offset = end
    offset += 1

    magic, width, height, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval != 255 or magic not in (b"P5", b"P6"):
        raise TensorFormatError(f"{path}: unsupported PNM header {tokens}")
    channels = 3 if magic == b"P6" else 1
    body = np.frombuffer(payload, dtype=np.uint8, offset=offset, count=width * height * channels)
    if channels == 1:
        return body.reshape(height, width)
    return body.reshape(height, width, 3).transpose(2, 0, 1)


def overlay(image: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Tint masked pixels red."""
    blended = image * (1 - OVERLAY_ALPHA) + OVERLAY_COLOUR * OVERLAY_ALPHA
    return np.where(mask[None] == 1, blended, image)


def render_episode(
    model: CobNetModel, episode: Episode, directory: Union[str, Path]
) -> EpisodeResult:
    """Write the six visualisation files of one episode into ``directory``.

    The align mask and attention maps are written at feature resolution; an
    ablated model without attention writes an all-zero attention map.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    result = model.run_episode(episode)
    support = episode.support[0]

    write_ppm(directory / "support_overlay.ppm", overlay(support.image, support.mask))
    write_ppm(directory / "query.ppm", episode.query_image)
    write_pgm(directory / "ground_truth.pgm", episode.query_mask)
    write_pgm(directory / "prediction.pgm", result.prediction)
    write_pgm(directory / "align_mask.pgm", result.align_mask)
    attention = result.attention if result.attention is not None else np.zeros_like(result.align_mask)
    write_pgm(directory / "attention.pgm", attention)
    logger.info("rendered class %d episode to %s", episode.class_id, directory)
    return result
