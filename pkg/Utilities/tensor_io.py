"""CBT1 binary tensor files.

Layout: magic ``b"CBT1"``, little-endian u32 rank, ``rank`` u32 dims, then the
values as little-endian float64 in row-major order.
"""

from pathlib import Path
from typing import Optional, Union

import numpy as np

from CobNet.errors import TensorFormatError

MAGIC = b"CBT1"

PathLike = Union[str, Path]


def encode_tensor(values: np.ndarray) -> bytes:
    """Serialise an array into CBT1 bytes."""
    array = np.ascontiguousarray(values, dtype="<f8")
    header = np.asarray([array.ndim, *array.shape], dtype="<u4").tobytes()
    return MAGIC + header + array.tobytes()


def decode_tensor(payload: bytes, expected_rank: Optional[int] = None) -> np.ndarray:
    """Parse CBT1 bytes into a float64 array.

    Args:
        payload: The raw file contents.
        expected_rank: If given, the rank the file must declare.

    Raises:
        TensorFormatError: On a bad magic, a rank mismatch or a truncated body.
    """
    if len(payload) < 8 or payload[:4] != MAGIC:
        raise TensorFormatError("not a CBT1 tensor file (bad magic)")

    rank = int(np.frombuffer(payload, dtype="<u4", count=1, offset=4)[0])
    if expected_rank is not None and rank != expected_rank:
        raise TensorFormatError(f"expected a rank-{expected_rank} tensor, got rank {rank}")

    body_offset = 8 + 4 * rank
    if len(payload) < body_offset:
        raise TensorFormatError("truncated CBT1 header")
    shape = tuple(int(d) for d in np.frombuffer(payload, dtype="<u4", count=rank, offset=8))
    count = int(np.prod(shape, dtype=np.int64)) if rank else 1

    if len(payload) != body_offset + 8 * count:
        raise TensorFormatError(
            f"CBT1 body holds {len(payload) - body_offset} bytes, shape {shape} needs {8 * count}"
        )
    values = np.frombuffer(payload, dtype="<f8", count=count, offset=body_offset)
    return values.astype(np.float64).reshape(shape)


def save_tensor(path: PathLike, values: np.ndarray) -> None:
    """Write an array to ``path`` as CBT1."""
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(encode_tensor(values))


def load_tensor(path: PathLike, expected_rank: Optional[int] = None) -> np.ndarray:
    """Read a CBT1 file."""
    return decode_tensor(Path(path).read_bytes(), expected_rank=expected_rank)
