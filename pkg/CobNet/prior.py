"""Training-free align mask from max cosine similarity between query and masked support features."""

from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

from CobNet.errors import DimensionError
from CobNet.proto import resize_mask
from CobNet.tensor import Tensor, bilinear_resize

# raw maps whose spread is below this are treated as constant
CONSTANT_SPREAD = 1e-12


@dataclass(frozen=True)
class AlignMask:
    """Normalised align mask (1 x h x w, values in [0, 1]) and its raw cosine map."""

    values: Tensor
    raw: np.ndarray

    def at_scale(self, k: int) -> Tensor:
        return downsample_mask(self, k)


def masked_support_features(support_features: Tensor, mask: np.ndarray) -> Tensor:
    """Zero the support feature vectors wherever the mask is 0."""
    _, h, w = support_features.shape
    weights = resize_mask(mask, h, w)
    return Tensor(support_features.data * weights)


def _unit_rows(vectors: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(vectors, axis=1, keepdims=True)
    safe = np.where(norms > 0, norms, 1.0)
    return np.where(norms > 0, vectors / safe, 0.0)


def align_mask(
    query_features: Tensor, masked_support: Union[Tensor, Sequence[Tensor]]
) -> AlignMask:
    """Max cosine similarity of every query position against all masked support positions.

    Cosine with a zero vector is 0. The raw map is min-max normalised to
    [0, 1]; a constant map becomes 0.5 everywhere. With several shots the
    maximum runs over the positions of every shot.
    """
    shots = [masked_support] if isinstance(masked_support, Tensor) else list(masked_support)
    c, h, w = query_features.shape
    for shot in shots:
        if shot.shape[0] != c:
            raise DimensionError(f"support features have {shot.shape[0]} channels, query has {c}")

    query = _unit_rows(query_features.data.reshape(c, -1).T)
    support = _unit_rows(np.concatenate([shot.data.reshape(c, -1).T for shot in shots], axis=0))
    raw = (query @ support.T).max(axis=1).reshape(h, w)

    low, high = raw.min(), raw.max()
    if high - low <= CONSTANT_SPREAD:
        normalised = np.full((h, w), 0.5)
    else:
        normalised = (raw - low) / (high - low)
    return AlignMask(values=Tensor(normalised[None]), raw=raw)


def downsample_mask(mask: AlignMask, k: int) -> Tensor:
    """Bilinear resize of the align mask to 1 x k x k."""
    _, h, w = mask.values.shape
    if not 1 <= k <= min(h, w):
        raise DimensionError(f"cannot downsample a {h}x{w} align mask to {k}x{k}")
    resized = bilinear_resize(mask.values, k, k)
    return Tensor(np.clip(resized.data, 0.0, 1.0))
