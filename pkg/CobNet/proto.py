"""Object prototypes from support features and background grids from query features.

All prototypes are computed outside the gradient graph: the backbone is
frozen, so nothing upstream of them can learn.
"""

from dataclasses import dataclass
from typing import Sequence, Tuple

import numpy as np

from CobNet.errors import ConfigurationError, DimensionError, EmptyMaskError, ValidationError
from CobNet.tensor import Tensor, adaptive_avg_pool, bilinear_resize
from Utilities.helpers import adaptive_bins

MASK_THRESHOLD = 0.5


def check_binary(mask: np.ndarray, name: str = "mask") -> np.ndarray:
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise DimensionError(f"{name} must be h x w, got shape {mask.shape}")
    if not np.isin(mask, (0, 1)).all():
        raise ValidationError(f"{name} must be binary")
    return mask


def resize_mask(mask: np.ndarray, h: int, w: int) -> np.ndarray:
    """Resize a binary mask with bilinear interpolation, then threshold at 0.5."""
    mask = check_binary(mask)
    if mask.shape == (h, w):
        return mask.astype(np.float64)
    resized = bilinear_resize(Tensor(mask[None]), h, w).data[0]
    return (resized >= MASK_THRESHOLD).astype(np.float64)


@dataclass(frozen=True)
class SupportMask:
    """Binary H x W support annotation and its working copy at feature size."""

    full: np.ndarray

    def __post_init__(self) -> None:
        check_binary(self.full, "support mask")

    def at(self, h: int, w: int) -> np.ndarray:
        return resize_mask(self.full, h, w)


def _feature_mask(features: Tensor, mask: np.ndarray) -> np.ndarray:
    if features.ndim != 3:
        raise DimensionError(f"features must be c x h x w, got {features.shape}")
    _, h, w = features.shape
    return resize_mask(mask, h, w)


def masked_average_pool(support_features: Tensor, mask: np.ndarray) -> Tensor:
    """Mean of the support feature vectors under the mask, as a c x 1 x 1 prototype.

    The mask may be given at image or feature resolution.

    Raises:
        EmptyMaskError: If the mask has no foreground at feature resolution.
    """
    weights = _feature_mask(support_features, mask)
    count = weights.sum()
    if count == 0:
        raise EmptyMaskError("support mask is empty at feature resolution")
    values = (support_features.data * weights).sum(axis=(1, 2)) / count
    return Tensor(values.reshape(-1, 1, 1))


def weak_object_prototype(support_features: Tensor) -> Tensor:
    """Global average pooling, used when the support set carries no annotation."""
    _, h, w = support_features.shape
    return masked_average_pool(support_features, np.ones((h, w)))


def kshot_prototype(shots: Sequence[Tuple[Tensor, np.ndarray]]) -> Tensor:
    """Average of the per-shot masked-average-pool prototypes."""
    if not shots:
        raise ValidationError("k-shot prototype needs at least one shot")
    prototypes = [masked_average_pool(features, mask).data for features, mask in shots]
    return Tensor(np.mean(prototypes, axis=0))


def background_grid(query_features: Tensor, grid_size: int, smallest_scale: int = 0) -> Tensor:
    """Average-pool the query features into a ``j x j`` grid of background prototypes.

    Args:
        query_features: c x h x w query feature map.
        grid_size: j.
        smallest_scale: k_N; j may not exceed it. Defaults to the feature side.

    Raises:
        ConfigurationError: If j is outside ``[1, k_N]``.
    """
    limit = smallest_scale or min(query_features.shape[1:])
    if not 1 <= grid_size <= limit:
        raise ConfigurationError(f"grid size j={grid_size} must lie in [1, {limit}]")
    return adaptive_avg_pool(query_features.detach(), grid_size, grid_size)


def support_background_grid(shots: Sequence[Tuple[Tensor, np.ndarray]], grid_size: int) -> Tensor:
    """Background grid pooled from the support mask complement, averaged over shots.

    Cells without any background pixel take the global complement mean; a
    support mask covering the whole image falls back to the plain global mean.
    """
    if not shots:
        raise ValidationError("support background grid needs at least one shot")
    grids = []
    for features, mask in shots:
        data = features.data
        complement = 1.0 - _feature_mask(features, mask)
        total = complement.sum()
        if total > 0:
            fallback = (data * complement).sum(axis=(1, 2)) / total
        else:
            fallback = data.mean(axis=(1, 2))

        _, h, w = data.shape
        if grid_size > min(h, w):
            raise ConfigurationError(f"grid size j={grid_size} exceeds feature side {min(h, w)}")
        grid = np.empty((data.shape[0], grid_size, grid_size))
        for a, (top, bottom) in enumerate(adaptive_bins(h, grid_size)):
            for b, (left, right) in enumerate(adaptive_bins(w, grid_size)):
                cell = complement[top:bottom, left:right]
                count = cell.sum()
                if count:
                    grid[:, a, b] = (data[:, top:bottom, left:right] * cell).sum(axis=(1, 2)) / count
                else:
                    grid[:, a, b] = fallback
        grids.append(grid)
    return Tensor(np.mean(grids, axis=0))
