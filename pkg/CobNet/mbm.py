"""Multi-scale background module: pyramid, Fuse+/Fuse- branches and intermediate heads."""

from dataclasses import dataclass
from typing import Iterator, List, Optional, Sequence

import numpy as np

from CobNet.errors import ConfigurationError, DimensionError
from CobNet.layers import ConvLayer, ConvStack, NamedTensor
from CobNet.prior import AlignMask
from CobNet.tensor import (
    Tensor,
    adaptive_avg_pool,
    add_all,
    bilinear_resize,
    concat_channels,
    one_minus,
)


@dataclass(frozen=True)
class ScalePyramid:
    sizes: List[int]
    levels: List[Tensor]


def build_pyramid(query_features: Tensor, sizes: Sequence[int]) -> ScalePyramid:
    """Adaptive-average-pool the query features to every ``k x k`` size."""
    _, h, w = query_features.shape
    for size in sizes:
        if not 1 <= size <= min(h, w):
            raise DimensionError(f"pyramid size {size} exceeds the {h}x{w} feature map")
    levels = [adaptive_avg_pool(query_features, size, size) for size in sizes]
    return ScalePyramid(sizes=list(sizes), levels=levels)


def expand_object(prototype: Tensor, k: int) -> Tensor:
    """Broadcast a c-vector prototype to every position of a c x k x k map."""
    values = prototype.data.reshape(-1, 1, 1)
    return Tensor(np.broadcast_to(values, (values.shape[0], k, k)))


def expand_background(grid: Tensor, k: int) -> Tensor:
    """Nearest-neighbour tiling of a c x j x j grid onto c x k x k.

    Output cell ``(y, x)`` takes grid cell ``(y*j // k, x*j // k)``.

    Raises:
        ConfigurationError: If ``k < j``.
    """
    j = grid.shape[1]
    if k < j:
        raise ConfigurationError(f"cannot expand a {j}x{j} background grid to {k}x{k}")
    index = (np.arange(k) * j) // k
    return Tensor(grid.data[:, index][:, :, index])


def fuse_plus(level: Tensor, object_map: Tensor, mask_k: Tensor, layer: ConvLayer) -> Tensor:
    """1x1 conv over ``[object, level, M_a]``."""
    return layer(concat_channels([object_map, level, mask_k]))


def fuse_minus(level: Tensor, background_map: Tensor, mask_k: Tensor, layer: ConvLayer) -> Tensor:
    """1x1 conv over ``[level, background, 1 - M_a]``."""
    return layer(concat_channels([level, background_map, one_minus(mask_k)]))


def aggregate(levels: Sequence[Tensor], h: int, w: int) -> Tensor:
    """Resize every level to h x w and add them up."""
    if not levels:
        raise DimensionError("aggregate needs at least one level")
    return add_all([bilinear_resize(level, h, w) for level in levels])


def intermediate_prediction(fused: Tensor, head: ConvStack) -> Tensor:
    """Two 3x3 convs then a 1x1 conv to 2 logit channels."""
    return head(fused)


@dataclass
class MBMOutput:
    object_features: Tensor
    background_features: Optional[Tensor]
    intermediate_logits: List[Tensor]


class MultiScaleBackgroundModule:
    """Fuse parameters for every pyramid level.

    Each level owns a Fuse+ 1x1 conv ``(2c+1) -> c``, a Fuse- 1x1 conv of the
    same shape (absent when the background branch is ablated) and an
    intermediate prediction head fed by the Fuse+ output.
    """

    def __init__(
        self,
        sizes: Sequence[int],
        plus: List[ConvLayer],
        minus: Optional[List[ConvLayer]],
        heads: List[ConvStack],
    ):
        self.sizes = list(sizes)
        self.plus = plus
        self.minus = minus
        self.heads = heads

    @classmethod
    def init(
        cls, rng: np.random.Generator, channels: int, sizes: Sequence[int], with_background: bool = True
    ) -> "MultiScaleBackgroundModule":
        c = channels
        plus = [ConvLayer.init(rng, c, 2 * c + 1, 1) for _ in sizes]
        minus = [ConvLayer.init(rng, c, 2 * c + 1, 1) for _ in sizes] if with_background else None
        heads = [ConvStack.init(rng, [(c, c, 3), (c, c, 3), (2, c, 1)]) for _ in sizes]
        return cls(sizes, plus, minus, heads)

    def __call__(
        self,
        query_features: Tensor,
        object_prototype: Tensor,
        background: Optional[Tensor],
        mask: AlignMask,
    ) -> MBMOutput:
        _, h, w = query_features.shape
        pyramid = build_pyramid(query_features, self.sizes)

        fused_plus, fused_minus, intermediate = [], [], []
        for index, (size, level) in enumerate(zip(pyramid.sizes, pyramid.levels)):
            mask_k = mask.at_scale(size)
            plus = fuse_plus(level, expand_object(object_prototype, size), mask_k, self.plus[index])
            fused_plus.append(plus)
            intermediate.append(intermediate_prediction(plus, self.heads[index]))
            if self.minus is not None and background is not None:
                background_map = expand_background(background, size)
                fused_minus.append(fuse_minus(level, background_map, mask_k, self.minus[index]))

        object_features = aggregate(fused_plus, h, w)
        background_features = aggregate(fused_minus, h, w) if fused_minus else None
        return MBMOutput(object_features, background_features, intermediate)

    def named_parameters(self, prefix: str = "mbm") -> Iterator[NamedTensor]:
        for index, layer in enumerate(self.plus):
            yield from layer.named_parameters(f"{prefix}.fuse_plus.{index}")
        for index, layer in enumerate(self.minus or []):
            yield from layer.named_parameters(f"{prefix}.fuse_minus.{index}")
        for index, head in enumerate(self.heads):
            yield from head.named_parameters(f"{prefix}.heads.{index}")
