"""Frozen, seeded toy CNN standing in for pretrained conv3_x features."""

import logging
from pathlib import Path
from typing import List, Tuple, Union

import numpy as np

from CobNet.config import BackboneConfig
from CobNet.errors import ConfigurationError, DimensionError
from CobNet.tensor import Tensor, adaptive_avg_pool, conv2d, relu
from Utilities.tensor_io import load_tensor, save_tensor

logger = logging.getLogger(__name__)

FeatureMap = Tensor
ImageLike = Union[np.ndarray, Tensor]

IMAGE_CHANNELS = 3
BIAS_STD = 0.1


class Backbone:
    """Blocks of edge-padded 3x3 conv, ``max(x, 0)`` and 2x mean-pool.

    Only the first ``log2(downsample)`` blocks pool. Weights are drawn once
    from ``config.seed`` and never change; none of them requires gradients.
    """

    def __init__(self, config: BackboneConfig):
        pools = config.downsample.bit_length() - 1
        if 1 << pools != config.downsample:
            raise ConfigurationError(f"downsample factor must be a power of two, got {config.downsample}")
        if pools > config.layers:
            raise ConfigurationError(
                f"downsample {config.downsample} needs {pools} pooling blocks, only {config.layers} layers configured"
            )
        self.config = config
        self.pooling_blocks = pools
        self.layers = self._init_layers(config)

    @staticmethod
    def _init_layers(config: BackboneConfig) -> List[Tuple[Tensor, Tensor]]:
        rng = np.random.default_rng(config.seed)
        layers = []
        c_in = IMAGE_CHANNELS
        for _ in range(config.layers):
            fan_in = c_in * 9
            weight = rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(config.channels, c_in, 3, 3))
            bias = rng.normal(0.0, BIAS_STD, size=config.channels)
            layers.append((Tensor(weight), Tensor(bias)))
            c_in = config.channels
        return layers

    def extract_features(self, image: ImageLike) -> FeatureMap:
        """Map a 3 x H x W image in [0, 1] to a c x H/f x W/f feature map.

        Raises:
            DimensionError: If the image is not 3-channel or its side is not
                divisible by the downsample factor.
        """
        values = image.data if isinstance(image, Tensor) else np.asarray(image, dtype=np.float64)
        if values.ndim != 3 or values.shape[0] != IMAGE_CHANNELS:
            raise DimensionError(f"image must be 3 x H x W, got {values.shape}")
        factor = self.config.downsample
        if values.shape[1] % factor or values.shape[2] % factor:
            raise DimensionError(f"image side {values.shape[1:]} is not divisible by {factor}")

        x = Tensor(np.clip(values, 0.0, 1.0))
        for index, (weight, bias) in enumerate(self.layers):
            x = relu(conv2d(x, weight, bias, padding="edge"))
            if index < self.pooling_blocks:
                x = adaptive_avg_pool(x, x.shape[1] // 2, x.shape[2] // 2)
        return x

    def feature_side(self, image_side: int) -> int:
        return image_side // self.config.downsample

    def weight_tensors(self) -> List[Tensor]:
        return [tensor for layer in self.layers for tensor in layer]


def save_features(path: Union[str, Path], features: FeatureMap) -> None:
    save_tensor(path, features.data)


def load_features(path: Union[str, Path]) -> FeatureMap:
    """Read an externally computed c x h x w feature map from a CBT1 file.

    Raises:
        TensorFormatError: On a bad magic, truncation or a rank other than 3.
    """
    return Tensor(load_tensor(path, expected_rank=3), requires_grad=False)
