"""Convolution layers holding trainable tensors."""

from typing import Iterator, List, Tuple

import numpy as np

from CobNet.tensor import Tensor, conv2d, parameter, relu

NamedTensor = Tuple[str, Tensor]


class ConvLayer:
    """One stride-1 convolution with weight ``c_out x c_in x k x k`` and bias."""

    def __init__(self, weight: Tensor, bias: Tensor):
        self.weight = weight
        self.bias = bias

    @classmethod
    def init(cls, rng: np.random.Generator, c_out: int, c_in: int, kernel: int) -> "ConvLayer":
        """Normal weights with std 1/sqrt(fan_in) and zero bias."""
        fan_in = c_in * kernel * kernel
        weight = rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(c_out, c_in, kernel, kernel))
        return cls(parameter(weight), parameter(np.zeros(c_out)))

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias)

    def named_parameters(self, prefix: str) -> Iterator[NamedTensor]:
        yield f"{prefix}.weight", self.weight
        yield f"{prefix}.bias", self.bias


class ConvStack:
    """Convolutions with ``max(x, 0)`` between them; the last layer stays linear."""

    def __init__(self, layers: List[ConvLayer]):
        self.layers = layers

    @classmethod
    def init(cls, rng: np.random.Generator, spec: List[Tuple[int, int, int]]) -> "ConvStack":
        """Build from ``(c_out, c_in, kernel)`` triples."""
        return cls([ConvLayer.init(rng, c_out, c_in, kernel) for c_out, c_in, kernel in spec])

    def __call__(self, x: Tensor) -> Tensor:
        last = len(self.layers) - 1
        for index, layer in enumerate(self.layers):
            x = layer(x)
            if index < last:
                x = relu(x)
        return x

    def named_parameters(self, prefix: str) -> Iterator[NamedTensor]:
        for index, layer in enumerate(self.layers):
            yield from layer.named_parameters(f"{prefix}.{index}")
