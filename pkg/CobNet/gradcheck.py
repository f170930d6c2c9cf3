"""Central-difference gradient check over every trainable value of a tiny network."""

import logging
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional

import numpy as np
import pandas as pd

from CobNet.config import BackboneConfig, NetworkConfig
from CobNet.episodes import FoldSplit, sample_episode
from CobNet.errors import ConfigurationError
from CobNet.model import CobNetModel, EpisodeFeatures
from CobNet.tensor import Graph, Tensor, backward

logger = logging.getLogger(__name__)

STEP = 1e-5
TOLERANCE = 1e-4
# magnitude below which errors are measured in absolute terms
ERROR_FLOOR = 1e-5

TINY_BACKBONE = BackboneConfig(channels=4, downsample=4, seed=0, layers=3)
TINY_IMAGE_SIDE = 32
TINY_NETWORK = NetworkConfig(channels=4, pyramid_sizes=[4, 2], grid_size=2)


def relative_error(analytic: float, numeric: float, floor: float = ERROR_FLOOR) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def central_difference(loss_fn: Callable[[], float], tensor: Tensor, index: int, step: float) -> float:
    """Numerical derivative of ``loss_fn`` with respect to one entry of ``tensor``."""
    original = tensor.numpy()
    flat = original.copy().reshape(-1)
    try:
        flat[index] += step
        tensor.assign(flat.reshape(tensor.shape))
        upper = loss_fn()
        flat[index] -= 2 * step
        tensor.assign(flat.reshape(tensor.shape))
        lower = loss_fn()
    finally:
        tensor.assign(original)
    return (upper - lower) / (2 * step)


def check_tensor(
    loss_fn: Callable[[], float],
    tensor: Tensor,
    analytic: np.ndarray,
    step: float = STEP,
) -> float:
    """Largest relative error over all entries of ``tensor``."""
    worst = 0.0
    flat_analytic = analytic.reshape(-1)
    for index in range(tensor.size):
        numeric = central_difference(loss_fn, tensor, index, step)
        worst = max(worst, relative_error(float(flat_analytic[index]), numeric))
    return worst


def module_of(name: str) -> str:
    """``mbm.fuse_plus.0.weight`` belongs to module ``mbm.fuse_plus``."""
    return ".".join(name.split(".")[:2])


@dataclass
class GradcheckReport:
    parameters: pd.DataFrame

    @property
    def passed(self) -> bool:
        return bool((self.parameters["max_rel_error"] < TOLERANCE).all())

    @property
    def offenders(self) -> List[str]:
        failing = self.parameters[self.parameters["max_rel_error"] >= TOLERANCE]
        return list(failing["parameter"])

    def by_module(self) -> pd.DataFrame:
        return self.parameters.groupby("module", sort=False, as_index=False)["max_rel_error"].max()

    def table(self) -> str:
        return self.by_module().to_string(index=False, float_format=lambda value: f"{value:.3e}")


def tiny_model(seed: int = 0, ablation: str = "full") -> CobNetModel:
    network = TINY_NETWORK.model_copy(update={"init_seed": seed, "ablation": ablation})
    return CobNetModel.build(network, TINY_BACKBONE, image_side=TINY_IMAGE_SIDE)


def gradcheck(
    seed: int = 0,
    model: Optional[CobNetModel] = None,
    corrupt: Optional[str] = None,
) -> GradcheckReport:
    """Compare analytic and numerical gradients of one training episode's loss.

    Args:
        seed: Seeds the tiny network and the episode.
        model: Network to check; defaults to the tiny configuration.
        corrupt: Name of a parameter whose analytic gradient is offset by one,
            for testing that failures are caught.
    """
    model = model or tiny_model(seed)
    rng = np.random.default_rng([seed, 0])
    episode = sample_episode(
        FoldSplit(),
        0,
        1,
        rng,
        training=True,
        image_side=model.image_side,
        feature_side=model.feature_side,
    )
    features: EpisodeFeatures = model.extract(episode)

    def loss_value() -> float:
        with Graph():
            return model.episode_loss(episode, features)[0].total.item()

    model.zero_grad()
    with Graph():
        loss = model.episode_loss(episode, features)[0].total
        backward(loss)
    analytic: Dict[str, np.ndarray] = {
        name: tensor.grad if tensor.grad is not None else np.zeros(tensor.shape)
        for name, tensor in model.named_parameters()
    }
    if corrupt is not None:
        if corrupt not in analytic:
            raise ConfigurationError(f"unknown parameter {corrupt!r}")
        analytic[corrupt] = analytic[corrupt] + 1.0

    rows = []
    for name, tensor in model.named_parameters():
        error = check_tensor(loss_value, tensor, analytic[name])
        logger.debug("%s: max relative error %.3e", name, error)
        rows.append({"parameter": name, "module": module_of(name), "size": tensor.size, "max_rel_error": error})
    model.zero_grad()
    return GradcheckReport(pd.DataFrame(rows))
