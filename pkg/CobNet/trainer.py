"""Episodic meta-training: SGD with momentum under a poly learning-rate schedule."""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Union

import numpy as np
from more_itertools import chunked

from CobNet.checkpoint import save_checkpoint
from CobNet.config import TrainConfig
from CobNet.episodes import Episode, FoldSplit, make_weak, sample_episode
from CobNet.errors import DimensionError, TrainingDivergedError
from CobNet.model import CobNetModel
from CobNet.tensor import Graph, Tensor, add_all, backward, scale
from Utilities.tables import write_loss_log

logger = logging.getLogger(__name__)

LOSS_LOG = "loss_log.tsv"
DIVERGED_DUMP = "diverged_episodes.txt"


def poly_lr(iteration: int, max_iter: int, config: TrainConfig) -> float:
    """``base_lr * (1 - iteration / max_iter) ** power``."""
    if not 0 <= iteration <= max_iter:
        raise ValueError(f"iteration {iteration} outside [0, {max_iter}]")
    return config.base_lr * (1.0 - iteration / max_iter) ** config.poly_power


def sgd_step(
    params: Sequence[Tensor],
    grads: Sequence[Optional[np.ndarray]],
    velocity: List[np.ndarray],
    lr: float,
    momentum: float,
) -> None:
    """``v = momentum * v + g`` then ``p = p - lr * v``, in place on ``velocity``.

    A missing gradient counts as zero.
    """
    for index, (param, grad) in enumerate(zip(params, grads)):
        g = np.zeros(param.shape) if grad is None else grad
        if g.shape != param.shape or velocity[index].shape != param.shape:
            raise DimensionError(f"parameter {param.shape}, gradient {g.shape}, velocity {velocity[index].shape}")
        velocity[index] = momentum * velocity[index] + g
        param.assign(param.data - lr * velocity[index])


class SGD:
    """Momentum SGD over a fixed list of parameters."""

    def __init__(self, params: Sequence[Tensor], momentum: float):
        self.params = list(params)
        self.momentum = momentum
        self.velocity = [np.zeros(param.shape) for param in self.params]

    def step(self, lr: float) -> None:
        sgd_step(self.params, [param.grad for param in self.params], self.velocity, lr, self.momentum)

    def zero_grad(self) -> None:
        for param in self.params:
            param.zero_grad()


@dataclass
class TrainResult:
    fold: int
    checkpoint: Path
    losses: List[float] = field(default_factory=list)
    learning_rates: List[float] = field(default_factory=list)

    @property
    def loss_log(self) -> Path:
        return self.checkpoint / LOSS_LOG


def training_episodes(split: FoldSplit, fold: int, config: TrainConfig, feature_side: int) -> Iterator[Episode]:
    """Endless stream of training episodes from the classes outside ``fold``."""
    rng = np.random.default_rng([config.seed, fold])
    while True:
        episode = sample_episode(
            split,
            fold,
            config.k_shot,
            rng,
            training=True,
            augmented=config.augment,
            image_side=config.dataset.image_side,
            feature_side=feature_side,
            match_backgrounds=config.dataset.match_backgrounds,
        )
        yield make_weak(episode) if config.weak else episode


def _dump_batch(batch: Sequence[Episode], directory: Path, iteration: int) -> Path:
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / DIVERGED_DUMP
    lines = [f"iteration={iteration} {episode.manifest_line()}" for episode in batch]
    path.write_text("\n".join(lines) + "\n")
    return path


def train_fold(
    split: FoldSplit,
    fold: int,
    config: TrainConfig,
    output_dir: Union[str, Path],
    model: Optional[CobNetModel] = None,
) -> TrainResult:
    """Meta-train one fold and write its checkpoint and loss log to ``output_dir``.

    Every iteration draws ``batch_size`` episodes; the batch loss is the mean
    of the per-episode losses.

    Raises:
        TrainingDivergedError: On a non-finite loss. The offending batch is
            written as episode manifest lines next to the checkpoint.
    """
    split.check_fold(fold)
    output_dir = Path(output_dir)
    model = model or CobNetModel.from_config(config)
    optimizer = SGD(model.parameters(), config.momentum)
    backbone_ids = {id(tensor) for tensor in model.backbone.weight_tensors()}
    if any(id(param) in backbone_ids for param in optimizer.params):
        raise AssertionError("backbone tensors must never be optimised")

    max_iter = config.max_iter
    stream = training_episodes(split, fold, config, model.feature_side)
    batches = chunked(stream, config.batch_size)
    result = TrainResult(fold=fold, checkpoint=output_dir)
    log_rows: List[Dict[str, float]] = []

    logger.info(
        "training fold %d on classes %s for %d iterations (%d learnable values)",
        fold,
        split.train_classes(fold),
        max_iter,
        model.parameter_count(),
    )
    for iteration in range(max_iter):
        batch = next(batches)
        lr = poly_lr(iteration, max_iter, config)
        with Graph():
            losses = [model.episode_loss(episode)[0].total for episode in batch]
            loss = scale(add_all(losses), 1.0 / len(losses))
            value = loss.item()
            if not np.isfinite(value):
                dump = _dump_batch(batch, output_dir, iteration)
                raise TrainingDivergedError(
                    f"non-finite loss {value} at iteration {iteration} of fold {fold}", str(dump)
                )
            optimizer.zero_grad()
            backward(loss)
        optimizer.step(lr)

        result.losses.append(value)
        result.learning_rates.append(lr)
        log_rows.append({"iteration": iteration, "lr": lr, "loss": value})
        if iteration % config.iterations_per_epoch == 0:
            logger.info("fold %d iteration %d/%d lr %.3e loss %.4f", fold, iteration, max_iter, lr, value)

    save_checkpoint(output_dir, model, config)
    write_loss_log(log_rows, output_dir / LOSS_LOG)
    return result
