"""Checkpoint bundles: one CBT1 file per trainable tensor plus a manifest.

Manifest lines are ``param <name> <d0>x<d1>...`` for every tensor, in
registry order, and one ``config <json>`` line holding the TrainConfig.
"""

import hashlib
import logging
from pathlib import Path
from typing import Dict, Tuple, Union

import numpy as np

from CobNet.config import TrainConfig
from CobNet.errors import MissingCheckpointError, TensorFormatError
from CobNet.model import CobNetModel
from Utilities.tensor_io import load_tensor, save_tensor

logger = logging.getLogger(__name__)

MANIFEST = "manifest.txt"
SUFFIX = ".cbt"


def _shape_text(shape: Tuple[int, ...]) -> str:
    return "x".join(str(dim) for dim in shape)


def save_checkpoint(directory: Union[str, Path], model: CobNetModel, config: TrainConfig) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = []
    for name, tensor in model.named_parameters():
        save_tensor(directory / f"{name}{SUFFIX}", tensor.data)
        lines.append(f"param {name} {_shape_text(tensor.shape)}")
    lines.append(f"config {config.model_dump_json()}")
    (directory / MANIFEST).write_text("\n".join(lines) + "\n")
    logger.info("checkpoint written to %s", directory)
    return directory


def read_manifest(directory: Union[str, Path]) -> Tuple[Dict[str, Tuple[int, ...]], TrainConfig]:
    """Parameter shapes and the training config recorded in a checkpoint.

    Raises:
        MissingCheckpointError: If the folder or its manifest is missing.
    """
    manifest = Path(directory) / MANIFEST
    if not manifest.is_file():
        raise MissingCheckpointError(f"no checkpoint manifest at {manifest}")

    shapes: Dict[str, Tuple[int, ...]] = {}
    config = None
    for line in manifest.read_text().splitlines():
        kind, _, rest = line.partition(" ")
        if kind == "param":
            name, shape = rest.split()
            shapes[name] = tuple(int(dim) for dim in shape.split("x"))
        elif kind == "config":
            config = TrainConfig.model_validate_json(rest)
    if config is None:
        raise MissingCheckpointError(f"checkpoint manifest {manifest} has no config line")
    return shapes, config


def load_state(directory: Union[str, Path]) -> Tuple[Dict[str, np.ndarray], TrainConfig]:
    directory = Path(directory)
    shapes, config = read_manifest(directory)
    state = {}
    for name, shape in shapes.items():
        path = directory / f"{name}{SUFFIX}"
        if not path.is_file():
            raise MissingCheckpointError(f"checkpoint parameter {name} missing at {path}")
        values = load_tensor(path, expected_rank=len(shape))
        if values.shape != shape:
            raise TensorFormatError(f"{path}: shape {values.shape}, manifest says {shape}")
        state[name] = values
    return state, config


def load_checkpoint(directory: Union[str, Path]) -> CobNetModel:
    """Rebuild the model recorded in a checkpoint folder."""
    state, config = load_state(directory)
    model = CobNetModel.from_config(config)
    model.load_state_dict(state)
    return model


def checkpoint_digest(directory: Union[str, Path]) -> str:
    """SHA-256 over the manifest and every parameter file, in name order."""
    directory = Path(directory)
    if not (directory / MANIFEST).is_file():
        raise MissingCheckpointError(f"no checkpoint manifest in {directory}")
    digest = hashlib.sha256()
    for path in sorted(directory.glob(f"*{SUFFIX}")) + [directory / MANIFEST]:
        digest.update(path.name.encode())
        digest.update(path.read_bytes())
    return digest.hexdigest()
