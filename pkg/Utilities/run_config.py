"""Run configuration: ``key = value`` files, flag overrides and the resolved copy.

Files hold one ``key = value`` pair per line; ``#`` starts a comment and
list values are comma separated. Command-line flags override file values.
"""

import os
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Union

import Levenshtein
from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from CobNet.config import AblationMode, BackboneConfig, DatasetConfig, NetworkConfig, TrainConfig
from CobNet.errors import ConfigurationError

DATA_DIR_VAR = "COBNET_DATA_DIR"
RESOLVED_CONFIG = "resolved_config.txt"
DEFAULT_OUT = "runs"


class RunConfig(BaseModel):
    """Everything one command run needs, flat so that it maps onto ``key = value`` lines."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    # run selection
    fold: Optional[int] = Field(default=None, ge=0, title="Fold", description="Single fold; all folds when unset.")
    k: int = Field(default=1, ge=1, title="Shots", description="Support shots at evaluation.")
    weak: bool = Field(default=False, title="Weak", description="All-ones support masks at evaluation.")
    episodes: int = Field(default=1000, ge=1, title="Episodes", description="Test episodes per fold.")
    seed: int = Field(default=0, ge=0, title="Evaluation seed")
    threads: int = Field(default=1, ge=1, title="Evaluation threads")
    out: Optional[str] = Field(default=None, title="Output root")
    checkpoint: Optional[str] = Field(default=None, title="Checkpoint root")
    episode_seed: int = Field(default=0, ge=0, title="Rendered episode seed")
    grid_sweep: List[int] = Field(default_factory=lambda: [1, 2, 4, 8], title="Grid sizes of the j sweep")

    # training
    base_lr: float = Field(default=0.001, gt=0, title="Base learning rate")
    momentum: float = Field(default=0.9, ge=0, lt=1, title="Momentum")
    epochs: int = Field(default=40, ge=1, title="Epochs")
    iterations_per_epoch: int = Field(default=25, ge=1, title="Iterations per epoch")
    batch_size: int = Field(default=4, ge=1, title="Batch size")
    poly_power: float = Field(default=0.9, gt=0, title="Poly power")
    train_seed: int = Field(default=0, ge=0, title="Training seed")
    train_k: int = Field(default=1, ge=1, title="Training shots")
    train_weak: bool = Field(default=False, title="Train with all-ones support masks")
    augment: bool = Field(default=True, title="Augment training scenes")

    # network
    channels: int = Field(default=64, ge=1, title="Channels")
    pyramid_sizes: List[int] = Field(default_factory=lambda: [16, 12, 8, 4], title="Pyramid sizes")
    grid_size: int = Field(default=4, ge=1, title="Background grid side j")
    ablation: AblationMode = Field(default="full", title="Ablation mode")
    init_seed: int = Field(default=0, ge=0, title="Weight init seed")

    # backbone and data
    downsample: int = Field(default=4, ge=1, title="Backbone downsample factor")
    backbone_layers: int = Field(default=3, ge=1, title="Backbone conv blocks")
    backbone_seed: int = Field(default=0, ge=0, title="Backbone seed")
    image_side: int = Field(default=64, ge=8, title="Image side")
    dataset_seed: int = Field(default=0, ge=0, title="Dataset seed")
    match_backgrounds: bool = Field(default=False, title="Match support and query backgrounds")

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            base_lr=self.base_lr,
            momentum=self.momentum,
            epochs=self.epochs,
            iterations_per_epoch=self.iterations_per_epoch,
            batch_size=self.batch_size,
            poly_power=self.poly_power,
            seed=self.train_seed,
            k_shot=self.train_k,
            augment=self.augment,
            weak=self.train_weak,
            network=NetworkConfig(
                channels=self.channels,
                pyramid_sizes=self.pyramid_sizes,
                grid_size=self.grid_size,
                ablation=self.ablation,
                init_seed=self.init_seed,
            ),
            backbone=BackboneConfig(
                channels=self.channels,
                downsample=self.downsample,
                seed=self.backbone_seed,
                layers=self.backbone_layers,
            ),
            dataset=DatasetConfig(
                image_side=self.image_side,
                seed=self.dataset_seed,
                match_backgrounds=self.match_backgrounds,
            ),
        )

    @property
    def feature_side(self) -> int:
        return self.image_side // self.downsample

    def output_root(self) -> Path:
        """``out`` if set, else ``$COBNET_DATA_DIR``, else ``./runs``."""
        if self.out:
            return Path(self.out)
        load_dotenv()
        return Path(os.getenv(DATA_DIR_VAR) or DEFAULT_OUT)

    def checkpoint_root(self) -> Path:
        return Path(self.checkpoint) if self.checkpoint else self.output_root() / "checkpoints"

    def to_text(self) -> str:
        lines = []
        for key, value in self.model_dump().items():
            if value is None:
                continue
            if isinstance(value, list):
                value = ",".join(str(item) for item in value)
            lines.append(f"{key} = {value}")
        return "\n".join(lines) + "\n"

    def write_resolved(self, directory: Union[str, Path]) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        path = directory / RESOLVED_CONFIG
        path.write_text(self.to_text())
        return path


def suggest_key(key: str, known: List[str]) -> str:
    return max(known, key=lambda candidate: Levenshtein.ratio(key, candidate))


def _parse_value(key: str, raw: str) -> Any:
    annotation = RunConfig.model_fields[key].annotation
    if annotation == List[int]:
        return [item.strip() for item in raw.split(",") if item.strip()]
    return raw


def parse_config_text(text: str) -> Dict[str, Any]:
    """Parse ``key = value`` lines into a raw dictionary.

    Raises:
        ConfigurationError: On a malformed line or an unknown key; unknown
            keys name the closest known key.
    """
    known = list(RunConfig.model_fields)
    values: Dict[str, Any] = {}
    for number, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"line {number}: expected 'key = value', got {line!r}")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in known:
            raise ConfigurationError(
                f"line {number}: unknown key {key!r}, did you mean {suggest_key(key, known)!r}?"
            )
        values[key] = _parse_value(key, raw)
    return values


def load_run_config(
    path: Optional[Union[str, Path]] = None, overrides: Optional[Mapping[str, Any]] = None
) -> RunConfig:
    """Read a config file (optional) and apply non-None overrides on top.

    Raises:
        ConfigurationError: If the file is missing, a key is unknown or a value
            fails validation.
    """
    values: Dict[str, Any] = {}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigurationError(f"config file {path} does not exist")
        values.update(parse_config_text(path.read_text()))
    known = list(RunConfig.model_fields)
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if key not in known:
            raise ConfigurationError(f"unknown override {key!r}, did you mean {suggest_key(key, known)!r}?")
        values[key] = value
    try:
        config = RunConfig(**values)
        config.train_config()
    except ValidationError as error:
        raise ConfigurationError(f"invalid configuration: {error}") from error
    return config
