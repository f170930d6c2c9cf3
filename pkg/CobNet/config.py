"""Configuration models for the backbone, network, dataset and training."""

from typing import List, Literal

from pydantic import BaseModel, ConfigDict, Field, model_validator

from CobNet.errors import ConfigurationError

AblationMode = Literal["full", "mbm_only", "mbm_s", "mbm_o"]

# What each ablation switch keeps.
ABLATION_MODES = {
    "full": "MBM with query background prototypes, followed by cross attention",
    "mbm_only": "MBM with query background prototypes, classifier on concat(F_o, F_b)",
    "mbm_s": "MBM with background prototypes pooled from the support mask complement",
    "mbm_o": "MBM object branch only, classifier on concat(F_o, F_o)",
}


class BackboneConfig(BaseModel):
    """Frozen feature extractor settings."""

    model_config = ConfigDict(frozen=True)

    channels: int = Field(
        default=64, ge=1, title="Channels", description="Feature channels c."
    )
    downsample: int = Field(
        default=4,
        ge=1,
        title="Downsample factor",
        description="Image side divided by feature side. Must be a power of two.",
    )
    seed: int = Field(
        default=0, ge=0, lt=2**64, title="Seed", description="Weight initialisation seed."
    )
    layers: int = Field(
        default=3, ge=1, title="Layer count", description="Number of conv blocks."
    )


class NetworkConfig(BaseModel):
    """Trainable part of the network: MBM, CAM and the ablation switch."""

    model_config = ConfigDict(frozen=True)

    channels: int = Field(default=64, ge=1, title="Channels", description="Feature channels c.")
    pyramid_sizes: List[int] = Field(
        default_factory=lambda: [16, 12, 8, 4],
        min_length=1,
        title="Pyramid sizes",
        description="Spatial sizes k_i of the query feature pyramid, non-increasing.",
    )
    grid_size: int = Field(
        default=4, ge=1, title="Grid size", description="Background prototype grid side j."
    )
    ablation: AblationMode = Field(
        default="full", title="Ablation", description="Which data paths are active."
    )
    init_seed: int = Field(
        default=0, ge=0, title="Init seed", description="Seed of the trainable weights."
    )

    @property
    def scales(self) -> int:
        """N, the number of pyramid levels."""
        return len(self.pyramid_sizes)

    def check(self, feature_side: int) -> None:
        """Validate sizes against the feature map side.

        Raises:
            ConfigurationError: If the pyramid is not non-increasing, exceeds the
                feature side, or the grid is larger than the smallest level.
        """
        sizes = self.pyramid_sizes
        if any(later > earlier for earlier, later in zip(sizes, sizes[1:])):
            raise ConfigurationError(f"pyramid sizes must be non-increasing, got {sizes}")
        if sizes[0] > feature_side or sizes[-1] < 1:
            raise ConfigurationError(
                f"pyramid sizes {sizes} must lie in [1, {feature_side}] for a {feature_side}-pixel feature map"
            )
        if not 1 <= self.grid_size <= sizes[-1]:
            raise ConfigurationError(
                f"grid size j={self.grid_size} must lie in [1, {sizes[-1]}] (smallest pyramid size)"
            )
        if self.ablation not in ABLATION_MODES:
            raise ConfigurationError(f"unknown ablation mode {self.ablation!r}")

    def with_grid(self, grid_size: int) -> "NetworkConfig":
        """Copy with a new j; pyramid sizes below j are raised to j."""
        sizes = [max(size, grid_size) for size in self.pyramid_sizes]
        return self.model_copy(update={"grid_size": grid_size, "pyramid_sizes": sizes})


class DatasetConfig(BaseModel):
    """Synthetic episodic dataset settings."""

    model_config = ConfigDict(frozen=True)

    image_side: int = Field(default=64, ge=8, title="Image side", description="H = W of rendered scenes.")
    seed: int = Field(default=0, ge=0, title="Dataset seed", description="Root seed for episode streams.")
    match_backgrounds: bool = Field(
        default=False,
        title="Match backgrounds",
        description="Force support and query scenes to share one background style.",
    )


class TrainConfig(BaseModel):
    """Meta-training hyper-parameters."""

    model_config = ConfigDict(frozen=True)

    base_lr: float = Field(default=0.001, gt=0, title="Base learning rate")
    momentum: float = Field(default=0.9, ge=0, lt=1, title="Momentum")
    epochs: int = Field(default=40, ge=1, title="Epochs")
    iterations_per_epoch: int = Field(
        default=25, ge=1, title="Iterations per epoch", description="Batches drawn per epoch."
    )
    batch_size: int = Field(default=4, ge=1, title="Batch size")
    poly_power: float = Field(default=0.9, gt=0, title="Poly power")
    seed: int = Field(default=0, ge=0, title="Training seed")
    k_shot: int = Field(default=1, ge=1, title="Shots per training episode")
    augment: bool = Field(default=True, title="Flip/rotate training scenes")
    weak: bool = Field(default=False, title="Train with all-ones support masks")
    network: NetworkConfig = Field(default_factory=NetworkConfig)
    backbone: BackboneConfig = Field(default_factory=BackboneConfig)
    dataset: DatasetConfig = Field(default_factory=DatasetConfig)

    @model_validator(mode="after")
    def check_sizes(self) -> "TrainConfig":
        """Scenes must tile into whole feature cells that fit the pyramid."""
        factor, side = self.backbone.downsample, self.dataset.image_side
        if factor & (factor - 1):
            raise ConfigurationError(f"downsample factor must be a power of two, got {factor}")
        if side % factor:
            raise ConfigurationError(f"image side {side} is not divisible by the downsample factor {factor}")
        self.network.check(side // factor)
        return self

    @property
    def max_iter(self) -> int:
        """Whole-run iteration count used by the poly schedule."""
        return self.epochs * self.iterations_per_epoch
