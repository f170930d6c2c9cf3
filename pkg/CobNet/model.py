"""CobNet assembled from the frozen backbone, prototypes, align mask, MBM and CAM.

The ablation switch decides which data paths exist:

- ``full``: query background grid, MBM with both branches, cross attention.
- ``mbm_only``: as ``full`` but the classifier reads ``concat(F_o, F_b)`` directly.
- ``mbm_s``: background grid pooled from the support mask complement, no CAM.
- ``mbm_o``: object branch only; the classifier reads ``concat(F_o, F_o)``.
"""

import logging
from dataclasses import dataclass
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

from CobNet.backbone import Backbone, FeatureMap
from CobNet.cam import CrossAttentionModule, LossBreakdown, classify, predict_mask, total_loss, upsample_logits
from CobNet.config import BackboneConfig, NetworkConfig, TrainConfig
from CobNet.episodes import Episode
from CobNet.errors import ConfigurationError
from CobNet.layers import NamedTensor
from CobNet.mbm import MultiScaleBackgroundModule
from CobNet.metrics import EpisodeCounts, episode_counts
from CobNet.prior import AlignMask, align_mask, masked_support_features
from CobNet.proto import (
    background_grid,
    kshot_prototype,
    support_background_grid,
    weak_object_prototype,
)
from CobNet.tensor import Graph, Tensor

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class EpisodeFeatures:
    """Backbone features of one episode; reusable since the backbone never changes."""

    query: FeatureMap
    support: List[FeatureMap]


@dataclass
class ForwardOutput:
    final_logits: Tensor
    intermediate_logits: List[Tensor]
    align_mask: AlignMask
    attention: Optional[Tensor]


@dataclass
class EpisodeResult:
    """Prediction at image resolution, IoU counts and the loss breakdown of one episode."""

    prediction: np.ndarray
    counts: EpisodeCounts
    loss: float
    segmentation_loss: float
    intermediate_losses: List[float]
    align_mask: np.ndarray
    attention: Optional[np.ndarray] = None
    class_id: int = -1


@dataclass
class CobNetModel:
    network: NetworkConfig
    backbone: Backbone
    image_side: int = 64

    def __post_init__(self) -> None:
        if self.network.channels != self.backbone.config.channels:
            raise ConfigurationError(
                f"network expects {self.network.channels} channels, "
                f"backbone produces {self.backbone.config.channels}"
            )
        self.feature_side = self.backbone.feature_side(self.image_side)
        self.network.check(self.feature_side)

        mode = self.network.ablation
        rng = np.random.default_rng(self.network.init_seed)
        self.mbm = MultiScaleBackgroundModule.init(
            rng, self.network.channels, self.network.pyramid_sizes, with_background=mode != "mbm_o"
        )
        self.cam = CrossAttentionModule.init(rng, self.network.channels, with_attention=mode == "full")

    @classmethod
    def from_config(cls, config: TrainConfig) -> "CobNetModel":
        return cls(
            network=config.network,
            backbone=Backbone(config.backbone),
            image_side=config.dataset.image_side,
        )

    @classmethod
    def build(
        cls, network: NetworkConfig, backbone: BackboneConfig, image_side: int = 64
    ) -> "CobNetModel":
        return cls(network=network, backbone=Backbone(backbone), image_side=image_side)

    # Parameter registry. The backbone is never part of it.

    def named_parameters(self) -> Iterator[NamedTensor]:
        yield from self.mbm.named_parameters("mbm")
        yield from self.cam.named_parameters("cam")

    def parameters(self) -> List[Tensor]:
        return [tensor for _, tensor in self.named_parameters()]

    def parameter_count(self) -> int:
        """Number of learnable scalars."""
        return sum(tensor.size for tensor in self.parameters())

    def zero_grad(self) -> None:
        for tensor in self.parameters():
            tensor.zero_grad()

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: tensor.numpy() for name, tensor in self.named_parameters()}

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        """Copy saved values into the parameters.

        Raises:
            ConfigurationError: If names or shapes differ from this model.
        """
        expected = dict(self.named_parameters())
        missing = sorted(set(expected) - set(state))
        unexpected = sorted(set(state) - set(expected))
        if missing or unexpected:
            raise ConfigurationError(f"state mismatch: missing {missing}, unexpected {unexpected}")
        for name, tensor in expected.items():
            values = np.asarray(state[name], dtype=np.float64)
            if values.shape != tensor.shape:
                raise ConfigurationError(f"{name}: saved shape {values.shape} != model shape {tensor.shape}")
            tensor.assign(values)

    # Forward pass.

    def extract(self, episode: Episode) -> EpisodeFeatures:
        return EpisodeFeatures(
            query=self.backbone.extract_features(episode.query_image),
            support=[self.backbone.extract_features(shot.image) for shot in episode.support],
        )

    def _object_prototype(self, episode: Episode, shots: List[Tuple[FeatureMap, np.ndarray]]) -> Tensor:
        if episode.weak:
            prototypes = [weak_object_prototype(features).data for features, _ in shots]
            return Tensor(np.mean(prototypes, axis=0))
        return kshot_prototype(shots)

    def _background(self, query: FeatureMap, shots: List[Tuple[FeatureMap, np.ndarray]]) -> Optional[Tensor]:
        mode = self.network.ablation
        j = self.network.grid_size
        if mode == "mbm_o":
            return None
        if mode == "mbm_s":
            return support_background_grid(shots, j)
        return background_grid(query, j, self.network.pyramid_sizes[-1])

    def forward(self, episode: Episode, features: Optional[EpisodeFeatures] = None) -> ForwardOutput:
        """Final logits at feature resolution plus the N intermediate logit maps."""
        features = features or self.extract(episode)
        shots = [(feature, shot.mask) for feature, shot in zip(features.support, episode.support)]

        object_prototype = self._object_prototype(episode, shots)
        prior = align_mask(
            features.query, [masked_support_features(feature, mask) for feature, mask in shots]
        )
        mbm_out = self.mbm(features.query, object_prototype, self._background(features.query, shots), prior)

        object_features = mbm_out.object_features
        if mbm_out.background_features is None:
            logits, attention_map = classify(object_features, object_features, self.cam.classifier), None
        else:
            logits, attention_map = self.cam(object_features, mbm_out.background_features)
        return ForwardOutput(logits, mbm_out.intermediate_logits, prior, attention_map)

    def episode_loss(
        self, episode: Episode, features: Optional[EpisodeFeatures] = None
    ) -> Tuple[LossBreakdown, ForwardOutput]:
        output = self.forward(episode, features)
        return total_loss(output.final_logits, output.intermediate_logits, episode.query_mask), output

    def predict(self, episode: Episode) -> np.ndarray:
        return self.run_episode(episode).prediction

    def run_episode(self, episode: Episode, features: Optional[EpisodeFeatures] = None) -> EpisodeResult:
        """Forward pass without keeping the graph; returns the image-resolution prediction."""
        with Graph():
            breakdown, output = self.episode_loss(episode, features)
            h, w = episode.query_mask.shape
            prediction = predict_mask(upsample_logits(output.final_logits, h, w))
            attention = output.attention.numpy()[0] if output.attention is not None else None
            return EpisodeResult(
                prediction=prediction,
                counts=episode_counts(prediction, episode.query_mask),
                loss=breakdown.total.item(),
                segmentation_loss=breakdown.segmentation,
                intermediate_losses=breakdown.intermediate,
                align_mask=output.align_mask.values.numpy()[0],
                attention=attention,
                class_id=episode.class_id,
            )
