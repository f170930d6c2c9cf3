"""Cross attention module, classifier head and the total loss."""

from dataclasses import dataclass
from typing import Iterator, List, Optional, Sequence, Tuple

import numpy as np

from CobNet.errors import DimensionError
from CobNet.layers import ConvStack, NamedTensor
from CobNet.tensor import (
    Tensor,
    add_all,
    add,
    bilinear_resize,
    concat_channels,
    mul,
    one_minus,
    scale,
    sigmoid,
    softmax_cross_entropy,
)


def _check_pair(object_features: Tensor, background_features: Tensor) -> None:
    if object_features.shape != background_features.shape:
        raise DimensionError(
            f"object features {object_features.shape} and background features "
            f"{background_features.shape} must match"
        )


def attention(object_features: Tensor, background_features: Tensor, head: ConvStack) -> Tensor:
    """``sigmoid(conv1x1(relu(conv1x1(concat(F_o, F_b)))))``, a 1 x h x w map in (0, 1)."""
    _check_pair(object_features, background_features)
    return sigmoid(head(concat_channels([object_features, background_features])))


def apply_attention(
    object_features: Tensor, background_features: Tensor, attention_map: Tensor
) -> Tuple[Tensor, Tensor]:
    """Weight object features by A and background features by 1 - A."""
    return (
        mul(object_features, attention_map),
        mul(background_features, one_minus(attention_map)),
    )


def classify(object_features: Tensor, background_features: Tensor, classifier: ConvStack) -> Tensor:
    """Three 3x3 convs and a 1x1 conv over the concatenated features; 2 x h x w logits."""
    _check_pair(object_features, background_features)
    return classifier(concat_channels([object_features, background_features]))


def upsample_logits(logits: Tensor, h: int, w: int) -> Tensor:
    return bilinear_resize(logits, h, w)


@dataclass
class LossBreakdown:
    total: Tensor
    segmentation: float
    intermediate: List[float]


def total_loss(
    final_logits: Tensor, intermediate_logits: Sequence[Tensor], query_mask: np.ndarray
) -> LossBreakdown:
    """Mean of the intermediate losses plus the final segmentation loss.

    Every logit map is upsampled to the query mask resolution first.
    """
    if not intermediate_logits:
        raise DimensionError("total loss needs at least one intermediate prediction")
    h, w = np.asarray(query_mask).shape
    segmentation = softmax_cross_entropy(upsample_logits(final_logits, h, w), query_mask)
    intermediate = [
        softmax_cross_entropy(upsample_logits(logits, h, w), query_mask) for logits in intermediate_logits
    ]
    total = add(scale(add_all(intermediate), 1.0 / len(intermediate)), segmentation)
    return LossBreakdown(
        total=total,
        segmentation=segmentation.item(),
        intermediate=[loss.item() for loss in intermediate],
    )


def predict_mask(final_logits: Tensor) -> np.ndarray:
    """Per-pixel argmax over the two channels; ties go to background."""
    logits = final_logits.data
    if logits.ndim != 3 or logits.shape[0] != 2:
        raise DimensionError(f"logits must be 2 x h x w, got {logits.shape}")
    return (logits[1] > logits[0]).astype(np.uint8)


class CrossAttentionModule:
    """Attention head (absent in ablations without CAM) and the classifier."""

    def __init__(self, attention_head: Optional[ConvStack], classifier: ConvStack):
        self.attention_head = attention_head
        self.classifier = classifier

    @classmethod
    def init(cls, rng: np.random.Generator, channels: int, with_attention: bool = True) -> "CrossAttentionModule":
        c = channels
        attention_head = ConvStack.init(rng, [(c, 2 * c, 1), (1, c, 1)]) if with_attention else None
        classifier = ConvStack.init(rng, [(c, 2 * c, 3), (c, c, 3), (c, c, 3), (2, c, 1)])
        return cls(attention_head, classifier)

    def __call__(self, object_features: Tensor, background_features: Tensor) -> Tuple[Tensor, Optional[Tensor]]:
        """Return 2 x h x w logits and the attention map, if any."""
        if self.attention_head is None:
            return classify(object_features, background_features, self.classifier), None
        attention_map = attention(object_features, background_features, self.attention_head)
        weighted_object, weighted_background = apply_attention(
            object_features, background_features, attention_map
        )
        return classify(weighted_object, weighted_background, self.classifier), attention_map

    def named_parameters(self, prefix: str = "cam") -> Iterator[NamedTensor]:
        if self.attention_head is not None:
            yield from self.attention_head.named_parameters(f"{prefix}.attention")
        yield from self.classifier.named_parameters(f"{prefix}.classifier")
