"""mIoU and FB-IoU tallies and the fold cross-validation protocol.

Counts are accumulated per class over all episodes of a fold and divided
once at the end.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from CobNet.episodes import Episode, FoldSplit, make_weak, sample_episode
from CobNet.errors import DimensionError, ValidationError
from Utilities.helpers import format_records

logger = logging.getLogger(__name__)

Predictor = Callable[[Episode], np.ndarray]
PredictorFactory = Callable[[int], Predictor]


@dataclass(frozen=True)
class EpisodeCounts:
    intersection: int
    union: int
    bg_intersection: int
    bg_union: int


def episode_counts(pred: np.ndarray, truth: np.ndarray) -> EpisodeCounts:
    """Foreground and background intersection/union pixel counts.

    Raises:
        DimensionError: If the masks differ in shape.
        ValidationError: If either mask is not binary.
    """
    pred, truth = np.asarray(pred), np.asarray(truth)
    if pred.shape != truth.shape:
        raise DimensionError(f"prediction {pred.shape} and truth {truth.shape} differ in shape")
    for name, mask in (("prediction", pred), ("truth", truth)):
        if not np.isin(mask, (0, 1)).all():
            raise ValidationError(f"{name} mask must be binary")
    fg_pred, fg_truth = pred == 1, truth == 1
    return EpisodeCounts(
        intersection=int(np.sum(fg_pred & fg_truth)),
        union=int(np.sum(fg_pred | fg_truth)),
        bg_intersection=int(np.sum(~fg_pred & ~fg_truth)),
        bg_union=int(np.sum(~fg_pred | ~fg_truth)),
    )


@dataclass
class ClassTally:
    """Per-class intersection/union sums plus class-agnostic foreground/background sums."""

    intersection: Dict[int, int] = field(default_factory=dict)
    union: Dict[int, int] = field(default_factory=dict)
    fg_intersection: int = 0
    fg_union: int = 0
    bg_intersection: int = 0
    bg_union: int = 0
    episodes: int = 0

    def add(self, class_id: int, counts: EpisodeCounts) -> None:
        self.intersection[class_id] = self.intersection.get(class_id, 0) + counts.intersection
        self.union[class_id] = self.union.get(class_id, 0) + counts.union
        self.fg_intersection += counts.intersection
        self.fg_union += counts.union
        self.bg_intersection += counts.bg_intersection
        self.bg_union += counts.bg_union
        self.episodes += 1

    def merge(self, other: "ClassTally") -> "ClassTally":
        merged = ClassTally(
            intersection=dict(self.intersection),
            union=dict(self.union),
            fg_intersection=self.fg_intersection + other.fg_intersection,
            fg_union=self.fg_union + other.fg_union,
            bg_intersection=self.bg_intersection + other.bg_intersection,
            bg_union=self.bg_union + other.bg_union,
            episodes=self.episodes + other.episodes,
        )
        for class_id, value in other.intersection.items():
            merged.intersection[class_id] = merged.intersection.get(class_id, 0) + value
        for class_id, value in other.union.items():
            merged.union[class_id] = merged.union.get(class_id, 0) + value
        return merged

    def class_iou(self) -> Dict[int, float]:
        """IoU of every class with a non-zero union."""
        return {
            class_id: self.intersection[class_id] / union
            for class_id, union in sorted(self.union.items())
            if union > 0
        }


def miou(tally: ClassTally) -> float:
    """Mean over classes of accumulated intersection over accumulated union.

    Classes whose union is zero are left out with a warning.
    """
    excluded = [class_id for class_id, union in sorted(tally.union.items()) if union == 0]
    if excluded:
        logger.warning("classes %s have zero union and are excluded from mIoU", excluded)
    per_class = tally.class_iou()
    if not per_class:
        logger.warning("no class with a non-zero union; mIoU reported as 0")
        return 0.0
    return float(np.mean(list(per_class.values())))


def fb_iou(tally: ClassTally) -> float:
    """Mean of class-agnostic foreground IoU and background IoU.

    A side with zero union over the whole tally is left out of the mean.
    """
    parts = [
        intersection / union
        for intersection, union in (
            (tally.fg_intersection, tally.fg_union),
            (tally.bg_intersection, tally.bg_union),
        )
        if union > 0
    ]
    return float(np.mean(parts)) if parts else 0.0


@dataclass
class CrossValidationReport:
    """Per-fold mIoU/FB-IoU rows and their across-fold mean."""

    folds: pd.DataFrame
    seed: int
    k: int
    weak: bool
    episodes_per_fold: int
    tallies: Dict[int, ClassTally] = field(default_factory=dict)

    @property
    def mean_miou(self) -> float:
        return float(self.folds["miou"].mean())

    @property
    def mean_fb_iou(self) -> float:
        return float(self.folds["fb_iou"].mean())

    def table(self) -> str:
        """Plain-text table: one line per fold, then the mean."""
        mean = pd.DataFrame([{"fold": "mean", "miou": self.mean_miou, "fb_iou": self.mean_fb_iou}])
        frame = pd.concat([self.folds.astype({"fold": str}), mean], ignore_index=True)
        return frame.to_string(index=False, float_format=lambda value: f"{value:.4f}")

    def records(self) -> List[dict]:
        common = {"k": self.k, "weak": int(self.weak), "seed": self.seed, "episodes": self.episodes_per_fold}
        rows = [
            {"fold": int(row.fold), "miou": repr(float(row.miou)), "fb_iou": repr(float(row.fb_iou)), **common}
            for row in self.folds.itertuples()
        ]
        rows.append({"fold": "mean", "miou": repr(self.mean_miou), "fb_iou": repr(self.mean_fb_iou), **common})
        return rows

    def to_records(self) -> str:
        """Line-oriented ``key=value`` records."""
        return format_records(self.records())


def evaluate_fold(
    predictor: Predictor,
    split: FoldSplit,
    fold: int,
    episodes: int,
    seed: int,
    *,
    k: int = 1,
    weak: bool = False,
    threads: int = 1,
    image_side: int = 64,
    feature_side: int = 16,
    match_backgrounds: bool = False,
) -> ClassTally:
    """Tally ``episodes`` test episodes of one fold.

    Episode ``i`` draws from ``default_rng([seed, fold, i])``, and tallies
    merge in episode order, so the result does not depend on ``threads``.
    """

    def run(index: int) -> Tuple[int, EpisodeCounts]:
        rng = np.random.default_rng([seed, fold, index])
        episode = sample_episode(
            split,
            fold,
            k,
            rng,
            training=False,
            image_side=image_side,
            feature_side=feature_side,
            match_backgrounds=match_backgrounds,
        )
        if weak:
            episode = make_weak(episode)
        return episode.class_id, episode_counts(predictor(episode), episode.query_mask)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results: Iterable[Tuple[int, EpisodeCounts]] = list(pool.map(run, range(episodes)))
    else:
        results = (run(index) for index in range(episodes))

    tally = ClassTally()
    for class_id, counts in results:
        tally.add(class_id, counts)
    return tally


def cross_validate(
    predictor_factory: PredictorFactory,
    split: FoldSplit,
    episodes_per_fold: int = 1000,
    seed: int = 0,
    *,
    k: int = 1,
    weak: bool = False,
    folds: Optional[Sequence[int]] = None,
    threads: int = 1,
    image_side: int = 64,
    feature_side: int = 16,
    match_backgrounds: bool = False,
) -> CrossValidationReport:
    """Evaluate every fold with its own predictor.

    Raises:
        ConfigurationError: Propagated from ``predictor_factory`` when a fold's
            weights are missing.
    """
    folds = list(range(split.num_folds)) if folds is None else list(folds)
    rows, tallies = [], {}
    for fold in folds:
        predictor = predictor_factory(fold)
        tally = evaluate_fold(
            predictor,
            split,
            fold,
            episodes_per_fold,
            seed,
            k=k,
            weak=weak,
            threads=threads,
            image_side=image_side,
            feature_side=feature_side,
            match_backgrounds=match_backgrounds,
        )
        tallies[fold] = tally
        rows.append({"fold": fold, "miou": miou(tally), "fb_iou": fb_iou(tally)})
        logger.info("fold %d: mIoU %.4f FB-IoU %.4f", fold, rows[-1]["miou"], rows[-1]["fb_iou"])
    return CrossValidationReport(
        folds=pd.DataFrame(rows, columns=["fold", "miou", "fb_iou"]),
        seed=seed,
        k=k,
        weak=weak,
        episodes_per_fold=episodes_per_fold,
        tallies=tallies,
    )
