"""Synthetic shape episodes: twelve classes in four folds over six background styles.

Every scene is a pure function of ``(class id, background id, seed)`` plus
an optional flip/rotation, so an episode can be replayed exactly from its
manifest line.
"""

import dataclasses
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from CobNet.errors import ConfigurationError, EpisodeSamplingError, ValidationError
from CobNet.proto import resize_mask
from Utilities.tensor_io import save_tensor

logger = logging.getLogger(__name__)

NUM_CLASSES = 12
NUM_FOLDS = 4
BACKGROUND_STYLES = ("solid", "gradient", "noise", "checker", "stripes", "blobs")
MAX_ATTEMPTS = 100
MAX_ROTATION = 15.0
MIN_FOREGROUND = 0.02
MAX_FOREGROUND = 0.6

# shape extent in units of its radius, used to keep shapes inside the
# inscribed circle so rotations never cut them
SHAPE_EXTENT = 1.45
RADIUS_RANGE = (0.13, 0.3)
GEOMETRY_ATTEMPTS = 20

ShapeRule = Callable[[np.ndarray, np.ndarray], np.ndarray]

SHAPES: Dict[str, ShapeRule] = {
    "circle": lambda u, v: u**2 + v**2 <= 1.0,
    "square": lambda u, v: np.maximum(np.abs(u), np.abs(v)) <= 0.8,
    "triangle": lambda u, v: (v <= 0.8) & (np.abs(u) <= 0.9 * (v + 0.9) / 1.7),
    "diamond": lambda u, v: np.abs(u) + np.abs(v) <= 1.0,
    "cross": lambda u, v: ((np.abs(u) <= 0.3) & (np.abs(v) <= 1.0))
    | ((np.abs(v) <= 0.3) & (np.abs(u) <= 1.0)),
    "ring": lambda u, v: (u**2 + v**2 <= 1.0) & (u**2 + v**2 >= 0.55**2),
    "ellipse": lambda u, v: u**2 + (v / 0.5) ** 2 <= 1.0,
    "star": lambda u, v: np.sqrt(np.abs(u) / 1.4) + np.sqrt(np.abs(v) / 1.4) <= 1.0,
    "l_shape": lambda u, v: ((u >= -0.8) & (u <= -0.2) & (np.abs(v) <= 0.8))
    | ((np.abs(u) <= 0.8) & (v >= 0.2) & (v <= 0.8)),
    "t_shape": lambda u, v: ((np.abs(u) <= 0.9) & (v >= -0.9) & (v <= -0.4))
    | ((np.abs(u) <= 0.25) & (v >= -0.4) & (v <= 0.9)),
    "crescent": lambda u, v: (u**2 + v**2 <= 1.0) & ((u - 0.45) ** 2 + v**2 > 0.6),
    "hexagon": lambda u, v: (np.abs(v) <= np.sqrt(3) / 2) & (np.abs(u) + np.abs(v) / np.sqrt(3) <= 1.0),
}
CLASS_NAMES = list(SHAPES)


@dataclass(frozen=True)
class FoldSplit:
    """Twelve classes in four disjoint folds of three."""

    num_classes: int = NUM_CLASSES
    num_folds: int = NUM_FOLDS

    def __post_init__(self) -> None:
        if self.num_classes % self.num_folds:
            raise ConfigurationError(f"{self.num_classes} classes do not split into {self.num_folds} folds")

    @property
    def fold_size(self) -> int:
        return self.num_classes // self.num_folds

    def check_fold(self, fold: int) -> None:
        if not 0 <= fold < self.num_folds:
            raise ConfigurationError(f"fold must lie in [0, {self.num_folds}), got {fold}")

    def test_classes(self, fold: int) -> List[int]:
        self.check_fold(fold)
        return list(range(fold * self.fold_size, (fold + 1) * self.fold_size))

    def train_classes(self, fold: int) -> List[int]:
        held_out = set(self.test_classes(fold))
        return [class_id for class_id in range(self.num_classes) if class_id not in held_out]

    def fold_of(self, class_id: int) -> int:
        return class_id // self.fold_size


@dataclass(frozen=True)
class SceneSpec:
    """Everything needed to re-render one scene."""

    class_id: int
    background_id: int
    seed: int
    flip: bool = False
    angle: float = 0.0

    def encode(self) -> str:
        return f"{self.class_id}:{self.background_id}:{self.seed}:{int(self.flip)}:{self.angle!r}"

    @classmethod
    def decode(cls, text: str) -> "SceneSpec":
        class_id, background_id, seed, flip, angle = text.split(":")
        return cls(int(class_id), int(background_id), int(seed), bool(int(flip)), float(angle))


@dataclass(frozen=True)
class Shot:
    image: np.ndarray
    mask: np.ndarray


@dataclass(frozen=True)
class Episode:
    """k support shots plus one query scene of the same class."""

    support: List[Shot]
    query_image: np.ndarray
    query_mask: np.ndarray
    class_id: int
    fold: int
    weak: bool = False
    support_specs: List[SceneSpec] = field(default_factory=list)
    query_spec: Optional[SceneSpec] = None

    @property
    def k(self) -> int:
        return len(self.support)

    def manifest_line(self) -> str:
        support = ",".join(spec.encode() for spec in self.support_specs)
        query = self.query_spec.encode() if self.query_spec else ""
        return f"class={self.class_id} fold={self.fold} k={self.k} weak={int(self.weak)} query={query} support={support}"


def _background(style: int, rng: np.random.Generator, side: int) -> np.ndarray:
    if not 0 <= style < len(BACKGROUND_STYLES):
        raise ValidationError(f"unknown background id {style}")
    name = BACKGROUND_STYLES[style]
    first, second = rng.uniform(0.0, 1.0, size=(2, 3, 1, 1))
    y, x = np.mgrid[0:side, 0:side] / (side - 1)

    if name == "solid":
        image = np.broadcast_to(first, (3, side, side))
    elif name == "gradient":
        theta = rng.uniform(0.0, 2 * np.pi)
        t = np.cos(theta) * x + np.sin(theta) * y
        t = (t - t.min()) / (t.max() - t.min())
        image = first * (1 - t) + second * t
    elif name == "noise":
        image = first + rng.uniform(-0.15, 0.15, size=(3, side, side))
    elif name == "checker":
        cell = int(rng.integers(4, 12))
        grid = (np.arange(side)[:, None] // cell + np.arange(side)[None, :] // cell) % 2
        image = np.where(grid[None] == 0, first, second)
    elif name == "stripes":
        width = int(rng.integers(3, 9))
        coords = np.arange(side)[:, None] if rng.random() < 0.5 else np.arange(side)[None, :]
        stripes = np.broadcast_to((coords // width) % 2, (side, side))
        image = np.where(stripes[None] == 0, first, second)
    else:
        image = np.broadcast_to(first, (3, side, side)).copy()
        for _ in range(5):
            cy, cx = rng.uniform(0.0, 1.0, size=2)
            radius = rng.uniform(0.08, 0.25)
            weight = np.exp(-((y - cy) ** 2 + (x - cx) ** 2) / (2 * radius**2))
            colour = rng.uniform(0.0, 1.0, size=(3, 1, 1))
            image = image * (1 - weight) + colour * weight
    return np.clip(image, 0.0, 1.0)


def rasterize_shape(class_id: int, center: Tuple[float, float], radius: float, side: int) -> np.ndarray:
    """Binary side x side mask of one class shape."""
    if not 0 <= class_id < len(CLASS_NAMES):
        raise ValidationError(f"unknown class id {class_id}")
    y, x = np.mgrid[0:side, 0:side].astype(np.float64)
    u = (x - center[1]) / radius
    v = (y - center[0]) / radius
    return SHAPES[CLASS_NAMES[class_id]](u, v).astype(np.uint8)


def _shape_geometry(class_id: int, rng: np.random.Generator, side: int) -> np.ndarray:
    middle = (side - 1) / 2
    for _ in range(GEOMETRY_ATTEMPTS):
        radius = rng.uniform(*RADIUS_RANGE) * side
        reach = max(side / 2 - 1 - SHAPE_EXTENT * radius, 0.0)
        distance = reach * np.sqrt(rng.uniform())
        theta = rng.uniform(0.0, 2 * np.pi)
        center = (middle + distance * np.sin(theta), middle + distance * np.cos(theta))
        mask = rasterize_shape(class_id, center, radius, side)
        if MIN_FOREGROUND <= mask.mean() <= MAX_FOREGROUND:
            return mask
    return rasterize_shape(class_id, (middle, middle), 0.2 * side, side)


def render_scene(class_id: int, background_id: int, seed: int, side: int = 64) -> Tuple[np.ndarray, np.ndarray]:
    """Render one shape of ``class_id`` over background style ``background_id``.

    Returns:
        A ``3 x side x side`` image in [0, 1] and the binary ``side x side`` mask
        of the shape pixels.
    """
    rng = np.random.default_rng([seed, class_id, background_id])
    background = _background(background_id, rng, side)
    mask = _shape_geometry(class_id, rng, side)
    colour = rng.uniform(0.0, 1.0, size=(3, 1, 1))
    image = np.where(mask[None] == 1, colour, background)
    return image, mask


def rotate(image: np.ndarray, mask: np.ndarray, angle: float) -> Tuple[np.ndarray, np.ndarray]:
    """Rotate counter-clockwise by ``angle`` degrees about the centre.

    Both arrays use nearest-neighbour sampling of the same source positions;
    positions outside the frame take the nearest border pixel.
    """
    h, w = mask.shape
    cy, cx = (h - 1) / 2, (w - 1) / 2
    theta = np.deg2rad(angle)
    y, x = np.mgrid[0:h, 0:w].astype(np.float64)
    u, v = x - cx, cy - y
    source_u = np.cos(theta) * u + np.sin(theta) * v
    source_v = -np.sin(theta) * u + np.cos(theta) * v
    rows = np.clip(np.rint(cy - source_v), 0, h - 1).astype(np.int64)
    cols = np.clip(np.rint(cx + source_u), 0, w - 1).astype(np.int64)
    return image[:, rows, cols], mask[rows, cols]


def flip(image: np.ndarray, mask: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Horizontal flip."""
    return image[:, :, ::-1].copy(), mask[:, ::-1].copy()


def apply_augmentation(
    image: np.ndarray, mask: np.ndarray, flipped: bool, angle: float
) -> Tuple[np.ndarray, np.ndarray]:
    if flipped:
        image, mask = flip(image, mask)
    if angle:
        image, mask = rotate(image, mask, angle)
    return image, mask


def draw_augmentation(rng: np.random.Generator) -> Tuple[bool, float]:
    return bool(rng.random() < 0.5), float(rng.uniform(-MAX_ROTATION, MAX_ROTATION))


def augment(image: np.ndarray, mask: np.ndarray, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    """Random horizontal flip (p = 0.5) and rotation in [-15, 15] degrees."""
    flipped, angle = draw_augmentation(rng)
    return apply_augmentation(image, mask, flipped, angle)


def render_spec(spec: SceneSpec, side: int) -> Tuple[np.ndarray, np.ndarray]:
    image, mask = render_scene(spec.class_id, spec.background_id, spec.seed, side)
    return apply_augmentation(image, mask, spec.flip, spec.angle)


def build_episode(
    support_specs: Sequence[SceneSpec], query_spec: SceneSpec, fold: int, side: int, weak: bool = False
) -> Episode:
    support = [Shot(*render_spec(spec, side)) for spec in support_specs]
    query_image, query_mask = render_spec(query_spec, side)
    episode = Episode(
        support=support,
        query_image=query_image,
        query_mask=query_mask,
        class_id=query_spec.class_id,
        fold=fold,
        support_specs=list(support_specs),
        query_spec=query_spec,
    )
    return make_weak(episode) if weak else episode


def _draw_spec(class_id: int, rng: np.random.Generator, augmented: bool, background_id: Optional[int] = None) -> SceneSpec:
    drawn_background = int(rng.integers(len(BACKGROUND_STYLES)))
    seed = int(rng.integers(2**63))
    flipped, angle = draw_augmentation(rng) if augmented else (False, 0.0)
    return SceneSpec(
        class_id=class_id,
        background_id=drawn_background if background_id is None else background_id,
        seed=seed,
        flip=flipped,
        angle=angle,
    )


def sample_episode(
    split: FoldSplit,
    fold: int,
    k: int,
    rng: np.random.Generator,
    *,
    training: bool = False,
    augmented: Optional[bool] = None,
    image_side: int = 64,
    feature_side: int = 16,
    match_backgrounds: bool = False,
) -> Episode:
    """Draw one episode.

    Test episodes use the classes of ``fold``; training episodes use the
    classes of the other folds. Support and query backgrounds are drawn
    independently unless ``match_backgrounds`` is set. Episodes whose
    support mask vanishes at feature resolution are redrawn.

    Raises:
        EpisodeSamplingError: After 100 rejected draws.
    """
    if k < 1:
        raise ConfigurationError(f"k must be at least 1, got {k}")
    classes = split.train_classes(fold) if training else split.test_classes(fold)
    augmented = training if augmented is None else augmented
    class_id = int(rng.choice(classes))

    for attempt in range(MAX_ATTEMPTS):
        query_spec = _draw_spec(class_id, rng, augmented)
        shared = query_spec.background_id if match_backgrounds else None
        support_specs = [_draw_spec(class_id, rng, augmented, shared) for _ in range(k)]
        episode = build_episode(support_specs, query_spec, fold, image_side)
        if all(resize_mask(shot.mask, feature_side, feature_side).any() for shot in episode.support):
            return episode
        logger.debug("rejected episode draw %d for class %d: empty support mask", attempt, class_id)
    raise EpisodeSamplingError(f"no valid episode for class {class_id} after {MAX_ATTEMPTS} draws")


def make_weak(episode: Episode) -> Episode:
    """Replace every support mask by all ones; the query mask is kept for scoring."""
    support = [Shot(shot.image, np.ones_like(shot.mask)) for shot in episode.support]
    return dataclasses.replace(episode, support=support, weak=True)


def parse_manifest_line(line: str) -> Dict[str, str]:
    return dict(item.split("=", 1) for item in line.split() if "=" in item)


def replay_episode(line: str, side: int = 64) -> Episode:
    """Rebuild an episode from its manifest line."""
    fields = parse_manifest_line(line)
    query_spec = SceneSpec.decode(fields["query"])
    support_specs = [SceneSpec.decode(item) for item in fields["support"].split(",")]
    return build_episode(
        support_specs, query_spec, int(fields["fold"]), side, weak=bool(int(fields.get("weak", "0")))
    )


def export_episodes(episodes: Sequence[Episode], directory: Union[str, Path]) -> Path:
    """Write every episode as CBT1 tensors plus one manifest line per episode."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = []
    for index, episode in enumerate(episodes):
        prefix = directory / f"episode_{index:04d}"
        save_tensor(f"{prefix}_query_image.cbt", episode.query_image)
        save_tensor(f"{prefix}_query_mask.cbt", episode.query_mask)
        for shot_index, shot in enumerate(episode.support):
            save_tensor(f"{prefix}_support{shot_index}_image.cbt", shot.image)
            save_tensor(f"{prefix}_support{shot_index}_mask.cbt", shot.mask)
        lines.append(f"index={index} {episode.manifest_line()}")
    manifest = directory / "manifest.txt"
    manifest.write_text("\n".join(lines) + "\n")
    return manifest
