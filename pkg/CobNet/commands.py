"""The ``train``, ``eval``, ``ablate``, ``gradcheck`` and ``render`` commands.

Every command takes a resolved :class:`RunConfig` and returns a process exit
code; :func:`execute` loads the config and maps errors to exit codes.
"""

import logging
from pathlib import Path
from typing import Any, Callable, Dict, List, Mapping, Optional, Union

import numpy as np
import pandas as pd

from CobNet.checkpoint import MANIFEST, checkpoint_digest, load_checkpoint
from CobNet.config import ABLATION_MODES, TrainConfig
from CobNet.episodes import FoldSplit, make_weak, sample_episode
from CobNet.errors import (
    CobNetError,
    ConfigurationError,
    GradientCheckError,
    MissingCheckpointError,
    TrainingDivergedError,
)
from CobNet.gradcheck import gradcheck
from CobNet.metrics import cross_validate
from CobNet.model import CobNetModel
from CobNet.render import render_episode
from CobNet.trainer import train_fold
from Utilities.helpers import console_print, format_records
from Utilities.run_config import RunConfig, load_run_config

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_CONFIG = 2
EXIT_MISSING = 3

# Ablation rows in table order: MBM°, MBMˢ, MBM, MBM+CAM.
ABLATION_ORDER = ["mbm_o", "mbm_s", "mbm_only", "full"]


def selected_folds(config: RunConfig, split: FoldSplit) -> List[int]:
    if config.fold is None:
        return list(range(split.num_folds))
    split.check_fold(config.fold)
    return [config.fold]


def fold_dir(root: Union[str, Path], fold: int) -> Path:
    return Path(root) / f"fold{fold}"


def has_checkpoint(directory: Path) -> bool:
    return (directory / MANIFEST).is_file()


def train_or_load(split: FoldSplit, fold: int, train_config: TrainConfig, directory: Path) -> CobNetModel:
    """Load the checkpoint in ``directory``, training it first if it does not exist."""
    if not has_checkpoint(directory):
        console_print(f"No checkpoint in {directory}, training fold {fold}.")
        train_fold(split, fold, train_config, directory)
    return load_checkpoint(directory)


def cmd_train(config: RunConfig) -> int:
    split = FoldSplit()
    train_config = config.train_config()
    root = config.checkpoint_root()
    config.write_resolved(root)
    for fold in selected_folds(config, split):
        result = train_fold(split, fold, train_config, fold_dir(root, fold))
        console_print(
            f"Fold {fold}: {len(result.losses)} iterations, final loss {result.losses[-1]:.4f}, "
            f"checkpoint {result.checkpoint}"
        )
    return EXIT_OK


def cmd_eval(config: RunConfig) -> int:
    split = FoldSplit()
    root = config.checkpoint_root()
    folds = selected_folds(config, split)
    for fold in folds:
        if not has_checkpoint(fold_dir(root, fold)):
            raise MissingCheckpointError(f"no checkpoint for fold {fold} under {root}")

    def predictor_factory(fold: int) -> Callable:
        directory = fold_dir(root, fold)
        console_print(f"Fold {fold} checkpoint sha256 {checkpoint_digest(directory)}")
        return load_checkpoint(directory).predict

    report = cross_validate(
        predictor_factory,
        split,
        config.episodes,
        config.seed,
        k=config.k,
        weak=config.weak,
        folds=folds,
        threads=config.threads,
        image_side=config.image_side,
        feature_side=config.feature_side,
        match_backgrounds=config.match_backgrounds,
    )
    out = config.output_root() / "eval"
    config.write_resolved(out)
    (out / "eval_records.txt").write_text(report.to_records())
    (out / "eval_table.txt").write_text(report.table() + "\n")
    console_print(report.table())
    return EXIT_OK


def _ablation_row(
    config: RunConfig, split: FoldSplit, folds: List[int], row: str, train_config: TrainConfig, root: Path
) -> Dict[str, Any]:
    models = {fold: train_or_load(split, fold, train_config, fold_dir(root, fold)) for fold in folds}
    report = cross_validate(
        lambda fold: models[fold].predict,
        split,
        config.episodes,
        config.seed,
        k=config.k,
        weak=config.weak,
        folds=folds,
        threads=config.threads,
        image_side=config.image_side,
        feature_side=config.feature_side,
        match_backgrounds=config.match_backgrounds,
    )
    digests = ",".join(checkpoint_digest(fold_dir(root, fold))[:12] for fold in folds)
    logger.info("%s evaluated with seed %d over folds %s", row, config.seed, folds)
    return {
        "row": row,
        "ablation": train_config.network.ablation,
        "j": train_config.network.grid_size,
        "params": next(iter(models.values())).parameter_count(),
        "miou": report.mean_miou,
        "fb_iou": report.mean_fb_iou,
        "checkpoints": digests,
    }


def cmd_ablate(config: RunConfig) -> int:
    """Four ablation variants, then the background grid sweep, on shared seeds."""
    split = FoldSplit()
    folds = selected_folds(config, split)
    base = config.train_config()
    out = config.output_root() / "ablation"
    config.write_resolved(out)
    console_print(f"Ablation seeds: eval {config.seed}, train {config.train_seed}, init {config.init_seed}")

    rows = []
    for mode in ABLATION_ORDER:
        network = base.network.model_copy(update={"ablation": mode})
        train_config = base.model_copy(update={"network": network})
        root = config.checkpoint_root() if mode == "full" else out / mode
        rows.append(_ablation_row(config, split, folds, mode, train_config, root))
        logger.info("%s: %s", mode, ABLATION_MODES[mode])

    full_network = base.network.model_copy(update={"ablation": "full"})
    for grid_size in config.grid_sweep:
        network = full_network.with_grid(grid_size)
        train_config = base.model_copy(update={"network": network})
        root = config.checkpoint_root() if network == full_network else out / f"j{grid_size}"
        rows.append(_ablation_row(config, split, folds, f"j={grid_size}", train_config, root))

    frame = pd.DataFrame(rows)
    table = frame.to_string(index=False, float_format=lambda value: f"{value:.4f}")
    (out / "ablation_table.txt").write_text(table + "\n")
    (out / "ablation_records.txt").write_text(format_records(frame.to_dict("records")))
    console_print(table)
    return EXIT_OK


def cmd_gradcheck(config: RunConfig, corrupt: Optional[str] = None) -> int:
    report = gradcheck(seed=config.seed, corrupt=corrupt)
    console_print(report.table())
    if not report.passed:
        raise GradientCheckError(
            f"gradient check failed for {', '.join(report.offenders)}", report.offenders
        )
    console_print(f"Gradient check passed over {len(report.parameters)} parameters.")
    return EXIT_OK


def cmd_render(config: RunConfig) -> int:
    split = FoldSplit()
    fold = config.fold or 0
    directory = fold_dir(config.checkpoint_root(), fold)
    if not has_checkpoint(directory):
        raise MissingCheckpointError(f"no checkpoint for fold {fold} under {directory.parent}")
    model = load_checkpoint(directory)

    rng = np.random.default_rng([config.episode_seed, fold])
    episode = sample_episode(
        split,
        fold,
        config.k,
        rng,
        image_side=model.image_side,
        feature_side=model.feature_side,
        match_backgrounds=config.match_backgrounds,
    )
    if config.weak:
        episode = make_weak(episode)
    out = config.output_root() / "render" / f"episode_{config.episode_seed}"
    config.write_resolved(out.parent)
    render_episode(model, episode, out)
    console_print(f"Rendered episode {config.episode_seed} of fold {fold} to {out}")
    return EXIT_OK


command_mapping: Dict[str, Callable[..., int]] = {
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "gradcheck": cmd_gradcheck,
    "render": cmd_render,
}


def execute(
    command: str,
    config_path: Optional[str] = None,
    overrides: Optional[Mapping[str, Any]] = None,
    **options: Any,
) -> int:
    """Load the run config, run one command and map failures to exit codes."""
    if command not in command_mapping:
        console_print(f"Unknown command {command!r}", warning=True)
        return EXIT_CONFIG
    try:
        config = load_run_config(config_path, overrides)
        return command_mapping[command](config, **options)
    except GradientCheckError as error:
        console_print(str(error), warning=True)
        return EXIT_CHECK_FAILED
    except MissingCheckpointError as error:
        console_print(str(error), warning=True)
        return EXIT_MISSING
    except TrainingDivergedError as error:
        console_print(f"{error} (episode dump: {error.dump_path})", warning=True)
        return EXIT_CONFIG
    except ConfigurationError as error:
        console_print(str(error), warning=True)
        return EXIT_CONFIG
    except CobNetError as error:
        console_print(f"{type(error).__name__}: {error}", warning=True)
        return EXIT_CONFIG
