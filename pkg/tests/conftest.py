import os

import numpy as np
import pytest
from dotenv import load_dotenv

from CobNet.config import BackboneConfig, DatasetConfig, NetworkConfig, TrainConfig
from CobNet.episodes import FoldSplit, sample_episode
from CobNet.model import CobNetModel

SLOW_VAR = "COBNET_RUN_SLOW"


def pytest_configure(config):
    load_dotenv(dotenv_path=".env")
    config.RUN_SLOW = os.getenv(SLOW_VAR) == "1"


def pytest_collection_modifyitems(config, items):
    if config.RUN_SLOW:
        return
    skip_slow = pytest.mark.skip(reason=f"set {SLOW_VAR}=1 to run slow tests")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def split():
    return FoldSplit()


@pytest.fixture
def tiny_config():
    """c=4, 32-pixel scenes, 8x8 features, pyramid [4, 2], j=2."""
    return TrainConfig(
        epochs=2,
        iterations_per_epoch=3,
        batch_size=2,
        network=NetworkConfig(channels=4, pyramid_sizes=[4, 2], grid_size=2),
        backbone=BackboneConfig(channels=4, downsample=4, layers=3),
        dataset=DatasetConfig(image_side=32),
    )


@pytest.fixture
def tiny_model(tiny_config):
    return CobNetModel.from_config(tiny_config)


@pytest.fixture
def tiny_episode(split):
    return sample_episode(split, 0, 1, np.random.default_rng(7), image_side=32, feature_side=8)
