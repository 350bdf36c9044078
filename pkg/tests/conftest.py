"""Shared fixtures: reduced-size configs and a process-wide data cache.

The reduced config keeps the full architecture (both adapter stages, a
stage boundary bridge, all four decoders) but halves the channel widths
and shrinks the dataset so training-loop tests run in seconds. Tests
that need the full default dimensions build TrainConfig() directly.
"""

import numpy as np
import pytest

from taskadapt.config import (AdapterConfig, DataConfig, OptimConfig,
                              TrainConfig, TroaConfig)
from taskadapt.backbone import BackboneConfig
from taskadapt.train import DatasetCache


def make_tiny_config(seed: int = 0, **optim_overrides) -> TrainConfig:
    optim = dict(epochs=2, warmup_epochs=1, batch_size=8)
    optim.update(optim_overrides)
    return TrainConfig(
        backbone=BackboneConfig(base_channels=16, stage_depths=(1, 1, 2, 1)),
        adapter=AdapterConfig(),
        optim=OptimConfig(**optim),
        troa=TroaConfig(cadence=3),
        data=DataConfig(train_count=16, val_count=8, test_count=8),
        seed=seed,
    )


@pytest.fixture
def tiny_config() -> TrainConfig:
    return make_tiny_config()


@pytest.fixture(scope="session")
def shared_cache() -> DatasetCache:
    """One dataset/feature cache for the whole test session."""
    return DatasetCache()


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(0)
