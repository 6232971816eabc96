import numpy as np
import pytest

from jamlab.config import (
    EarlyStopping,
    ExperimentConfig,
    OptimizerConfig,
)
from jamlab.encoders import EncoderDims
from jamlab.entropy import BinningConfig
from jamlab.margin import MarginParams
from jamlab.synthetic import GeneratorConfig, build_dataset


def tiny_config(**overrides) -> ExperimentConfig:
    """Small, fast experiment config used across the training tests."""
    base = dict(
        seed=5,
        folds=2,
        batch_size=8,
        max_epochs=3,
        pretrain_epochs=0,
        validation_fraction=0.4,
        dataset=GeneratorConfig(identities=10, samples_per_identity=8),
        dims=EncoderDims(),
        binning=BinningConfig(bins=8, kernel_width=2.0),
        margin=MarginParams(m=0.2, s=16.0),
        optimizer=OptimizerConfig(learning_rate=0.005, momentum=0.9),
        early_stopping=EarlyStopping(patience=9, min_epochs=3),
    )
    base.update(overrides)
    return ExperimentConfig(**base)


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    cfg = tiny_config()
    out = tmp_path_factory.mktemp("tinyds")
    build_dataset(cfg.dataset, out, cfg.seed)
    return cfg, out
