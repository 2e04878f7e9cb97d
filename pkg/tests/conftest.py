"""Shared fixtures: a small synthetic dataset and a quick training config."""
import pytest

from biasguard.data import SynthConfig, make_splits, synth_gzsl
from biasguard.model import ModelConfig
from biasguard.losses import LossWeights
from biasguard.pipeline import TrainConfig, train


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False,
                     help="run the multi-seed directional reproductions")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: multi-seed training runs, enabled with --runslow")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


SMALL_SYNTH = SynthConfig(n_classes=6, n_unseen=2, samples_per_class=12, d_visual=8, k_semantic=4,
                          bias_shift=2.0, anisotropy=2.0, seed=3)


def small_train_config(**overrides) -> TrainConfig:
    base = TrainConfig(
        model=ModelConfig(d_visual=8, k_semantic=4, d_latent=3, k_proj=5),
        weights=LossWeights(n_critic=2),
        batch_size=16,
        epochs=2,
        seed=11,
    )
    return base.replace(**overrides) if overrides else base


@pytest.fixture(scope="session")
def small_dataset():
    return make_splits(synth_gzsl(SMALL_SYNTH), 0.25, seed=5)


@pytest.fixture(scope="session")
def small_config():
    return small_train_config()


@pytest.fixture(scope="session")
def small_checkpoint(small_dataset, small_config):
    return train(small_config, small_dataset)
