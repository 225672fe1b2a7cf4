import numpy as np
import pytest

from mtlwavenet.model import WaveNetConfig


def pytest_addoption(parser):
    parser.addoption("--full", action="store_true", default=False, help="run hours-long end-to-end tests")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--full"):
        return
    skip = pytest.mark.skip(reason="needs --full")
    for item in items:
        if "full" in item.keywords:
            item.add_marker(skip)


def tiny_config(**overrides) -> WaveNetConfig:
    base = dict(
        num_stacks=1,
        layers_per_stack=3,
        residual_channels=4,
        gate_channels=4,
        skip_channels=4,
        linguistic_dim=3,
        cond_channels=2,
        cond_layers=1,
        n_cepstra=3,
    )
    base.update(overrides)
    return WaveNetConfig(**base)


def randomize(params, rng, std=0.5):
    for p in params.values():
        p.data = rng.normal(0.0, std, p.shape)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
