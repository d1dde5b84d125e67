import pytest

from codestream import build_linear_schedule, init_model, GaussianReward, MixtureDenoiser
from codestream.trainer import DEFAULT_PRIOR


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run slow tests (training, full-scale sweeps)")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: needs a trained model or a long stochastic run")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


@pytest.fixture
def sched():
    "Short schedule whose ᾱ_T is close enough to 0 for sampling."
    return build_linear_schedule(50, 1e-3, 0.2)


@pytest.fixture
def tiny_model():
    return init_model(hidden_width=8, embed_width=4, seed=0)


@pytest.fixture
def exact():
    return MixtureDenoiser(DEFAULT_PRIOR)


@pytest.fixture
def far_reward():
    return GaussianReward((14.0, 3.0), 2.0)
