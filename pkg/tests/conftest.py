import numpy as np
import pytest

from mcfpolicy import SyntheticConfig, generate_synthetic
from mcfpolicy.forest import ForestConfig, build_forest, compute_weights


@pytest.fixture(scope="session")
def small_data():
    return generate_synthetic(SyntheticConfig(n=600, seed=3, shares=(0.2, 0.2, 0.2),
                                              selection_strength=0.5))


@pytest.fixture(scope="session")
def small_forest(small_data):
    return build_forest(small_data, ForestConfig(n_trees=30, seed=1))


@pytest.fixture(scope="session")
def small_weights(small_forest):
    return compute_weights(small_forest)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_configure(config):
    config.acceptance_lines = []


def pytest_terminal_summary(terminalreporter, config):
    if config.acceptance_lines:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(config.acceptance_lines, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
