import numpy as np
import pytest

from exolam import exbmdp
from exolam.numerics import RngStream


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running training or sweep")
    config.addinivalue_line("markers", "acceptance: end-to-end acceptance criterion")


@pytest.fixture
def rng():
    return RngStream(1234, 0)


@pytest.fixture(scope="session")
def small_env():
    return exbmdp.LinearEnvConfig(d_s=4, d_a=4, d_o=16, n_xi=4, p_switch=0.3, alpha=0.5,
                                  n_traj=200, traj_len=8, seed=3)


@pytest.fixture(scope="session")
def small_batch(small_env):
    return exbmdp.make_dataset(small_env)


def random_matrix(seed, shape, stream=0):
    return RngStream(seed, stream).normal(shape)


@pytest.fixture
def rand():
    return random_matrix


np.set_printoptions(precision=4, suppress=True)


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def acceptance_log():
    """Collects one pass/fail line per acceptance criterion."""
    return ACCEPTANCE_LINES


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
