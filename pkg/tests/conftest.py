import numpy as np
import pytest

from multitreat.data import Dataset


def random_dataset(seed, n=30, Z=3, P=3, min_group=3, shift=0.5):
    """Groups of at least ``min_group`` units with shifted normal covariates and linear outcomes."""
    rng = np.random.default_rng(seed)
    W = np.concatenate([np.repeat(np.arange(1, Z + 1), min_group),
                        rng.integers(1, Z + 1, size=n - Z * min_group)])
    rng.shuffle(W)
    X = rng.standard_normal((n, P)) + shift * W[:, None] * (np.arange(P) % Z + 1 == W[:, None])
    beta = rng.uniform(-1, 1, size=(Z, P + 1))
    Y = beta[W - 1, 0] + np.sum(beta[W - 1, 1:] * X, axis=1) + rng.standard_normal(n)
    return Dataset(X, W, Y, n_treatments=Z)


@pytest.fixture
def small_ds():
    return random_dataset(7)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


GATE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if GATE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in GATE_LINES:
            terminalreporter.write_line(line)
