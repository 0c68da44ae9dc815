import numpy as np
import pytest

from extractbench.graph import generate_sbm, make_splits
from extractbench.nn import train_target

SBM = {"n": 600, "num_classes": 3, "p_in": 0.05, "p_out": 0.005, "feat_dim": 32, "feat_signal": 1.0}
FRACTIONS = (0.2, 0.1, 0.2, 0.5)

# one line per acceptance criterion, printed at the end of the session
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[0][2:])):
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def sbm():
    g = generate_sbm(seed=0, name="sbm", **SBM)
    return g, make_splits(g, FRACTIONS, 0)


@pytest.fixture(scope="session")
def sbm_target(sbm):
    g, splits = sbm
    return train_target(g, splits.train, seed=0)


@pytest.fixture(scope="session")
def small_sbm():
    g = generate_sbm(n=150, num_classes=3, p_in=0.12, p_out=0.01, feat_dim=24, feat_signal=1.5, seed=3, name="small")
    return g, make_splits(g, FRACTIONS, 3)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
