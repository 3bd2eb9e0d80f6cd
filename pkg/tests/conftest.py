import numpy as np
import pytest

from fairflow.model import ClassParams, HiddenState, SystemParams
from fairflow.sim import DemandProfile, Scenario, run


@pytest.fixture(scope="session", autouse=True)
def warm_kernels():
    """Load the compiled kernels once so timed tests measure simulation only."""
    classes = (ClassParams(0.05, 0.0), ClassParams(0.0, 0.0))
    profiles = (DemandProfile("constant", 4.0), DemandProfile("constant", 2.0))
    run(Scenario(classes, profiles, t_end=0.2))


@pytest.fixture
def sp():
    return SystemParams()


@pytest.fixture
def two_classes():
    return (ClassParams(0.05, 0.0), ClassParams(0.0, 0.0))


@pytest.fixture
def three_classes():
    return (ClassParams(0.05, 0.0), ClassParams(0.02, 0.0), ClassParams(0.0, 0.0))


def random_hidden(rng, n, z_max=30.0, q_max=15.0):
    return HiddenState(rng.uniform(0, z_max / n, n), float(rng.uniform(0, q_max)), float(rng.uniform(0, 1)))


def simplex_grid(n, points=10_000, rng=None):
    """Roughly ``points`` proportion vectors: a regular lattice for n <= 3, random otherwise."""
    if n == 1:
        return np.ones((1, 1))
    if n == 2:
        a = np.linspace(0, 1, points)
        return np.column_stack([a, 1 - a])
    if n == 3:
        m = int(np.sqrt(2 * points))
        out = [(i / m, j / m, (m - i - j) / m) for i in range(m + 1) for j in range(m + 1 - i)]
        return np.array(out)
    rng = rng or np.random.default_rng(0)
    return rng.dirichlet(np.ones(n), size=points)
