import numpy as np
import pytest

from stmpc.config import load_bundled
from stmpc.lifted_dynamics import PlantModel
from stmpc.network import TokenBucketSpec
from stmpc.terminal_design import design_terminal


def random_plant(rng, n, m, scale=1.0):
    A = scale * rng.standard_normal((n, n)) / np.sqrt(n)
    B = rng.standard_normal((n, m))
    G = rng.standard_normal((n, n))
    H = rng.standard_normal((m, m))
    return PlantModel(A, B, G @ G.T + 0.1 * np.eye(n), H @ H.T + 0.1 * np.eye(m))


@pytest.fixture
def scalar_plant():
    """x+ = 0.5 x + u with unit weights."""
    return PlantModel([[0.5]], [[1.0]], [[1.0]], [[1.0]])


@pytest.fixture
def unit_bucket():
    return TokenBucketSpec(1, 1, 4)


@pytest.fixture(scope="session")
def reactor():
    return load_bundled()


@pytest.fixture(scope="session")
def reactor_terminal(reactor):
    return design_terminal(reactor.plant, reactor.spec, reactor.mpc.P)
