import numpy as np
import pytest

from nsldp.chain_oracle import two_state_fixture
from nsldp.galerkin import build_torus_model


@pytest.fixture(scope="session")
def torus2():
    return build_torus_model(2, {0: 1.0}, 0.5)


@pytest.fixture(scope="session")
def fixture_chain():
    return two_state_fixture("discrete")


@pytest.fixture(scope="session")
def fixture_ctmc():
    return two_state_fixture("continuous")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
