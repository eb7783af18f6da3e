import numpy as np
import pytest

from crisis_hmc.ontology import default_ontology


@pytest.fixture(scope="session")
def ontology():
    return default_ontology()


@pytest.fixture
def rng():
    return np.random.default_rng(0)
