import numpy as np
import pytest

from dash_grn import model


@pytest.fixture
def small_phoenix():
    return model.init_phoenix(6, m=3, seed=11)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
