import numpy as np
import pytest

from dexhand.kinematics import FingerModel


@pytest.fixture
def finger():
    return FingerModel()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
