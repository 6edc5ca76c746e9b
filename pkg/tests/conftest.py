import numpy as np
import pytest

from tdlrt.verify import random_shape, random_tucker


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def tucker(rng, shape, ranks):
    return random_tucker(rng, shape, ranks)


def feasible(rng, d, lo=2, hi=6):
    return random_shape(rng, d, lo, hi)
