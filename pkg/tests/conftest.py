import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(20260810)


def make_rng(seed):
    return np.random.default_rng(np.random.SeedSequence(seed))
