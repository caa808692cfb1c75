import numpy as np
import pytest


def sphere_points(n, seed):
    g = np.random.default_rng(seed).standard_normal((n, 3))
    return g / np.linalg.norm(g, axis=1)[:, None]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
