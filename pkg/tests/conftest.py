import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_probmap(rng, n, c, h, w, dtype=np.float32):
    p = rng.random((n, c, h, w)).astype(dtype) + 1e-3
    return p / p.sum(axis=1, keepdims=True)
