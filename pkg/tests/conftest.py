import numpy as np
import pytest

from coarsegrain.feature_map import LocalMap, map_batch


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_batch(n, n_sites, seed=0, mode="unit_local", kind="affine"):
    x = np.random.default_rng(seed).random((n, n_sites))
    return x, map_batch(x, LocalMap(kind), mode)


def dense_phi(x, kind="affine"):
    """Explicit feature vector of one input (oracle, small N only)."""
    phi = LocalMap(kind)(np.asarray(x, dtype=float))
    out = np.ones(1)
    for v in phi:
        out = np.kron(out, v)
    return out
