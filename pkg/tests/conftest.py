import numpy as np
import pytest

from gpkoopman.kernels import KernelParams
from gpkoopman.koopman import SnapshotSet, fit_tcca


def rotation_map(X):
    """Slightly contracting rotation used as a smooth 2-D toy flow."""
    return 0.95 * np.c_[X[:, 0] + 0.1 * X[:, 1], X[:, 1] - 0.1 * X[:, 0]]


def toy_data(seed=0, n=150, noise=0.05):
    rng = np.random.default_rng(seed)
    X = rng.uniform(-2, 2, (n, 2))
    Y = rotation_map(X) + noise * rng.standard_normal((n, 2))
    return SnapshotSet(X, Y)


@pytest.fixture(scope="session")
def toy():
    data = toy_data()
    params = KernelParams([1.0, 1.3], 1.0, 0.0025)
    Z = data.X[:20]
    return data, Z, params, fit_tcca(data, Z, params)
