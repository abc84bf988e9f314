import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)


def finite_diff(f, x, eps=1e-6):
    """Central-difference gradient of a scalar function f at x."""
    g = np.zeros_like(x, dtype=np.float64)
    flat = x.ravel()
    gflat = g.ravel()
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + eps
        hi = f(x)
        flat[i] = keep - eps
        lo = f(x)
        flat[i] = keep
        gflat[i] = (hi - lo) / (2.0 * eps)
    return g
