import numpy as np
import pytest


def fd_grad(f, x, h=1e-5):
    """Central-difference gradient of scalar f() w.r.t. the array x (mutated in place)."""
    g = np.zeros_like(x)
    flat = x.ravel()
    gf = g.ravel()
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        gf[i] = (fp - fm) / (2.0 * h)
    return g


def rel_err(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(np.abs(b).max(), 1e-8) if b.size else 1.0
    return np.abs(a - b).max() / denom


@pytest.fixture
def rng():
    return np.random.default_rng(0)
