import numpy as np
import pytest


def numeric_grad(f, x, eps=1e-4):
    """Central finite differences of scalar f at x (mutates a copy)."""
    x = x.astype(np.float64)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    while not it.finished:
        idx = it.multi_index
        orig = x[idx]
        x[idx] = orig + eps
        hi = f(x)
        x[idx] = orig - eps
        lo = f(x)
        x[idx] = orig
        g[idx] = (hi - lo) / (2 * eps)
        it.iternext()
    return g


def numeric_grad_at(f, x, indices, eps=1e-4):
    """Central finite differences at a subset of flat indices of x."""
    x = x.astype(np.float64).copy()
    flat = x.reshape(-1)
    out = np.zeros(len(indices))
    for k, idx in enumerate(indices):
        orig = flat[idx]
        flat[idx] = orig + eps
        hi = f(x)
        flat[idx] = orig - eps
        lo = f(x)
        flat[idx] = orig
        out[k] = (hi - lo) / (2 * eps)
    return out


def assert_grads_close(analytic, numeric, rtol=1e-4, atol=1e-6):
    analytic = np.asarray(analytic, dtype=np.float64)
    np.testing.assert_allclose(analytic, numeric, rtol=rtol, atol=atol)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
