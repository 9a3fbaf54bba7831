import numpy as np
import pytest


def fd_grad(f, x0: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar function over a flat array."""
    x0 = np.asarray(x0, dtype=np.float64)
    g = np.zeros_like(x0)
    flat = x0.ravel()
    gflat = g.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x0)
        flat[i] = orig - h
        fm = f(x0)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return g


def assert_grad_close(got: np.ndarray, want: np.ndarray,
                      atol: float = 1e-6, rtol: float = 1e-4) -> None:
    """Elementwise |got-want| <= max(atol, rtol*|want|)."""
    got = np.asarray(got, dtype=float)
    want = np.asarray(want, dtype=float)
    assert got.shape == want.shape, f"shape {got.shape} vs {want.shape}"
    err = np.abs(got - want)
    bound = np.maximum(atol, rtol * np.abs(want))
    worst = np.max(err - bound)
    assert np.all(err <= bound), (
        f"gradient mismatch (worst excess {worst:.3e}):\ngot  {got}\nwant {want}")


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)
