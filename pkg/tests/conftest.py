import numpy as np
import pytest

from dfme.cli import build_victim


def numeric_grad(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar ``f()`` w.r.t. array ``x`` (perturbed in place)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    """Norm-wise relative error, robust to individual near-zero entries."""
    denom = np.linalg.norm(a) + np.linalg.norm(b)
    if denom == 0:
        return 0.0
    return float(np.linalg.norm(a - b) / denom)


@pytest.fixture(scope="session")
def digits_victim():
    """The desk victim: 64-64-32-10 MLP trained on 8x8 digits (seed 0)."""
    return build_victim("digits", "64-64-32-10", seed=0, epochs=60)


@pytest.fixture(scope="session")
def blobs_victim():
    return build_victim("blobs:2:3", "2-16-3", seed=0, epochs=30)
