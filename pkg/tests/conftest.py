import numpy as np
import pytest

from uqlab import autodiff as ad


def numeric_grad(f, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central differences of the scalar ``f()`` w.r.t. array ``x`` (modified in place)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        up = f()
        x[i] = old - h
        down = f()
        x[i] = old
        g[i] = (up - down) / (2 * h)
    return g


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    """Norm-wise relative error, floored so all-zero gradients compare absolutely."""
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-8))


def grad_check(loss_fn, params, h: float = 1e-6) -> float:
    """Max relative error over ``params`` between tape and finite-difference gradients."""
    with ad.Tape() as tape:
        grads = tape.backward(loss_fn())
    worst = 0.0
    for p in params:
        num = numeric_grad(lambda: float(loss_fn().data), p.data, h)
        worst = max(worst, rel_error(grads[p], num))
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
