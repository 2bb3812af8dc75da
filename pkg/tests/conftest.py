import numpy as np
import pytest

from dchag import tensor as T
from dchag.rng import RngState


def rel_err(a, b, floor=1e-300):
    """Per-tensor relative disagreement: max|a-b| / (max|a| + max|b| + floor)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.abs(a).max(initial=0.0) + np.abs(b).max(initial=0.0) + floor
    return np.abs(a - b).max(initial=0.0) / denom


def fd_grad(fn, tensors, wrt, h=1e-6):
    """Central finite differences of scalar fn() with respect to tensors[wrt].

    fn must rebuild the computation from tensors' .data each call.
    """
    x = tensors[wrt].data
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    while not it.finished:
        idx = it.multi_index
        orig = x[idx]
        x[idx] = orig + h
        fp = fn().item()
        x[idx] = orig - h
        fm = fn().item()
        x[idx] = orig
        g[idx] = (fp - fm) / (2 * h)
        it.iternext()
    return g


def check_grad(fn, tensors, tol=1e-5, h=1e-6):
    """Compare autodiff grads of scalar fn against central differences."""
    T.clear_grads(tensors)
    loss = fn()
    T.backward(loss)
    for name, t in tensors.items():
        if not t.requires_grad:
            continue
        fd = fd_grad(fn, tensors, name, h=h)
        err = rel_err(t.grad, fd)
        assert err < tol, f"gradient mismatch for {name}: rel err {err:.3e}"


@pytest.fixture
def rng():
    return RngState(1234)
