"""Shared helpers: finite-difference gradient checking."""

import numpy as np
import pytest

from deepsum.autodiff import Tensor


def numeric_grad(f, x, eps=1e-6):
    """Central-difference gradient of scalar f at array x."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        fp = f(x)
        flat[i] = old - eps
        fm = f(x)
        flat[i] = old
        gf[i] = (fp - fm) / (2 * eps)
    return g


def rel_err(a, b):
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return np.linalg.norm(a - b) / denom


def check_grad(build, x0, tol=1e-5, eps=1e-6):
    """Compare autodiff and finite-difference gradients of ``build``.

    ``build`` maps a Tensor to a scalar Tensor; ``x0`` is the probe point.
    """
    x = Tensor(np.array(x0, dtype=np.float64), requires_grad=True)
    out = build(x)
    assert out.size == 1, "check_grad needs a scalar output"
    out.backward(seed=np.ones_like(out.data))
    auto = x.grad.copy()

    def f(arr):
        return float(build(Tensor(arr)).data.sum())

    num = numeric_grad(f, np.array(x0, dtype=np.float64), eps=eps)
    err = rel_err(auto, num)
    assert err < tol, f"gradient mismatch: rel err {err:.3e} >= {tol}"
    return err


@pytest.fixture
def rng():
    return np.random.default_rng(0)
