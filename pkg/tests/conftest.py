import numpy as np
import pytest

from tamilcl import numerics as nx


def numeric_grad(f, params, h=1e-5):
    """Central finite differences of scalar ``f()`` w.r.t. each array in ``params``."""
    grads = []
    for p in params:
        g = np.zeros_like(p.data)
        it = np.nditer(p.data, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            old = p.data[i]
            p.data[i] = old + h
            fp = f()
            p.data[i] = old - h
            fm = f()
            p.data[i] = old
            g[i] = (fp - fm) / (2 * h)
        grads.append(g)
    return grads


def max_rel_err(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b) / np.maximum(1.0, np.maximum(np.abs(a), np.abs(b)))))


def autodiff_grad(loss_fn, params):
    for p in params:
        p.grad = None
    nx.backward(loss_fn())
    return [np.zeros_like(p.data) if p.grad is None else p.grad for p in params]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
