import numpy as np
import pytest

from slotplan.autodiff import Tape, Tensor, backward


def finite_diff(f, arrays, h=1e-5):
    """Central finite differences of scalar f() w.r.t. each array, in place."""
    grads = []
    for arr in arrays:
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f()
            flat[i] = orig - h
            fm = f()
            flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * h)
        grads.append(g)
    return grads


def rel_err(analytic, numeric):
    """Max elementwise |a - n| / max(1, |a|, |n|)."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(1.0, np.maximum(np.abs(a), np.abs(n)))
    return float((np.abs(a - n) / denom).max())


def analytic_grads(build_loss, leaves):
    """Run build_loss under a fresh tape and return each leaf's gradient."""
    for leaf in leaves:
        leaf.zero_grad()
    with Tape():
        loss = build_loss()
    backward(loss)
    return [leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data) for leaf in leaves]


def check_gradients(build_loss, leaves, tol=1e-6, h=1e-5):
    """Assert analytic gradients of the scalar loss match central differences."""
    analytic = analytic_grads(build_loss, leaves)
    numeric = finite_diff(lambda: build_loss().item(), [l.data for l in leaves], h=h)
    worst = max(rel_err(a, n) for a, n in zip(analytic, numeric))
    assert worst < tol, f"gradient mismatch: max rel err {worst:.3e} >= {tol}"
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(0)
