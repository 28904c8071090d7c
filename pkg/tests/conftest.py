import numpy as np
import pytest

from wegs import tensor as T
from wegs.geometry import Camera
from wegs.tensor import Param, Tape


def rel_err(a, b) -> float:
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / scale)


def numeric_grad(f, x: np.ndarray, h: float = 1e-3, mask=None) -> np.ndarray:
    """Central differences of scalar ``f`` at ``x`` (float64); ``mask`` limits the coordinates."""
    g = np.zeros_like(x, dtype=np.float64)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        if mask is not None and not mask[i]:
            continue
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def check_op_grads(op, arrays, h=1e-3, seed=0):
    """Return the largest relative error between tape and finite-difference gradients of
    ``sum(w * op(*params))`` over every input array."""
    params = [Param(np.array(a, dtype=np.float64), f"in{i}") for i, a in enumerate(arrays)]
    out = op(*params)
    w = np.random.default_rng(seed).normal(size=out.shape)

    def value():
        return float(np.sum(w * op(*params).data))

    for p in params:
        p.grad = np.zeros_like(p.data)
    with Tape() as tape:
        loss = T.tsum(T.mul(op(*params), w))
        tape.backward(loss)
    worst = 0.0
    for p in params:
        num = numeric_grad(value, p.data, h)
        worst = max(worst, rel_err(p.grad, num))
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def ring_cam(angle=0.0, size=32, radius=4.0, focal=None):
    focal = focal or size * 0.9
    eye = [radius * np.cos(angle), radius * np.sin(angle), 0.5]
    return Camera.look_at(eye, [0, 0, 0], [0, 0, 1], focal, focal, size, size)
