from __future__ import annotations

import numpy as np

from .core import Tape


def analytic_grads(f, inputs) -> list[np.ndarray]:
    for t in inputs:
        t.grad = None
    with Tape() as tape:
        out = f(*inputs)
    tape.backward(out)
    return [t.grad if t.grad is not None else np.zeros(t.shape) for t in inputs]


def numeric_grads(f, inputs, h: float = 1e-5) -> list[np.ndarray]:
    """Central differences, one coordinate at a time (no tape active)."""
    grads = []
    for t in inputs:
        if not (t.data.flags.c_contiguous and t.data.flags.writeable):
            t.data = np.array(t.data, order="C")
        g = np.zeros(t.shape)
        flat = t.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            plus = float(f(*inputs).data)
            flat[i] = orig - h
            minus = float(f(*inputs).data)
            flat[i] = orig
            g.reshape(-1)[i] = (plus - minus) / (2.0 * h)
        grads.append(g)
    return grads


def grad_check(f, inputs, h: float = 1e-5) -> float:
    """Max relative error between tape gradients and central differences.

    ``f(*inputs)`` must return a scalar Tensor; inputs must be leaf tensors
    with ``requires_grad`` set and writable float data (use float64). The
    relative error of each coordinate is ``|a - n| / max(1, |a|, |n|)``.
    """
    if h <= 0:
        raise ValueError("step h must be positive")
    analytic = analytic_grads(f, inputs)
    numeric = numeric_grads(f, inputs, h)
    worst = 0.0
    for a, n in zip(analytic, numeric):
        if a.size == 0:
            continue
        denom = np.maximum(1.0, np.maximum(np.abs(a), np.abs(n)))
        worst = max(worst, float(np.max(np.abs(a - n) / denom)))
    return worst
