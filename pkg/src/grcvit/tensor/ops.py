"""Differentiable primitives.

Broadcasting is limited to leading-axis expansion: the second operand of
``add``/``mul`` may have a shape equal to a suffix of the first operand's
shape. Reductions accumulate in float64.
"""
from __future__ import annotations

import math

import numpy as np

from .core import ShapeError, Tensor, as_tensor, record

GELU_C = math.sqrt(2.0 / math.pi)
GELU_K = 0.044715
LN_EPS = 1e-5


def _is_suffix(small: tuple, big: tuple) -> bool:
    return len(small) <= len(big) and tuple(big[len(big) - len(small):]) == tuple(small)


def _reduce_to(g: np.ndarray, shape: tuple) -> np.ndarray:
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead))) if lead else g


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if not _is_suffix(b.shape, a.shape):
        if _is_suffix(a.shape, b.shape):
            a, b = b, a
        else:
            raise ShapeError("add", a.shape, b.shape)
    b_shape = b.shape
    return record(a.data + b.data, (a, b), lambda g: (g, _reduce_to(g, b_shape)), "add")


def sub(a, b) -> Tensor:
    return add(a, scale(as_tensor(b), -1.0))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if not _is_suffix(b.shape, a.shape):
        if _is_suffix(a.shape, b.shape):
            a, b = b, a
        else:
            raise ShapeError("mul", a.shape, b.shape)
    ad, bd = a.data, b.data
    return record(ad * bd, (a, b), lambda g: (g * bd, _reduce_to(g * ad, bd.shape)), "mul")


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return record(a.data * c, (a,), lambda g: (g * c,), "scale")


def matmul(a, b) -> Tensor:
    """``a[..., n, k] @ b[k, m]`` or ``a[..., n, k] @ b[..., k, m]`` with equal leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    ad = a.data.astype(np.float64, copy=False)
    bd = b.data.astype(np.float64, copy=False)
    out = ad @ bd

    def backward(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        if bd.ndim == 2:
            k = ad.shape[-1]
            gb = ad.reshape(-1, k).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return record(out, (a, b), backward, "matmul")


def linear(x, weight, bias=None) -> Tensor:
    out = matmul(x, weight)
    return add(out, bias) if bias is not None else out


def permute(a, axes) -> Tensor:
    a = as_tensor(a)
    axes = tuple(int(x) for x in axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError("permute", a.shape, axes)
    inv = tuple(np.argsort(axes))
    return record(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "permute")


def transpose(a, ax1: int = -2, ax2: int = -1) -> Tensor:
    a = as_tensor(a)
    axes = list(range(a.ndim))
    axes[ax1], axes[ax2] = axes[ax2], axes[ax1]
    return permute(a, axes)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", src, shape) from None
    return record(out, (a,), lambda g: (g.reshape(src),), "reshape")


def expand(a, lead: tuple) -> Tensor:
    """Prepend ``lead`` axes by repetition."""
    a = as_tensor(a)
    lead = tuple(lead)
    out = np.broadcast_to(a.data, lead + a.shape).copy()
    return record(out, (a,), lambda g: (_reduce_to(g, a.shape),), "expand")


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise ShapeError("concat", ref, t.shape)
    sizes = [t.shape[ax] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in tensors], axis=ax)
    return record(out, tensors, lambda g: tuple(np.split(g, cuts, axis=ax)), "concat")


def getitem(a, idx) -> Tensor:
    """Basic slicing (ints, slices, Ellipsis); no fancy indexing."""
    a = as_tensor(a)
    parts = idx if isinstance(idx, tuple) else (idx,)
    if not all(isinstance(p, (int, np.integer, slice)) or p is Ellipsis for p in parts):
        raise TypeError("getitem supports basic slicing only; use gather for index arrays")
    out = a.data[idx]
    shape, dtype = a.shape, np.float64

    def backward(g):
        full = np.zeros(shape, dtype=dtype)
        full[idx] = g
        return (full,)

    return record(np.array(out), (a,), backward, "slice")


def gather(table, index) -> Tensor:
    """Embedding-style lookup ``table[index]`` along axis 0."""
    table = as_tensor(table)
    index = np.asarray(index, dtype=np.int64)
    if index.size and (index.min() < 0 or index.max() >= table.shape[0]):
        raise IndexError(f"gather index out of range for table of {table.shape[0]} rows")
    shape = table.shape

    def backward(g):
        full = np.zeros(shape, dtype=np.float64)
        np.add.at(full, index.reshape(-1), g.reshape((-1,) + shape[1:]))
        return (full,)

    return record(table.data[index], (table,), backward, "gather")


def roll(a, shifts, axes) -> Tensor:
    a = as_tensor(a)
    shifts = tuple(int(s) for s in shifts)
    axes = tuple(int(x) for x in axes)
    neg = tuple(-s for s in shifts)
    return record(np.roll(a.data, shifts, axes), (a,), lambda g: (np.roll(g, neg, axes),), "roll")


def softmax(a) -> Tensor:
    a = as_tensor(a)
    if a.ndim == 0 or a.shape[-1] == 0:
        raise ShapeError("softmax", a.shape)
    x = a.data.astype(np.float64, copy=False)
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    y = e / e.sum(axis=-1, keepdims=True)
    return record(y, (a,), lambda g: (y * (g - (g * y).sum(axis=-1, keepdims=True)),), "softmax")


def layer_norm(x, weight, bias, eps: float = LN_EPS) -> Tensor:
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    d = x.shape[-1] if x.ndim else 0
    if d == 0 or weight.shape != (d,) or bias.shape != (d,):
        raise ShapeError("layer_norm", x.shape, weight.shape, bias.shape)
    xd = x.data.astype(np.float64, copy=False)
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    w = weight.data.astype(np.float64)
    out = xhat * w + bias.data

    def backward(g):
        gw = _reduce_to(g * xhat, (d,))
        gb = _reduce_to(g, (d,))
        gx_hat = g * w
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        return gx, gw, gb

    return record(out, (x, weight, bias), backward, "layer_norm")


def gelu(a) -> Tensor:
    """GELU, tanh approximation: 0.5 x (1 + tanh(c (x + 0.044715 x^3)))."""
    a = as_tensor(a)
    x = a.data.astype(np.float64, copy=False)
    t = np.tanh(GELU_C * (x + GELU_K * x ** 3))
    out = 0.5 * x * (1.0 + t)

    def backward(g):
        dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * dt),)

    return record(out, (a,), backward, "gelu")


def mean(a, axis: int) -> Tensor:
    a = as_tensor(a)
    ax = axis % a.ndim
    n = a.shape[ax]
    shape = a.shape
    out = a.data.astype(np.float64, copy=False).mean(axis=ax)
    return record(out, (a,), lambda g: (np.broadcast_to(np.expand_dims(g, ax), shape) / n,), "mean")


def sum_all(a) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    out = np.array(a.data.astype(np.float64, copy=False).sum())
    return record(out, (a,), lambda g: (np.full(shape, float(g)),), "sum")


def cross_entropy(logits, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under ``logits[B, C]``."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if logits.ndim != 2 or logits.shape[0] != labels.shape[0]:
        raise ShapeError("cross_entropy", logits.shape, labels.shape)
    n, c = logits.shape
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise IndexError(f"cross_entropy label out of range [0, {c})")
    x = logits.data.astype(np.float64, copy=False)
    shifted = x - x.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logz
    loss = np.array(-logp[np.arange(n), labels].mean())

    def backward(g):
        p = np.exp(logp)
        p[np.arange(n), labels] -= 1.0
        return (p * (float(g) / n),)

    return record(loss, (logits,), backward, "cross_entropy")
