"""Window machinery and the shared transformer block.

Token grids are ``(B, S, S, D)``; windowed tensors are ``(B * nW, M*M, D)``
with windows enumerated row-major over the grid.
"""
from __future__ import annotations

import math
from functools import lru_cache

import numpy as np

from ..tensor import ops
from ..tensor.core import Tensor, as_tensor

MASK_VALUE = -1e4


def _grid_side(x: Tensor) -> int:
    if x.ndim != 4 or x.shape[1] != x.shape[2]:
        raise ValueError(f"expected a square token grid (B, S, S, D), got {x.shape}")
    return x.shape[1]


def window_partition(x, m: int) -> Tensor:
    """(B, S, S, D) -> (B * (S/m)^2, m*m, D). A 3-d grid is treated as B=1."""
    x = as_tensor(x)
    if x.ndim == 3:
        x = ops.reshape(x, (1,) + x.shape)
    s = _grid_side(x)
    if m < 1 or s % m:
        raise ValueError(f"window {m} does not divide grid side {s}")
    b, d = x.shape[0], x.shape[3]
    n = s // m
    x = ops.reshape(x, (b, n, m, n, m, d))
    x = ops.permute(x, (0, 1, 3, 2, 4, 5))
    return ops.reshape(x, (b * n * n, m * m, d))


def window_reverse(windows, m: int, s: int) -> Tensor:
    """Inverse of :func:`window_partition`: returns (B, S, S, D)."""
    windows = as_tensor(windows)
    if s % m:
        raise ValueError(f"window {m} does not divide grid side {s}")
    n = s // m
    bw, mm, d = windows.shape
    if mm != m * m or bw % (n * n):
        raise ValueError(f"windows {windows.shape} do not tile a {s}x{s} grid with window {m}")
    b = bw // (n * n)
    x = ops.reshape(windows, (b, n, n, m, m, d))
    x = ops.permute(x, (0, 1, 3, 2, 4, 5))
    return ops.reshape(x, (b, s, s, d))


def cyclic_shift(x, offset: int) -> Tensor:
    """Toroidal roll of a (B, S, S, D) grid by ``-offset`` along both spatial axes.

    ``cyclic_shift(cyclic_shift(x, k), -k)`` is the identity.
    """
    x = as_tensor(x)
    squeeze = x.ndim == 3
    if squeeze:
        x = ops.reshape(x, (1,) + x.shape)
    s = _grid_side(x)
    if abs(offset) >= s:
        raise ValueError(f"|offset| must be below the grid side {s}")
    out = ops.roll(x, (-offset, -offset), (1, 2)) if offset else x
    return ops.reshape(out, out.shape[1:]) if squeeze else out


@lru_cache(maxsize=None)
def relative_position_index(m: int) -> np.ndarray:
    """(m*m, m*m) index into a (2m-1)^2 bias table, by coordinate offset."""
    coords = np.stack(np.meshgrid(np.arange(m), np.arange(m), indexing="ij")).reshape(2, -1)
    rel = coords[:, :, None] - coords[:, None, :] + (m - 1)
    idx = rel[0] * (2 * m - 1) + rel[1]
    idx.setflags(write=False)
    return idx


@lru_cache(maxsize=None)
def shift_attention_mask(s: int, m: int, shift: int) -> np.ndarray:
    """(nW, m*m, m*m) additive mask blocking pairs that were not adjacent before the roll."""
    region = np.zeros((s, s), dtype=np.int64)
    bounds = (slice(0, -m), slice(-m, -shift), slice(-shift, None))
    label = 0
    for hs in bounds:
        for ws in bounds:
            region[hs, ws] = label
            label += 1
    n = s // m
    win = region.reshape(n, m, n, m).transpose(0, 2, 1, 3).reshape(n * n, m * m)
    mask = np.where(win[:, None, :] != win[:, :, None], MASK_VALUE, 0.0)
    mask.setflags(write=False)
    return mask


def window_mhsa(windows, qkv_w, qkv_b, proj_w, proj_b, bias_table, heads: int, mask=None,
                recorder=None) -> Tensor:
    """Multi-head self-attention inside each window with relative position bias.

    ``mask`` is an optional (nW, N, N) additive array applied per window;
    ``recorder`` (a list) receives the attention probabilities as
    (B * nW, heads, N, N) arrays.
    """
    windows = as_tensor(windows)
    bw, n, d = windows.shape
    if d % heads:
        raise ValueError(f"width {d} is not divisible by {heads} heads")
    m = math.isqrt(n)
    if m * m != n:
        raise ValueError(f"window token count {n} is not a square")
    if bias_table.shape != ((2 * m - 1) ** 2, heads):
        raise ValueError(f"bias table {bias_table.shape} does not match window {m} with {heads} heads")
    dh = d // heads

    qkv = ops.linear(windows, qkv_w, qkv_b)
    qkv = ops.permute(ops.reshape(qkv, (bw, n, 3, heads, dh)), (2, 0, 3, 1, 4))
    q, k, v = qkv[0], qkv[1], qkv[2]
    attn = ops.scale(ops.matmul(q, ops.transpose(k)), 1.0 / math.sqrt(dh))

    bias = ops.gather(bias_table, relative_position_index(m).reshape(-1))
    bias = ops.permute(ops.reshape(bias, (n, n, heads)), (2, 0, 1))
    attn = ops.add(attn, bias)
    if mask is not None:
        nw = mask.shape[0]
        if bw % nw:
            raise ValueError(f"{bw} windows are not a multiple of the {nw}-window mask")
        full = np.broadcast_to(np.asarray(mask)[:, None], (nw, heads, n, n))
        attn = ops.reshape(ops.add(ops.reshape(attn, (bw // nw, nw, heads, n, n)), full), (bw, heads, n, n))
    probs = ops.softmax(attn)
    if recorder is not None:
        recorder.append(probs.data.copy())

    out = ops.matmul(probs, v)
    out = ops.reshape(ops.permute(out, (0, 2, 1, 3)), (bw, n, d))
    return ops.linear(out, proj_w, proj_b)


def mlp(x, fc1_w, fc1_b, fc2_w, fc2_b) -> Tensor:
    return ops.linear(ops.gelu(ops.linear(x, fc1_w, fc1_b)), fc2_w, fc2_b)


def transformer_block(x, p: dict, side: int, window: int, shift: int, heads: int, recorder=None) -> Tensor:
    """Pre-norm block on (B, N, D) tokens laid out on a ``side`` x ``side`` grid.

    ``p`` maps short names (norm1.weight, qkv.weight, rel_bias, ...) to tensors.
    """
    x = as_tensor(x)
    b, n, d = x.shape
    if n != side * side:
        raise ValueError(f"{n} tokens do not form a {side}x{side} grid")
    h = ops.layer_norm(x, p["norm1.weight"], p["norm1.bias"])
    h = ops.reshape(h, (b, side, side, d))
    if shift:
        h = cyclic_shift(h, shift)
    win = window_partition(h, window)
    mask = shift_attention_mask(side, window, shift) if shift else None
    win = window_mhsa(win, p["qkv.weight"], p["qkv.bias"], p["proj.weight"], p["proj.bias"],
                      p["rel_bias"], heads, mask, recorder)
    h = window_reverse(win, window, side)
    if shift:
        h = cyclic_shift(h, -shift)
    x = ops.add(x, ops.reshape(h, (b, n, d)))
    y = ops.layer_norm(x, p["norm2.weight"], p["norm2.bias"])
    y = mlp(y, p["fc1.weight"], p["fc1.bias"], p["fc2.weight"], p["fc2.bias"])
    return ops.add(x, y)
