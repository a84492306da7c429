"""Tensor and tape for reverse-mode differentiation.

Operations record themselves on the innermost active :class:`Tape` of the
current thread whenever one of their inputs requires a gradient. A tape can
be replayed backwards exactly once.
"""
from __future__ import annotations

import threading

import numpy as np

_local = threading.local()

# set to True to assert finiteness after every recorded forward op
CHECK_FINITE = False


class TapeError(RuntimeError):
    pass


class ShapeError(ValueError):
    def __init__(self, op, *shapes):
        super().__init__(f"{op}: incompatible shapes {' vs '.join(str(tuple(s)) for s in shapes)}")
        self.op = op
        self.shapes = shapes


def _stack() -> list:
    if not hasattr(_local, "tapes"):
        _local.tapes = []
    return _local.tapes


def active_tape() -> "Tape | None":
    stack = _stack()
    return stack[-1] if stack else None


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_tape", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None
        self.name = name
        self._tape = None
        self._parents = ()
        self._backward = None
        self._op = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    # operator sugar; the ops module holds the real definitions
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    def __mul__(self, other):
        from . import ops
        if isinstance(other, (int, float)):
            return ops.scale(self, other)
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def __getitem__(self, idx):
        from . import ops
        return ops.getitem(self, idx)

    def reshape(self, *shape):
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def permute(self, *axes):
        from . import ops
        return ops.permute(self, axes)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def record(data: np.ndarray, inputs: tuple, backward, op: str) -> Tensor:
    """Wrap ``data`` as an op output and register its VJP on the active tape.

    ``backward(g)`` returns one gradient (or None) per input.
    """
    out = Tensor(data)
    tape = active_tape()
    if CHECK_FINITE and not np.all(np.isfinite(out.data)):
        raise FloatingPointError(f"{op} produced non-finite values")
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._tape = tape
        out._parents = inputs
        out._backward = backward
        out._op = op
        tape._nodes.append(out)
    return out


class Tape:
    """Records operations executed inside ``with Tape():``."""

    def __init__(self):
        self._nodes: list[Tensor] = []
        self.consumed = False

    def __enter__(self):
        if self.consumed:
            raise TapeError("tape already consumed")
        _stack().append(self)
        return self

    def __exit__(self, *exc):
        stack = _stack()
        if stack and stack[-1] is self:
            stack.pop()
        return False

    def __len__(self):
        return len(self._nodes)

    def backward(self, root: Tensor) -> None:
        """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every leaf reached."""
        if self.consumed:
            raise TapeError("tape already consumed; backward may run only once")
        if root.size != 1:
            raise TapeError(f"backward needs a scalar root, got shape {root.shape}")
        if root._tape is not self:
            raise TapeError("root was not produced on this tape")
        self.consumed = True
        grads = {id(root): np.ones_like(root.data, dtype=np.float64)}
        for node in reversed(self._nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            in_grads = node._backward(g)
            for parent, pg in zip(node._parents, in_grads):
                if pg is None or not parent.requires_grad:
                    continue
                if parent._tape is self:
                    key = id(parent)
                    if key in grads:
                        grads[key] = grads[key] + pg
                    else:
                        grads[key] = pg
                else:
                    pg = np.asarray(pg, dtype=np.float64).reshape(parent.shape)
                    parent.grad = pg.copy() if parent.grad is None else parent.grad + pg
        for node in self._nodes:
            node._parents = ()
            node._backward = None
        self._nodes = []


def backward(root: Tensor) -> None:
    if root._tape is None:
        raise TapeError("root was not produced on a tape")
    root._tape.backward(root)
