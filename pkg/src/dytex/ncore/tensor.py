"""Dense-tensor engine with taped reverse-mode differentiation.

Tensors wrap flat float32/float64 numpy buffers. While a ``Tape`` is
active, every primitive records a node (output, inputs, backward rule)
in execution order, which is a topological order of the data-flow
graph. ``backward`` replays the tape in reverse, visiting each node
exactly once and accumulating gradients into ``Tensor.grad``.

Backward rules bind fresh arrays (or views of the output gradient) to
``grad``; accumulation always rebinds (``t.grad = t.grad + g``) and
never mutates in place, so views are safe to return.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from ..errors import NonFiniteValueError

Array = np.ndarray

_FLOAT_DTYPES = (np.float32, np.float64)

_active_tape: "Tape | None" = None
_finite_checks: bool = True


def set_finite_checks(enabled: bool) -> None:
    """Toggle the NaN/Inf guard applied to every primitive's output."""
    global _finite_checks
    _finite_checks = bool(enabled)


def _check_finite(arr: Array, op: str) -> None:
    if not _finite_checks:
        return
    # one-pass fast path: a finite total implies no NaN/Inf anywhere;
    # an overflowed-but-clean sum is caught by the exact fallback
    total = np.add.reduce(arr, axis=None)
    if not np.isfinite(total) and not np.isfinite(arr).all():
        raise NonFiniteValueError(f"non-finite values produced by '{op}'")


class Tensor:
    """A dense float tensor, optionally tracked for differentiation."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        self.data: Array = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Array | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{flag})"

    # operator sugar; all routing goes through the module-level primitives
    def __add__(self, other):
        return add(self, _as_tensor(other, self.dtype))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self.dtype))

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other, self.dtype))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, _as_tensor(other, self.dtype))

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tensor_mean(self, axis=axis, keepdims=keepdims)


def _as_tensor(value, dtype) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype))


class _Node:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out: Tensor, inputs: tuple[Tensor, ...], backward):
        self.out = out
        self.inputs = inputs
        self.backward = backward


class Tape:
    """Operation recorder; use as a context manager around the forward pass."""

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        global _active_tape
        if _active_tape is not None:
            raise RuntimeError("nested tapes are not supported")
        _active_tape = self
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        global _active_tape
        _active_tape = None


def _record(out: Tensor, inputs: Sequence[Tensor],
            backward: Callable[[Array], Iterable[Array | None]]) -> Tensor:
    tape = _active_tape
    if tape is not None and any(i.requires_grad for i in inputs):
        out.requires_grad = True
        tape.nodes.append(_Node(out, tuple(inputs), backward))
    return out


def backward(loss: Tensor, tape: Tape) -> None:
    """Populate ``grad`` on every tensor the scalar ``loss`` depends on.

    Raises ``ValueError`` if ``loss`` is not scalar or was not produced
    on ``tape`` (a detached graph).
    """
    if loss.size != 1:
        raise ValueError(f"loss must be scalar, got shape {loss.shape}")
    if not any(node.out is loss for node in tape.nodes):
        raise ValueError("loss is not on the tape (detached graph)")
    loss.grad = np.ones_like(loss.data)
    for node in reversed(tape.nodes):
        gout = node.out.grad
        if gout is None:
            continue
        grads = node.backward(gout)
        for inp, g in zip(node.inputs, grads):
            if g is None:
                continue
            inp.grad = g if inp.grad is None else inp.grad + g


def _unbroadcast(g: Array, shape: tuple[int, ...]) -> Array:
    """Reduce a broadcast gradient back to ``shape``."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ------------------------------------------------------------------
# primitives
# ------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data + b.data)
    _check_finite(out.data, "add")
    return _record(out, (a, b), lambda g: (_unbroadcast(g, a.shape),
                                           _unbroadcast(g, b.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data - b.data)
    _check_finite(out.data, "sub")
    return _record(out, (a, b), lambda g: (_unbroadcast(g, a.shape),
                                           _unbroadcast(-g, b.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data * b.data)
    _check_finite(out.data, "mul")
    return _record(out, (a, b), lambda g: (_unbroadcast(g * b.data, a.shape),
                                           _unbroadcast(g * a.data, b.shape)))


def div(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data / b.data)
    _check_finite(out.data, "div")

    def bwd(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb

    return _record(out, (a, b), bwd)


def neg(a: Tensor) -> Tensor:
    out = Tensor(-a.data)
    return _record(out, (a,), lambda g: (-g,))


def power(a: Tensor, exponent: float) -> Tensor:
    p = float(exponent)
    if p == 2.0:  # by far the hot case; ** hits the slow pow ufunc
        out = Tensor(np.square(a.data))
        _check_finite(out.data, "power")
        return _record(out, (a,), lambda g: (g * (2.0 * a.data),))
    out = Tensor(a.data ** p)
    _check_finite(out.data, "power")
    return _record(out, (a,), lambda g: (g * p * a.data ** (p - 1.0),))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; 2-D or batched with identical leading dims."""
    if a.ndim != b.ndim or (a.ndim > 2 and a.shape[:-2] != b.shape[:-2]):
        raise ValueError(f"matmul shapes not aligned: {a.shape} @ {b.shape}")
    out = Tensor(a.data @ b.data)
    _check_finite(out.data, "matmul")

    def bwd(g):
        ga = g @ b.data.swapaxes(-1, -2)
        gb = a.data.swapaxes(-1, -2) @ g
        return ga, gb

    return _record(out, (a, b), bwd)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = Tensor(a.data.reshape(shape))
    return _record(out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes: tuple[int, ...]) -> Tensor:
    inverse = tuple(np.argsort(axes))
    out = Tensor(a.data.transpose(axes))
    return _record(out, (a,), lambda g: (g.transpose(inverse),))


def tensor_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims))
    _check_finite(out.data, "sum")

    def bwd(g):
        if axis is not None and not keepdims:
            axes = axis if isinstance(axis, tuple) else (axis,)
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _record(out, (a,), bwd)


def tensor_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([a.shape[ax] for ax in axes]))
    total = tensor_sum(a, axis=axis, keepdims=keepdims)
    return mul(total, Tensor(np.asarray(1.0 / count, dtype=a.dtype)))


def stop_gradient(a: Tensor) -> Tensor:
    """Identity in the forward pass, zero gradient in the backward pass.

    Shares the input buffer, so the forward value is bit-exact.
    """
    return Tensor(a.data)


def leaf(data, requires_grad: bool = True, dtype=np.float32) -> Tensor:
    """Create a parameter/leaf tensor owning its own buffer."""
    return Tensor(np.array(data, dtype=dtype), requires_grad=requires_grad)
