"""Dense float32 tensors with tape-based reverse-mode differentiation.

Every operation appends a record to the active :class:`Tape`; ``backward``
replays the tape in reverse to accumulate gradients.  All values are stored
as little-endian ``numpy.float32`` arrays; broadcasting follows numpy's
trailing-axis rules.
"""
from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, MathDomainError, ShapeError

_f32 = np.float32


class Tensor:
    """A numpy-backed array that can participate in gradient computation.

    ``grad`` is ``None`` until a backward pass reaches the tensor; repeated
    backward passes accumulate (``+=``) into it, and ``zero_grad`` resets it.
    """

    __slots__ = ("data", "grad", "requires_grad", "_tape")

    # keep numpy from absorbing us into object arrays; reflected ops run instead
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=_f32)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._tape: "Tape | None" = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        """Copy of the values with no recorded history; gradients stop here."""
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    # -- operator sugar -------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __pow__(self, other):
        return pow_(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self) -> "Tensor":
        return transpose(self)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def sum(self, axes=None, keepdims: bool = False) -> "Tensor":
        return sum_(self, axes, keepdims)

    def mean(self, axes=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axes, keepdims)

    def max(self, axes=None, keepdims: bool = False) -> "Tensor":
        return max_(self, axes, keepdims)

    def exp(self) -> "Tensor":
        return exp(self)

    def log(self) -> "Tensor":
        return log(self)

    def relu(self) -> "Tensor":
        return relu(self)

    def sqrt(self) -> "Tensor":
        return sqrt(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


class _Record:
    __slots__ = ("inputs", "output", "backward_fn")

    def __init__(self, inputs, output, backward_fn):
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


class Tape:
    """Ordered log of executed operations.

    Appending happens in execution order, so reverse iteration is a valid
    topological order for the backward pass.  Records persist until
    ``reset`` is called or the enclosing ``with`` block exits; ``backward``
    may run several times over the same records and accumulates gradients.
    A tape must stay confined to one thread.
    """

    __slots__ = ("_records",)

    def __init__(self):
        self._records: list[_Record] = []

    def __len__(self) -> int:
        return len(self._records)

    def reset(self) -> None:
        self._records.clear()

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _stack().pop()


class no_grad:
    """Context manager that disables recording; outputs become constants."""

    def __enter__(self):
        _stack().append(None)
        return self

    def __exit__(self, *exc):
        _stack().pop()


_state = threading.local()


def _stack() -> list:
    stack = getattr(_state, "stack", None)
    if stack is None:
        stack = [Tape()]
        _state.stack = stack
    return stack


def active_tape() -> Tape | None:
    """The tape new operations record onto, or None inside ``no_grad``."""
    return _stack()[-1]


def _as_tensor(value) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=_f32))


def _emit(inputs: tuple[Tensor, ...], out_data: np.ndarray, backward_fn) -> Tensor:
    out = Tensor(out_data)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._tape = tape
        tape._records.append(_Record(inputs, out, backward_fn))
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (undo numpy broadcasting)."""
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    keep = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if keep:
        grad = grad.sum(axis=keep, keepdims=True)
    return grad.astype(_f32, copy=False)


def _first_bad_index(mask: np.ndarray) -> tuple[int, ...]:
    return tuple(int(i) for i in np.argwhere(mask)[0])


def _check_broadcast(a_shape, b_shape) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a_shape, b_shape)
    except ValueError as e:
        raise ShapeError(f"cannot broadcast {a_shape} with {b_shape}") from e


# -- elementwise ops ----------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a.shape, b.shape)

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _emit((a, b), a.data + b.data, bwd)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a.shape, b.shape)

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _emit((a, b), a.data - b.data, bwd)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a.shape, b.shape)
    ad, bd = a.data, b.data

    def bwd(g):
        return _unbroadcast(g * bd, a.shape), _unbroadcast(g * ad, b.shape)

    return _emit((a, b), ad * bd, bwd)


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a.shape, b.shape)
    ad, bd = a.data, b.data

    def bwd(g):
        return (_unbroadcast(g / bd, a.shape),
                _unbroadcast(-g * ad / (bd * bd), b.shape))

    return _emit((a, b), ad / bd, bwd)


def pow_(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a.shape, b.shape)
    ad, bd = a.data, b.data
    fractional = np.any(bd != np.round(bd))
    if fractional and np.any(ad < 0):
        idx = _first_bad_index(ad < 0)
        raise MathDomainError(f"pow of negative base at index {idx} with non-integer exponent")
    if b.requires_grad and np.any(ad <= 0):
        idx = _first_bad_index(ad <= 0)
        raise MathDomainError(f"pow gradient for exponent needs positive base, index {idx}")
    out = ad ** bd

    def bwd(g):
        ga = _unbroadcast(g * bd * ad ** (bd - 1), a.shape)
        gb = None
        if b.requires_grad:
            gb = _unbroadcast(g * out * np.log(ad), b.shape)
        return ga, gb

    return _emit((a, b), out, bwd)


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _emit((a,), -a.data, lambda g: (-g,))


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.data)
    return _emit((a,), out, lambda g: (g * out,))


def log(a) -> Tensor:
    a = _as_tensor(a)
    if np.any(a.data <= 0):
        idx = _first_bad_index(a.data <= 0)
        raise MathDomainError(f"log of non-positive input at index {idx}")
    return _emit((a,), np.log(a.data), lambda g: (g / a.data,))


def relu(a) -> Tensor:
    a = _as_tensor(a)
    mask = a.data > 0

    def bwd(g):
        return (g * mask,)

    # np.maximum (not where) so NaN propagates instead of being masked
    return _emit((a,), np.maximum(a.data, _f32(0.0)), bwd)


def sqrt(a) -> Tensor:
    a = _as_tensor(a)
    if np.any(a.data < 0):
        idx = _first_bad_index(a.data < 0)
        raise MathDomainError(f"sqrt of negative input at index {idx}")
    out = np.sqrt(a.data)

    def bwd(g):
        return (g / (2.0 * out),)

    return _emit((a,), out, bwd)


_ELEMENTWISE: dict[str, Callable] = {
    "add": add, "sub": sub, "mul": mul, "div": div, "pow": pow_,
    "exp": exp, "log": log, "relu": relu, "sqrt": sqrt,
}


def elementwise(op_kind: str, a, b=None) -> Tensor:
    """Dispatch an elementwise op by name; binary kinds require ``b``."""
    fn = _ELEMENTWISE.get(op_kind)
    if fn is None:
        raise ContractError(f"unknown elementwise op {op_kind!r}")
    if op_kind in ("add", "sub", "mul", "div", "pow"):
        if b is None:
            raise ContractError(f"{op_kind} needs a second operand")
        return fn(a, b)
    if b is not None:
        raise ContractError(f"{op_kind} is unary")
    return fn(a)


# -- linear algebra -----------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul needs 2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner dimensions differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def bwd(g):
        return g @ bd.T, ad.T @ g

    return _emit((a, b), ad @ bd, bwd)


def transpose(a) -> Tensor:
    a = _as_tensor(a)
    if a.ndim != 2:
        raise ShapeError(f"transpose supports 2-D tensors, got {a.shape}")
    return _emit((a,), a.data.T.copy(), lambda g: (g.T,))


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = _as_tensor(a)
    shape = tuple(int(s) for s in shape)
    try:
        out = a.data.reshape(shape)
    except ValueError as e:
        raise ShapeError(f"cannot reshape {a.shape} to {shape}") from e
    src_shape = a.shape

    def bwd(g):
        return (g.reshape(src_shape),)

    return _emit((a,), out, bwd)


def concat(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    parts = tuple(_as_tensor(t) for t in tensors)
    if not parts:
        raise ContractError("concat needs at least one tensor")
    try:
        out = np.concatenate([p.data for p in parts], axis=axis)
    except ValueError as e:
        raise ShapeError(f"concat shapes incompatible on axis {axis}") from e
    sizes = [p.shape[axis] for p in parts]
    bounds = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.ascontiguousarray(piece) for piece in np.split(g, bounds, axis=axis))

    return _emit(parts, out, bwd)


# -- convolution --------------------------------------------------------

def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, padding: int):
    b, c, h, w = x.shape
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    hp, wp = x.shape[2], x.shape[3]
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    s0, s1, s2, s3 = x.strides
    view = np.lib.stride_tricks.as_strided(
        x, (b, c, kh, kw, ho, wo), (s0, s1, s2, s3, s2 * stride, s3 * stride))
    cols = np.ascontiguousarray(view).reshape(b, c * kh * kw, ho * wo)
    return cols, ho, wo


def _col2im(grad_cols: np.ndarray, x_shape, kh, kw, stride, padding):
    b, c, h, w = x_shape
    hp, wp = h + 2 * padding, w + 2 * padding
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    g = grad_cols.reshape(b, c, kh, kw, ho, wo)
    out = np.zeros((b, c, hp, wp), dtype=_f32)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += g[:, :, i, j]
    if padding:
        out = out[:, :, padding:-padding, padding:-padding]
    return np.ascontiguousarray(out)


def conv2d(x, w, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of NCHW input ``x`` with OIHW kernel ``w``."""
    x, w = _as_tensor(x), _as_tensor(w)
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d needs 4-D input and kernel, got {x.shape}, {w.shape}")
    b, c, h, wd = x.shape
    o, ci, kh, kw = w.shape
    if ci != c:
        raise ShapeError(f"kernel expects {ci} input channels, input has {c}")
    if h + 2 * padding < kh or wd + 2 * padding < kw:
        raise ShapeError(f"kernel {kh}x{kw} larger than padded input {h}x{wd} (pad {padding})")
    cols, ho, wo = _im2col(x.data, kh, kw, stride, padding)
    w_flat = w.data.reshape(o, c * kh * kw)
    out = np.matmul(w_flat, cols).reshape(b, o, ho, wo)
    x_shape = x.shape

    def bwd(g):
        g_flat = g.reshape(b, o, ho * wo)
        grad_w = np.matmul(g_flat, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
        grad_cols = np.matmul(w_flat.T, g_flat)
        grad_x = _col2im(grad_cols, x_shape, kh, kw, stride, padding)
        return grad_x, grad_w.astype(_f32, copy=False)

    return _emit((x, w), np.ascontiguousarray(out), bwd)


# -- reductions ---------------------------------------------------------

def _norm_axes(axes, ndim: int) -> tuple[int, ...]:
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    axes = tuple(int(a) for a in axes)
    norm = []
    for a in axes:
        if not -ndim <= a < ndim:
            raise ShapeError(f"axis {a} out of range for ndim {ndim}")
        norm.append(a % ndim)
    if len(set(norm)) != len(norm):
        raise ShapeError(f"duplicate axes {axes}")
    return tuple(sorted(norm))


def _kept_shape(shape, axes) -> tuple[int, ...]:
    return tuple(1 if i in axes else n for i, n in enumerate(shape))


def sum_(a, axes=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    axes = _norm_axes(axes, a.ndim)
    out = a.data.sum(axis=axes or None, keepdims=keepdims)
    src_shape, kept = a.shape, _kept_shape(a.shape, axes)

    def bwd(g):
        return (np.broadcast_to(g.reshape(kept), src_shape).astype(_f32),)

    return _emit((a,), np.asarray(out, dtype=_f32), bwd)


def mean(a, axes=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    axes = _norm_axes(axes, a.ndim)
    count = 1
    for ax in axes:
        count *= a.shape[ax]
    if count == 0:
        raise ContractError("mean over an empty slice")
    out = a.data.mean(axis=axes or None, keepdims=keepdims)
    src_shape, kept = a.shape, _kept_shape(a.shape, axes)
    inv = _f32(1.0 / count)

    def bwd(g):
        return (np.broadcast_to((g * inv).reshape(kept), src_shape).astype(_f32),)

    return _emit((a,), np.asarray(out, dtype=_f32), bwd)


def max_(a, axes=None, keepdims: bool = False) -> Tensor:
    """Reduce by maximum; under ties the gradient goes to the first index."""
    a = _as_tensor(a)
    axes = _norm_axes(axes, a.ndim)
    for ax in axes:
        if a.shape[ax] == 0:
            raise ContractError("max over an empty slice")
    out = a.data.max(axis=axes or None, keepdims=keepdims)

    other = tuple(i for i in range(a.ndim) if i not in axes)
    perm = other + axes
    red = 1
    for ax in axes:
        red *= a.shape[ax]
    moved = a.data.transpose(perm).reshape(-1, red)
    winners = moved.argmax(axis=1)
    src_shape, kept = a.shape, _kept_shape(a.shape, axes)
    inv_perm = tuple(np.argsort(perm))
    perm_shape = tuple(a.shape[i] for i in perm)

    def bwd(g):
        flat = np.zeros(moved.shape, dtype=_f32)
        flat[np.arange(flat.shape[0]), winners] = g.reshape(kept).transpose(perm).reshape(-1)
        return (flat.reshape(perm_shape).transpose(inv_perm),)

    return _emit((a,), np.asarray(out, dtype=_f32), bwd)


# -- backward engine ----------------------------------------------------

def _flows(loss: Tensor) -> dict[int, np.ndarray]:
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    flows = {id(loss): np.ones_like(loss.data)}
    tape = loss._tape
    if tape is None:
        return flows
    for rec in reversed(tape._records):
        g = flows.get(id(rec.output))
        if g is None:
            continue
        grads = rec.backward_fn(g)
        for t, gi in zip(rec.inputs, grads):
            if gi is None or not t.requires_grad:
                continue
            slot = flows.get(id(t))
            flows[id(t)] = gi.astype(_f32, copy=False) if slot is None else slot + gi
    return flows


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/dx into ``grad`` of every reachable tensor.

    Calling twice doubles the accumulated gradients; use ``zero_grad``
    between optimization steps.
    """
    flows = _flows(loss)
    tape = loss._tape
    targets: dict[int, Tensor] = {id(loss): loss}
    if tape is not None:
        for rec in tape._records:
            targets[id(rec.output)] = rec.output
            for t in rec.inputs:
                targets[id(t)] = t
    for tid, g in flows.items():
        t = targets.get(tid)
        if t is None or not t.requires_grad:
            continue
        t.grad = g.copy() if t.grad is None else t.grad + g


def grad(loss: Tensor, wrt: Sequence[Tensor]) -> list[np.ndarray]:
    """Gradients of a scalar loss w.r.t. ``wrt`` without touching ``.grad``."""
    flows = _flows(loss)
    return [flows.get(id(t), np.zeros_like(t.data)) for t in wrt]


def detach(a: Tensor) -> Tensor:
    return a.detach()
