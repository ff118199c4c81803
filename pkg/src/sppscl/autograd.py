"""Dense tensors with tape-based reverse-mode differentiation.

Only straight-line programs are supported: every primitive applied inside an
active :class:`Tape` appends one node, and :func:`backward` walks the nodes in
reverse. Outside a tape nothing is recorded, which is how inference runs.
"""
from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32


class ShapeError(ValueError):
    """Raised when a primitive receives operands of incompatible shapes."""


class NonFiniteError(FloatingPointError):
    """Raised in debug mode when a primitive produces NaN or Inf."""


class TapeError(RuntimeError):
    pass


_state = threading.local()
_debug = False


def set_debug(flag: bool) -> None:
    """Toggle finite-value checking on every primitive output."""
    global _debug
    _debug = bool(flag)


def _tape_stack() -> list:
    stack = getattr(_state, "stack", None)
    if stack is None:
        stack = _state.stack = []
    return stack


def active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple:
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

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item(self)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


def _raise_item(t: Tensor):
    raise ShapeError(f"item() needs a single-element tensor, got shape {t.shape}")


class _Node:
    __slots__ = ("op", "out", "inputs", "backward_fn")

    def __init__(self, op, out, inputs, backward_fn):
        self.op = op
        self.out = out
        self.inputs = inputs
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of primitive applications.

    Use as a context manager; primitives executed inside it are recorded.
    A tape supports exactly one :meth:`backward` call.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()
        else:  # pragma: no cover - misuse
            raise TapeError("tape stack corrupted")

    def __len__(self) -> int:
        return len(self.nodes)

    def backward(self, loss: Tensor) -> dict:
        return backward(self, loss)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    if dtype is None:
        arr = np.asarray(x)
        dtype = arr.dtype if arr.dtype in (np.float32, np.float64) else DEFAULT_DTYPE
    return Tensor(np.asarray(x, dtype=dtype), dtype=dtype)


def _record(op: str, out_data: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    if _debug and not np.all(np.isfinite(out_data)):
        raise NonFiniteError(f"{op}: non-finite output")
    out = Tensor(out_data, dtype=out_data.dtype)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.nodes.append(_Node(op, out, tuple(inputs), backward_fn))
    return out


def _check_inputs(op: str, *tensors: Tensor) -> None:
    if _debug:
        for t in tensors:
            if not np.all(np.isfinite(t.data)):
                raise NonFiniteError(f"{op}: non-finite input of shape {t.shape}")


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


def _binary_operands(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, as_tensor(b, like=a)
    b = as_tensor(b)
    return as_tensor(a, like=b), b


def backward(tape: Tape, loss: Tensor) -> dict:
    """Populate ``.grad`` on every requires-grad leaf reachable from ``loss``.

    Returns a mapping from leaf tensor to its gradient for this pass.
    """
    if tape.consumed:
        raise TapeError("backward already called on this tape; record a new one")
    if loss.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not tape.nodes or tape.nodes[-1].out is not loss:
        raise TapeError("backward: loss must be the final node recorded on the tape")
    tape.consumed = True

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    produced = {id(n.out) for n in tape.nodes}
    leaves: dict[int, Tensor] = {}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        in_grads = node.backward_fn(g)
        for t, tg in zip(node.inputs, in_grads):
            if tg is None or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + tg
            else:
                grads[key] = tg
            if key not in produced:
                leaves[key] = t
    result = {}
    for key, t in leaves.items():
        g = grads[key].astype(t.dtype, copy=False)
        t.grad = g if t.grad is None else t.grad + g
        result[t] = g
    tape.nodes.clear()
    return result


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    _broadcast_shape("add", a, b)
    _check_inputs("add", a, b)
    sa, sb = a.shape, b.shape
    return _record("add", a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    _broadcast_shape("sub", a, b)
    _check_inputs("sub", a, b)
    sa, sb = a.shape, b.shape
    return _record("sub", a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    _broadcast_shape("mul", a, b)
    _check_inputs("mul", a, b)
    ad, bd = a.data, b.data
    return _record("mul", ad * bd, (a, b),
                   lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a, b) -> Tensor:
    """Division by a scalar (Python number or single-element constant)."""
    if isinstance(b, Tensor):
        if b.size != 1:
            raise ShapeError(f"div: divisor must be scalar, got shape {b.shape}")
        if b.requires_grad:
            raise ShapeError("div: divisor must be a constant")
        b = float(b.data.reshape(-1)[0])
    a = as_tensor(a)
    _check_inputs("div", a)
    scale = 1.0 / float(b)
    return _record("div", a.data * a.data.dtype.type(scale), (a,),
                   lambda g: (g * scale,))


def exp(x: Tensor) -> Tensor:
    _check_inputs("exp", x)
    y = np.exp(x.data)
    return _record("exp", y, (x,), lambda g: (g * y,))


def log(x: Tensor) -> Tensor:
    _check_inputs("log", x)
    xd = x.data
    return _record("log", np.log(xd), (x,), lambda g: (g / xd,))


def sigmoid(x: Tensor) -> Tensor:
    _check_inputs("sigmoid", x)
    xd = x.data
    y = np.empty_like(xd)
    pos = xd >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-xd[pos]))
    ex = np.exp(xd[~pos])
    y[~pos] = ex / (1.0 + ex)
    return _record("sigmoid", y, (x,), lambda g: (g * y * (1.0 - y),))


def tanh(x: Tensor) -> Tensor:
    _check_inputs("tanh", x)
    y = np.tanh(x.data)
    return _record("tanh", y, (x,), lambda g: (g * (1.0 - y * y),))


def relu(x: Tensor) -> Tensor:
    _check_inputs("relu", x)
    mask = x.data > 0
    return _record("relu", np.where(mask, x.data, 0).astype(x.dtype), (x,),
                   lambda g: (g * mask,))


# ---------------------------------------------------------------- linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _binary_operands(a, b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    _check_inputs("matmul", a, b)
    ad, bd = a.data, b.data

    def bw(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _record("matmul", ad @ bd, (a, b), bw)


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        if x.ndim < 2:
            raise ShapeError(f"transpose: need at least 2 dims, got shape {x.shape}")
        axes = tuple(range(x.ndim - 2)) + (x.ndim - 1, x.ndim - 2)
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError(f"transpose: axes {axes} invalid for shape {x.shape}")
    inv = tuple(np.argsort(axes))
    return _record("transpose", np.transpose(x.data, axes), (x,),
                   lambda g: (np.transpose(g, inv),))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    src = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {src} into {tuple(shape)}") from None
    return _record("reshape", out, (x,), lambda g: (g.reshape(src),))


def take(x: Tensor, index, axis: int) -> Tensor:
    """Select a single position along ``axis`` (the axis is removed)."""
    src = x.shape
    axis = axis % x.ndim

    def bw(g):
        full = np.zeros(src, dtype=g.dtype)
        sl = [slice(None)] * len(src)
        sl[axis] = index
        full[tuple(sl)] = g
        return (full,)

    return _record("take", np.take(x.data, index, axis=axis), (x,), bw)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat: need at least one tensor")
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(
                i != ax and p != q for i, (p, q) in enumerate(zip(ref, t.shape))):
            raise ShapeError(f"concat: shapes {ref} and {t.shape} disagree off axis {axis}")
    _check_inputs("concat", *tensors)
    sizes = [t.shape[ax] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _record("concat", np.concatenate([t.data for t in tensors], axis=ax), tensors, bw)


# ---------------------------------------------------------------- reductions

def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    src = x.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return _record("sum", np.asarray(x.data.sum(axis=axis, keepdims=keepdims), dtype=x.dtype),
                   (x,), bw)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    src = x.shape
    if axis is None:
        count = x.size
    else:
        axes = (axis,) if np.isscalar(axis) else tuple(axis)
        count = int(np.prod([src[a] for a in axes]))
    if count == 0:
        raise ShapeError(f"mean: empty reduction over shape {src}")

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, src).copy(),)

    return _record("mean", np.asarray(x.data.mean(axis=axis, keepdims=keepdims), dtype=x.dtype),
                   (x,), bw)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if x.shape[axis] < 1:
        raise ShapeError(f"softmax: axis {axis} of shape {x.shape} is empty")
    _check_inputs("softmax", x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _record("softmax", y, (x,), bw)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    if x.shape[axis] < 1:
        raise ShapeError(f"log_softmax: axis {axis} of shape {x.shape} is empty")
    _check_inputs("log_softmax", x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse
    p = np.exp(y)

    def bw(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return _record("log_softmax", y, (x,), bw)


NORM_EPS = 1e-12


def l2_normalize(x: Tensor, axis: int = -1) -> Tensor:
    """Unit-normalize slices along ``axis``; slices with norm < 1e-12 map to 0."""
    _check_inputs("l2_normalize", x)
    xd = x.data
    norm = np.sqrt((xd * xd).sum(axis=axis, keepdims=True))
    ok = norm >= NORM_EPS
    safe = np.where(ok, norm, 1.0)
    y = np.where(ok, xd / safe, 0.0).astype(x.dtype)

    def bw(g):
        gx = (g - y * (g * y).sum(axis=axis, keepdims=True)) / safe
        return (np.where(ok, gx, 0.0).astype(g.dtype),)

    return _record("l2_normalize", y, (x,), bw)


# ---------------------------------------------------------------- layers

def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map ``x @ weight.T + bias`` over the last axis."""
    if x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"linear: input {x.shape} does not match weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(f"linear: bias {bias.shape} does not match weight {weight.shape}")
    inputs = (x, weight) if bias is None else (x, weight, bias)
    _check_inputs("linear", *inputs)
    xd, wd = x.data, weight.data
    out = xd @ wd.T
    if bias is not None:
        out = out + bias.data

    def bw(g):
        gx = g @ wd
        g2 = g.reshape(-1, g.shape[-1])
        gw = g2.T @ xd.reshape(-1, xd.shape[-1])
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return _record("linear", out, inputs, bw)


def conv1x1(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Pointwise convolution of ``x`` (B, C_in, H, W) with ``weight`` (C_out, C_in)."""
    if x.ndim != 4 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"conv1x1: input {x.shape} does not match weight {weight.shape}")
    inputs = (x, weight) if bias is None else (x, weight, bias)
    _check_inputs("conv1x1", *inputs)
    xd, wd = x.data, weight.data
    out = np.einsum("oc,bchw->bohw", wd, xd, optimize=True)
    if bias is not None:
        out = out + bias.data[None, :, None, None]

    def bw(g):
        gx = np.einsum("oc,bohw->bchw", wd, g, optimize=True)
        gw = np.einsum("bohw,bchw->oc", g, xd, optimize=True)
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    return _record("conv1x1", out.astype(xd.dtype, copy=False), inputs, bw)


def adaptive_avg_pool1x1(x: Tensor) -> Tensor:
    """(B, C, H, W) -> (B, C) by averaging every spatial position."""
    if x.ndim != 4 or x.shape[2] < 1 or x.shape[3] < 1:
        raise ShapeError(f"adaptive_avg_pool1x1: expected (B, C, H, W) with H, W >= 1, got {x.shape}")
    return mean(x, axis=(2, 3))


def dropout(x: Tensor, p: float, train: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout; the identity when ``train`` is off or ``p`` is 0."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout: rate must be in [0, 1), got {p}")
    if not train or p == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout: a random generator is required in train mode")
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / x.dtype.type(1.0 - p)
    return _record("dropout", x.data * keep, (x,), lambda g: (g * keep,))


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
               running_var: np.ndarray, train: bool, momentum: float = 0.1,
               eps: float = 1e-5) -> Tensor:
    """Batch normalization over every axis except 1 (channels).

    In train mode the running statistics are updated in place using the
    unbiased batch variance; eval mode is a fixed affine map.
    """
    c = x.shape[1] if x.ndim >= 2 else -1
    if x.ndim < 2 or gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batch_norm: input {x.shape} vs gamma {gamma.shape} / beta {beta.shape}")
    _check_inputs("batch_norm", x, gamma, beta)
    axes = (0,) + tuple(range(2, x.ndim))
    bshape = (1, c) + (1,) * (x.ndim - 2)
    xd = x.data
    if train:
        n = xd.size // c
        mu = xd.mean(axis=axes)
        var = xd.var(axis=axes)
        running_mean *= (1.0 - momentum)
        running_mean += momentum * mu
        running_var *= (1.0 - momentum)
        running_var += momentum * var * (n / max(n - 1, 1))
    else:
        mu = running_mean.astype(xd.dtype)
        var = running_var.astype(xd.dtype)
    inv_std = (1.0 / np.sqrt(var + eps)).astype(xd.dtype)
    xhat = (xd - mu.reshape(bshape)) * inv_std.reshape(bshape)
    out = xhat * gamma.data.reshape(bshape) + beta.data.reshape(bshape)
    gd = gamma.data

    def bw(g):
        ggamma = (g * xhat).sum(axis=axes)
        gbeta = g.sum(axis=axes)
        gxhat = g * gd.reshape(bshape)
        if train:
            m = xd.size // c
            gx = (inv_std.reshape(bshape) / m) * (
                m * gxhat - gxhat.sum(axis=axes, keepdims=True)
                - xhat * (gxhat * xhat).sum(axis=axes, keepdims=True))
        else:
            gx = gxhat * inv_std.reshape(bshape)
        return gx, ggamma, gbeta

    return _record("batch_norm", out.astype(xd.dtype, copy=False), (x, gamma, beta), bw)


def lstm(x: Tensor, w_ih: Tensor, w_hh: Tensor, b_ih: Tensor, b_hh: Tensor) -> Tensor:
    """Single-layer LSTM over ``x`` (B, N, F) from zero state; returns h_N (B, H).

    Gate order in the stacked weights is input, forget, cell, output.
    """
    if x.ndim != 3:
        raise ShapeError(f"lstm: expected (B, N, F) input, got {x.shape}")
    hidden = w_hh.shape[1]
    if w_ih.shape != (4 * hidden, x.shape[2]) or w_hh.shape != (4 * hidden, hidden):
        raise ShapeError(f"lstm: input {x.shape} vs w_ih {w_ih.shape} / w_hh {w_hh.shape}")
    b = x.shape[0]
    h = Tensor(np.zeros((b, hidden), dtype=x.dtype))
    c = Tensor(np.zeros((b, hidden), dtype=x.dtype))
    # input projection for all steps at once
    xw = linear(x, w_ih, b_ih)
    for t in range(x.shape[1]):
        gates = add(take(xw, t, axis=1), linear(h, w_hh, b_hh))
        i = sigmoid(_slice_last(gates, 0, hidden))
        f = sigmoid(_slice_last(gates, hidden, 2 * hidden))
        g = tanh(_slice_last(gates, 2 * hidden, 3 * hidden))
        o = sigmoid(_slice_last(gates, 3 * hidden, 4 * hidden))
        c = add(mul(f, c), mul(i, g))
        h = mul(o, tanh(c))
    return h


def _slice_last(x: Tensor, start: int, stop: int) -> Tensor:
    src = x.shape

    def bw(g):
        full = np.zeros(src, dtype=g.dtype)
        full[..., start:stop] = g
        return (full,)

    return _record("slice", x.data[..., start:stop], (x,), bw)


def parameters_of(tensors: Iterable[Tensor]) -> list[Tensor]:
    return [t for t in tensors if t.requires_grad]
