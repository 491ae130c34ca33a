"""Minimal reverse-mode automatic differentiation over dense numpy arrays.

Every differentiable operation in the summarizer is built from the small set
of primitives below. Each primitive computes its output eagerly, checks it for
non-finite values, and records a closure that maps the output gradient back
onto its inputs. ``backward`` walks the recorded nodes in reverse creation
order, which is a valid topological order because a node is always created
after its inputs.

Broadcasting follows numpy's right-aligned rules (a bias vector over batch
rows, or a singleton axis over positions); the backward pass sums the
gradient over every expanded axis.
"""
from __future__ import annotations

import contextlib
import itertools
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32

_counter = itertools.count()
_grad_enabled = True


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


@contextlib.contextmanager
def no_grad():
    """Evaluate primitives without recording a graph (decoding, validation)."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "op", "_parents", "_backward", "_id", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str = ""):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        if arr.ndim > 0 and 0 in arr.shape:
            raise ShapeError(f"tensor dimensions must be positive, got {arr.shape}")
        if not np.isfinite(arr).all():
            raise NonFiniteError(f"non-finite value in tensor {name or '<leaf>'}")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self._id = next(_counter)
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_not_scalar(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _raise_not_scalar(t: Tensor):
    raise ShapeError(f"expected a scalar tensor, got shape {t.shape}")


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(x, dtype=dtype)


def _all_finite(data: np.ndarray) -> bool:
    # direct ufunc reduce skips ndarray.all's Python wrapper, which dominates on tiny arrays
    return bool(np.logical_and.reduce(np.isfinite(data), axis=None))


def _node(op: str, data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    if not _all_finite(data):
        raise NonFiniteError(f"{op}: non-finite output (input shapes {[p.shape for p in parents]})")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = ""
    out._id = next(_counter)
    out.op = op
    track = _grad_enabled and any(p.requires_grad for p in parents)
    out.requires_grad = track
    out._parents = tuple(parents) if track else ()
    out._backward = backward if track else None
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    g = g.astype(t.dtype, copy=False)
    if t.grad is None:
        t.grad = g.copy()
    else:
        t.grad = t.grad + g


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape("add", a, b)

    def bw(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    return _node("add", a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape("sub", a, b)

    def bw(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(-g, b.shape))

    return _node("sub", a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape("mul", a, b)

    def bw(g):
        _accumulate(a, _unbroadcast(g * b.data, a.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.shape))

    return _node("mul", a.data * b.data, (a, b), bw)


def minimum(a, b) -> Tensor:
    """Elementwise min; ties send the gradient to the first argument."""
    a, b = _pair(a, b)
    _broadcast_shape("minimum", a, b)
    take_a = a.data <= b.data

    def bw(g):
        _accumulate(a, _unbroadcast(g * take_a, a.shape))
        _accumulate(b, _unbroadcast(g * ~take_a, b.shape))

    return _node("minimum", np.where(take_a, a.data, b.data), (a, b), bw)


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)

    def bw(g):
        _accumulate(x, g * (1.0 - y * y))

    return _node("tanh", y, (x,), bw)


def sigmoid(x: Tensor) -> Tensor:
    # split by sign so exp never overflows
    d = x.data
    e = np.exp(-np.abs(d))
    y = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(d.dtype, copy=False)

    def bw(g):
        _accumulate(x, g * y * (1.0 - y))

    return _node("sigmoid", y, (x,), bw)


def log(x: Tensor) -> Tensor:
    if (x.data <= 0).any():
        raise NonFiniteError(f"log: non-positive input (min {x.data.min()})")
    y = np.log(x.data)

    def bw(g):
        _accumulate(x, g / x.data)

    return _node("log", y, (x,), bw)


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; gradient flows only where the input is inside the range."""
    inside = (x.data >= lo) & (x.data <= hi)

    def bw(g):
        _accumulate(x, g * inside)

    return _node("clip", np.clip(x.data, lo, hi), (x,), bw)


def astype(x: Tensor, dtype) -> Tensor:
    def bw(g):
        _accumulate(x, g)

    return _node("astype", x.data.astype(dtype), (x,), bw)


# ------------------------------------------------------------------ reductions

def sum(x: Tensor, axis: int | None = None) -> Tensor:  # noqa: A001
    y = np.asarray(x.data.sum(axis=axis))

    def bw(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        _accumulate(x, np.broadcast_to(g, x.shape))

    return _node("sum", y, (x,), bw)


def mean(x: Tensor, axis: int | None = None) -> Tensor:
    n = x.size if axis is None else x.shape[axis]
    return mul(sum(x, axis), 1.0 / n)


# --------------------------------------------------------------- linear algebra

def matmul(a, b) -> Tensor:
    """``a @ b`` for a (…, k) activation and a (k, m) weight, or two batched 3-D operands."""
    a, b = _pair(a, b)
    if b.data.ndim not in (2, 3) or a.data.ndim not in (2, 3) or a.shape[-1] != b.shape[-2] \
            or (b.data.ndim == 3 and (a.data.ndim != 3 or a.shape[0] != b.shape[0])):
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    y = a.data @ b.data

    def bw(g):
        _accumulate(a, g @ np.swapaxes(b.data, -1, -2))
        if b.data.ndim == 2 and a.data.ndim == 3:
            k, m = b.shape
            _accumulate(b, a.data.reshape(-1, k).T @ g.reshape(-1, m))
        else:
            _accumulate(b, np.swapaxes(a.data, -1, -2) @ g)

    return _node("matmul", y, (a, b), bw)


def softmax(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis. Masked-out entries (mask == 0) get probability 0."""
    d = x.data
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != d.shape:
            raise ShapeError(f"softmax: mask shape {mask.shape} != input shape {d.shape}")
        if not mask.any(axis=-1).all():
            raise ShapeError("softmax: a row is fully masked")
        shifted = np.where(mask, d, -np.inf)
        m = shifted.max(axis=-1, keepdims=True)
        e = np.where(mask, np.exp(np.where(mask, d - m, 0.0)), 0.0)
    else:
        e = np.exp(d - d.max(axis=-1, keepdims=True))
    y = (e / e.sum(axis=-1, keepdims=True)).astype(d.dtype, copy=False)

    def bw(g):
        _accumulate(x, y * (g - (g * y).sum(axis=-1, keepdims=True)))

    return _node("softmax", y, (x,), bw)


def lstm_gates(z: Tensor, c: Tensor, h: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Fused LSTM state update from pre-activations ``z`` = [i, f, g, o] (B, 4H).

    Returns [h_new, c_new] concatenated on the last axis (B, 2H). Rows whose
    ``mask`` entry is 0 carry ``h`` and ``c`` through unchanged.
    """
    H = c.shape[-1]
    if z.shape[-1] != 4 * H or h.shape != c.shape or z.shape[:-1] != c.shape[:-1]:
        raise ShapeError(f"lstm_gates: shapes z={z.shape} c={c.shape} h={h.shape}")
    zd = z.data
    sig = lambda v: 0.5 * (np.tanh(0.5 * v) + 1.0)  # noqa: E731
    i, f, o = sig(zd[:, :H]), sig(zd[:, H:2 * H]), sig(zd[:, 3 * H:])
    g = np.tanh(zd[:, 2 * H:3 * H])
    c_new = f * c.data + i * g
    tc = np.tanh(c_new)
    h_new = o * tc
    m = None if mask is None else np.asarray(mask, dtype=zd.dtype).reshape(-1, 1)
    if m is not None:
        h_new = m * h_new + (1 - m) * h.data
        c_new = m * c_new + (1 - m) * c.data

    def bw(grad):
        gh, gc = grad[:, :H], grad[:, H:]
        if m is not None:
            gh_carry, gc_carry = gh * (1 - m), gc * (1 - m)
            gh, gc = gh * m, gc * m
        dc = gc + gh * o * (1 - tc * tc)
        dz = np.concatenate([dc * g * i * (1 - i), dc * c.data * f * (1 - f),
                             dc * i * (1 - g * g), gh * tc * o * (1 - o)], axis=-1)
        dc_prev = dc * f
        dh_prev = None
        if m is not None:
            dc_prev = dc_prev + gc_carry
            dh_prev = gh_carry
        _accumulate(z, dz)
        _accumulate(c, dc_prev)
        if dh_prev is not None:
            _accumulate(h, dh_prev)

    out = np.concatenate([h_new, c_new], axis=-1).astype(zd.dtype, copy=False)
    return _node("lstm_gates", out, (z, c, h), bw)


# ---------------------------------------------------------------- structural

def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    xs = [as_tensor(x, xs[0] if isinstance(xs[0], Tensor) else None) for x in xs]
    try:
        y = np.concatenate([x.data for x in xs], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: incompatible shapes {[x.shape for x in xs]} on axis {axis}") from None
    bounds = np.cumsum([x.shape[axis] for x in xs])[:-1]

    def bw(g):
        for x, part in zip(xs, np.split(g, bounds, axis=axis)):
            _accumulate(x, part)

    return _node("concat", y, xs, bw)


def stack(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    try:
        y = np.stack([x.data for x in xs], axis=axis)
    except ValueError:
        raise ShapeError(f"stack: incompatible shapes {[x.shape for x in xs]}") from None

    def bw(g):
        for i, x in enumerate(xs):
            _accumulate(x, np.take(g, i, axis=axis))

    return _node("stack", y, xs, bw)


def split(x: Tensor, parts: int) -> list[Tensor]:
    """Split the last axis into ``parts`` equal slices (LSTM gates)."""
    width = x.shape[-1]
    if width % parts:
        raise ShapeError(f"split: last axis {width} not divisible by {parts}")
    k = width // parts
    return [slice_last(x, i * k, (i + 1) * k) for i in range(parts)]


def slice_last(x: Tensor, start: int, stop: int) -> Tensor:
    def bw(g):
        full = np.zeros_like(x.data)
        full[..., start:stop] = g
        _accumulate(x, full)

    return _node("slice", x.data[..., start:stop], (x,), bw)


def select(x: Tensor, axis: int, index: int) -> Tensor:
    """``x`` indexed at ``index`` along ``axis`` (the axis is dropped)."""
    def bw(g):
        full = np.zeros_like(x.data)
        idx = [slice(None)] * x.data.ndim
        idx[axis] = index
        full[tuple(idx)] = g
        _accumulate(x, full)

    return _node("select", np.take(x.data, index, axis=axis), (x,), bw)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    try:
        y = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {x.shape} to {shape}") from None

    def bw(g):
        _accumulate(x, g.reshape(x.shape))

    return _node("reshape", y, (x,), bw)


def take_rows(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup ``table[ids]``; the gradient scatter-adds back into the rows."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(f"take_rows: id out of range [0, {table.shape[0]})")

    def bw(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        _accumulate(table, full)

    return _node("take_rows", table.data[ids], (table,), bw)


def pick(x: Tensor, idx: np.ndarray) -> Tensor:
    """``x[b, idx[b]]`` for a (B, K) input; returns shape (B,)."""
    idx = np.asarray(idx, dtype=np.int64)
    rows = np.arange(x.shape[0])
    if idx.shape != (x.shape[0],) or idx.min() < 0 or idx.max() >= x.shape[1]:
        raise ShapeError(f"pick: indices {idx.shape} invalid for shape {x.shape}")

    def bw(g):
        full = np.zeros_like(x.data)
        full[rows, idx] = g
        _accumulate(x, full)

    return _node("pick", x.data[rows, idx], (x,), bw)


def scatter_add(x: Tensor, idx: np.ndarray, width: int) -> Tensor:
    """Sum ``x[b, i]`` into column ``idx[b, i]`` of a (B, width) output."""
    idx = np.asarray(idx, dtype=np.int64)
    if idx.shape != x.shape or x.data.ndim != 2:
        raise ShapeError(f"scatter_add: index shape {idx.shape} != input shape {x.shape}")
    if idx.min() < 0 or idx.max() >= width:
        raise ShapeError(f"scatter_add: index out of range [0, {width})")
    rows = np.broadcast_to(np.arange(x.shape[0])[:, None], idx.shape)
    y = np.zeros((x.shape[0], width), dtype=x.dtype)
    np.add.at(y, (rows, idx), x.data)

    def bw(g):
        _accumulate(x, g[rows, idx])

    return _node("scatter_add", y, (x,), bw)


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, as_tensor(b, a)
    b = as_tensor(b)
    return as_tensor(a, b), b


PRIMITIVES: dict[str, Callable[..., Tensor]] = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "minimum": minimum,
    "tanh": tanh,
    "lstm_gates": lstm_gates,
    "sigmoid": sigmoid,
    "log": log,
    "clip": clip,
    "sum": sum,
    "mean": mean,
    "matmul": matmul,
    "softmax": softmax,
    "concat": concat,
    "stack": stack,
    "reshape": reshape,
    "select": select,
    "take_rows": take_rows,
    "pick": pick,
    "scatter_add": scatter_add,
    "slice": slice_last,
    "astype": astype,
}


def primitive(op_kind: str, *inputs, **kwargs) -> Tensor:
    try:
        fn = PRIMITIVES[op_kind]
    except KeyError:
        raise ValueError(f"unknown primitive {op_kind!r}") from None
    return fn(*inputs, **kwargs)


# ------------------------------------------------------------------- backward

def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every leaf with ``requires_grad`` reachable from ``loss``.

    Gradients of reached leaves are overwritten, not accumulated across calls.
    The graph is consumed: interior closures are dropped afterwards.
    """
    if loss.size != 1:
        raise ShapeError(f"backward: loss must be a scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("backward: loss is not connected to any tensor that requires grad")

    nodes: dict[int, Tensor] = {}
    stack_ = [loss]
    while stack_:
        t = stack_.pop()
        if t._id in nodes:
            continue
        nodes[t._id] = t
        stack_.extend(p for p in t._parents if p.requires_grad)

    ordered = sorted(nodes.values(), key=lambda t: t._id, reverse=True)
    for t in ordered:
        t.grad = None
    loss.grad = np.ones_like(loss.data)
    for t in ordered:
        if t._backward is not None and t.grad is not None:
            t._backward(t.grad)
    for t in ordered:
        if t._parents:
            t._backward = None
            t._parents = ()
            t.grad = None


# ------------------------------------------------------------- gradient check

def grad_check(f: Callable[..., Tensor], point: Sequence[np.ndarray], step: float = 1e-4) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` maps input tensors to a scalar tensor. Everything is evaluated in
    float64; the error per coordinate is ``|analytic - numeric| / max(1, |numeric|)``.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    arrays = [np.array(p, dtype=np.float64) for p in point]
    inputs = [Tensor(a, requires_grad=True, dtype=np.float64) for a in arrays]
    out = f(*inputs)
    if out.requires_grad:
        backward(out)
    analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in inputs]

    def value(vals):
        with no_grad():
            return float(f(*[Tensor(v, dtype=np.float64) for v in vals]).data.reshape(-1)[0])

    worst = 0.0
    for k, a in enumerate(arrays):
        flat = a.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = value(arrays)
            flat[i] = orig - step
            lo = value(arrays)
            flat[i] = orig
            numeric = (hi - lo) / (2 * step)
            err = abs(analytic[k].reshape(-1)[i] - numeric) / max(1.0, abs(numeric))
            worst = max(worst, err)
    return worst


# -------------------------------------------------------------------- adagrad

@dataclass
class AdagradState:
    learning_rate: float = 0.15
    epsilon: float = 1e-10
    initial_accumulator: float = 0.1
    accumulators: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.learning_rate <= 0 or self.epsilon <= 0 or self.initial_accumulator < 0:
            raise ValueError("Adagrad needs learning_rate > 0, epsilon > 0, initial_accumulator >= 0")


def adagrad_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdagradState) -> None:
    """In-place update: ``acc += g**2; theta -= lr * g / (sqrt(acc) + eps)``."""
    for name, theta in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != theta.shape:
            raise ShapeError(f"adagrad: grad shape {g.shape} != param shape {theta.shape} for {name}")
        acc = state.accumulators.get(name)
        if acc is None:
            acc = np.full(theta.shape, state.initial_accumulator, dtype=np.float64)
            state.accumulators[name] = acc
        g64 = g.astype(np.float64)
        acc += g64 * g64
        theta -= (state.learning_rate * g64 / (np.sqrt(acc) + state.epsilon)).astype(theta.dtype)


def clip_by_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale ``grads`` in place so their joint L2 norm is at most ``max_norm``; returns the pre-clip norm."""
    total = float(np.sqrt(np.sum([np.sum(g.astype(np.float64) ** 2) for g in grads.values()])))
    if total > max_norm > 0:
        scale = max_norm / total
        for name in grads:
            grads[name] = grads[name] * scale
    return total
