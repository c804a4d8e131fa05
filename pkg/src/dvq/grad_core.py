"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

Every differentiable operation appends one entry to the active :class:`Tape`.
Because an entry can only be recorded after its inputs exist, the tape is in
topological order by construction and backward is a single reverse sweep.

Shapes follow a "last axis" convention: vector primitives act on the trailing
axis and treat any leading axes as a batch, so the same code serves a single
representation ``h`` of shape ``(m,)`` and a minibatch of shape ``(B, m)``.
There is no implicit broadcasting; elementwise operands must match exactly.

Two context managers alter recording:

* :func:`no_grad` disables recording entirely (evaluation passes).
* :func:`frozen_stops` records the values produced by stop-gradient and
  straight-through nodes on a first pass and replays them on later passes.
  Finite differences of a replayed function differentiate exactly the
  surrogate that backward differentiates, which makes gradient checks of
  straight-through pipelines meaningful.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Value", "Tape", "ShapeError", "NonFiniteError", "current_tape", "no_grad", "frozen_stops",
    "add", "sub", "mul", "scale", "matvec", "affine", "relu", "softmax",
    "log_softmax", "log", "exp", "sq_l2", "concat", "split", "reshape",
    "mean", "sum_last", "take_rows", "mix", "cross_entropy",
    "stop_gradient", "straight_through", "backward", "zero_grad",
    "grad_check", "grad_check_params", "numeric_grad",
]


class ShapeError(ValueError):
    """Raised when operand shapes do not conform to a primitive."""


class NonFiniteError(ValueError):
    """Raised when an operation that requires finite inputs receives NaN or inf."""


_state = threading.local()


def _stack() -> list:
    if not hasattr(_state, "tapes"):
        _state.tapes = []
        _state.default = Tape()
        _state.recording = True
        _state.freeze = None
    return _state.tapes


def current_tape() -> "Tape":
    """Innermost tape entered on this thread, or the thread's default tape."""
    stack = _stack()
    return stack[-1] if stack else _state.default


@contextlib.contextmanager
def no_grad():
    _stack()
    prev = _state.recording
    _state.recording = False
    try:
        yield
    finally:
        _state.recording = prev


class _Freezer:
    def __init__(self):
        self.values: list[np.ndarray] = []
        self.replaying = False
        self.cursor = 0

    def replay(self):
        """Switch to replay mode; each subsequent pass restarts at the first value."""
        self.replaying = True
        self.cursor = 0

    def take(self) -> np.ndarray:
        if self.cursor >= len(self.values):
            raise RuntimeError("replayed graph has more stop nodes than the recorded one")
        v = self.values[self.cursor]
        self.cursor += 1
        return v


@contextlib.contextmanager
def frozen_stops():
    """Record stop-gradient outputs, then call ``.replay()`` to freeze them."""
    _stack()
    prev = _state.freeze
    fr = _Freezer()
    _state.freeze = fr
    try:
        yield fr
    finally:
        _state.freeze = prev


class Value:
    """A float64 array with an optional gradient accumulator."""

    __slots__ = ("data", "_grad", "requires_grad", "_tape", "_node", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self._grad = None
        self.requires_grad = requires_grad
        self._tape = None
        self._node = -1
        self.name = name

    @property
    def grad(self) -> np.ndarray:
        if self._grad is None:
            self._grad = np.zeros_like(self.data)
        return self._grad

    @grad.setter
    def grad(self, value):
        value = np.asarray(value, dtype=np.float64)
        if value.shape != self.data.shape:
            raise ShapeError(f"grad shape {value.shape} != data shape {self.data.shape}")
        self._grad = value

    @property
    def node_id(self) -> int:
        return self._node

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on a value of shape {self.data.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        self._grad = None

    def backward(self):
        backward(self)

    def __repr__(self):
        tag = f" {self.name}" if self.name else ""
        return f"Value{tag}(shape={self.data.shape}, node={self._node})"

    def __add__(self, other):
        return add(self, _as_value(other))

    def __radd__(self, other):
        return add(_as_value(other), self)

    def __sub__(self, other):
        return sub(self, _as_value(other))

    def __rsub__(self, other):
        return sub(_as_value(other), self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, _as_value(other))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)


def _as_value(x) -> Value:
    return x if isinstance(x, Value) else Value(x)


class Tape:
    """Ordered record of differentiable operations."""

    def __init__(self):
        self._entries: list[tuple[Value, tuple[Value, ...], Callable]] = []

    def __len__(self):
        return len(self._entries)

    def __enter__(self):
        _stack().append(self)
        return self

    def __exit__(self, *exc):
        _stack().pop()
        return False

    def clear(self):
        for out, _, _ in self._entries:
            out._tape = None
            out._node = -1
        self._entries = []

    def record(self, out: Value, parents: tuple[Value, ...], fn: Callable):
        out._tape = self
        out._node = len(self._entries)
        out.requires_grad = True
        self._entries.append((out, parents, fn))

    def backward(self, loss: Value):
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.data.shape}")
        if loss._tape is None:
            if loss.requires_grad:
                loss.grad = loss.grad + 1.0
            return
        if loss._tape is not self:
            raise ValueError("loss was recorded on a different tape")
        top = loss._node
        for out, _, _ in self._entries[: top + 1]:
            out._grad = None
        adj: dict[int, np.ndarray] = {top: np.ones_like(loss.data)}
        for i in range(top, -1, -1):
            g = adj.pop(i, None)
            if g is None:
                continue
            out, parents, fn = self._entries[i]
            out._grad = g
            for parent, pg in zip(parents, fn(g)):
                if pg is None:
                    continue
                if parent._tape is self:
                    j = parent._node
                    prev = adj.get(j)
                    adj[j] = pg if prev is None else prev + pg
                elif parent.requires_grad:
                    parent._grad = parent.grad + pg


def _needs_grad(*xs: Value) -> bool:
    _stack()
    return _state.recording and any(x.requires_grad for x in xs)


def _emit(data: np.ndarray, parents: tuple[Value, ...], fn: Callable) -> Value:
    out = Value.__new__(Value)
    out.data = data
    out._grad = None
    out.requires_grad = False
    out._tape = None
    out._node = -1
    out.name = None
    if _needs_grad(*parents):
        tape = current_tape()
        for p in parents:
            if p._tape is not None and p._tape is not tape:
                raise ValueError("operands were recorded on different tapes")
        tape.record(out, parents, fn)
    return out


def _same_shape(op: str, a: Value, b: Value):
    if a.data.shape != b.data.shape:
        raise ShapeError(f"{op}: shapes {a.data.shape} and {b.data.shape} differ")


# ---------------------------------------------------------------- primitives


def add(a: Value, b: Value) -> Value:
    _same_shape("add", a, b)
    return _emit(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Value, b: Value) -> Value:
    _same_shape("sub", a, b)
    return _emit(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Value, b: Value) -> Value:
    _same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _emit(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(a: Value, c: float) -> Value:
    c = float(c)
    return _emit(a.data * c, (a,), lambda g: (g * c,))


def matvec(mat: Value, vec: Value) -> Value:
    """``(…, r, c) @ (…, c) -> (…, r)`` with matching leading axes."""
    M, v = mat.data, vec.data
    if M.ndim < 2 or M.shape[:-2] != v.shape[:-1] or M.shape[-1] != v.shape[-1]:
        raise ShapeError(f"matvec: cannot multiply {M.shape} by {v.shape}")
    out = np.einsum("...rc,...c->...r", M, v)

    def fn(g):
        return np.einsum("...r,...c->...rc", g, v), np.einsum("...rc,...r->...c", M, g)

    return _emit(out, (mat, vec), fn)


def affine(x: Value, weight: Value, bias: Value | None = None) -> Value:
    """``x @ weight.T + bias`` applied over the last axis of ``x``."""
    X, W = x.data, weight.data
    if W.ndim != 2 or X.shape[-1:] != W.shape[1:]:
        raise ShapeError(f"affine: input {X.shape} incompatible with weight {W.shape}")
    if bias is not None and bias.data.shape != (W.shape[0],):
        raise ShapeError(f"affine: bias {bias.data.shape} should be ({W.shape[0]},)")
    out = X @ W.T
    if bias is not None:
        out = out + bias.data
    def fn(g):
        g2 = g.reshape(-1, W.shape[0])
        gx = g @ W
        gw = g2.T @ X.reshape(-1, W.shape[1])
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _emit(out, parents, fn)


def relu(x: Value) -> Value:
    mask = x.data > 0
    # np.maximum propagates NaN where np.where(mask, ...) would silently zero it
    return _emit(np.maximum(x.data, 0.0), (x,), lambda g: (g * mask,))


def softmax(x: Value) -> Value:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def fn(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _emit(s, (x,), fn)


def log_softmax(x: Value) -> Value:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    s = np.exp(out)

    def fn(g):
        return (g - s * g.sum(axis=-1, keepdims=True),)

    return _emit(out, (x,), fn)


def log(x: Value) -> Value:
    d = x.data
    with np.errstate(divide="ignore"):
        out = np.log(d)

    def fn(g):
        # zero upstream gradient at x == 0 stays zero instead of 0 * inf
        return (np.divide(g, d, out=np.zeros_like(g), where=g != 0),)

    return _emit(out, (x,), fn)


def exp(x: Value) -> Value:
    out = np.exp(x.data)
    return _emit(out, (x,), lambda g: (g * out,))


def sq_l2(a: Value, b: Value) -> Value:
    """Squared Euclidean distance along the last axis."""
    _same_shape("sq_l2", a, b)
    diff = a.data - b.data
    out = (diff * diff).sum(axis=-1)

    def fn(g):
        ga = 2.0 * g[..., None] * diff
        return ga, -ga

    return _emit(out, (a, b), fn)


def concat(parts: Sequence[Value]) -> Value:
    parts = tuple(parts)
    if not parts:
        raise ShapeError("concat: nothing to concatenate")
    lead = parts[0].data.shape[:-1]
    for p in parts:
        if p.data.ndim == 0 or p.data.shape[:-1] != lead:
            raise ShapeError("concat: leading shapes differ")
    sizes = [p.data.shape[-1] for p in parts]
    cuts = np.cumsum(sizes)[:-1]
    out = np.concatenate([p.data for p in parts], axis=-1)
    return _emit(out, parts, lambda g: tuple(np.split(g, cuts, axis=-1)))


def split(x: Value, groups: int) -> list[Value]:
    """Split the last axis into ``groups`` contiguous equal segments."""
    m = x.data.shape[-1] if x.data.ndim else 0
    if groups < 1 or m % groups:
        raise ShapeError(f"split: length {m} is not divisible into {groups} segments")
    d = m // groups
    out = []
    for i in range(groups):
        lo = i * d

        def fn(g, lo=lo):
            full = np.zeros_like(x.data)
            full[..., lo:lo + d] = g
            return (full,)

        out.append(_emit(x.data[..., lo:lo + d].copy(), (x,), fn))
    return out


def reshape(x: Value, shape: tuple) -> Value:
    src = x.data.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as err:
        raise ShapeError(f"reshape: {src} -> {shape}") from err
    return _emit(out, (x,), lambda g: (g.reshape(src),))


def mean(x: Value) -> Value:
    n = x.data.size
    src = x.data.shape
    return _emit(np.array(x.data.mean()), (x,), lambda g: (np.full(src, g / n),))


def sum_last(x: Value) -> Value:
    src = x.data.shape
    if not src:
        raise ShapeError("sum_last: scalar input")
    return _emit(x.data.sum(axis=-1), (x,), lambda g: (np.broadcast_to(g[..., None], src).copy(),))


def take_rows(table: Value, index) -> Value:
    """Row lookup ``table[index]``; gradients scatter-add back into rows."""
    idx = np.asarray(index, dtype=np.int64)
    T = table.data
    if T.ndim != 2:
        raise ShapeError(f"take_rows: table must be 2-d, got {T.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= T.shape[0]):
        raise IndexError("take_rows: index out of range")

    def fn(g):
        full = np.zeros_like(T)
        np.add.at(full, idx.reshape(-1), g.reshape(-1, T.shape[1]))
        return (full,)

    return _emit(T[idx], (table,), fn)


def mix(weights: Value, items: Sequence) -> Value:
    """Weighted sum ``Σ_t weights[…, t] · items[t]``.

    ``weights`` has shape ``(…, N)``; each item has shape ``(…, *rest)`` with
    the same leading axes. Items may be plain arrays (treated as constants).
    """
    items = tuple(_as_value(it) for it in items)
    W = weights.data
    if W.ndim == 0 or W.shape[-1] != len(items):
        raise ShapeError(f"mix: {len(items)} items for weights of shape {W.shape}")
    lead = W.shape[:-1]
    shape = items[0].data.shape
    for it in items:
        if it.data.shape != shape or it.data.shape[: len(lead)] != lead:
            raise ShapeError("mix: items must share the weights' leading shape")
    extra = (1,) * (len(shape) - len(lead))
    cols = [W[..., t].reshape(lead + extra) for t in range(len(items))]
    out = cols[0] * items[0].data
    for t in range(1, len(items)):
        out = out + cols[t] * items[t].data
    axes = tuple(range(len(lead), len(shape)))

    def fn(g):
        gw = np.stack([(g * it.data).sum(axis=axes) if axes else g * it.data for it in items], axis=-1)
        return (gw,) + tuple(g * c for c in cols)

    return _emit(out, (weights,) + items, fn)


def cross_entropy(logits: Value, target, ignore_index: int = -1) -> Value:
    """Per-position cross-entropy of ``logits[…, C]`` against integer ``target[…]``.

    Returns an array shaped like ``target``; ignored positions contribute 0.
    """
    tgt = np.asarray(target, dtype=np.int64)
    Z = logits.data
    if Z.shape[:-1] != tgt.shape:
        raise ShapeError(f"cross_entropy: logits {Z.shape} vs target {tgt.shape}")
    keep = tgt != ignore_index
    safe = np.where(keep, tgt, 0)
    if np.any(safe < 0) or np.any(safe >= Z.shape[-1]):
        raise IndexError("cross_entropy: class index out of range")
    z = Z - Z.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1))
    picked = np.take_along_axis(z, safe[..., None], axis=-1)[..., 0]
    out = np.where(keep, lse - picked, 0.0)
    p = np.exp(z - lse[..., None])

    def fn(g):
        gz = p.copy()
        np.put_along_axis(gz, safe[..., None], np.take_along_axis(gz, safe[..., None], -1) - 1.0, -1)
        return (gz * (g * keep)[..., None],)

    return _emit(out, (logits,), fn)


def stop_gradient(x: Value) -> Value:
    """Identity forward; the output is a constant, so nothing flows back into ``x``."""
    _stack()
    fr = _state.freeze
    if fr is not None and fr.replaying:
        return Value(fr.take())
    data = x.data.copy()
    if fr is not None:
        fr.values.append(data.copy())
    return Value(data)


def straight_through(forward_src: Value, backward_src: Value) -> Value:
    """Forward value of ``forward_src``; gradient routed to ``backward_src`` as identity."""
    _same_shape("straight_through", forward_src, backward_src)
    _stack()
    fr = _state.freeze
    if fr is not None and fr.replaying:
        data = backward_src.data + fr.take()
    else:
        data = forward_src.data.copy()
        if fr is not None:
            fr.values.append(forward_src.data - backward_src.data)
    return _emit(data, (backward_src,), lambda g: (g,))


# ------------------------------------------------------------------ driving


def backward(loss: Value):
    """Accumulate ``d loss / d leaf`` into every grad-requiring leaf."""
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    tape = loss._tape if loss._tape is not None else current_tape()
    tape.backward(loss)


def zero_grad(params: Iterable[Value]):
    for p in params:
        p.zero_grad()


def numeric_grad(f: Callable[[], float], arr: np.ndarray, eps: float) -> np.ndarray:
    """Central differences of ``f`` with respect to ``arr`` (perturbed in place)."""
    out = np.zeros_like(arr)
    flat = arr.reshape(-1)
    gflat = out.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = f()
        flat[i] = orig - eps
        lo = f()
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * eps)
    return out


def _rel_err(analytic: np.ndarray, numeric: np.ndarray) -> float:
    if analytic.size == 0:
        return 0.0
    return float(np.max(np.abs(analytic - numeric) / np.maximum(1.0, np.abs(numeric))))


def grad_check_params(loss_fn: Callable[[], Value], params: Sequence[Value],
                      eps: float = 1e-5) -> float:
    """Max relative error between backward and central differences over ``params``.

    Stop-gradient and straight-through outputs are frozen at their values from
    the base evaluation, so the check covers straight-through pipelines too.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    for p in params:
        p.zero_grad()
    with frozen_stops() as fr:
        with Tape() as tape:
            loss = loss_fn()
            tape.backward(loss)
        analytic = [p.grad.copy() for p in params]

        def f():
            fr.replay()
            with no_grad():
                return float(loss_fn().data)

        err = 0.0
        for p, a in zip(params, analytic):
            err = max(err, _rel_err(a, numeric_grad(f, p.data, eps)))
    for p in params:
        p.zero_grad()
    return err


def grad_check(fn: Callable[[Value], Value], point, eps: float = 1e-5) -> float:
    """Max relative error of the gradient of ``fn`` at ``point``."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    x = Value(point, requires_grad=True)
    return grad_check_params(lambda: fn(x), [x], eps)
