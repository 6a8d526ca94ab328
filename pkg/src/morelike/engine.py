"""Reverse-mode automatic differentiation on numpy arrays.

Every numeric operation the rest of the package differentiates through is
defined here (convolutions live in `convops`, built on the same machinery).
Backward rules are themselves written in terms of these primitives, so a
gradient computed with ``create_graph=True`` is a differentiable graph node —
that is what lets the gradient-penalty term be differentiated a second time.

A single `Tape` records executed ops in order; because recording order is
execution order, parents always precede children and one reversed sweep
implements backpropagation.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

default_dtype = np.float32


class EngineError(ValueError):
    pass


class Tensor:
    """Shape-carrying numeric array, optionally participating in a tape."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(default_dtype)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, value: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(value, dtype=self.data.dtype, copy=True)
        else:
            self.grad += value

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # arithmetic sugar; scalars are python numbers or 0-d tensors
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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


class _Node:
    __slots__ = ("out", "parents", "vjps")

    def __init__(self, out: Tensor, parents: tuple, vjps: tuple):
        self.out = out
        self.parents = parents
        self.vjps = vjps


class Tape:
    """Ordered record of executed ops; parents precede children."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        _state().tapes.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _state().tapes.pop()


_local = threading.local()


def _state():
    if not hasattr(_local, "tapes"):
        _local.tapes = []
        _local.no_grad_depth = 0
    return _local


def active_tape() -> Tape | None:
    st = _state()
    if st.no_grad_depth or not st.tapes:
        return None
    return st.tapes[-1]


@contextlib.contextmanager
def no_grad():
    st = _state()
    st.no_grad_depth += 1
    try:
        yield
    finally:
        st.no_grad_depth -= 1


def _record(out: Tensor, parents: Sequence[Tensor], vjps: Sequence) -> Tensor:
    tape = active_tape()
    if tape is None:
        return out
    keep = [p.requires_grad for p in parents]
    if not any(keep):
        return out
    out.requires_grad = True
    vjps = tuple(v if k else None for v, k in zip(vjps, keep))
    tape.nodes.append(_Node(out, tuple(parents), vjps))
    return out


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def zeros(shape, dtype=None, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype or default_dtype), requires_grad)


def ones(shape, dtype=None, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype or default_dtype), requires_grad)


def zeros_like(t: Tensor) -> Tensor:
    return Tensor(np.zeros_like(t.data))


def _as_tensor(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.data.dtype))


def _binary_plan(a, b):
    """Classify a binary op's operands.

    Supported forms: equal shapes, python scalar with tensor, 0-d tensor
    with tensor. Anything else is a shape error.
    """
    a_t, b_t = isinstance(a, Tensor), isinstance(b, Tensor)
    if a_t and b_t:
        if a.shape == b.shape:
            return a, b, "equal"
        if a.ndim == 0:
            return a, b, "a_scalar"
        if b.ndim == 0:
            return a, b, "b_scalar"
        raise EngineError(f"elementwise shape mismatch: {a.shape} vs {b.shape}")
    if a_t:
        return a, float(b), "b_py"
    if b_t:
        return float(a), b, "a_py"
    raise EngineError("elementwise op needs at least one Tensor operand")


def _reduce_to_scalar(g: Tensor) -> Tensor:
    return tsum(g) if g.ndim else g


def add(a, b) -> Tensor:
    a, b, kind = _binary_plan(a, b)
    if kind == "b_py":
        out = Tensor(a.data + b)
        return _record(out, (a,), (lambda g: g,))
    if kind == "a_py":
        out = Tensor(a + b.data)
        return _record(out, (b,), (lambda g: g,))
    out = Tensor(a.data + b.data)
    if kind == "equal":
        return _record(out, (a, b), (lambda g: g, lambda g: g))
    if kind == "a_scalar":
        return _record(out, (a, b), (lambda g: _reduce_to_scalar(g), lambda g: g))
    return _record(out, (a, b), (lambda g: g, lambda g: _reduce_to_scalar(g)))


def sub(a, b) -> Tensor:
    a, b, kind = _binary_plan(a, b)
    if kind == "b_py":
        out = Tensor(a.data - b)
        return _record(out, (a,), (lambda g: g,))
    if kind == "a_py":
        out = Tensor(a - b.data)
        return _record(out, (b,), (lambda g: neg(g),))
    out = Tensor(a.data - b.data)
    if kind == "equal":
        return _record(out, (a, b), (lambda g: g, lambda g: neg(g)))
    if kind == "a_scalar":
        return _record(out, (a, b), (lambda g: _reduce_to_scalar(g), lambda g: neg(g)))
    return _record(out, (a, b), (lambda g: g, lambda g: _reduce_to_scalar(neg(g))))


def mul(a, b) -> Tensor:
    a, b, kind = _binary_plan(a, b)
    if kind == "b_py":
        out = Tensor(a.data * b)
        return _record(out, (a,), (lambda g: mul(g, b),))
    if kind == "a_py":
        out = Tensor(a * b.data)
        return _record(out, (b,), (lambda g: mul(g, a),))
    out = Tensor(a.data * b.data)
    da = lambda g: mul(g, b) if kind != "a_scalar" else _reduce_to_scalar(mul(g, b))
    db = lambda g: mul(g, a) if kind != "b_scalar" else _reduce_to_scalar(mul(g, a))
    return _record(out, (a, b), (da, db))


def div(a, b) -> Tensor:
    a, b, kind = _binary_plan(a, b)
    if kind == "b_py":
        return mul(a, 1.0 / b)
    if kind == "a_py":
        out = Tensor(a / b.data)
        return _record(out, (b,), (lambda g: neg(div(mul(g, a), mul(b, b))),))
    out = Tensor(a.data / b.data)
    da = lambda g: div(g, b) if kind != "a_scalar" else _reduce_to_scalar(div(g, b))

    def db(g):
        r = neg(div(mul(g, a), mul(b, b)))
        return _reduce_to_scalar(r) if kind == "b_scalar" else r

    return _record(out, (a, b), (da, db))


def neg(x: Tensor) -> Tensor:
    out = Tensor(-x.data)
    return _record(out, (x,), (lambda g: neg(g),))


def scale(x: Tensor, s: float) -> Tensor:
    return mul(x, float(s))


def exp(x: Tensor) -> Tensor:
    out = Tensor(np.exp(x.data))
    return _record(out, (x,), (lambda g: mul(g, out),))


def log(x: Tensor) -> Tensor:
    out = Tensor(np.log(x.data))
    return _record(out, (x,), (lambda g: div(g, x),))


def sqrt(x: Tensor) -> Tensor:
    out = Tensor(np.sqrt(x.data))
    return _record(out, (x,), (lambda g: div(mul(g, 0.5), out),))


def powf(x: Tensor, p: float) -> Tensor:
    p = float(p)
    out = Tensor(x.data**p)
    return _record(out, (x,), (lambda g: mul(g, scale(powf(x, p - 1.0), p)),))


def tanh(x: Tensor) -> Tensor:
    out = Tensor(np.tanh(x.data))
    return _record(out, (x,), (lambda g: mul(g, sub(1.0, mul(out, out))),))


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    out_data = np.empty_like(d)
    pos = d >= 0
    out_data[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    ez = np.exp(d[~pos])
    out_data[~pos] = ez / (1.0 + ez)
    out = Tensor(out_data)
    return _record(out, (x,), (lambda g: mul(g, mul(out, sub(1.0, out))),))


def relu(x: Tensor) -> Tensor:
    # subgradient at 0 is 0
    mask = Tensor((x.data > 0).astype(x.data.dtype))
    out = Tensor(x.data * mask.data)
    return _record(out, (x,), (lambda g: mul(g, mask),))


def softplus(x: Tensor) -> Tensor:
    out = Tensor(np.logaddexp(0.0, x.data))
    return _record(out, (x,), (lambda g: mul(g, sigmoid(x)),))


def activation(kind: str, x: Tensor) -> Tensor:
    try:
        return {"relu": relu, "tanh": tanh, "sigmoid": sigmoid}[kind](x)
    except KeyError:
        raise EngineError(f"unknown activation kind: {kind!r}") from None


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    out = Tensor(x.data.reshape(shape))
    old = x.shape
    return _record(out, (x,), (lambda g: reshape(g, old),))


def transpose(x: Tensor) -> Tensor:
    if x.ndim != 2:
        raise EngineError("transpose expects a 2-D tensor")
    out = Tensor(x.data.T.copy())
    return _record(out, (x,), (lambda g: transpose(g),))


def broadcast_to(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        data = np.broadcast_to(x.data, shape)
    except ValueError:
        raise EngineError(f"cannot broadcast {x.shape} to {shape}") from None
    out = Tensor(np.ascontiguousarray(data))
    added = len(shape) - x.ndim
    axes = tuple(range(added)) + tuple(
        i + added for i, s in enumerate(x.shape) if s == 1 and shape[i + added] != 1
    )
    old = x.shape

    def vjp(g):
        r = tsum(g, axis=axes) if axes else g
        return reshape(r, old)

    return _record(out, (x,), (vjp,))


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = list(parts)
    if not parts:
        raise EngineError("concat of empty list")
    base = parts[0].shape
    for p in parts[1:]:
        if p.ndim != parts[0].ndim or (
            p.shape[:axis] + p.shape[axis + 1 :] != base[:axis] + base[axis + 1 :]
        ):
            raise EngineError("concat shape mismatch")
    out = Tensor(np.concatenate([p.data for p in parts], axis=axis))
    offsets = np.cumsum([0] + [p.shape[axis] for p in parts])

    def make_vjp(i):
        s, e = int(offsets[i]), int(offsets[i + 1])
        return lambda g: take_range(g, axis, s, e)

    return _record(out, tuple(parts), tuple(make_vjp(i) for i in range(len(parts))))


def stack(parts: Sequence[Tensor]) -> Tensor:
    return concat([reshape(p, (1,) + p.shape) for p in parts], axis=0)


def take_range(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    idx = [slice(None)] * x.ndim
    idx[axis] = slice(start, stop)
    out = Tensor(x.data[tuple(idx)].copy())
    total = x.shape[axis]
    return _record(out, (x,), (lambda g: pad_range(g, axis, start, total),))


def pad_range(x: Tensor, axis: int, start: int, total: int) -> Tensor:
    shape = list(x.shape)
    n = shape[axis]
    shape[axis] = total
    data = np.zeros(shape, dtype=x.data.dtype)
    idx = [slice(None)] * x.ndim
    idx[axis] = slice(start, start + n)
    data[tuple(idx)] = x.data
    out = Tensor(data)
    return _record(out, (x,), (lambda g: take_range(g, axis, start, start + n),))


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        axes = tuple(range(x.ndim))
    elif isinstance(axis, int):
        axes = (axis % x.ndim,)
    else:
        axes = tuple(a % x.ndim for a in axis)
    out = Tensor(x.data.sum(axis=axes, keepdims=keepdims))
    old = x.shape
    kept = tuple(1 if i in axes else s for i, s in enumerate(old))

    def vjp(g):
        return broadcast_to(reshape(g, kept), old)

    return _record(out, (x,), (vjp,))


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([x.shape[i] for i in axes]))
    return scale(tsum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def reduce(kind: str, x: Tensor) -> Tensor:
    if kind == "sum":
        return tsum(x)
    if kind == "mean":
        return mean(x)
    raise EngineError(f"unknown reduce kind: {kind!r}")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim not in (1, 2):
        raise EngineError("matmul expects a 2-D left operand and 1-D/2-D right operand")
    if a.shape[1] != b.shape[0]:
        raise EngineError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    out = Tensor(a.data @ b.data)
    if b.ndim == 2:
        return _record(
            out,
            (a, b),
            (lambda g: matmul(g, transpose(b)), lambda g: matmul(transpose(a), g)),
        )
    m, k = a.shape

    def da(g):
        return matmul(reshape(g, (m, 1)), reshape(b, (1, k)))

    return _record(out, (a, b), (da, lambda g: matmul(transpose(a), g)))


def dot(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 1 or b.ndim != 1 or a.shape != b.shape:
        raise EngineError(f"dot expects equal-length vectors, got {a.shape}, {b.shape}")
    out = Tensor(a.data @ b.data)
    return _record(out, (a, b), (lambda g: mul(b, g), lambda g: mul(a, g)))


def max_detached(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    return Tensor(x.data.max(axis=axis, keepdims=keepdims))


def softmax(v: Tensor, axis: int = -1) -> Tensor:
    if v.size == 0:
        raise EngineError("softmax of empty tensor")
    # constant shift for stability; softmax is shift-invariant so treating the
    # max as constant leaves gradients exact
    m = max_detached(v, axis=axis, keepdims=True)
    e = exp(sub(v, broadcast_to(m, v.shape)))
    denom = tsum(e, axis=axis, keepdims=True)
    return div(e, broadcast_to(denom, e.shape))


def layer_norm(
    x: Tensor,
    gain: Tensor,
    bias: Tensor,
    num_batch_axes: int = 0,
    eps: float = 1e-8,
) -> Tensor:
    """Normalize over all feature axes of each sample, then apply gain/bias.

    gain and bias broadcast against x (numpy right-aligned rules).
    """
    axes = tuple(range(num_batch_axes, x.ndim))
    n = int(np.prod([x.shape[i] for i in axes]))
    mu = scale(tsum(x, axis=axes, keepdims=True), 1.0 / n)
    xc = sub(x, broadcast_to(mu, x.shape))
    var = scale(tsum(mul(xc, xc), axis=axes, keepdims=True), 1.0 / n)
    inv = powf(add(var, eps), -0.5)
    xhat = mul(xc, broadcast_to(inv, x.shape))
    return add(mul(xhat, broadcast_to(gain, x.shape)), broadcast_to(bias, x.shape))


def _require_scalar(t: Tensor, what: str) -> None:
    if t.size != 1:
        raise EngineError(f"{what} must be scalar, got shape {t.shape}")


def _sweep(tape: Tape, seed_out: Tensor, create_graph: bool):
    """One reverse sweep over the tape; returns {id: (tensor, grad)}."""
    seed = ones((), dtype=seed_out.dtype) if seed_out.ndim == 0 else ones(
        seed_out.shape, dtype=seed_out.dtype
    )
    grads: dict[int, tuple[Tensor, Tensor]] = {id(seed_out): (seed_out, seed)}
    ctx = contextlib.nullcontext() if create_graph else no_grad()
    with ctx:
        for node in reversed(tape.nodes):
            entry = grads.pop(id(node.out), None)
            if entry is None:
                continue
            g = entry[1]
            for parent, vjp in zip(node.parents, node.vjps):
                if vjp is None:
                    continue
                pg = vjp(g)
                prev = grads.get(id(parent))
                grads[id(parent)] = (parent, pg if prev is None else add(prev[1], pg))
    return grads


def backward(loss: Tensor) -> None:
    """Populate .grad of every reachable requires_grad leaf from a scalar loss."""
    _require_scalar(loss, "backward loss")
    tape = active_tape()
    if tape is None:
        raise EngineError("backward requires an active Tape")
    if tape.consumed:
        raise EngineError("tape already consumed by backward; reset with a new Tape")
    tape.consumed = True
    produced = {id(n.out) for n in tape.nodes}
    grads = _sweep(tape, loss, create_graph=False)
    for tid, (t, g) in grads.items():
        if t.requires_grad and tid not in produced:
            t.accumulate_grad(g.data)


def grad(
    output: Tensor, wrt: Iterable[Tensor], create_graph: bool = False
) -> list[Tensor]:
    """Functional gradients of a scalar output; does not touch .grad."""
    _require_scalar(output, "grad output")
    tape = active_tape()
    if tape is None:
        raise EngineError("grad requires an active Tape")
    grads = _sweep(tape, output, create_graph=create_graph)
    out = []
    for w in wrt:
        entry = grads.get(id(w))
        out.append(zeros_like(w) if entry is None else entry[1])
    return out


def grad_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    h: float = 1e-5,
    coords: Sequence[tuple] | None = None,
) -> float:
    """Max relative error between analytic gradient of f and central differences."""
    x.requires_grad = True
    with Tape():
        y = f(x)
        _require_scalar(y, "grad_check function output")
        (g,) = grad(y, [x])
    analytic = np.asarray(g.data, dtype=np.float64)
    if coords is None:
        coords = list(np.ndindex(*x.shape)) if x.ndim else [()]
    worst = 0.0
    base = x.data
    for idx in coords:
        orig = base[idx]
        base[idx] = orig + h
        hi = float(f(x).data)
        base[idx] = orig - h
        lo = float(f(x).data)
        base[idx] = orig
        numeric = (hi - lo) / (2.0 * h)
        a = float(analytic[idx]) if analytic.ndim else float(analytic)
        err = abs(a - numeric) / max(1e-8, abs(a) + abs(numeric))
        worst = max(worst, err)
    return worst
