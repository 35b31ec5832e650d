"""Minimal reverse-mode automatic differentiation over numpy arrays.

A :class:`Tape` records every operation applied to tensors that belong to
it.  :func:`backward` walks the records in reverse and accumulates
vector-Jacobian products.  Tensors created without a tape are constants: ops
on them compute values only, which is how inference and the finite
difference oracle run.

All values are float64.  Every forward result is checked for NaN/Inf.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.special import expit, log_expit

DTYPE = np.float64


class ShapeError(ValueError):
    """Inputs to an op have incompatible shapes."""

    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = shapes
        shown = ", ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {shown}")


class NonFiniteError(FloatingPointError):
    pass


@dataclass
class Record:
    kind: str
    inputs: tuple
    output: "Tensor"
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    records: list[Record] = field(default_factory=list)

    def leaf(self, value, name: str | None = None) -> "Tensor":
        """Create a differentiable input (parameter) on this tape."""
        return Tensor(value, tape=self, name=name)

    def __len__(self):
        return len(self.records)


class Tensor:
    __slots__ = ("value", "tape", "grad", "name")
    __array_ufunc__ = None  # make numpy defer to the reflected Tensor operators

    def __init__(self, value, tape: Tape | None = None, name: str | None = None):
        self.value = np.asarray(value, dtype=DTYPE)
        self.tape = tape
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def item(self) -> float:
        return float(self.value)

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape})"

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

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return take(self, idx)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis=axis, keepdims=keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _emit(kind: str, value: np.ndarray, inputs: Iterable[Tensor], vjp) -> Tensor:
    value = np.asarray(value, dtype=DTYPE)
    # a single reduction is cheaper than an elementwise isfinite mask
    if not np.isfinite(value.sum()) and not np.all(np.isfinite(value)):
        raise NonFiniteError(f"{kind}: non-finite value in forward pass")
    inputs = tuple(inputs)
    tape = next((t.tape for t in inputs if t.tape is not None), None)
    out = Tensor(value, tape=tape)
    if tape is not None:
        tape.records.append(Record(kind, inputs, out, vjp))
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_check(op, a: Tensor, b: Tensor):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# ----------------------------------------------------------------------
# elementwise binary ops (numpy broadcasting)

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("add", a, b)
    return _emit(
        "add",
        a.value + b.value,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


broadcast_add = add


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("sub", a, b)
    return _emit(
        "sub",
        a.value - b.value,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("mul", a, b)
    av, bv = a.value, b.value
    return _emit(
        "mul",
        av * bv,
        (a, b),
        lambda g: (_unbroadcast(g * bv, a.shape), _unbroadcast(g * av, b.shape)),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("div", a, b)
    av, bv = a.value, b.value
    out = av / bv
    return _emit(
        "div",
        out,
        (a, b),
        lambda g: (_unbroadcast(g / bv, a.shape), _unbroadcast(-g * out / bv, b.shape)),
    )


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _emit("neg", -a.value, (a,), lambda g: (-g,))


# ----------------------------------------------------------------------
# elementwise unary ops

def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.value > 0
    return _emit("relu", np.where(mask, a.value, 0.0), (a,), lambda g: (g * mask,))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    s = expit(a.value)
    return _emit("sigmoid", s, (a,), lambda g: (g * s * (1.0 - s),))


def log_sigmoid(a) -> Tensor:
    """log(sigmoid(a)), stable for large |a|."""
    a = as_tensor(a)
    return _emit("log_sigmoid", log_expit(a.value), (a,), lambda g: (g * expit(-a.value),))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    t = np.tanh(a.value)
    return _emit("tanh", t, (a,), lambda g: (g * (1.0 - t * t),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    e = np.exp(a.value)
    return _emit("exp", e, (a,), lambda g: (g * e,))


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.value <= 0):
        raise NonFiniteError("log: non-positive input")
    return _emit("log", np.log(a.value), (a,), lambda g: (g / a.value,))


def softplus(a) -> Tensor:
    a = as_tensor(a)
    return _emit("softplus", np.logaddexp(0.0, a.value), (a,), lambda g: (g * expit(a.value),))


def maximum(a, floor: float) -> Tensor:
    """Elementwise max against a constant; no gradient where clipped."""
    a = as_tensor(a)
    keep = a.value >= floor
    return _emit("maximum", np.where(keep, a.value, floor), (a,), lambda g: (g * keep,))


def square(a) -> Tensor:
    a = as_tensor(a)
    return _emit("square", a.value * a.value, (a,), lambda g: (2.0 * g * a.value,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    r = np.sqrt(a.value)
    return _emit("sqrt", r, (a,), lambda g: (0.5 * g / r,))


def abs_(a) -> Tensor:
    a = as_tensor(a)
    return _emit("abs", np.abs(a.value), (a,), lambda g: (g * np.sign(a.value),))


# ----------------------------------------------------------------------
# linear algebra, reductions, shape ops

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    av, bv = a.value, b.value
    return _emit("matmul", av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g))


def linear(x, w, b) -> Tensor:
    """x @ w + b in one record (saves an (N, d) intermediate)."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0] or b.shape != (w.shape[1],):
        raise ShapeError("linear", x.shape, w.shape, b.shape)
    xv, wv = x.value, w.value
    out = xv @ wv
    out += b.value
    return _emit("linear", out, (x, w, b), lambda g: (
        None if x.tape is None else g @ wv.T, xv.T @ g, g.sum(axis=0)))


def linear_relu(x, w, b) -> Tensor:
    """relu(x @ w + b) as one record."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0] or b.shape != (w.shape[1],):
        raise ShapeError("linear_relu", x.shape, w.shape, b.shape)
    xv, wv = x.value, w.value
    out = xv @ wv
    out += b.value
    mask = out > 0
    out *= mask

    def vjp(g):
        g = g * mask
        return (None if x.tape is None else g @ wv.T, xv.T @ g, g.sum(axis=0))

    return _emit("linear_relu", out, (x, w, b), vjp)


def gin_aggregate(adjacency: sp.spmatrix, h, eps, symmetric: bool = True) -> Tensor:
    """(1 + eps) * h_v + adjacency @ h, as one record.

    With ``symmetric`` the backward pass reuses ``adjacency`` as its own
    transpose.
    """
    h, eps = as_tensor(h), as_tensor(eps)
    if h.ndim != 2 or adjacency.shape[1] != h.shape[0] or eps.shape != ():
        raise ShapeError("gin_aggregate", adjacency.shape, h.shape, eps.shape)
    hv = h.value
    out = np.asarray(adjacency @ hv)
    out += (1.0 + eps.value) * hv

    def vjp(g):
        gh = None
        if h.tape is not None:
            gh = np.asarray((adjacency if symmetric else adjacency.T) @ g)
            gh += (1.0 + eps.value) * g
        return (gh, np.vdot(g, hv))

    return _emit("gin_aggregate", out, (h, eps), vjp)


def reduce_sum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _emit("sum", a.value.sum(axis=axis, keepdims=keepdims), (a,), vjp)


def reduce_mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    count = a.value.size if axis is None else a.shape[axis]
    return reduce_sum(a, axis=axis, keepdims=keepdims) * (1.0 / count)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.value.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", a.shape, shape) from None
    return _emit("reshape", out, (a,), lambda g: (g.reshape(a.shape),))


def take(a, idx) -> Tensor:
    """Basic/advanced indexing along any axes; gradient scatters back."""
    a = as_tensor(a)

    def vjp(g):
        out = np.zeros(a.shape, dtype=DTYPE)
        np.add.at(out, idx, g)
        return (out,)

    return _emit("take", a.value[idx], (a,), vjp)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.value for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError("concat", *(t.shape for t in tensors)) from None
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _emit("concat", out, tensors, lambda g: tuple(np.split(g, splits, axis=axis)))


def logsumexp(a, axis=-1, keepdims=False) -> Tensor:
    a = as_tensor(a)
    m = np.max(a.value, axis=axis, keepdims=True)
    shifted = np.exp(a.value - m)
    s = shifted.sum(axis=axis, keepdims=True)
    out = np.log(s) + m
    soft = shifted / s
    value = out if keepdims else np.squeeze(out, axis=axis)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * soft,)

    return _emit("logsumexp", value, (a,), vjp)


def softmax(a, axis=-1) -> Tensor:
    a = as_tensor(a)
    e = np.exp(a.value - np.max(a.value, axis=axis, keepdims=True))
    s = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _emit("softmax", s, (a,), vjp)


def log_softmax(a, axis=-1) -> Tensor:
    a = as_tensor(a)
    shifted = a.value - np.max(a.value, axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    s = np.exp(out)

    def vjp(g):
        return (g - s * g.sum(axis=axis, keepdims=True),)

    return _emit("log_softmax", out, (a,), vjp)


# ----------------------------------------------------------------------
# segment ops (rows of ``values`` grouped by an integer index)

def _segment_matrix(index: np.ndarray, num_segments: int) -> sp.csr_matrix:
    n = len(index)
    return sp.csr_matrix(
        (np.ones(n, dtype=DTYPE), (index, np.arange(n))), shape=(num_segments, n)
    )


def segment_sum(values, index, num_segments: int | None = None) -> Tensor:
    values = as_tensor(values)
    index = np.asarray(index, dtype=np.int64)
    if values.ndim == 0 or values.shape[0] != len(index):
        raise ShapeError("segment_sum", values.shape, index.shape)
    if num_segments is None:
        num_segments = int(index.max()) + 1 if len(index) else 0
    if len(index) and (index.min() < 0 or index.max() >= num_segments):
        raise ValueError("segment_sum: index out of range")
    flat = values.value.reshape(len(index), -1)
    out = np.asarray(_segment_matrix(index, num_segments) @ flat)
    out = out.reshape((num_segments,) + values.shape[1:])
    return _emit("segment_sum", out, (values,), lambda g: (g[index],))


def segment_mean(values, index, num_segments: int | None = None) -> Tensor:
    index = np.asarray(index, dtype=np.int64)
    total = segment_sum(values, index, num_segments)
    counts = np.bincount(index, minlength=total.shape[0]).astype(DTYPE)
    scale = 1.0 / np.maximum(counts, 1.0)
    return mul(total, scale.reshape((-1,) + (1,) * (total.ndim - 1)))


def gather_rows(a, index) -> Tensor:
    a = as_tensor(a)
    index = np.asarray(index, dtype=np.int64)
    n = a.shape[0]

    def vjp(g):
        flat = g.reshape(len(index), -1)
        out = np.asarray(_segment_matrix(index, n) @ flat)
        return (out.reshape(a.shape),)

    return _emit("gather_rows", a.value[index], (a,), vjp)


def spmm(matrix: sp.spmatrix, a) -> Tensor:
    """Constant sparse matrix times a dense tensor."""
    a = as_tensor(a)
    if a.ndim != 2 or matrix.shape[1] != a.shape[0]:
        raise ShapeError("spmm", matrix.shape, a.shape)
    mt = matrix.T.tocsr()
    return _emit("spmm", np.asarray(matrix @ a.value), (a,), lambda g: (np.asarray(mt @ g),))


# ----------------------------------------------------------------------

def backward(tape: Tape, root: Tensor, params: Sequence[Tensor] = ()) -> list[np.ndarray]:
    """Reverse sweep from a scalar ``root``.

    Returns gradients for ``params`` in order (zeros for parameters the root
    does not depend on) and sets their ``.grad``.  The tape is consumed: its
    records are released afterwards.
    """
    if root.value.ndim != 0:
        raise ShapeError("backward (root must be scalar)", root.shape)
    grads: dict[int, np.ndarray] = {id(root): np.ones((), dtype=DTYPE)}
    records = tape.records
    tape.records = []
    while records:
        rec = records.pop()
        g = grads.pop(id(rec.output), None)
        if g is None:
            continue
        for inp, gi in zip(rec.inputs, rec.vjp(g)):
            if gi is None or inp.tape is None:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
    # whatever remains are leaves
    out = []
    for p in params:
        g = grads.get(id(p))
        if g is None:
            g = np.zeros_like(p.value)
        p.grad = g
        out.append(g)
    return out


def finite_diff_check(
    f: Callable[[dict[str, Tensor]], Tensor],
    params: dict[str, np.ndarray],
    eps: float = 1e-5,
) -> float:
    """Max relative error between backward() and central differences.

    ``f`` maps a dict of tensors to a scalar tensor.  Relative error uses the
    denominator ``max(|a|, |b|, 1e-8)``.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError("eps must lie in [1e-7, 1e-3]")
    tape = Tape()
    leaves = {k: tape.leaf(np.array(v, dtype=DTYPE), name=k) for k, v in params.items()}
    root = f(leaves)
    analytic = dict(zip(leaves, backward(tape, root, list(leaves.values()))))

    worst = 0.0
    for name, base in params.items():
        base = np.array(base, dtype=DTYPE)
        for i in np.ndindex(base.shape):
            vals = []
            for sign in (1.0, -1.0):
                bumped = {k: Tensor(np.array(v, dtype=DTYPE)) for k, v in params.items()}
                arr = base.copy()
                arr[i] += sign * eps
                bumped[name] = Tensor(arr)
                vals.append(f(bumped).item())
            numeric = (vals[0] - vals[1]) / (2.0 * eps)
            a = analytic[name][i]
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, err)
    return worst
