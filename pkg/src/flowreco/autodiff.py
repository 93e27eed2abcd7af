"""Reverse-mode differentiation over dense float64 arrays.

A :class:`Tape` records one forward evaluation of a function of named
parameter slots as an append-only node list; the reverse sweep walks that
list backwards in a fixed order, so gradients are reproducible bit for bit.
The primitive set is scoped to what the sequence encoder, the flow blocks
and the decoder need — this is deliberately not a general tensor framework.

All math helpers in this module are polymorphic: applied to a :class:`Var`
they append a node to its tape, applied to a plain ndarray (or scalar) they
evaluate with numpy directly. Model code written against these helpers runs
unchanged in recorded (trainable) mode and in plain-numpy (evaluation) mode.
"""

from __future__ import annotations

import math

import numpy as np
from scipy import special as _sp

_TWO_PI = 2.0 * math.pi
_INV_SQRT_PI = 2.0 / math.sqrt(math.pi)


class ParamVector:
    """A flat parameter array plus a layout of named views into it.

    The layout maps a slot name to ``(offset, shape)``; slots tile the
    array exactly, without overlaps.
    """

    __slots__ = ("values", "layout")

    def __init__(self, values: np.ndarray, layout: dict):
        self.values = np.asarray(values, dtype=np.float64)
        self.layout = layout

    @classmethod
    def zeros(cls, layout: dict) -> "ParamVector":
        return cls(np.zeros(layout_size(layout)), layout)

    def view(self, name: str) -> np.ndarray:
        offset, shape = self.layout[name]
        n = int(np.prod(shape)) if shape else 1
        return self.values[offset:offset + n].reshape(shape)

    def copy(self) -> "ParamVector":
        return ParamVector(self.values.copy(), self.layout)

    @property
    def size(self) -> int:
        return self.values.size

    def __repr__(self):  # pragma: no cover - debugging aid
        return f"ParamVector(size={self.size}, slots={len(self.layout)})"


class LayoutBuilder:
    """Accumulates named slots into a non-overlapping flat layout."""

    def __init__(self):
        self._layout: dict = {}
        self._size = 0

    def add(self, name: str, *shape: int) -> None:
        if name in self._layout:
            raise ValueError(f"duplicate parameter slot {name!r}")
        n = int(np.prod(shape)) if shape else 1
        self._layout[name] = (self._size, tuple(shape))
        self._size += n

    def build(self) -> dict:
        return dict(self._layout)

    @property
    def size(self) -> int:
        return self._size


def layout_size(layout: dict) -> int:
    return max((off + max(int(np.prod(shape)), 1) for off, shape in layout.values()), default=0)


class _Node:
    __slots__ = ("op", "parents", "value", "vjp", "scatter")

    def __init__(self, op, parents, value, vjp, scatter=None):
        self.op = op
        self.parents = parents
        self.value = value
        self.vjp = vjp
        self.scatter = scatter  # (idx, axis) for gather nodes: adjoint scatter-add


class Var:
    """Handle to a node on a tape. Supports numpy-style arithmetic."""

    __slots__ = ("tape", "nid")
    __array_ufunc__ = None  # ndarray <op> Var must defer to our reflected ops

    def __init__(self, tape: "Tape", nid: int):
        self.tape = tape
        self.nid = nid

    @property
    def value(self) -> np.ndarray:
        return self.tape.nodes[self.nid].value

    @property
    def shape(self):
        return self.value.shape

    def _lift(self, other) -> "Var":
        if isinstance(other, Var):
            return other
        return self.tape.constant(other)

    def __add__(self, other):
        return _binary(self.tape, "add", self, self._lift(other), np.add,
                       lambda g, a, b: (g, g))

    __radd__ = __add__

    def __mul__(self, other):
        return _binary(self.tape, "mul", self, self._lift(other), np.multiply,
                       lambda g, a, b: (g * b, g * a))

    __rmul__ = __mul__

    def __sub__(self, other):
        return _binary(self.tape, "sub", self, self._lift(other), np.subtract,
                       lambda g, a, b: (g, -g))

    def __rsub__(self, other):
        return self._lift(other).__sub__(self)

    def __truediv__(self, other):
        return _binary(self.tape, "div", self, self._lift(other), np.divide,
                       lambda g, a, b: (g / b, -g * a / (b * b)))

    def __rtruediv__(self, other):
        return self._lift(other).__truediv__(self)

    def __neg__(self):
        return _unary(self, "neg", np.negative, lambda g, x, y: -g)

    def __pow__(self, c):
        if not isinstance(c, (int, float)):
            raise TypeError("Var exponent must be a python number")
        return _unary(self, "pow", lambda x: x ** c,
                      lambda g, x, y: g * c * x ** (c - 1.0))

    def __matmul__(self, other):
        other = self._lift(other)
        a, b = self.value, other.value
        if a.ndim != 2 or b.ndim != 2:
            raise ValueError("matmul supports 2-d operands only")

        def vjp(g):
            return g @ b.T, a.T @ g

        return self.tape._append("matmul", (self, other), a @ b, vjp)


class Tape:
    """Append-only record of one forward evaluation.

    ``fn(tape, params, *inputs) -> Var`` defines the computation; named
    parameter slots are exposed through the ``params`` accessor passed to
    ``fn``. Replaying :meth:`forward` with identical inputs reproduces
    identical values and node order.
    """

    def __init__(self, fn, layout: dict):
        self.fn = fn
        self.layout = layout
        self.nodes: list = []
        self._param_nids: dict = {}
        self._out_nid: int | None = None
        self._forward_ran = False

    # -- recording ---------------------------------------------------------

    def _append(self, op, parent_vars, value, vjp) -> Var:
        if type(value) is not np.ndarray or value.dtype != np.float64:
            value = np.asarray(value, dtype=np.float64)
        node = _Node(op, tuple(v.nid for v in parent_vars), value, vjp)
        self.nodes.append(node)
        return Var(self, len(self.nodes) - 1)

    def constant(self, value) -> Var:
        return self._append("const", (), value, None)

    def _param(self, params: ParamVector, name: str) -> Var:
        if name not in self._param_nids:
            var = self._append("param", (), params.view(name), None)
            self._param_nids[name] = var.nid
        return Var(self, self._param_nids[name])

    # -- execution ---------------------------------------------------------

    def forward(self, params: ParamVector, *inputs) -> np.ndarray:
        if params.layout is not self.layout and params.layout != self.layout:
            raise ValueError("parameter layout does not match tape layout")
        self.nodes = []
        self._param_nids = {}
        accessor = _TapeParams(self, params)
        out = self.fn(self, accessor, *inputs)
        if not isinstance(out, Var):
            raise TypeError("tape function must return a Var")
        self._out_nid = out.nid
        self._forward_ran = True
        return out.value

    def backward(self, output_adjoint=1.0) -> ParamVector:
        if not self._forward_ran:
            raise RuntimeError("backward called before forward")
        n = len(self.nodes)
        adjoints: list = [None] * n
        owned = [False] * n  # buffers we may accumulate into in place
        out_node = self.nodes[self._out_nid]
        adjoints[self._out_nid] = np.broadcast_to(
            np.asarray(output_adjoint, dtype=np.float64), out_node.value.shape
        ).astype(np.float64)

        def accumulate(pid, pg):
            pg = _unbroadcast(pg, self.nodes[pid].value.shape)
            if adjoints[pid] is None:
                adjoints[pid] = pg
            elif owned[pid]:
                adjoints[pid] += pg
            else:
                adjoints[pid] = adjoints[pid] + pg
                owned[pid] = True

        def owned_buffer(pid):
            if adjoints[pid] is None or not owned[pid]:
                buf = np.zeros(self.nodes[pid].value.shape)
                if adjoints[pid] is not None:
                    buf += adjoints[pid]
                adjoints[pid] = buf
                owned[pid] = True
            return adjoints[pid]

        for nid in range(n - 1, -1, -1):
            node = self.nodes[nid]
            g = adjoints[nid]
            if g is None:
                continue
            if node.scatter is not None:
                idx, axis = node.scatter
                buf = owned_buffer(node.parents[0])
                np.add.at(np.moveaxis(buf, axis, 0), idx, np.moveaxis(g, axis, 0))
                continue
            if node.vjp is None:
                continue
            for pid, pg in zip(node.parents, node.vjp(g)):
                if pg is not None:
                    accumulate(pid, pg)
        grad = ParamVector.zeros(self.layout)
        for name, nid in self._param_nids.items():
            if adjoints[nid] is not None:
                grad.view(name)[...] = adjoints[nid]
        return grad


class _TapeParams:
    """Parameter accessor handed to a tape function: ``P("slot")`` -> Var."""

    def __init__(self, tape: Tape, params: ParamVector):
        self._tape = tape
        self._params = params
        self.layout = params.layout

    def __call__(self, name: str) -> Var:
        return self._tape._param(self._params, name)


class NumpyParams:
    """Drop-in accessor for plain-numpy evaluation: ``P("slot")`` -> ndarray."""

    def __init__(self, params: ParamVector):
        self._params = params
        self.layout = params.layout

    def __call__(self, name: str) -> np.ndarray:
        return self._params.view(name)


class EvalTape:
    """Constants-only stand-in for a Tape: runs tape functions in numpy mode.

    Valid for functions that touch the tape solely through ``constant`` (the
    convention all model code follows), which makes re-evaluation cheap for
    finite differences.
    """

    @staticmethod
    def constant(value):
        return np.asarray(value, dtype=np.float64)


def forward(tape: Tape, params: ParamVector, *inputs) -> np.ndarray:
    return tape.forward(params, *inputs)


def backward(tape: Tape, output_adjoint=1.0) -> ParamVector:
    return tape.backward(output_adjoint)


def check_gradients(tape: Tape, params: ParamVector, eps: float = 1e-5,
                    eps_floor: float = 1e-3, inputs=()) -> float:
    """Max over parameters of |analytic - central difference| / (|analytic| + eps_floor).

    The output of the tape must be scalar. The finite differences re-run the
    recorded function (in cheap numpy mode), so any stop-gradient quantity
    has to be baked into the function as a constant for the comparison to
    respect it.
    """
    out = tape.forward(params, *inputs)
    if np.size(out) != 1:
        raise ValueError("check_gradients requires a scalar tape output")
    analytic = tape.backward(1.0).values
    work = params.copy()
    stub = EvalTape()

    def evaluate() -> float:
        return float(np.asarray(value_of(tape.fn(stub, NumpyParams(work), *inputs))))

    base = evaluate()
    if abs(base - float(out)) > 1e-9 * (abs(base) + 1.0):
        raise RuntimeError("numpy-mode evaluation disagrees with the recorded tape")
    worst = 0.0
    for i in range(work.size):
        orig = work.values[i]
        work.values[i] = orig + eps
        f_plus = evaluate()
        work.values[i] = orig - eps
        f_minus = evaluate()
        work.values[i] = orig
        fd = (f_plus - f_minus) / (2.0 * eps)
        err = abs(analytic[i] - fd) / (abs(analytic[i]) + eps_floor)
        if err > worst:
            worst = err
    return worst


# -- broadcasting helpers ----------------------------------------------------

def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    grad = np.asarray(grad, dtype=np.float64)
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad.reshape(shape)


def _binary(tape, op, a, b, f, make_grads):
    value = f(a.value, b.value)
    av, bv = a.value, b.value

    def vjp(g):
        return make_grads(g, av, bv)

    return tape._append(op, (a, b), value, vjp)


def _unary(x: Var, op, f, grad_fn):
    xv = x.value
    value = f(xv)

    def vjp(g):
        return (grad_fn(g, xv, value),)

    return x.tape._append(op, (x,), value, vjp)


# -- elementwise primitives --------------------------------------------------

def _dispatch(x, op, f, grad_fn):
    if isinstance(x, Var):
        return _unary(x, op, f, grad_fn)
    return f(np.asarray(x, dtype=np.float64))


def tanh(x):
    return _dispatch(x, "tanh", np.tanh, lambda g, xv, y: g * (1.0 - y * y))


def sigmoid(x):
    def f(v):
        return 0.5 * (1.0 + np.tanh(0.5 * v))

    return _dispatch(x, "sigmoid", f, lambda g, xv, y: g * y * (1.0 - y))


def exp(x):
    return _dispatch(x, "exp", np.exp, lambda g, xv, y: g * y)


def log(x):
    return _dispatch(x, "log", np.log, lambda g, xv, y: g / xv)


def sqrt(x):
    return _dispatch(x, "sqrt", np.sqrt, lambda g, xv, y: g * 0.5 / y)


def square(x):
    return _dispatch(x, "square", np.square, lambda g, xv, y: g * 2.0 * xv)


def sin(x):
    return _dispatch(x, "sin", np.sin, lambda g, xv, y: g * np.cos(xv))


def cos(x):
    return _dispatch(x, "cos", np.cos, lambda g, xv, y: -g * np.sin(xv))


def erf(x):
    return _dispatch(x, "erf", _sp.erf,
                     lambda g, xv, y: g * _INV_SQRT_PI * np.exp(-xv * xv))


def erfinv(x):
    return _dispatch(x, "erfinv", _sp.erfinv,
                     lambda g, xv, y: g / (_INV_SQRT_PI * np.exp(-y * y)))


def arccos(x):
    return _dispatch(x, "arccos", np.arccos,
                     lambda g, xv, y: -g / np.sqrt(np.maximum(1.0 - xv * xv, 1e-300)))


def mod2pi(x):
    """Wrap to [0, 2*pi); unit gradient (the wrap points have measure zero)."""

    def f(v):
        return np.mod(v, _TWO_PI)

    return _dispatch(x, "mod2pi", f, lambda g, xv, y: g)


def clip(x, lo: float, hi: float):
    """Clamp to [lo, hi]; gradient is zero in the clamped region."""

    def f(v):
        return np.clip(v, lo, hi)

    def grad_fn(g, xv, y):
        return g * ((xv >= lo) & (xv <= hi))

    return _dispatch(x, "clip", f, grad_fn)


def atan2(y, x):
    if isinstance(y, Var) or isinstance(x, Var):
        tape = y.tape if isinstance(y, Var) else x.tape
        yv = y if isinstance(y, Var) else tape.constant(y)
        xv = x if isinstance(x, Var) else tape.constant(x)

        def vjp(g, a, b):
            denom = a * a + b * b
            return g * b / denom, -g * a / denom

        return _binary(tape, "atan2", yv, xv, np.arctan2, vjp)
    return np.arctan2(y, x)


def stop_gradient(x):
    """Identity in value; blocks all adjoint flow in the reverse sweep."""
    if isinstance(x, Var):
        return x.tape._append("stop_gradient", (x,), x.value, lambda g: (None,))
    return np.asarray(x, dtype=np.float64)


# -- structural primitives ---------------------------------------------------

def gather(x, idx, axis: int = 0):
    idx = np.asarray(idx, dtype=np.intp)
    if isinstance(x, Var):
        value = np.take(x.value, idx, axis=axis)
        node = x.tape._append("gather", (x,), value, None)
        x.tape.nodes[node.nid].scatter = (idx, axis)
        return node
    return np.take(np.asarray(x, dtype=np.float64), idx, axis=axis)


def concat(parts, axis: int = -1):
    if any(isinstance(p, Var) for p in parts):
        tape = next(p.tape for p in parts if isinstance(p, Var))
        parts = [p if isinstance(p, Var) else tape.constant(p) for p in parts]
        values = [p.value for p in parts]
        sizes = [v.shape[axis] for v in values]
        bounds = np.cumsum(sizes)[:-1]

        def vjp(g):
            return tuple(np.split(g, bounds, axis=axis))

        return tape._append("concat", tuple(parts), np.concatenate(values, axis=axis), vjp)
    return np.concatenate([np.asarray(p, dtype=np.float64) for p in parts], axis=axis)


def asum(x, axis=None, keepdims: bool = False):
    """Sumreduction (named to avoid shadowing builtins)."""
    if isinstance(x, Var):
        xv = x.value
        value = xv.sum(axis=axis, keepdims=keepdims)

        def vjp(g):
            if axis is None:
                return (np.broadcast_to(g, xv.shape).copy(),)
            g2 = g if keepdims else np.expand_dims(g, axis)
            return (np.broadcast_to(g2, xv.shape).copy(),)

        return x.tape._append("sum", (x,), value, vjp)
    return np.asarray(x, dtype=np.float64).sum(axis=axis, keepdims=keepdims)


def amean(x, axis=None, keepdims: bool = False):
    xv = x.value if isinstance(x, Var) else np.asarray(x)
    n = xv.size if axis is None else xv.shape[axis]
    return asum(x, axis=axis, keepdims=keepdims) * (1.0 / n)


def reshape(x, shape):
    if isinstance(x, Var):
        xv = x.value

        def vjp(g):
            return (g.reshape(xv.shape),)

        return x.tape._append("reshape", (x,), xv.reshape(shape), vjp)
    return np.asarray(x, dtype=np.float64).reshape(shape)


def matmul(a, b):
    if isinstance(a, Var):
        return a @ b
    if isinstance(b, Var):
        return b._lift(a) @ b
    return a @ b


def softmax(x, axis: int = -1):
    def f(v):
        shifted = v - v.max(axis=axis, keepdims=True)
        e = np.exp(shifted)
        return e / e.sum(axis=axis, keepdims=True)

    def grad_fn(g, xv, y):
        return y * (g - (g * y).sum(axis=axis, keepdims=True))

    return _dispatch(x, "softmax", f, grad_fn)


def segment_sum(x, seg_ids, num_segments: int):
    """Sum rows of ``x`` into ``num_segments`` buckets given by ``seg_ids``."""
    seg_ids = np.asarray(seg_ids, dtype=np.intp)
    if isinstance(x, Var):
        xv = x.value
        out = np.zeros((num_segments,) + xv.shape[1:])
        np.add.at(out, seg_ids, xv)

        def vjp(g):
            return (g[seg_ids],)

        return x.tape._append("segment_sum", (x,), out, vjp)
    out = np.zeros((num_segments,) + np.asarray(x).shape[1:])
    np.add.at(out, seg_ids, np.asarray(x, dtype=np.float64))
    return out


def value_of(x) -> np.ndarray:
    return x.value if isinstance(x, Var) else np.asarray(x, dtype=np.float64)


def is_var(x) -> bool:
    return isinstance(x, Var)
