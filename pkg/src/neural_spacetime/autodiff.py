"""A small reverse-mode autodiff engine over dense float64 numpy arrays.

A :class:`Tape` is an append-only list of :class:`Node` objects. Every op
appends one node holding its forward value and a closure mapping the output
gradient to parent gradients. :func:`backward` walks the tape once in
reverse and deposits leaf gradients into the :class:`Param` objects that
were bound to the tape with :meth:`Tape.param`.

Kink conventions (fixed so that gradients are always finite for exponents >= 1):

* ``sgn(x)|x|^e`` has derivative ``e|x|^(e-1)`` in ``x``, which is 0 at ``x = 0``
  for ``e > 1`` and 1 for ``e = 1``; its derivative in ``e`` is 0 at ``x = 0``.
* the piecewise power takes the ``|x| >= 1`` branch at exactly ``|x| = 1``.
* ``abs``, ``relu`` and ``leaky_relu`` use the ``x > 0`` side at 0 for relu-type
  ops and 0 for ``abs``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ConstraintViolation, DoubleBackward, NonScalarLoss, ShapeMismatch

ArrayLike = np.ndarray | float | int


@dataclass(eq=False)
class Param:
    """A trainable array. ``lower`` is the floor enforced by :meth:`project`."""

    value: np.ndarray
    name: str = ""
    lower: float | None = None
    trainable: bool = True
    grad: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.value = np.array(self.value, dtype=float)
        self.grad = np.zeros_like(self.value)

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad = np.zeros_like(self.value)

    def project(self):
        if self.lower is not None:
            self.value = np.maximum(np.asarray(self.value, dtype=float), self.lower)

    def check(self):
        if self.lower is not None and np.any(self.value < self.lower):
            raise ConstraintViolation(f"{self.name or 'param'} has entries below {self.lower}")


class Node:
    __slots__ = ("tape", "index", "op", "parents", "value", "_backward", "param")

    def __init__(self, tape, op, parents, value, backward=None, param=None):
        self.tape = tape
        self.op = op
        self.parents = parents
        self.value = value
        self._backward = backward
        self.param = param
        self.index = len(tape.nodes)
        tape.nodes.append(self)

    @property
    def shape(self):
        return self.value.shape

    @property
    def size(self):
        return self.value.size

    def __repr__(self):
        return f"Node({self.op}, shape={self.value.shape})"

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
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    @property
    def T(self):
        return transpose(self)


class Tape:
    """Records one forward computation; supports exactly one backward pass."""

    def __init__(self):
        self.nodes: list[Node] = []
        self._bound: dict[int, Node] = {}
        self._used = False

    def __len__(self):
        return len(self.nodes)

    def constant(self, value: ArrayLike) -> Node:
        return Node(self, "const", (), np.asarray(value, dtype=float))

    def param(self, p: Param) -> Node:
        """Leaf node for ``p``; binding the same Param twice returns the same node."""
        node = self._bound.get(id(p))
        if node is None:
            node = Node(self, "param", (), p.value, param=p)
            self._bound[id(p)] = node
        return node

    def bound_params(self) -> list[Param]:
        return [n.param for n in self._bound.values()]

    def reset(self):
        """Allow another backward pass over the same recording."""
        self._used = False


def _lift(tape: Tape, x) -> Node:
    if isinstance(x, Node):
        if x.tape is not tape:
            raise ValueError("operands live on different tapes")
        return x
    return tape.constant(x)


def _tape_of(*xs) -> Tape:
    for x in xs:
        if isinstance(x, Node):
            return x.tape
    raise TypeError("at least one operand must be a Node")


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    ndim_extra = grad.ndim - len(shape)
    if ndim_extra > 0:
        grad = grad.sum(axis=tuple(range(ndim_extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_check(a: np.ndarray, b: np.ndarray):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeMismatch(f"cannot broadcast {a.shape} with {b.shape}") from exc


# ---------------------------------------------------------------------------
# Elementwise arithmetic


def add(a, b) -> Node:
    tape = _tape_of(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    _broadcast_check(a.value, b.value)
    sa, sb = a.shape, b.shape
    return Node(tape, "add", (a, b), a.value + b.value,
                lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Node:
    tape = _tape_of(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    _broadcast_check(a.value, b.value)
    sa, sb = a.shape, b.shape
    return Node(tape, "sub", (a, b), a.value - b.value,
                lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Node:
    tape = _tape_of(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    _broadcast_check(a.value, b.value)
    av, bv = a.value, b.value
    return Node(tape, "mul", (a, b), av * bv,
                lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


def div(a, b) -> Node:
    tape = _tape_of(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    _broadcast_check(a.value, b.value)
    av, bv = a.value, b.value
    out = av / bv
    return Node(tape, "div", (a, b), out,
                lambda g: (_unbroadcast(g / bv, av.shape), _unbroadcast(-g * out / bv, bv.shape)))


def neg(a: Node) -> Node:
    return Node(a.tape, "neg", (a,), -a.value, lambda g: (-g,))


def square(a: Node) -> Node:
    av = a.value
    return Node(a.tape, "square", (a,), av * av, lambda g: (2.0 * av * g,))


def abs_(a: Node) -> Node:
    av = a.value
    return Node(a.tape, "abs", (a,), np.abs(av), lambda g: (np.sign(av) * g,))


def exp(a: Node) -> Node:
    out = np.exp(a.value)
    return Node(a.tape, "exp", (a,), out, lambda g: (g * out,))


def log1p(a: Node) -> Node:
    av = a.value
    return Node(a.tape, "log1p", (a,), np.log1p(av), lambda g: (g / (1.0 + av),))


def sqrt(a: Node) -> Node:
    """Square root with gradient 0 at 0 (used for norms of coincident points)."""
    out = np.sqrt(a.value)
    safe = np.where(out > 0, out, 1.0)

    def back(g):
        return (np.where(out > 0, g / (2.0 * safe), 0.0),)

    return Node(a.tape, "sqrt", (a,), out, back)


def arccos(a: Node, clip: float = 1e-12) -> Node:
    """arccos with the gradient evaluated at the argument clipped into the open interval."""
    av = a.value
    out = np.arccos(np.clip(av, -1.0, 1.0))
    inner = np.clip(av, -1.0 + clip, 1.0 - clip)
    return Node(a.tape, "arccos", (a,), out, lambda g: (-g / np.sqrt(1.0 - inner * inner),))


def relu(a: Node) -> Node:
    av = a.value
    return Node(a.tape, "relu", (a,), np.maximum(av, 0.0), lambda g: (g * (av > 0),))


def leaky_relu(a: Node, slope: float = 0.01) -> Node:
    av = a.value
    pos = av >= 0
    return Node(a.tape, "leaky_relu", (a,), np.where(pos, av, slope * av),
                lambda g: (np.where(pos, g, slope * g),))


def sigmoid(a: Node, slope: float = 1.0) -> Node:
    """Logistic function of ``slope * a``."""
    z = slope * a.value
    # split by sign so neither branch overflows
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return Node(a.tape, "sigmoid", (a,), out, lambda g: (g * slope * out * (1.0 - out),))


def maximum(a, b) -> Node:
    tape = _tape_of(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    _broadcast_check(a.value, b.value)
    av, bv = a.value, b.value
    first = av >= bv
    return Node(tape, "maximum", (a, b), np.where(first, av, bv),
                lambda g: (_unbroadcast(np.where(first, g, 0.0), av.shape),
                           _unbroadcast(np.where(first, 0.0, g), bv.shape)))


# ---------------------------------------------------------------------------
# Fractal-style powers


def _check_exponent(e: np.ndarray, floor: float, name: str):
    if np.any(e < floor):
        raise ConstraintViolation(f"{name} exponent {e} below floor {floor}")
    if np.any(e <= 0):
        raise ConstraintViolation(f"{name} exponent {e} must be positive")


def signed_power(x: Node, e, floor: float = 1.0) -> Node:
    """sgn(x) |x|^e with a trainable exponent ``e`` (scalar or broadcastable)."""
    tape = x.tape
    e = _lift(tape, e)
    ev = e.value
    _check_exponent(ev, floor, "signed_power")
    xv = x.value
    ax = np.abs(xv)
    sgn = np.where(xv >= 0, 1.0, -1.0)
    mag = ax**ev
    out = sgn * mag

    def back(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            dx = np.where(ax > 0, ev * ax ** (ev - 1.0), np.where(ev == 1.0, 1.0, 0.0))
            logx = np.where(ax > 0, np.log(np.where(ax > 0, ax, 1.0)), 0.0)
        de = out * logx
        return (g * dx, _unbroadcast(g * de, ev.shape))

    return Node(tape, "signed_power", (x, e), out, back)


def piecewise_power(x: Node, s, l, floor: float = 1.0) -> Node:
    """sgn(x)|x|^s where |x| < 1 and sgn(x)|x|^l where |x| >= 1 (scalar exponents)."""
    tape = x.tape
    s, l = _lift(tape, s), _lift(tape, l)
    sv, lv = s.value, l.value
    if sv.shape != () or lv.shape != ():
        raise ShapeMismatch("piecewise_power takes scalar exponents")
    _check_exponent(sv, floor, "small-scale")
    _check_exponent(lv, floor, "large-scale")
    xv = x.value
    ax = np.abs(xv)
    small = ax < 1.0
    e = np.where(small, sv, lv)
    sgn = np.where(xv >= 0, 1.0, -1.0)
    out = sgn * ax**e

    def back(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            dx = np.where(ax > 0, e * ax ** (e - 1.0), np.where(e == 1.0, 1.0, 0.0))
            logx = np.where(ax > 0, np.log(np.where(ax > 0, ax, 1.0)), 0.0)
        de = g * out * logx
        return (g * dx, np.sum(de[small]), np.sum(de[~small]))

    return Node(tape, "piecewise_power", (x, s, l), out, back)


# ---------------------------------------------------------------------------
# Linear algebra, reductions and indexing


def matmul(a, b) -> Node:
    tape = _tape_of(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    av, bv = a.value, b.value
    if av.ndim == 0 or bv.ndim == 0 or av.shape[-1] != bv.shape[-2 if bv.ndim > 1 else 0]:
        raise ShapeMismatch(f"matmul {av.shape} @ {bv.shape}")

    def back(g):
        if bv.ndim == 1:
            ga = np.multiply.outer(g, bv) if av.ndim > 1 else g * bv
            gb = av.T @ g if av.ndim > 1 else g * av
            return ga, gb
        if av.ndim == 1:
            return bv @ g, np.outer(av, g)
        return g @ bv.T, av.T @ g

    return Node(tape, "matmul", (a, b), av @ bv, back)


def transpose(a: Node) -> Node:
    return Node(a.tape, "transpose", (a,), a.value.T, lambda g: (g.T,))


def sum_(a: Node, axis=None, keepdims: bool = False) -> Node:
    shape = a.shape

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return Node(a.tape, "sum", (a,), np.sum(a.value, axis=axis, keepdims=keepdims), back)


def mean(a: Node, axis=None) -> Node:
    n = a.size if axis is None else a.shape[axis]
    return mul(sum_(a, axis=axis), 1.0 / n)


def min_(a: Node, axis: int = -1) -> Node:
    """Minimum along ``axis``; the gradient goes to the first minimizing entry."""
    av = a.value
    idx = np.argmin(av, axis=axis)
    out = np.take_along_axis(av, np.expand_dims(idx, axis), axis=axis).squeeze(axis)

    def back(g):
        ga = np.zeros_like(av)
        np.put_along_axis(ga, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis=axis)
        return (ga,)

    return Node(a.tape, "min", (a,), out, back)


def getitem(a: Node, key) -> Node:
    shape = a.shape

    def back(g):
        ga = np.zeros(shape)
        np.add.at(ga, key, g)
        return (ga,)

    return Node(a.tape, "getitem", (a,), a.value[key], back)


def take(a: Node, index: np.ndarray) -> Node:
    """Gather rows: ``a.value[index]`` along axis 0."""
    index = np.asarray(index, dtype=np.intp)
    shape = a.shape

    def back(g):
        ga = np.zeros(shape)
        np.add.at(ga, index, g)
        return (ga,)

    return Node(a.tape, "take", (a,), a.value[index], back)


def concat(parts: Sequence[Node], axis: int = -1) -> Node:
    tape = _tape_of(*parts)
    parts = [_lift(tape, p) for p in parts]
    sizes = [p.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]
    return Node(tape, "concat", tuple(parts), np.concatenate([p.value for p in parts], axis=axis),
                lambda g: tuple(np.split(g, splits, axis=axis)))


def reshape(a: Node, shape) -> Node:
    old = a.shape
    return Node(a.tape, "reshape", (a,), a.value.reshape(shape), lambda g: (g.reshape(old),))


def stop_gradient(a: Node) -> Node:
    return a.tape.constant(a.value.copy())


def kink_marker(a: Node) -> Node:
    """Identity op that flags 0 as a non-smooth locus of its input (see :func:`kink_gap`)."""
    return Node(a.tape, "kink_marker", (a,), a.value, lambda g: (g,))


# ---------------------------------------------------------------------------
# Backward pass


def backward(tape: Tape, loss: Node) -> None:
    """Accumulate d(loss)/d(param) into every Param bound to ``tape``."""
    if loss.tape is not tape:
        raise ValueError("loss node is not on this tape")
    if loss.value.size != 1:
        raise NonScalarLoss(f"loss has shape {loss.shape}")
    if tape._used:
        raise DoubleBackward("backward already ran on this tape; call tape.reset() first")
    tape._used = True
    grads: list[np.ndarray | None] = [None] * (loss.index + 1)
    grads[loss.index] = np.ones_like(loss.value)
    for i in range(loss.index, -1, -1):
        g = grads[i]
        if g is None:
            continue
        node = tape.nodes[i]
        if node.param is not None:
            node.param.grad = node.param.grad + g.reshape(node.param.shape)
            continue
        if node._backward is None:
            continue
        for parent, pg in zip(node.parents, node._backward(g)):
            if parent.op == "const":
                continue
            j = parent.index
            grads[j] = pg if grads[j] is None else grads[j] + pg


def zero_grads(params: Sequence[Param]) -> None:
    for p in params:
        p.zero_grad()


# ---------------------------------------------------------------------------
# Finite-difference checking


def _gap_abs(vals):
    return np.abs(vals[0])


def _gap_piecewise(vals):
    ax = np.abs(vals[0])
    return np.minimum(ax, np.abs(ax - 1.0))


_KINKS: dict[str, Callable[[list[np.ndarray]], np.ndarray]] = {
    "abs": _gap_abs,
    "relu": _gap_abs,
    "leaky_relu": _gap_abs,
    "signed_power": _gap_abs,
    "piecewise_power": _gap_piecewise,
    "sqrt": _gap_abs,
    "kink_marker": _gap_abs,
}


def kink_gap(tape: Tape) -> float:
    """Smallest distance from any recorded op input to that op's non-smooth locus."""
    gap = np.inf
    for node in tape.nodes:
        fn = _KINKS.get(node.op)
        if fn is None:
            continue
        g = fn([p.value for p in node.parents])
        if g.size:
            gap = min(gap, float(np.min(g)))
    return gap


@dataclass
class GradientReport:
    max_rel_error: float
    max_abs_error: float
    worst_param: str
    analytic: dict[str, np.ndarray]
    numeric: dict[str, np.ndarray]


def gradient_check(closure: Callable[[Tape], Node], params: Sequence[Param], step: float = 1e-5,
                   floor: float = 1e-6) -> GradientReport:
    """Compare reverse-mode gradients with central differences.

    ``closure(tape)`` must record a scalar loss on ``tape`` deterministically.
    Relative error of an entry is ``|a - n| / max(|a|, |n|, floor)``.
    """
    zero_grads(params)
    tape = Tape()
    backward(tape, closure(tape))
    analytic = {p.name or str(i): p.grad.copy() for i, p in enumerate(params)}
    numeric = {}
    for i, p in enumerate(params):
        num = np.zeros_like(p.value)
        flat = p.value.reshape(-1)
        nflat = num.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + step
            fp = float(closure(Tape()).value)
            flat[j] = orig - step
            fm = float(closure(Tape()).value)
            flat[j] = orig
            nflat[j] = (fp - fm) / (2 * step)
        numeric[p.name or str(i)] = num
    worst, worst_abs, worst_name = 0.0, 0.0, ""
    for name in analytic:
        a, n = analytic[name], numeric[name]
        diff = np.abs(a - n)
        rel = diff / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
        if rel.size and rel.max() > worst:
            worst, worst_name = float(rel.max()), name
        if diff.size:
            worst_abs = max(worst_abs, float(diff.max()))
    zero_grads(params)
    return GradientReport(worst, worst_abs, worst_name, analytic, numeric)


def clip_by_global_norm(grads: Sequence[np.ndarray], max_norm: float) -> tuple[list[np.ndarray], float]:
    """Scale ``grads`` by ``min(1, max_norm / ||g||_2)``; returns the scaled list and the pre-clip norm."""
    norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))
    if norm > max_norm:
        scale = max_norm / norm
        return [g * scale for g in grads], norm
    return list(grads), norm
