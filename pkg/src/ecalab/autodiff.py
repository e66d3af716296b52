"""Minimal reverse-mode automatic differentiation on a dynamic tape.

Values are float64 numpy arrays (0-d for scalars).  Elementwise ops follow
numpy broadcasting; the backward pass sums gradients back down to each
operand's shape.  The tape is append-only, so insertion order is a
topological order and backward is one reverse sweep.

    tape = Tape()
    x = tape.var(3.0)
    grads = tape.backward(x * x)
    grads[x]  # -> 6.0
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from .errors import NonPositiveTemperature, NonScalarLoss, NumericDomain, ShapeMismatch

DIV_EPS = 1e-12

_VJP = Callable[[np.ndarray], np.ndarray]


class Tape:
    def __init__(self):
        # parents[i] is a tuple of (parent_id, vjp) pairs; leaves have ().
        self._parents: list[tuple[tuple[int, _VJP], ...]] = []
        self._shapes: list[tuple] = []

    def __len__(self):
        return len(self._parents)

    def _push(self, value: np.ndarray, parents) -> "Var":
        self._parents.append(tuple(parents))
        self._shapes.append(value.shape)
        return Var(self, len(self._parents) - 1, value)

    def var(self, value) -> "Var":
        """Create a leaf variable."""
        value = np.array(value, dtype=np.float64)
        if not np.all(np.isfinite(value)):
            raise NumericDomain("leaf value is not finite")
        return self._push(value, ())

    def backward(self, loss: "Var") -> "Gradients":
        if loss.tape is not self:
            raise ValueError("loss was recorded on a different tape")
        if loss.value.size != 1:
            raise NonScalarLoss(f"loss must be scalar, got shape {loss.value.shape}")
        grads: list[np.ndarray | None] = [None] * len(self._parents)
        grads[loss.node_id] = np.ones(self._shapes[loss.node_id])
        for i in range(loss.node_id, -1, -1):
            g = grads[i]
            if g is None:
                continue
            for pid, vjp in self._parents[i]:
                contrib = vjp(g)
                if grads[pid] is None:
                    grads[pid] = contrib
                else:
                    grads[pid] = grads[pid] + contrib
        return Gradients(self, grads)


class Gradients:
    """Gradient map indexed by ``Var`` or node id; untouched nodes read as zero."""

    def __init__(self, tape: Tape, grads):
        self._tape = tape
        self._grads = grads

    def __getitem__(self, key) -> np.ndarray:
        i = key.node_id if isinstance(key, Var) else int(key)
        g = self._grads[i]
        if g is None:
            return np.zeros(self._tape._shapes[i])
        return g

    def __contains__(self, key) -> bool:
        i = key.node_id if isinstance(key, Var) else int(key)
        return 0 <= i < len(self._grads)

    def __len__(self):
        return len(self._grads)


class Var:
    __slots__ = ("tape", "node_id", "value")
    __array_priority__ = 1000  # make ndarray <op> Var dispatch to Var's reflected op

    def __init__(self, tape: Tape, node_id: int, value: np.ndarray):
        self.tape = tape
        self.node_id = node_id
        self.value = value

    @property
    def shape(self):
        return self.value.shape

    def item(self) -> float:
        return float(self.value)

    def __repr__(self):
        return f"Var(id={self.node_id}, shape={self.value.shape})"

    __add__ = lambda self, o: add(self, o)
    __radd__ = lambda self, o: add(o, self)
    __sub__ = lambda self, o: sub(self, o)
    __rsub__ = lambda self, o: sub(o, self)
    __mul__ = lambda self, o: mul(self, o)
    __rmul__ = lambda self, o: mul(o, self)
    __truediv__ = lambda self, o: div(self, o)
    __rtruediv__ = lambda self, o: div(o, self)
    __matmul__ = lambda self, o: dot(self, o)
    __rmatmul__ = lambda self, o: dot(o, self)
    __neg__ = lambda self: scale(self, -1.0)


def _tape_of(*xs) -> Tape | None:
    tape = None
    for x in xs:
        if isinstance(x, Var):
            if tape is not None and x.tape is not tape:
                raise ValueError("operands live on different tapes")
            tape = x.tape
    return tape


def _val(x) -> np.ndarray:
    return x.value if isinstance(x, Var) else np.asarray(x, dtype=np.float64)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_shape(a: np.ndarray, b: np.ndarray) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeMismatch(f"cannot broadcast {a.shape} with {b.shape}") from exc


def _record(value: np.ndarray, pairs) -> "Var | np.ndarray":
    """Push a node whose parents are the Var operands in ``pairs``.

    ``pairs`` holds (operand, vjp) tuples; constant operands are dropped.
    With no Var operand the raw value is returned.
    """
    tape = _tape_of(*(x for x, _ in pairs))
    if tape is None:
        return value
    return tape._push(value, [(x.node_id, f) for x, f in pairs if isinstance(x, Var)])


def _binary(a, b, value, ga, gb):
    av, bv = _val(a), _val(b)
    sa, sb = av.shape, bv.shape
    return _record(
        value,
        [(a, lambda g: _unbroadcast(ga(g), sa)), (b, lambda g: _unbroadcast(gb(g), sb))],
    )


def add(a, b):
    av, bv = _val(a), _val(b)
    _broadcast_shape(av, bv)
    return _binary(a, b, av + bv, lambda g: g, lambda g: g)


def sub(a, b):
    av, bv = _val(a), _val(b)
    _broadcast_shape(av, bv)
    return _binary(a, b, av - bv, lambda g: g, lambda g: -g)


def mul(a, b):
    av, bv = _val(a), _val(b)
    _broadcast_shape(av, bv)
    return _binary(a, b, av * bv, lambda g: g * bv, lambda g: g * av)


def div(a, b):
    av, bv = _val(a), _val(b)
    _broadcast_shape(av, bv)
    if np.any(np.abs(bv) < DIV_EPS):
        raise NumericDomain("division by a value smaller than 1e-12 in magnitude")
    out = av / bv
    return _binary(a, b, out, lambda g: g / bv, lambda g: -g * out / bv)


def scale(x, k: float):
    k = float(k)
    return _record(_val(x) * k, [(x, lambda g: g * k)])


def dot(a, b):
    """``a @ b`` for a of shape (..., d) and b of shape (d,) or (d, k)."""
    av, bv = _val(a), _val(b)
    if bv.ndim not in (1, 2) or av.ndim < 1 or av.shape[-1] != bv.shape[0]:
        raise ShapeMismatch(f"dot: incompatible shapes {av.shape} and {bv.shape}")
    out = np.asarray(av @ bv)
    if bv.ndim == 1:
        def ga(g):
            return np.multiply.outer(g, bv)

        def gb(g):
            return np.tensordot(av, g, axes=(tuple(range(av.ndim - 1)), tuple(range(g.ndim))))
    else:
        def ga(g):
            return g @ bv.T

        def gb(g):
            return av.reshape(-1, av.shape[-1]).T @ g.reshape(-1, bv.shape[1])
    return _record(out, [(a, ga), (b, gb)])


def weighted_sum(alpha, h):
    """sum_i alpha[..., i] * h[..., i, :] for alpha (S, n) and h (S, n, d)."""
    av, hv = _val(alpha), _val(h)
    if hv.ndim != av.ndim + 1 or hv.shape[:-1] != av.shape:
        raise ShapeMismatch(f"weighted_sum: {av.shape} vs {hv.shape}")
    out = np.einsum("...n,...nd->...d", av, hv)
    return _record(
        out,
        [
            (alpha, lambda g: np.einsum("...d,...nd->...n", g, hv)),
            (h, lambda g: av[..., None] * g[..., None, :]),
        ],
    )


def sum(x, axis=None, keepdims: bool = False):  # noqa: A001 - mirrors numpy
    xv = _val(x)
    shape = xv.shape
    out = np.asarray(xv.sum(axis=axis, keepdims=keepdims))

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, shape).copy()

    return _record(out, [(x, vjp)])


def mean(x, axis=None, keepdims: bool = False):
    xv = _val(x)
    n = xv.size if axis is None else np.prod([xv.shape[i] for i in np.atleast_1d(axis)])
    return scale(sum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def sqrt(x):
    xv = _val(x)
    if np.any(xv < 0):
        raise NumericDomain("sqrt of a negative value")
    out = np.sqrt(xv)
    return _record(out, [(x, lambda g: g * 0.5 / out)])


def square(x):
    xv = _val(x)
    return _record(xv * xv, [(x, lambda g: 2.0 * g * xv)])


def exp(x):
    out = np.exp(_val(x))
    return _record(out, [(x, lambda g: g * out)])


def log(x):
    xv = _val(x)
    if np.any(xv <= 0):
        raise NumericDomain("log of a non-positive value")
    return _record(np.log(xv), [(x, lambda g: g / xv)])


def softplus(x):
    """log(1 + e^x) via the stable branch max(x, 0) + log1p(exp(-|x|))."""
    xv = _val(x)
    out = np.maximum(xv, 0.0) + np.log1p(np.exp(-np.abs(xv)))
    sig = 0.5 * (1.0 + np.tanh(0.5 * xv))
    return _record(out, [(x, lambda g: g * sig)])


def tanh(x):
    out = np.tanh(_val(x))
    return _record(out, [(x, lambda g: g * (1.0 - out * out))])


def max_reduce(x, axis=None):
    """Maximum along ``axis``; the gradient goes to the first maximiser."""
    xv = _val(x)
    if axis is None:
        flat = np.argmax(xv)
        out = np.asarray(xv.reshape(-1)[flat])

        def vjp(g):
            r = np.zeros(xv.size)
            r[flat] = g
            return r.reshape(xv.shape)
    else:
        idx = np.expand_dims(np.argmax(xv, axis=axis), axis)
        out = np.take_along_axis(xv, idx, axis=axis).squeeze(axis)

        def vjp(g):
            r = np.zeros(xv.shape)
            np.put_along_axis(r, idx, np.expand_dims(g, axis), axis=axis)
            return r
    return _record(out, [(x, vjp)])


def minimum(x, cap: float):
    """Elementwise min(x, cap); zero gradient where the cap is active."""
    xv = _val(x)
    live = xv < cap
    return _record(np.where(live, xv, cap), [(x, lambda g: g * live)])


def reshape(x, shape):
    xv = _val(x)
    old = xv.shape
    return _record(xv.reshape(shape), [(x, lambda g: g.reshape(old))])


def stop_grad(x):
    """Forward identity; the result is a fresh leaf so nothing flows back."""
    xv = _val(x).copy()
    tape = _tape_of(x)
    return tape._push(xv, ()) if tape is not None else xv


def _softmax_unit(u, axis: int, mask):
    uv = _val(u)
    if mask is not None:
        uv = np.where(mask, uv, -np.inf)
    m = np.max(uv, axis=axis, keepdims=True)
    e = np.exp(uv - m)
    alpha = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return alpha * (g - (alpha * g).sum(axis=axis, keepdims=True))

    return _record(alpha, [(u, vjp)])


def softmax(z, temperature=1.0, axis: int = -1, mask=None):
    """softmax(z / temperature) along ``axis``; masked-out entries get weight 0.

    ``temperature`` may be a constant, an array broadcastable against z
    (e.g. one temperature per row) or a Var.
    """
    tv = _val(temperature)
    if np.any(tv <= 0):
        raise NonPositiveTemperature(f"temperature must be > 0, got min {tv.min()}")
    u = z if (not isinstance(temperature, Var) and np.all(tv == 1.0)) else div(z, temperature)
    return _softmax_unit(u, axis, None if mask is None else np.asarray(mask, dtype=bool))
