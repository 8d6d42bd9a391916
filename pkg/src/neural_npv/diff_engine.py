"""Small tape-based autodiff for tanh multilayer perceptrons.

Values flowing through the networks are either plain ``numpy`` arrays
(fast path, no gradients) or :class:`Var` nodes recorded on a
:class:`GradTape`.  Every op in this module dispatches on its argument
type, so the same network/dynamics code serves both paths.

Input derivatives are computed in forward mode: tangents are pushed
through the network with ordinary ops.  When the tangents are ``Var``
nodes the directional-derivative computation is itself recorded, and a
single reverse sweep over the tape yields mixed second derivatives such
as d/dW (dV/dx . f).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Union

import numpy as np

__all__ = [
    "ShapeError",
    "NumericError",
    "EmptyGradientError",
    "NetworkParams",
    "DualBatch",
    "GradTape",
    "Var",
    "TapedParams",
    "init_network",
    "forward",
    "forward_dual",
    "input_jacobian",
    "weight_gradient",
    "finite_diff_check",
]


class ShapeError(ValueError):
    pass


class NumericError(FloatingPointError):
    def __init__(self, message, layer=None):
        super().__init__(message)
        self.layer = layer


class EmptyGradientError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# tape and nodes
# ---------------------------------------------------------------------------


class GradTape:
    """Records operations in creation order.

    Creation order is a valid topological order, so the reverse sweep is
    a plain backwards walk over ``nodes``.
    """

    def __init__(self):
        self.nodes: list[Var] = []

    def var(self, value, name: Optional[str] = None) -> "Var":
        """Register a leaf (a parameter or an input we want gradients for)."""
        return Var(np.array(value, dtype=np.float64), self, (), None, name=name)

    def gradient(self, loss: "Var", wrt: Sequence["Var"]) -> list[np.ndarray]:
        if not isinstance(loss, Var) or loss.tape is not self:
            raise EmptyGradientError("loss is not recorded on this tape")
        if loss.value.size != 1:
            raise ShapeError(f"loss must be scalar, got shape {loss.value.shape}")
        if any(not isinstance(w, Var) or w.tape is not self for w in wrt):
            raise EmptyGradientError("requested parameters are not on this tape")
        grads: dict[int, np.ndarray] = {loss.index: np.ones_like(loss.value)}
        for node in reversed(self.nodes[: loss.index + 1]):
            g = grads.pop(node.index, None)
            if g is None or node.vjp is None:
                if g is not None:
                    grads[node.index] = g  # leaf: keep for lookup
                continue
            for parent, pg in zip(node.parents, node.vjp(g)):
                if pg is None or not isinstance(parent, Var):
                    continue
                if parent.index in grads:
                    grads[parent.index] = grads[parent.index] + pg
                else:
                    grads[parent.index] = pg
        return [grads.get(w.index, np.zeros_like(w.value)) for w in wrt]


class Var:
    __slots__ = ("value", "tape", "parents", "vjp", "index", "name")
    __array_priority__ = 100.0

    def __init__(self, value, tape, parents, vjp, name=None):
        self.value = value
        self.tape = tape
        self.parents = parents
        self.vjp = vjp
        self.name = name
        self.index = len(tape.nodes)
        tape.nodes.append(self)

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __repr__(self):
        return f"Var(shape={self.value.shape}, name={self.name})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(other))

    def __rsub__(self, other):
        return add(other, neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __getitem__(self, idx):
        return getitem(self, idx)


Array = Union[np.ndarray, Var]


def _val(a):
    return a.value if isinstance(a, Var) else a


def _tape_of(*args):
    for a in args:
        if isinstance(a, Var):
            return a.tape
    return None


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# dispatching ops
# ---------------------------------------------------------------------------


def add(a, b):
    tape = _tape_of(a, b)
    av, bv = _val(a), _val(b)
    out = av + bv
    if tape is None:
        return out
    sa, sb = np.shape(av), np.shape(bv)
    return Var(out, tape, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def neg(a):
    if not isinstance(a, Var):
        return -a
    return Var(-a.value, a.tape, (a,), lambda g: (-g,))


def mul(a, b):
    tape = _tape_of(a, b)
    av, bv = _val(a), _val(b)
    out = av * bv
    if tape is None:
        return out
    sa, sb = np.shape(av), np.shape(bv)
    return Var(
        out,
        tape,
        (a, b),
        lambda g: (_unbroadcast(g * bv, sa), _unbroadcast(g * av, sb)),
    )


def div(a, b):
    tape = _tape_of(a, b)
    av, bv = _val(a), _val(b)
    out = av / bv
    if tape is None:
        return out
    sa, sb = np.shape(av), np.shape(bv)
    return Var(
        out,
        tape,
        (a, b),
        lambda g: (_unbroadcast(g / bv, sa), _unbroadcast(-g * out / bv, sb)),
    )


def _unary(fn, dfn):
    def op(a):
        if not isinstance(a, Var):
            return fn(a)
        av = a.value
        out = fn(av)
        return Var(out, a.tape, (a,), lambda g: (g * dfn(av, out),))

    return op


tanh = _unary(np.tanh, lambda x, y: 1.0 - y * y)
sin = _unary(np.sin, lambda x, y: np.cos(x))
cos = _unary(np.cos, lambda x, y: -np.sin(x))
sqrt = _unary(np.sqrt, lambda x, y: 0.5 / y)
arcsin = _unary(np.arcsin, lambda x, y: 1.0 / np.sqrt(1.0 - x * x))
arctan = _unary(np.arctan, lambda x, y: 1.0 / (1.0 + x * x))
arctanh = _unary(np.arctanh, lambda x, y: 1.0 / (1.0 - x * x))
square = _unary(np.square, lambda x, y: 2.0 * x)
relu = _unary(lambda x: np.maximum(x, 0.0), lambda x, y: (x > 0).astype(np.float64))


def clip(a, lo, hi):
    if not isinstance(a, Var):
        return np.clip(a, lo, hi)
    av = a.value
    inside = ((av >= lo) & (av <= hi)).astype(np.float64)
    return Var(np.clip(av, lo, hi), a.tape, (a,), lambda g: (g * inside,))


def minimum(a, b):
    """Elementwise min; ties route the gradient to ``a``."""
    tape = _tape_of(a, b)
    av, bv = _val(a), _val(b)
    out = np.minimum(av, bv)
    if tape is None:
        return out
    pick_a = av <= bv
    sa, sb = np.shape(av), np.shape(bv)
    return Var(
        out,
        tape,
        (a, b),
        lambda g: (_unbroadcast(g * pick_a, sa), _unbroadcast(g * ~pick_a, sb)),
    )


def maximum(a, b):
    return neg(minimum(neg(a), neg(b)))


def reduce_sum(a, axis=None, keepdims=False):
    if not isinstance(a, Var):
        return np.sum(a, axis=axis, keepdims=keepdims)
    shape = a.value.shape
    out = np.sum(a.value, axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return Var(out, a.tape, (a,), vjp)


def reduce_mean(a, axis=None):
    n = _val(a).size if axis is None else _val(a).shape[axis]
    return mul(reduce_sum(a, axis=axis), 1.0 / n)


def reduce_max(a, axis=-1):
    """Max along one axis; the gradient goes to the first maximizer."""
    if not isinstance(a, Var):
        return np.max(a, axis=axis)
    av = a.value
    arg = np.argmax(av, axis=axis)
    out = np.take_along_axis(av, np.expand_dims(arg, axis), axis).squeeze(axis)

    def vjp(g):
        full = np.zeros_like(av)
        np.put_along_axis(full, np.expand_dims(arg, axis), np.expand_dims(g, axis), axis)
        return (full,)

    return Var(out, a.tape, (a,), vjp)


def getitem(a, idx):
    if not isinstance(a, Var):
        return a[idx]
    shape = a.value.shape

    def vjp(g):
        full = np.zeros(shape)
        full[idx] += g
        return (full,)

    return Var(a.value[idx], a.tape, (a,), vjp)


def concat(items, axis=-1):
    tape = _tape_of(*items)
    vals = [np.asarray(_val(t), dtype=np.float64) for t in items]
    if tape is None:
        return np.concatenate(vals, axis=axis)
    out = np.concatenate(vals, axis=axis)
    splits = np.cumsum([v.shape[axis] for v in vals])[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return Var(out, tape, tuple(items), vjp)


def stack(items, axis=0):
    tape = _tape_of(*items)
    vals = [np.asarray(_val(t), dtype=np.float64) for t in items]
    out = np.stack(vals, axis=axis)
    if tape is None:
        return out
    n = len(items)

    def vjp(g):
        return tuple(np.take(g, i, axis=axis) for i in range(n))

    return Var(out, tape, tuple(items), vjp)


def linear(x, w, b=None):
    """``x @ w.T + b`` over the last axis of ``x`` (any leading dims)."""
    tape = _tape_of(x, w, b)
    xv, wv = _val(x), _val(w)
    out = xv @ wv.T
    if b is not None:
        out = out + _val(b)
    if tape is None:
        return out

    def vjp(g):
        gx = g @ wv if isinstance(x, Var) else None
        gw = gb = None
        if isinstance(w, Var):
            gw = g.reshape(-1, g.shape[-1]).T @ xv.reshape(-1, xv.shape[-1])
        if isinstance(b, Var):
            gb = g.reshape(-1, g.shape[-1]).sum(axis=0)
        return gx, gw, gb

    return Var(out, tape, (x, w, b), vjp)


# ---------------------------------------------------------------------------
# networks
# ---------------------------------------------------------------------------


@dataclass
class NetworkParams:
    """Weights of one MLP: tanh on hidden layers, configurable output."""

    layer_dims: list[int]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    output_activation: str = "identity"

    def __post_init__(self):
        self.layer_dims = [int(d) for d in self.layer_dims]
        if len(self.layer_dims) < 2 or min(self.layer_dims) < 1:
            raise ShapeError(f"invalid layer dims {self.layer_dims}")
        if self.output_activation not in ("identity", "tanh"):
            raise ValueError(f"unknown output activation {self.output_activation!r}")
        n_layers = len(self.layer_dims) - 1
        if len(self.weights) != n_layers or len(self.biases) != n_layers:
            raise ShapeError("one weight matrix and one bias per layer required")
        self.weights = [np.asarray(w, dtype=np.float64) for w in self.weights]
        self.biases = [np.asarray(b, dtype=np.float64) for b in self.biases]
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            expect = (self.layer_dims[i + 1], self.layer_dims[i])
            if w.shape != expect or b.shape != (self.layer_dims[i + 1],):
                raise ShapeError(
                    f"layer {i}: weight {w.shape} / bias {b.shape}, expected {expect}"
                )
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise NumericError(f"non-finite parameters in layer {i}", layer=i)

    @property
    def in_width(self) -> int:
        return self.layer_dims[0]

    @property
    def out_width(self) -> int:
        return self.layer_dims[-1]

    def arrays(self) -> list[np.ndarray]:
        """Weights then biases per layer, interleaved: W0, b0, W1, b1, ..."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def with_arrays(self, arrays: Sequence[np.ndarray]) -> "NetworkParams":
        return NetworkParams(
            list(self.layer_dims),
            [np.array(a) for a in arrays[0::2]],
            [np.array(a) for a in arrays[1::2]],
            self.output_activation,
        )

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    def from_flat(self, vec: np.ndarray) -> "NetworkParams":
        arrays, pos = [], 0
        for a in self.arrays():
            arrays.append(np.asarray(vec[pos : pos + a.size]).reshape(a.shape))
            pos += a.size
        if pos != len(vec):
            raise ShapeError(f"flat vector has {len(vec)} entries, expected {pos}")
        return self.with_arrays(arrays)

    def copy(self) -> "NetworkParams":
        return self.with_arrays(self.arrays())

    @property
    def n_params(self) -> int:
        return sum(a.size for a in self.arrays())

    def on_tape(self, tape: GradTape) -> "TapedParams":
        return TapedParams(self, [tape.var(a) for a in self.arrays()])


@dataclass
class TapedParams:
    """Parameter leaves of one network registered on a tape."""

    net: NetworkParams
    leaves: list[Var]

    @property
    def weights(self):
        return self.leaves[0::2]

    @property
    def biases(self):
        return self.leaves[1::2]


@dataclass
class DualBatch:
    """Primal batch plus an optional stack of tangent batches.

    ``tangents`` has shape (K, *primal.shape): K directional derivatives
    carried through the same forward pass.
    """

    primal: Array
    tangents: Optional[Array] = None

    def __post_init__(self):
        if self.tangents is not None:
            ps, ts = np.shape(_val(self.primal)), np.shape(_val(self.tangents))
            if ts[1:] != ps:
                raise ShapeError(f"tangent shape {ts} does not match primal {ps}")


def init_network(layer_dims, rng, output_activation="identity", gain=1.0, zero=False):
    """Glorot-normal weights, zero biases."""
    weights, biases = [], []
    for n_in, n_out in zip(layer_dims[:-1], layer_dims[1:]):
        if zero:
            weights.append(np.zeros((n_out, n_in)))
        else:
            std = gain * np.sqrt(2.0 / (n_in + n_out))
            weights.append(rng.normal(0.0, std, size=(n_out, n_in)))
        biases.append(np.zeros(n_out))
    return NetworkParams(list(layer_dims), weights, biases, output_activation)


def _check_width(net: NetworkParams, x):
    width = np.shape(_val(x))[-1]
    if width != net.in_width:
        raise ShapeError(f"input width {width} does not match network input {net.in_width}")


def forward(net: NetworkParams, inputs, params: Optional[TapedParams] = None):
    """Evaluate the network on a batch (last axis = features)."""
    return forward_dual(net, DualBatch(inputs), params).primal


def forward_dual(
    net: NetworkParams, batch: DualBatch, params: Optional[TapedParams] = None
) -> DualBatch:
    """Forward pass carrying tangents (forward-mode directional derivatives).

    With ``params`` given, the network weights are tape leaves and every
    op, including the tangent propagation, is recorded.
    """
    _check_width(net, batch.primal)
    ws = params.weights if params is not None else net.weights
    bs = params.biases if params is not None else net.biases
    h, t = batch.primal, batch.tangents
    last = len(ws) - 1
    for i, (w, b) in enumerate(zip(ws, bs)):
        h = linear(h, w, b)
        if t is not None:
            t = linear(t, w)
        if i < last or net.output_activation == "tanh":
            h = tanh(h)
            if t is not None:
                t = mul(1.0 - mul(h, h), t)
        if not isinstance(h, Var) and not np.all(np.isfinite(h)):
            raise NumericError(f"non-finite activation in layer {i}", layer=i)
    return DualBatch(h, t)


def input_jacobian(net: NetworkParams, inputs: np.ndarray) -> np.ndarray:
    """d output / d input by stacking forward-mode derivatives along the basis.

    A single vector gives an (out, in) matrix; a batch (B, in) gives
    (B, out, in).
    """
    x = np.asarray(inputs, dtype=np.float64)
    single = x.ndim == 1
    xb = np.atleast_2d(x)
    _check_width(net, xb)
    eye = np.eye(net.in_width)
    tangents = np.broadcast_to(eye[:, None, :], (net.in_width,) + xb.shape)
    out = forward_dual(net, DualBatch(xb, tangents)).tangents  # (in, B, out)
    jac = np.transpose(out, (1, 2, 0))
    return jac[0] if single else jac


def weight_gradient(tape: GradTape, loss: Var, params: TapedParams) -> NetworkParams:
    """Gradient of a scalar loss with respect to every weight and bias."""
    grads = tape.gradient(loss, params.leaves)
    return params.net.with_arrays(grads)


def finite_diff_check(net: NetworkParams, point, h: float = 1e-5) -> float:
    """Max of |analytic - central difference| / (|analytic| + h) over the Jacobian."""
    if h <= 0:
        raise ValueError("step must be positive")
    x = np.asarray(point, dtype=np.float64)
    jac = input_jacobian(net, x)
    fd = np.empty_like(jac)
    for j in range(x.size):
        e = np.zeros_like(x)
        e[j] = h
        fd[:, j] = (forward(net, x + e) - forward(net, x - e)) / (2 * h)
    return float(np.max(np.abs(jac - fd) / (np.abs(jac) + h)))


def numeric_gradient(fn: Callable[[np.ndarray], float], x: np.ndarray, h: float) -> np.ndarray:
    """Central-difference gradient of a scalar function (test utility)."""
    x = np.asarray(x, dtype=np.float64)
    g = np.empty_like(x)
    flat = x.ravel()
    for i in range(flat.size):
        xp, xm = flat.copy(), flat.copy()
        xp[i] += h
        xm[i] -= h
        g.ravel()[i] = (fn(xp.reshape(x.shape)) - fn(xm.reshape(x.shape))) / (2 * h)
    return g
