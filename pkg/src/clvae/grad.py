"""Minimal reverse-mode differentiation over dense float64 arrays.

A :class:`Value` wraps a numpy array and records the operation that produced
it. Calling :func:`backward` on a scalar result fills ``.grad`` on every
node reachable from it. Leaf nodes accumulate across calls until
:func:`zero_grad` is used; interior nodes are reset on every pass.

Only the operations the CLVAE networks and objective need are provided:
elementwise arithmetic (numpy broadcasting, reduced on the way back), dense
affine layers, ReLU/softplus, log/exp, log-add-exp, ln-Gamma/digamma and a
reparameterised Gamma sampling node.
"""
import json
import os
from dataclasses import dataclass, field

import numpy as np
from scipy import special

from . import numerics
from .exceptions import ConfigError, ShapeError, ValidationError

__all__ = [
    "Value",
    "parameter",
    "affine",
    "relu",
    "softplus",
    "softplus_inverse",
    "log",
    "exp",
    "logaddexp",
    "lgamma",
    "digamma",
    "gamma_sample",
    "concatenate",
    "backward",
    "zero_grad",
    "AdamState",
    "Adam",
    "adam_step",
    "save_arrays",
    "load_arrays",
]

CHECKPOINT_VERSION = 1


class Value:
    __slots__ = ("data", "grad", "parents", "_backward", "requires_grad", "visits", "name")
    __array_ufunc__ = None  # make numpy defer to the reflected operators

    def __init__(self, data, parents=(), backward_fn=None, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=float)
        self.parents = parents
        self._backward = backward_fn
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self.visits = 0
        self.name = name

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Value{label}(shape={self.data.shape})"

    @property
    def shape(self):
        return self.data.shape

    def _accumulate(self, g):
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    # arithmetic -----------------------------------------------------------

    def __add__(self, other):
        other = _lift(other)

        def bw(g):
            self._accumulate(_unbroadcast(g, self.shape))
            other._accumulate(_unbroadcast(g, other.shape))

        return Value(self.data + other.data, (self, other), bw)

    __radd__ = __add__

    def __neg__(self):
        return Value(-self.data, (self,), lambda g: self._accumulate(-g))

    def __sub__(self, other):
        return self + (-_lift(other))

    def __rsub__(self, other):
        return _lift(other) + (-self)

    def __mul__(self, other):
        other = _lift(other)

        def bw(g):
            self._accumulate(_unbroadcast(g * other.data, self.shape))
            other._accumulate(_unbroadcast(g * self.data, other.shape))

        return Value(self.data * other.data, (self, other), bw)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = _lift(other)
        out = self.data / other.data

        def bw(g):
            self._accumulate(_unbroadcast(g / other.data, self.shape))
            other._accumulate(_unbroadcast(-g * out / other.data, other.shape))

        return Value(out, (self, other), bw)

    def __rtruediv__(self, other):
        return _lift(other) / self

    def __pow__(self, k):
        if isinstance(k, Value):
            raise TypeError("only constant exponents are supported")
        out = self.data**k
        return Value(out, (self,), lambda g: self._accumulate(g * k * self.data ** (k - 1)))

    # reductions and indexing ---------------------------------------------

    def sum(self, axis=None):
        def bw(g):
            if axis is not None:
                g = np.expand_dims(g, axis)
            self._accumulate(np.broadcast_to(g, self.shape))

        return Value(self.data.sum(axis=axis), (self,), bw)

    def mean(self, axis=None):
        n = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis) * (1.0 / n)

    def reshape(self, *shape):
        return Value(self.data.reshape(*shape), (self,), lambda g: self._accumulate(g.reshape(self.shape)))

    def __getitem__(self, idx):
        def bw(g):
            full = np.zeros_like(self.data)
            np.add.at(full, idx, g)
            self._accumulate(full)

        return Value(self.data[idx], (self,), bw)


def _lift(x):
    return x if isinstance(x, Value) else Value(x)


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def parameter(data, name=None):
    """A trainable leaf."""
    return Value(np.array(data, dtype=float), requires_grad=True, name=name)


# layers and elementwise functions -----------------------------------------


def affine(inputs, weights, bias):
    """``inputs @ weights + bias`` with the bias broadcast over rows."""
    x, w, b = _lift(inputs), _lift(weights), _lift(bias)
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"affine: cannot multiply {x.shape} by {w.shape}")
    if b.shape != (w.shape[1],):
        raise ShapeError(f"affine: bias shape {b.shape} does not match output width {w.shape[1]}")

    def bw(g):
        x._accumulate(g @ w.data.T)
        w._accumulate(x.data.T @ g)
        b._accumulate(g.sum(axis=0))

    return Value(x.data @ w.data + b.data, (x, w, b), bw)


def concatenate(values, axis=-1):
    values = [_lift(v) for v in values]
    datas = [v.data for v in values]
    bounds = np.cumsum([0] + [d.shape[axis] for d in datas])

    def bw(g):
        for v, lo, hi in zip(values, bounds[:-1], bounds[1:]):
            v._accumulate(np.take(g, np.arange(lo, hi), axis=axis))

    return Value(np.concatenate(datas, axis=axis), tuple(values), bw)


def relu(v):
    mask = v.data > 0
    return Value(np.where(mask, v.data, 0.0), (v,), lambda g: v._accumulate(g * mask))


def softplus(v):
    out = np.logaddexp(0.0, v.data)
    return Value(out, (v,), lambda g: v._accumulate(g * special.expit(v.data)))


def softplus_inverse(y):
    """Inverse of ln(1 + e^x) for y > 0 (plain numpy)."""
    y = np.asarray(y, dtype=float)
    return y + np.log(-np.expm1(-y))


def log(v):
    return Value(np.log(v.data), (v,), lambda g: v._accumulate(g / v.data))


def exp(v):
    out = np.exp(v.data)
    return Value(out, (v,), lambda g: v._accumulate(g * out))


def logaddexp(a, b):
    a, b = _lift(a), _lift(b)
    out = np.logaddexp(a.data, b.data)

    def bw(g):
        with np.errstate(invalid="ignore"):
            wa = np.exp(a.data - out)
            wb = np.exp(b.data - out)
        a._accumulate(_unbroadcast(g * np.nan_to_num(wa), a.shape))
        b._accumulate(_unbroadcast(g * np.nan_to_num(wb), b.shape))

    return Value(out, (a, b), bw)


def lgamma(v):
    return Value(numerics.ln_gamma(v.data), (v,), lambda g: v._accumulate(g * numerics.digamma(v.data)))


def digamma(v):
    return Value(numerics.digamma(v.data), (v,), lambda g: v._accumulate(g * numerics.trigamma(v.data)))


def gamma_sample(shape, rate, rng=None, uniforms=None):
    """Reparameterised Gamma(shape, rate) draws, one per entry.

    Draws come from the Marsaglia-Tsang sampler driven by ``rng``, or, when
    ``uniforms`` is given, from the inverse CDF at those fixed probabilities
    (common random numbers, so the forward map is a smooth function of the
    parameters). Gradients use implicit reparameterisation in both cases.
    """
    shape, rate = _lift(shape), _lift(rate)
    if uniforms is not None:
        u = special.gammaincinv(shape.data, np.broadcast_to(uniforms, shape.shape))
    elif rng is not None:
        u = numerics.sample_gamma(shape.data, 1.0, rng)
    else:
        raise ValidationError("gamma_sample needs an rng or fixed uniforms")
    u = numerics.clamp_standard_gamma(u, shape.data)
    z = u / rate.data

    def bw(g):
        d_shape, d_rate = numerics.gamma_reparam_gradient(shape.data, rate.data, z)
        shape._accumulate(_unbroadcast(g * d_shape, shape.shape))
        rate._accumulate(_unbroadcast(g * d_rate, rate.shape))

    return Value(z, (shape, rate), bw)


# backward pass -------------------------------------------------------------


def _topological_order(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def backward(loss):
    """Populate ``.grad`` of every node that ``loss`` depends on."""
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = _topological_order(loss)
    for node in order:
        if node.parents:
            node.grad = np.zeros_like(node.data)
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        node.visits += 1
        if node._backward is not None:
            node._backward(node.grad)


def zero_grad(params):
    for p in params:
        p.grad = np.zeros_like(p.data)


# optimiser ------------------------------------------------------------------


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(params, state):
    """One bias-corrected Adam update in place. Gradients are left untouched."""
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    if len(state.m) != len(params):
        raise ValidationError("Adam state does not match the parameter list")
    for p in params:
        if p.grad is None:
            raise ValidationError(f"parameter {p.name or p!r} has no gradient")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for p, m, v in zip(params, state.m, state.v):
        if m.shape != p.data.shape:
            raise ShapeError("Adam moment shape does not match its parameter")
        m *= b1
        m += (1.0 - b1) * p.grad
        v *= b2
        v += (1.0 - b2) * p.grad**2
        p.data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


class Adam:
    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.state = AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps)

    def step(self):
        adam_step(self.params, self.state)

    def zero_grad(self):
        zero_grad(self.params)


# checkpoint container ---------------------------------------------------------


def save_arrays(path, arrays, metadata=None):
    """Write named arrays to an uncompressed ``.npz`` container.

    Layout: one ``.npy`` member per array, plus ``__format_version__``
    (int64 scalar) and ``__metadata__`` (JSON text as a 0-d unicode array).
    float64 data round-trips bit for bit. The write is atomic.
    """
    path = os.fspath(path)
    for key in arrays:
        if key.startswith("__"):
            raise ConfigError(f"reserved array name {key!r}")
    payload = {k: np.asarray(v) for k, v in arrays.items()}
    payload["__format_version__"] = np.int64(CHECKPOINT_VERSION)
    payload["__metadata__"] = np.array(json.dumps(metadata or {}, sort_keys=True))
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        np.savez(fh, **payload)
    os.replace(tmp, path)


def load_arrays(path):
    """Inverse of :func:`save_arrays`; returns ``(arrays, metadata)``."""
    with np.load(os.fspath(path), allow_pickle=False) as npz:
        version = int(npz["__format_version__"])
        if version != CHECKPOINT_VERSION:
            raise ConfigError(f"unsupported checkpoint version {version}")
        metadata = json.loads(str(npz["__metadata__"]))
        arrays = {k: npz[k] for k in npz.files if not k.startswith("__")}
    return arrays, metadata
