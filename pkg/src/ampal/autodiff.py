"""Minimal define-by-run reverse-mode differentiation over numpy arrays.

Every primitive returns a new :class:`Tensor` that remembers its parents and a
closure mapping the upstream gradient to per-parent gradients. The tape is
implicit in these links and is rebuilt on every evaluation, so separate
evaluations share no mutable state.

Only the primitives needed by the conditioned WaveNet and the disagreement
objective are provided.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from . import kernels


class NonFiniteError(FloatingPointError):
    """Raised when a primitive produces NaN or Inf."""


class Tensor:
    __slots__ = ("data", "parents", "grad_fn", "requires_grad", "op")

    def __init__(self, data, requires_grad=False, parents=(), grad_fn=None, op="leaf"):
        self.data = data
        self.requires_grad = requires_grad
        self.parents = parents
        self.grad_fn = grad_fn
        self.op = op

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def __repr__(self):
        return f"Tensor(op={self.op}, shape={self.data.shape}, requires_grad={self.requires_grad})"

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

    def __neg__(self):
        return scale(self, -1.0)

    def __getitem__(self, index):
        return take(self, index)


def tensor(data, requires_grad=False, dtype=np.float64):
    """Wrap ``data`` as a leaf tensor."""
    return Tensor(np.array(data, dtype=dtype), requires_grad=requires_grad)


def leaf(data, dtype=None):
    """A differentiable leaf; the array is used as-is unless ``dtype`` is given."""
    arr = np.asarray(data) if dtype is None else np.asarray(data, dtype=dtype)
    return Tensor(arr, requires_grad=True)


def constant(data, dtype=None):
    arr = np.asarray(data) if dtype is None else np.asarray(data, dtype=dtype)
    return Tensor(arr, requires_grad=False)


def _as_tensor(value, like=None):
    if isinstance(value, Tensor):
        return value
    dtype = like.data.dtype if like is not None else np.float64
    return Tensor(np.asarray(value, dtype=dtype))


def _check(data, op):
    # one reduction instead of an isfinite temporary; NaN/Inf propagate into the sum
    if not np.isfinite(np.add.reduce(data, axis=None)) and not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite value produced by {op}")
    return data


def _node(data, parents, grad_fn, op):
    _check(data, op)
    req = any(p.requires_grad for p in parents)
    if not req:
        return Tensor(data, op=op)
    return Tensor(data, requires_grad=True, parents=parents, grad_fn=grad_fn, op=op)


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` (reverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# -- elementwise ---------------------------------------------------------------

def add(a, b):
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    sa, sb = a.data.shape, b.data.shape
    return _node(
        a.data + b.data, (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add",
    )


def sub(a, b):
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    sa, sb = a.data.shape, b.data.shape
    return _node(
        a.data - b.data, (a, b),
        lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)), "sub",
    )


def mul(a, b):
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    ad, bd = a.data, b.data
    return _node(
        ad * bd, (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)), "mul",
    )


def scale(a, c):
    """Multiply by a Python scalar."""
    return _node(a.data * c, (a,), lambda g: (g * c,), "scale")


def square(a):
    ad = a.data
    return _node(ad * ad, (a,), lambda g: (2.0 * g * ad,), "square")


def tanh(a):
    out = np.tanh(a.data)
    return _node(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def sigmoid(a):
    out = expit(a.data)
    return _node(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


# -- reductions and shape plumbing ---------------------------------------------

def sum(a, axis=None):  # noqa: A001 - mirrors numpy
    shape = a.data.shape
    out = np.asarray(a.data.sum(axis=axis))

    def grad_fn(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _node(out, (a,), grad_fn, "sum")


def mean(a, axis=None):
    shape = a.data.shape
    out = np.asarray(a.data.mean(axis=axis))
    count = a.data.size // max(out.size, 1)

    def grad_fn(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, shape).copy(),)

    return _node(out, (a,), grad_fn, "mean")


def take(a, index):
    """Basic (slice/integer) indexing."""
    shape, dtype = a.data.shape, a.data.dtype

    def grad_fn(g):
        full = np.zeros(shape, dtype=dtype)
        full[index] = g
        return (full,)

    return _node(a.data[index], (a,), grad_fn, "take")


def reshape(a, shape):
    old = a.data.shape
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def over_time(v):
    """Turn per-channel values (B, C) into (B, C, 1) so they broadcast over time."""
    return reshape(v, v.data.shape + (1,))


def stack(tensors, axis=0):
    tensors = list(tensors)
    out = np.stack([t.data for t in tensors], axis=axis)

    def grad_fn(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _node(out, tuple(tensors), grad_fn, "stack")


# -- linear maps -------------------------------------------------------------

def conv1d(x, w, dilation=1, causal_pad=True):
    """Dilated cross-correlation of ``x`` (B, Cin, T) or (Cin, T) with ``w`` (Cout, Cin, K).

    With ``causal_pad`` the input is left-padded with ``(K - 1) * dilation``
    zeros, so output length equals input length and ``out[t]`` only sees
    ``x[<= t]``. Without padding the output is ``(K - 1) * dilation`` shorter.
    """
    if dilation < 1 or int(dilation) != dilation:
        raise ValueError(f"dilation must be a positive integer, got {dilation}")
    wd, xd = w.data, x.data
    if wd.ndim != 3:
        raise ValueError(f"kernel must be (Cout, Cin, K), got shape {wd.shape}")
    squeeze = xd.ndim == 2
    if squeeze:
        xd = xd[None]
    if xd.ndim != 3:
        raise ValueError(f"input must be (B, Cin, T) or (Cin, T), got shape {x.data.shape}")
    if xd.shape[1] != wd.shape[1]:
        raise ValueError(
            f"input has {xd.shape[1]} channels but kernel expects {wd.shape[1]}"
        )
    if xd.shape[2] == 0:
        raise ValueError("zero-length input")
    K = wd.shape[2]
    if K < 1:
        raise ValueError("kernel width must be >= 1")
    span = (K - 1) * dilation
    pad = span if causal_pad else 0
    if xd.shape[2] + pad - span < 1:
        raise ValueError(
            f"input length {xd.shape[2]} shorter than kernel span {span + 1}"
        )
    if wd.dtype != xd.dtype:
        wd = wd.astype(xd.dtype)
    out = kernels.conv1d_forward(xd, wd, dilation, pad)
    if squeeze:
        out = out[0]

    def grad_fn(g):
        gb = g[None] if squeeze else g
        gx, gw = kernels.conv1d_backward(
            gb, xd, wd, dilation, pad, x.requires_grad, w.requires_grad
        )
        if gx is not None and squeeze:
            gx = gx[0]
        if gw is not None and gw.dtype != w.data.dtype:
            gw = gw.astype(w.data.dtype)
        return gx, gw

    return _node(out, (x, w), grad_fn, "conv1d")


def conv1x1(x, w):
    """Pointwise channel mixing: ``w`` (Cout, Cin) applied to ``x`` (B, Cin, T)."""
    wd, xd = w.data, x.data
    if xd.shape[-2] != wd.shape[1]:
        raise ValueError(
            f"input has {xd.shape[-2]} channels but 1x1 kernel expects {wd.shape[1]}"
        )
    if wd.dtype != xd.dtype:
        wd = wd.astype(xd.dtype)
    if wd.shape[1] == 1:
        out = wd[:, 0][:, None] * xd  # (Cout,1) * (B,1,T) broadcast
    else:
        out = np.matmul(wd, xd)

    def grad_fn(g):
        gx = gw = None
        if x.requires_grad:
            gx = np.matmul(wd.T, g)
        if w.requires_grad:
            if xd.ndim == 3:
                gw = np.tensordot(g, xd, axes=([0, 2], [0, 2]))
            else:
                gw = g @ xd.T
            gw = gw.astype(w.data.dtype, copy=False)
        return gx, gw

    return _node(out, (x, w), grad_fn, "conv1x1")


def affine(v, w, b=None):
    """``v @ w (+ b)`` for ``v`` (B, k) or (k,), ``w`` (k, O)."""
    if v.data.shape[-1] != w.data.shape[0]:
        raise ValueError(
            f"affine map expects {w.data.shape[0]} inputs, got {v.data.shape[-1]}"
        )
    vd, wd = v.data, w.data
    out = vd @ wd
    parents = (v, w)
    if b is not None:
        out = out + b.data
        parents = (v, w, b)

    def grad_fn(g):
        gv = g @ wd.T if v.requires_grad else None
        gw = None
        if w.requires_grad:
            gw = np.outer(vd, g) if vd.ndim == 1 else vd.T @ g
        grads = (gv, gw)
        if b is not None:
            grads = grads + (_unbroadcast(g, b.data.shape),)
        return grads

    return _node(out, parents, grad_fn, "affine")


# -- losses --------------------------------------------------------------------

def mse_loss(pred, target, weight=None):
    """Mean squared error; with ``weight`` a weighted mean (weights as given, not normalized per row)."""
    diff = pred.data - np.asarray(target.data if isinstance(target, Tensor) else target)
    if weight is None:
        n = diff.size
        out = np.asarray(np.mean(diff * diff))
        scale_ = 2.0 / n

        def grad_fn(g):
            return (g * scale_ * diff,)
    else:
        w = np.asarray(weight, dtype=diff.dtype)
        total = w.sum()
        if total <= 0:
            raise ValueError("weights sum to zero")
        out = np.asarray(np.sum(w * diff * diff) / total)

        def grad_fn(g):
            return (g * (2.0 / total) * w * diff,)

    return _node(out, (pred,), grad_fn, "mse")


# -- backward ------------------------------------------------------------------

def _topo_order(output):
    order, seen = [], set()
    stack_ = [(output, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack_.append((p, False))
    return order


def backward(output, leaves, seed=None):
    """Gradients of scalar ``output`` with respect to each tensor in ``leaves``.

    Leaves that ``output`` does not depend on get a zero gradient. ``seed``
    overrides the upstream gradient (defaults to 1).
    """
    if output.data.size != 1 and seed is None:
        raise ValueError(f"backward needs a scalar output, got shape {output.data.shape}")
    grads = {}
    if output.requires_grad:
        start = np.ones_like(output.data) if seed is None else np.asarray(seed, dtype=output.data.dtype)
        grads[id(output)] = start
        for node in reversed(_topo_order(output)):
            g = grads.pop(id(node), None) if node.grad_fn is not None else grads.get(id(node))
            if g is None or node.grad_fn is None:
                continue
            for parent, pg in zip(node.parents, node.grad_fn(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
    out = []
    for lf in leaves:
        g = grads.get(id(lf))
        if g is None:
            g = np.zeros_like(lf.data)
        else:
            _check(g, "backward")
        out.append(g)
    return out


# -- Adam ----------------------------------------------------------------------

@dataclass
class AdamState:
    m: list
    v: list
    t: int = 0


@dataclass(frozen=True)
class AdamHyper:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_init(params):
    return AdamState([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], 0)


def adam_step(params, grads, state, hyper=AdamHyper()):
    """One bias-corrected Adam descent step.

    Returns new parameter arrays and the new state; inputs are not modified.
    """
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params, grads and state must have the same length")
    t = state.t + 1
    b1, b2 = hyper.beta1, hyper.beta2
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    new_p, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape or p.shape != m.shape:
            raise ValueError(f"shape mismatch: param {p.shape}, grad {g.shape}, state {m.shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteError("non-finite gradient passed to adam_step")
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        denom = np.sqrt(v / bc2) + hyper.eps
        with np.errstate(invalid="ignore", divide="ignore"):
            upd = (m / bc1) / denom
        # eps == 0 with a zero gradient gives 0/0; there is nothing to move
        upd = np.where(denom > 0, upd, 0.0).astype(p.dtype, copy=False)
        new_p.append(p - hyper.lr * upd)
        new_m.append(m)
        new_v.append(v)
    return new_p, AdamState(new_m, new_v, t)


@dataclass
class Adam:
    """Stateful wrapper around :func:`adam_step` that updates arrays in place."""

    hyper: AdamHyper = field(default_factory=AdamHyper)
    state: AdamState = None

    def step(self, params, grads):
        if self.state is None:
            self.state = adam_init(params)
        new, self.state = adam_step(params, grads, self.state, self.hyper)
        for p, n in zip(params, new):
            p[...] = n
