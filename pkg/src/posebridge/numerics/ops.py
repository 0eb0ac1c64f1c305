"""Differentiable primitives. Every function returns a :class:`Tensor`."""

from __future__ import annotations

import math

import numpy as np

from ..errors import DegenerateError, NonFiniteError, ShapeError
from .tape import Primitive

GELU_C = math.sqrt(2.0 / math.pi)
GELU_K = 0.044715


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _expand_reduced(g, shape, axis, keepdims):
    if axis is not None and not keepdims:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(a % len(shape) for a in axes)
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, shape)


def _reduced_count(shape, axis) -> int:
    if axis is None:
        return int(np.prod(shape))
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    return int(np.prod([shape[a] for a in axes]))


# --- elementwise arithmetic ---------------------------------------------------

add = Primitive(
    "add",
    lambda a, b: a + b,
    lambda g, out, a, b: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
)
sub = Primitive(
    "sub",
    lambda a, b: a - b,
    lambda g, out, a, b: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
)
mul = Primitive(
    "mul",
    lambda a, b: a * b,
    lambda g, out, a, b: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)),
)
div = Primitive(
    "div",
    lambda a, b: a / b,
    lambda g, out, a, b: (
        _unbroadcast(g / b, a.shape),
        _unbroadcast(-g * out / b, b.shape),
    ),
)
neg = Primitive("neg", lambda a: -a, lambda g, out, a: (-g,))


def _matmul_bwd(g, out, a, b, needs=(True, True)):
    a2 = a[None, :] if a.ndim == 1 else a
    b2 = b[:, None] if b.ndim == 1 else b
    g2 = g
    if a.ndim == 1:
        g2 = np.expand_dims(g2, -2)
    if b.ndim == 1:
        g2 = np.expand_dims(g2, -1)
    ga = gb = None
    if needs[0]:
        ga = _unbroadcast(g2 @ np.swapaxes(b2, -1, -2), a2.shape).reshape(a.shape)
    if needs[1]:
        if a2.ndim > 2 and b2.ndim == 2:
            # fold the batch axes into one contraction instead of summing per-batch products
            gb = a2.reshape(-1, a2.shape[-1]).T @ g2.reshape(-1, g2.shape[-1])
        else:
            gb = _unbroadcast(np.swapaxes(a2, -1, -2) @ g2, b2.shape)
        gb = gb.reshape(b.shape)
    return ga, gb


def _matmul_fwd(a, b):
    if a.shape[-1] != b.shape[0 if b.ndim == 1 else -2]:
        raise ShapeError(f"matmul shapes {a.shape} and {b.shape} do not align")
    return a @ b


matmul = Primitive("matmul", _matmul_fwd, _matmul_bwd, selective=True)

# --- unary nonlinearities -------------------------------------------------------

exp = Primitive("exp", np.exp, lambda g, out, a: (g * out,))
log = Primitive("log", np.log, lambda g, out, a: (g / a,))
sqrt = Primitive("sqrt", np.sqrt, lambda g, out, a: (0.5 * g / out,))
tanh = Primitive("tanh", np.tanh, lambda g, out, a: (g * (1.0 - out * out),))
sigmoid = Primitive(
    "sigmoid",
    lambda a: 0.5 * (1.0 + np.tanh(0.5 * a)),
    lambda g, out, a: (g * out * (1.0 - out),),
)


def _gelu_fwd(x):
    return 0.5 * x * (1.0 + np.tanh(GELU_C * (x + GELU_K * x * x * x)))


def _gelu_bwd(g, out, x):
    x2 = x * x
    t = np.tanh(GELU_C * x * (1.0 + GELU_K * x2))
    d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x2)
    return (g * d,)


gelu = Primitive("gelu", _gelu_fwd, _gelu_bwd)

clamp_min = Primitive(
    "clamp_min",
    lambda a, floor: np.maximum(a, floor),
    lambda g, out, a, floor: (g * (a > floor),),
)

stop_gradient = Primitive("stop_gradient", lambda a: np.array(a), None)

# --- reductions and shape ops ------------------------------------------------------

sum = Primitive(  # noqa: A001
    "sum",
    lambda a, axis=None, keepdims=False: np.sum(a, axis=axis, keepdims=keepdims),
    lambda g, out, a, axis=None, keepdims=False: (
        np.array(_expand_reduced(g, a.shape, axis, keepdims)),
    ),
)
mean = Primitive(
    "mean",
    lambda a, axis=None, keepdims=False: np.mean(a, axis=axis, keepdims=keepdims),
    lambda g, out, a, axis=None, keepdims=False: (
        np.array(_expand_reduced(g, a.shape, axis, keepdims)) / _reduced_count(a.shape, axis),
    ),
)
reshape = Primitive(
    "reshape",
    lambda a, shape: np.reshape(a, shape),
    lambda g, out, a, shape: (np.reshape(g, a.shape),),
)


def _transpose_bwd(g, out, a, axes=None):
    if axes is None:
        return (np.transpose(g),)
    return (np.transpose(g, np.argsort(axes)),)


transpose = Primitive(
    "transpose", lambda a, axes=None: np.transpose(a, axes), _transpose_bwd
)


def _getitem_bwd(g, out, a, index):
    z = np.zeros_like(a)
    np.add.at(z, index, g)
    return (z,)


getitem = Primitive("getitem", lambda a, index: a[index], _getitem_bwd)


def _concat_fwd(*xs, axis=0):
    return np.concatenate(xs, axis=axis)


def _concat_bwd(g, out, *xs, axis=0):
    bounds = np.cumsum([x.shape[axis] for x in xs])[:-1]
    return tuple(np.split(g, bounds, axis=axis))


concat = Primitive("concat", _concat_fwd, _concat_bwd)

# --- normalisers -------------------------------------------------------------------


def _softmax_fwd(x, axis=-1):
    if np.isnan(x).any():
        raise NonFiniteError("softmax input contains NaN")
    e = np.exp(x - np.max(x, axis=axis, keepdims=True))
    return e / np.sum(e, axis=axis, keepdims=True)


softmax = Primitive(
    "softmax",
    _softmax_fwd,
    lambda g, out, x, axis=-1: (out * (g - np.sum(g * out, axis=axis, keepdims=True)),),
)


def _log_softmax_fwd(x, axis=-1):
    shifted = x - np.max(x, axis=axis, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))


log_softmax = Primitive(
    "log_softmax",
    _log_softmax_fwd,
    lambda g, out, x, axis=-1: (g - np.exp(out) * np.sum(g, axis=axis, keepdims=True),),
)


_UNIT_SNAP = 64 * np.finfo(np.float64).eps


def _l2_norm(x, axis, eps):
    n = np.sqrt(np.sum(x * x, axis=axis, keepdims=True))
    if np.any(n <= eps):
        raise DegenerateError("cannot L2-normalise a vector with norm <= eps")
    # norms within rounding of 1 are taken as exactly 1, which makes normalisation idempotent
    return np.where(np.abs(n - 1.0) <= _UNIT_SNAP, 1.0, n)


def _l2n_fwd(x, axis=-1, eps=1e-12):
    return x / _l2_norm(x, axis, eps)


def _l2n_bwd(g, out, x, axis=-1, eps=1e-12):
    n = _l2_norm(x, axis, eps)
    return ((g - out * np.sum(g * out, axis=axis, keepdims=True)) / n,)


l2_normalize = Primitive("l2_normalize", _l2n_fwd, _l2n_bwd)


def _ln_stats(x, eps):
    if x.shape[-1] < 2:
        raise ShapeError("layer_norm needs at least two features")
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    return (x - mu) * inv, inv


def _ln_fwd(x, scale, shift, eps=1e-5):
    xhat, _ = _ln_stats(x, eps)
    return xhat * scale + shift


def _ln_bwd(g, out, x, scale, shift, eps=1e-5):
    xhat, inv = _ln_stats(x, eps)
    gxhat = g * scale
    gx = inv * (
        gxhat
        - gxhat.mean(axis=-1, keepdims=True)
        - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True)
    )
    return gx, _unbroadcast(g * xhat, np.shape(scale)), _unbroadcast(g, np.shape(shift))


layer_norm = Primitive("layer_norm", _ln_fwd, _ln_bwd)

# --- spatial ops (channels-last: ..., H, W, C) -------------------------------------


def _conv3x3_fwd(x, w):
    if w.shape[:3] != (3, 3, x.shape[-1]):
        raise ShapeError(f"conv kernel {w.shape} does not match input channels {x.shape[-1]}")
    h, wd = x.shape[-3], x.shape[-2]
    pad = [(0, 0)] * (x.ndim - 3) + [(1, 1), (1, 1), (0, 0)]
    xp = np.pad(x, pad)
    out = np.zeros(x.shape[:-1] + (w.shape[3],))
    for dy in range(3):
        for dx in range(3):
            out += xp[..., dy : dy + h, dx : dx + wd, :] @ w[dy, dx]
    return out


def _conv3x3_bwd(g, out, x, w, needs=(True, True)):
    h, wd = x.shape[-3], x.shape[-2]
    pad = [(0, 0)] * (x.ndim - 3) + [(1, 1), (1, 1), (0, 0)]
    xp = np.pad(x, pad)
    gxp = np.zeros_like(xp)
    gw = np.zeros_like(w)
    lead = tuple(range(g.ndim - 1))
    for dy in range(3):
        for dx in range(3):
            patch = xp[..., dy : dy + h, dx : dx + wd, :]
            gw[dy, dx] = np.tensordot(patch, g, axes=(lead, lead))
            if needs[0]:
                gxp[..., dy : dy + h, dx : dx + wd, :] += g @ w[dy, dx].T
    return (gxp[..., 1 : 1 + h, 1 : 1 + wd, :] if needs[0] else None), gw


conv3x3 = Primitive("conv3x3", _conv3x3_fwd, _conv3x3_bwd, selective=True)


def bilinear_matrix(n_in: int, n_out: int) -> np.ndarray:
    """1-D bilinear interpolation weights, half-pixel centres (no corner alignment)."""
    m = np.zeros((n_out, n_in))
    scale = n_in / n_out
    for i in range(n_out):
        src = min(max((i + 0.5) * scale - 0.5, 0.0), n_in - 1)
        i0 = int(math.floor(src))
        i1 = min(i0 + 1, n_in - 1)
        frac = src - i0
        m[i, i0] += 1.0 - frac
        m[i, i1] += frac
    return m


def _resize_fwd(x, size):
    lead, (h, w, c) = x.shape[:-3], x.shape[-3:]
    mh = bilinear_matrix(h, size[0])
    mw = bilinear_matrix(w, size[1])
    y = (mh @ x.reshape(lead + (h, w * c))).reshape(lead + (size[0], w, c))
    return mw @ y


def _resize_bwd(g, out, x, size):
    lead, (h, w, c) = x.shape[:-3], x.shape[-3:]
    mh = bilinear_matrix(h, size[0])
    mw = bilinear_matrix(w, size[1])
    y = (mw.T @ g).reshape(lead + (size[0], w * c))
    return ((mh.T @ y).reshape(x.shape),)


resize_bilinear = Primitive("resize_bilinear", _resize_fwd, _resize_bwd)

PRIMITIVES = {
    p.name: p
    for p in (
        add, sub, mul, div, neg, matmul, exp, log, sqrt, tanh, sigmoid, gelu,
        clamp_min, stop_gradient, sum, mean, reshape, transpose, getitem, concat,
        softmax, log_softmax, l2_normalize, layer_norm, conv3x3, resize_bilinear,
    )
}
