"""Composite operations built from the primitive set."""

from __future__ import annotations

import math

from ..errors import ShapeError
from . import ops
from .tape import Tensor, value_of


def softmax(x, axis: int = -1) -> Tensor:
    return ops.softmax(x, axis=axis)


def log_softmax(x, axis: int = -1) -> Tensor:
    return ops.log_softmax(x, axis=axis)


def l2_normalize(x, axis: int = -1, eps: float = 1e-12) -> Tensor:
    return ops.l2_normalize(x, axis=axis, eps=eps)


def layer_norm(x, scale, shift, eps: float = 1e-5) -> Tensor:
    return ops.layer_norm(x, scale, shift, eps=eps)


def gelu(x) -> Tensor:
    return ops.gelu(x)


def linear(x, weight, bias=None) -> Tensor:
    """``x @ weight (+ bias)`` with weight stored as (in, out)."""
    out = ops.matmul(x, weight)
    return out if bias is None else ops.add(out, bias)


def mlp(x, layers, dropout_masks=None) -> Tensor:
    """Stack of linear layers with GELU between them (none after the last)."""
    for i, (w, b) in enumerate(layers):
        x = linear(x, w, b)
        if i < len(layers) - 1:
            x = ops.gelu(x)
            if dropout_masks is not None and dropout_masks[i] is not None:
                x = ops.mul(x, dropout_masks[i])
    return x


def split_heads(x, num_heads: int) -> Tensor:
    """(B, L, D) -> (B, heads, L, D // heads)."""
    b, n, d = x.shape
    return ops.transpose(ops.reshape(x, shape=(b, n, num_heads, d // num_heads)), axes=(0, 2, 1, 3))


def merge_heads(x) -> Tensor:
    b, h, n, dh = x.shape
    return ops.reshape(ops.transpose(x, axes=(0, 2, 1, 3)), shape=(b, n, h * dh))


def scaled_dot_attention(q, k, v, num_heads: int, w_out=None, return_weights: bool = False):
    """Multi-head attention on already-projected queries, keys and values.

    Shapes are (B, Lq, D), (B, Lk, D), (B, Lk, D). Each head computes
    ``softmax(Q K^T / sqrt(d_head)) V``; heads are concatenated and, when
    ``w_out`` is given, projected by it.
    """
    q, k, v = (x if isinstance(x, Tensor) else Tensor(x) for x in (q, k, v))
    if q.ndim != 3 or k.ndim != 3 or v.ndim != 3:
        raise ShapeError("attention expects (batch, length, dim) operands")
    d = q.shape[-1]
    if d % num_heads or k.shape[-1] != d or v.shape[-1] != d:
        raise ShapeError(f"embedding dim {d} incompatible with {num_heads} heads / key dims")
    if k.shape[1] != v.shape[1]:
        raise ShapeError("keys and values must share sequence length")
    qh, kh, vh = (split_heads(x, num_heads) for x in (q, k, v))
    scores = ops.matmul(qh, ops.transpose(kh, axes=(0, 1, 3, 2)))
    weights = ops.softmax(ops.mul(scores, 1.0 / math.sqrt(d // num_heads)), axis=-1)
    out = merge_heads(ops.matmul(weights, vh))
    if w_out is not None:
        out = ops.matmul(out, w_out)
    return (out, weights) if return_weights else out


def cross_entropy(logits, onehot) -> Tensor:
    """Mean cross-entropy of (B, C) logits against (B, C) one-hot targets."""
    lp = ops.log_softmax(logits, axis=-1)
    n = value_of(logits).shape[0]
    return ops.mul(ops.sum(ops.mul(lp, onehot)), -1.0 / n)
