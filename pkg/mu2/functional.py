"""Numeric building blocks with hand-written backward passes."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, Optional, Tuple

import numpy as np
from scipy.special import erf

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)

# Upper bound on attention-score elements materialised at once in cache-free mode.
_SCORE_BUDGET = 1 << 24


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_backward(y: np.ndarray, dy: np.ndarray, axis: int = -1) -> np.ndarray:
    return y * (dy - (dy * y).sum(axis=axis, keepdims=True))


def gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + erf(x / _SQRT2))


def gelu_grad(x: np.ndarray) -> np.ndarray:
    cdf = 0.5 * (1.0 + erf(x / _SQRT2))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
    return cdf + x * pdf


def linear_backward(
    x: np.ndarray, w: np.ndarray, dout: np.ndarray
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients of x @ w + b with respect to x, w, b (b summed over leading axes)."""
    flat_x = x.reshape(-1, x.shape[-1])
    flat_d = dout.reshape(-1, dout.shape[-1])
    return dout @ w.T, flat_x.T @ flat_d, flat_d.sum(axis=0)


@dataclass
class FFNCache:
    x: np.ndarray
    pre: np.ndarray
    hidden: np.ndarray


def ffn_forward(
    x: np.ndarray, w1: np.ndarray, b1: np.ndarray, w2: np.ndarray, b2: np.ndarray
) -> Tuple[np.ndarray, FFNCache]:
    pre = x @ w1 + b1
    hidden = gelu(pre)
    return hidden @ w2 + b2, FFNCache(x=x, pre=pre, hidden=hidden)


def ffn_backward(
    cache: FFNCache, w1: np.ndarray, w2: np.ndarray, dout: np.ndarray
) -> Dict[str, np.ndarray]:
    dhidden, dw2, db2 = linear_backward(cache.hidden, w2, dout)
    dpre = dhidden * gelu_grad(cache.pre)
    dx, dw1, db1 = linear_backward(cache.x, w1, dpre)
    return {"x": dx, "w1": dw1, "b1": db1, "w2": dw2, "b2": db2}


def split_heads(x: np.ndarray, heads: int) -> np.ndarray:
    """(B, n, E) -> (B, h, n, d)."""
    b, n, e = x.shape
    return x.reshape(b, n, heads, e // heads).transpose(0, 2, 1, 3)


def merge_heads(x: np.ndarray) -> np.ndarray:
    b, h, n, d = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, n, h * d)


@dataclass
class AttentionCache:
    xq: np.ndarray
    xkv: np.ndarray
    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    weights: np.ndarray
    context: np.ndarray


def _attend(q: np.ndarray, k: np.ndarray, v: np.ndarray, bias: Optional[np.ndarray]) -> Tuple[np.ndarray, np.ndarray]:
    scores = q @ k.swapaxes(-1, -2) / math.sqrt(q.shape[-1])
    if bias is not None:
        scores = scores + bias
    weights = softmax(scores, axis=-1)
    return weights @ v, weights


def mha_forward(
    xq: np.ndarray,
    xkv: np.ndarray,
    wq: np.ndarray,
    wk: np.ndarray,
    wv: np.ndarray,
    wo: np.ndarray,
    heads: int,
    bias: Optional[np.ndarray] = None,
    keep_cache: bool = True,
) -> Tuple[np.ndarray, Optional[AttentionCache]]:
    """Multi-head attention over batches of sequences.

    xq is (B, n_q, E), xkv is (B, n_k, E), bias is an optional per-head (h, n_q, n_k)
    additive score term. Without a cache the batch is processed in chunks so the
    score tensor stays bounded.
    """
    q = split_heads(xq @ wq, heads)
    k = split_heads(xkv @ wk, heads)
    v = split_heads(xkv @ wv, heads)
    if keep_cache:
        context, weights = _attend(q, k, v, bias)
        merged = merge_heads(context)
        return merged @ wo, AttentionCache(xq, xkv, q, k, v, weights, merged)

    batch = q.shape[0]
    per_item = heads * q.shape[2] * k.shape[2]
    chunk = max(1, _SCORE_BUDGET // max(per_item, 1))
    context = np.empty_like(q)
    for start in range(0, batch, chunk):
        stop = min(batch, start + chunk)
        context[start:stop], _ = _attend(q[start:stop], k[start:stop], v[start:stop], bias)
    return merge_heads(context) @ wo, None


def mha_backward(
    cache: AttentionCache,
    wq: np.ndarray,
    wk: np.ndarray,
    wv: np.ndarray,
    wo: np.ndarray,
    dout: np.ndarray,
) -> Dict[str, np.ndarray]:
    heads = cache.q.shape[1]
    scale = 1.0 / math.sqrt(cache.q.shape[-1])

    dmerged, dwo, _ = linear_backward(cache.context, wo, dout)
    dcontext = split_heads(dmerged, heads)
    dweights = dcontext @ cache.v.swapaxes(-1, -2)
    dv = cache.weights.swapaxes(-1, -2) @ dcontext
    dscores = softmax_backward(cache.weights, dweights)
    dq = dscores @ cache.k * scale
    dk = dscores.swapaxes(-1, -2) @ cache.q * scale

    dxq, dwq, _ = linear_backward(cache.xq, wq, merge_heads(dq))
    dxk, dwk, _ = linear_backward(cache.xkv, wk, merge_heads(dk))
    dxv, dwv, _ = linear_backward(cache.xkv, wv, merge_heads(dv))
    return {
        "xq": dxq,
        "xkv": dxk + dxv,
        "wq": dwq,
        "wk": dwk,
        "wv": dwv,
        "wo": dwo,
        "bias": dscores.sum(axis=0),
    }
