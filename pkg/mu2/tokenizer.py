"""Frame-wise visual tokenizer: relative-position refinement, soft token selection,
dynamic multi-scale pooling and text-conditioned aggregation."""

from __future__ import annotations

import logging
import math
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Dict, Iterator, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .config import AppConfig
from .encoder import Vocab, embed_text, encode_frames, encoder_param_shapes
from .errors import InvalidInputError, NonFiniteError, StageError
from .functional import (
    AttentionCache,
    FFNCache,
    ffn_backward,
    ffn_forward,
    gelu,
    gelu_grad,
    mha_backward,
    mha_forward,
    softmax,
    softmax_backward,
    split_heads,
    merge_heads,
)
from .types import ScaleSummary
from .volume import FrameStack

logger = logging.getLogger(__name__)

Params = Mapping[str, np.ndarray]

_STD_EPS = 1e-12


@dataclass(frozen=True)
class RelBiasTable:
    values: np.ndarray

    def __post_init__(self) -> None:
        if self.values.ndim != 2 or self.values.shape[1] % 2 == 0:
            raise InvalidInputError(f"bias table must be (heads, 2*d_max+1), got {self.values.shape}")

    @property
    def heads(self) -> int:
        return int(self.values.shape[0])

    @property
    def max_distance(self) -> int:
        return (int(self.values.shape[1]) - 1) // 2


def relative_offsets(n: int, max_distance: int) -> np.ndarray:
    """Table column for every (i, j): clip(i - j, -D, D) + D."""
    positions = np.arange(n)
    offsets = positions[:, None] - positions[None, :]
    return np.clip(offsets, -max_distance, max_distance) + max_distance


def rpe_bias_matrix(n: int, table: RelBiasTable, head: int) -> np.ndarray:
    if n < 1:
        raise InvalidInputError(f"sequence length must be positive, got {n}")
    if not 0 <= head < table.heads:
        raise InvalidInputError(f"head {head} out of range for {table.heads} heads")
    return table.values[head][relative_offsets(n, table.max_distance)]


def rpe_bias(n: int, values: np.ndarray) -> np.ndarray:
    max_distance = (values.shape[1] - 1) // 2
    return values[:, relative_offsets(n, max_distance)]


def rpe_bias_backward(dbias: np.ndarray, max_distance: int) -> np.ndarray:
    heads, n, _ = dbias.shape
    index = relative_offsets(n, max_distance).ravel()
    width = 2 * max_distance + 1
    return np.stack(
        [np.bincount(index, weights=dbias[h].ravel(), minlength=width) for h in range(heads)]
    )


@dataclass
class SVRCache:
    attention: AttentionCache
    ffn: FFNCache


def svr_layer(
    x: np.ndarray, params: Params, prefix: str, heads: int, keep_cache: bool = True
) -> Tuple[np.ndarray, Optional[SVRCache]]:
    """One refinement layer on a batch of sequences (B, n, E): RPE attention then FFN, both residual."""
    bias = rpe_bias(x.shape[1], params[f"{prefix}.rel_bias"])
    attended, attention_cache = mha_forward(
        x,
        x,
        params[f"{prefix}.wq"],
        params[f"{prefix}.wk"],
        params[f"{prefix}.wv"],
        params[f"{prefix}.wo"],
        heads,
        bias=bias,
        keep_cache=keep_cache,
    )
    hidden = x + attended
    fed, ffn_cache = ffn_forward(
        hidden,
        params[f"{prefix}.ff1_w"],
        params[f"{prefix}.ff1_b"],
        params[f"{prefix}.ff2_w"],
        params[f"{prefix}.ff2_b"],
    )
    out = hidden + fed
    if not keep_cache:
        return out, None
    return out, SVRCache(attention=attention_cache, ffn=ffn_cache)


def svr_layer_backward(
    cache: SVRCache, params: Params, prefix: str, dout: np.ndarray
) -> Dict[str, np.ndarray]:
    ffn_grads = ffn_backward(cache.ffn, params[f"{prefix}.ff1_w"], params[f"{prefix}.ff2_w"], dout)
    dhidden = dout + ffn_grads["x"]
    attn_grads = mha_backward(
        cache.attention,
        params[f"{prefix}.wq"],
        params[f"{prefix}.wk"],
        params[f"{prefix}.wv"],
        params[f"{prefix}.wo"],
        dhidden,
    )
    max_distance = (params[f"{prefix}.rel_bias"].shape[1] - 1) // 2
    grads = {
        "x": dhidden + attn_grads["xq"] + attn_grads["xkv"],
        f"{prefix}.rel_bias": rpe_bias_backward(attn_grads["bias"], max_distance),
        f"{prefix}.ff1_w": ffn_grads["w1"],
        f"{prefix}.ff1_b": ffn_grads["b1"],
        f"{prefix}.ff2_w": ffn_grads["w2"],
        f"{prefix}.ff2_b": ffn_grads["b2"],
    }
    for name in ("wq", "wk", "wv", "wo"):
        grads[f"{prefix}.{name}"] = attn_grads[name]
    return grads


def svr(tokens: np.ndarray, params: Params, layers: int, heads: int) -> np.ndarray:
    """Alternate spatial (within frame) and temporal (same token slot across frames) layers."""
    x = tokens
    for i in range(layers):
        spatial = i % 2 == 0
        batch = x if spatial else x.swapaxes(0, 1)
        out, _ = svr_layer(batch, params, f"svr.{i}", heads, keep_cache=False)
        x = out if spatial else out.swapaxes(0, 1)
        if not np.isfinite(x).all():
            raise NonFiniteError("svr", "non-finite activations", layer=i)
        logger.debug("svr layer %d (%s) done", i, "spatial" if spatial else "temporal")
    return np.ascontiguousarray(x)


@dataclass(frozen=True)
class SoftTokenSet:
    tokens: np.ndarray
    weights: np.ndarray


def dts(tokens: np.ndarray, w_s: np.ndarray) -> SoftTokenSet:
    """k soft tokens, each a softmax-weighted mix of every visual token of every frame."""
    flat = tokens.reshape(-1, tokens.shape[-1])
    scores = flat @ w_s
    if not np.isfinite(scores).all():
        raise NonFiniteError("dts", "non-finite selection scores")
    weights = softmax(scores, axis=0).T
    return SoftTokenSet(tokens=weights @ flat, weights=weights)


def dts_backward(tokens: np.ndarray, w_s: np.ndarray, dout: np.ndarray) -> Dict[str, np.ndarray]:
    flat = tokens.reshape(-1, tokens.shape[-1])
    selection = dts(tokens, w_s)
    dweights = dout @ flat.T
    dscores = softmax_backward(selection.weights.T, dweights.T, axis=0)
    dflat = selection.weights.T @ dout + dscores @ w_s.T
    return {"tokens": dflat.reshape(tokens.shape), "dts.w_s": flat.T @ dscores}


@dataclass(frozen=True)
class PooledTokens:
    tokens: np.ndarray
    scale_weights: np.ndarray
    pool_matrix: np.ndarray


def pooled_length(k: int, kernels: Sequence[int]) -> int:
    return sum(k // s for s in kernels)


def _check_kernels(k: int, kernels: Sequence[int]) -> None:
    if not kernels or list(kernels) != sorted(set(kernels)) or kernels[0] != 1:
        raise InvalidInputError(f"pool kernels must be ascending, unique and start at 1, got {list(kernels)}")
    if k % kernels[-1]:
        raise InvalidInputError(f"k={k} is not divisible by the largest pool kernel {kernels[-1]}")


def average_pool(tokens: np.ndarray, kernel: int) -> np.ndarray:
    k, e = tokens.shape
    return tokens.reshape(k // kernel, kernel, e).mean(axis=1)


def pool_matrix(k: int, kernels: Sequence[int]) -> np.ndarray:
    """Row-stochastic (L, k) matrix mapping soft tokens to the concatenated pooled rows."""
    blocks = [np.kron(np.eye(k // s), np.full((1, s), 1.0 / s)) for s in kernels]
    return np.concatenate(blocks, axis=0)


def _summarise(pooled: List[np.ndarray], summary: ScaleSummary) -> np.ndarray:
    means = [y.mean(axis=0) for y in pooled]
    if summary == ScaleSummary.MEAN:
        return np.stack(means)
    stds = [np.sqrt(y.var(axis=0) + _STD_EPS) for y in pooled]
    return np.stack([np.concatenate([m, s]) for m, s in zip(means, stds)])


def _scale_logits(summaries: np.ndarray, params: Params) -> Tuple[np.ndarray, np.ndarray]:
    pre = summaries @ params["dmtp.g1_w"] + params["dmtp.g1_b"]
    return pre, (gelu(pre) @ params["dmtp.g2_w"])[:, 0]


def dmtp(
    tokens: np.ndarray,
    kernels: Sequence[int],
    params: Params,
    summary: ScaleSummary = ScaleSummary.MEAN,
) -> PooledTokens:
    k = tokens.shape[0]
    _check_kernels(k, kernels)
    pooled = [average_pool(tokens, s) for s in kernels]
    _, logits = _scale_logits(_summarise(pooled, summary), params)
    if not np.isfinite(logits).all():
        raise NonFiniteError("dmtp", "non-finite scale logits")
    weights = softmax(logits)
    out = np.concatenate([w * y for w, y in zip(weights, pooled)], axis=0)
    return PooledTokens(tokens=out, scale_weights=weights, pool_matrix=pool_matrix(k, kernels))


def dmtp_backward(
    tokens: np.ndarray,
    kernels: Sequence[int],
    params: Params,
    summary: ScaleSummary,
    dout: np.ndarray,
) -> Dict[str, np.ndarray]:
    k, e = tokens.shape
    pooled = [average_pool(tokens, s) for s in kernels]
    summaries = _summarise(pooled, summary)
    pre, logits = _scale_logits(summaries, params)
    weights = softmax(logits)

    bounds = np.cumsum([0] + [k // s for s in kernels])
    dpooled = []
    dweights = np.empty(len(kernels))
    for i, y in enumerate(pooled):
        block = dout[bounds[i]: bounds[i + 1]]
        dweights[i] = np.sum(block * y)
        dpooled.append(weights[i] * block)

    dlogits = softmax_backward(weights, dweights)
    hidden = gelu(pre)
    dg2 = hidden.T @ dlogits[:, None]
    dpre = (dlogits[:, None] @ params["dmtp.g2_w"].T) * gelu_grad(pre)
    dg1_w = summaries.T @ dpre
    dg1_b = dpre.sum(axis=0)
    dsummaries = dpre @ params["dmtp.g1_w"].T

    dtokens = np.zeros_like(tokens)
    for i, (s, y) in enumerate(zip(kernels, pooled)):
        rows = y.shape[0]
        dy = dpooled[i] + dsummaries[i, :e][None, :] / rows
        if summary == ScaleSummary.MEAN_STD:
            centred = y - y.mean(axis=0)
            std = np.sqrt(y.var(axis=0) + _STD_EPS)
            dy = dy + dsummaries[i, e:][None, :] * centred / (rows * std)
        dtokens += np.repeat(dy, s, axis=0) / s
    return {"tokens": dtokens, "dmtp.g1_w": dg1_w, "dmtp.g1_b": dg1_b, "dmtp.g2_w": dg2}


@dataclass
class TTACache:
    queries: np.ndarray
    pooled: np.ndarray
    conditioned: np.ndarray
    q: np.ndarray
    k: np.ndarray
    head_maps: np.ndarray
    attention: Optional[AttentionCache]
    ffn: FFNCache


def tta_layer(
    queries: np.ndarray,
    text: np.ndarray,
    pooled: np.ndarray,
    params: Params,
    prefix: str,
    heads: int,
    keep_cache: bool = True,
) -> Tuple[np.ndarray, np.ndarray, Optional[TTACache]]:
    """Condition the queries on the question, then read the pooled tokens through an identity value path.

    Returns the new queries (M, E) and the head-averaged aggregation map (M, L).
    """
    if text.shape[0] < 1:
        raise InvalidInputError("text conditioning needs at least one unmasked token")
    crossed, attention_cache = mha_forward(
        queries[None],
        text[None],
        params[f"{prefix}.wq1"],
        params[f"{prefix}.wk1"],
        params[f"{prefix}.wv1"],
        params[f"{prefix}.wo1"],
        heads,
        keep_cache=keep_cache,
    )
    hidden = queries + crossed[0]
    fed, ffn_cache = ffn_forward(
        hidden,
        params[f"{prefix}.ff1_w"],
        params[f"{prefix}.ff1_b"],
        params[f"{prefix}.ff2_w"],
        params[f"{prefix}.ff2_b"],
    )
    conditioned = hidden + fed

    q = split_heads((conditioned @ params[f"{prefix}.wq2"])[None], heads)[0]
    k = split_heads((pooled @ params[f"{prefix}.wk2"])[None], heads)[0]
    head_maps = softmax(q @ k.swapaxes(-1, -2) / math.sqrt(q.shape[-1]), axis=-1)
    aggregation = head_maps.mean(axis=0)
    out = aggregation @ pooled
    if not keep_cache:
        return out, aggregation, None
    cache = TTACache(queries, pooled, conditioned, q, k, head_maps, attention_cache, ffn_cache)
    return out, aggregation, cache


def tta_layer_backward(
    cache: TTACache, params: Params, prefix: str, dout: np.ndarray
) -> Dict[str, np.ndarray]:
    heads = cache.q.shape[0]
    scale = 1.0 / math.sqrt(cache.q.shape[-1])
    aggregation = cache.head_maps.mean(axis=0)

    dpooled = aggregation.T @ dout
    dmap = dout @ cache.pooled.T
    dscores = softmax_backward(cache.head_maps, np.broadcast_to(dmap / heads, cache.head_maps.shape))
    dq = merge_heads((dscores @ cache.k * scale)[None])[0]
    dk = merge_heads((dscores.swapaxes(-1, -2) @ cache.q * scale)[None])[0]

    grads: Dict[str, np.ndarray] = {
        f"{prefix}.wq2": cache.conditioned.T @ dq,
        f"{prefix}.wk2": cache.pooled.T @ dk,
    }
    dpooled = dpooled + dk @ params[f"{prefix}.wk2"].T
    dconditioned = dq @ params[f"{prefix}.wq2"].T

    ffn_grads = ffn_backward(cache.ffn, params[f"{prefix}.ff1_w"], params[f"{prefix}.ff2_w"], dconditioned)
    dhidden = dconditioned + ffn_grads["x"]
    attn_grads = mha_backward(
        cache.attention,
        params[f"{prefix}.wq1"],
        params[f"{prefix}.wk1"],
        params[f"{prefix}.wv1"],
        params[f"{prefix}.wo1"],
        dhidden[None],
    )
    grads.update(
        {
            "queries": dhidden + attn_grads["xq"][0],
            "text": attn_grads["xkv"][0],
            "pooled": dpooled,
            f"{prefix}.wq1": attn_grads["wq"],
            f"{prefix}.wk1": attn_grads["wk"],
            f"{prefix}.wv1": attn_grads["wv"],
            f"{prefix}.wo1": attn_grads["wo"],
            f"{prefix}.ff1_w": ffn_grads["w1"],
            f"{prefix}.ff1_b": ffn_grads["b1"],
            f"{prefix}.ff2_w": ffn_grads["w2"],
            f"{prefix}.ff2_b": ffn_grads["b2"],
        }
    )
    return grads


@dataclass(frozen=True)
class CompactTokens:
    tokens: np.ndarray
    provenance_weights: np.ndarray
    layer_maps: np.ndarray
    scale_weights: np.ndarray


def tta(text: np.ndarray, pooled: PooledTokens, params: Params, layers: int, heads: int) -> CompactTokens:
    queries = params["tta.queries"]
    maps = []
    for i in range(layers):
        queries, aggregation, _ = tta_layer(queries, text, pooled.tokens, params, f"tta.{i}", heads, keep_cache=False)
        if not np.isfinite(queries).all():
            raise NonFiniteError("tta", "non-finite activations", layer=i)
        maps.append(aggregation)
    # Each layer re-reads the pooled tokens, so the output is exactly the last map applied to them.
    return CompactTokens(
        tokens=queries,
        provenance_weights=maps[-1],
        layer_maps=np.stack(maps),
        scale_weights=pooled.scale_weights,
    )


def param_shapes(config: AppConfig, vocab_size: int) -> List[Tuple[str, Tuple[int, ...], int]]:
    """(name, shape, fan_in) for every parameter, in checkpoint order."""
    model = config.model
    e = model.hidden
    shapes = encoder_param_shapes(config.encoder.patch, e, vocab_size)
    for i in range(model.svr_layers):
        p = f"svr.{i}"
        shapes += [(f"{p}.rel_bias", (model.heads, 2 * model.d_max + 1), 2 * model.d_max + 1)]
        shapes += [(f"{p}.{name}", (e, e), e) for name in ("wq", "wk", "wv", "wo")]
        shapes += [
            (f"{p}.ff1_w", (e, 2 * e), e),
            (f"{p}.ff1_b", (2 * e,), e),
            (f"{p}.ff2_w", (2 * e, e), 2 * e),
            (f"{p}.ff2_b", (e,), 2 * e),
        ]
    shapes.append(("dts.w_s", (e, model.k), e))
    summary_dim = e if model.scale_summary == ScaleSummary.MEAN else 2 * e
    shapes += [
        ("dmtp.g1_w", (summary_dim, e // 2), summary_dim),
        ("dmtp.g1_b", (e // 2,), summary_dim),
        ("dmtp.g2_w", (e // 2, 1), e // 2),
        ("tta.queries", (model.n_queries, e), e),
    ]
    for i in range(model.tta_layers):
        p = f"tta.{i}"
        shapes += [(f"{p}.{name}", (e, e), e) for name in ("wq1", "wk1", "wv1", "wo1")]
        shapes += [
            (f"{p}.ff1_w", (e, 2 * e), e),
            (f"{p}.ff1_b", (2 * e,), e),
            (f"{p}.ff2_w", (2 * e, e), 2 * e),
            (f"{p}.ff2_b", (e,), 2 * e),
        ]
        shapes += [(f"{p}.{name}", (e, e), e) for name in ("wq2", "wk2")]
    return shapes


def init_params(config: AppConfig, vocab_size: int, seed: int) -> Dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    params: Dict[str, np.ndarray] = {}
    for name, shape, fan_in in param_shapes(config, vocab_size):
        bound = 1.0 / np.sqrt(fan_in)
        params[name] = rng.uniform(-bound, bound, size=shape)
    return params


def check_params(params: Params, config: AppConfig, vocab_size: int) -> None:
    for name, shape, _ in param_shapes(config, vocab_size):
        if name not in params:
            raise InvalidInputError(f"parameter {name} is missing")
        if tuple(params[name].shape) != shape:
            raise InvalidInputError(f"parameter {name} has shape {params[name].shape}, expected {shape}")


@contextmanager
def _stage(name: str) -> Iterator[None]:
    try:
        yield
    except StageError:
        raise
    except InvalidInputError as exc:
        raise InvalidInputError(f"{name}: {exc}") from exc
    except (ArithmeticError, ValueError) as exc:
        raise StageError(name, str(exc)) from exc


def tokenize(
    stack: FrameStack,
    question: str,
    config: AppConfig,
    params: Params,
    vocab: Vocab,
) -> CompactTokens:
    """encode_frames -> svr -> dts -> dmtp -> tta, evaluated without backward caches."""
    model = config.model
    check_params(params, config, len(vocab))
    dtype = np.dtype(model.dtype.value)
    cast = {name: value.astype(dtype, copy=False) for name, value in params.items()}
    frames = FrameStack(data=stack.data.astype(dtype, copy=False))

    with _stage("encode_frames"):
        grid = encode_frames(frames, config.encoder.patch, cast)
        text = embed_text(question, vocab, cast, config.encoder.n_q)
    logger.debug("encoded %d frames into %d tokens each", grid.frames, grid.n_visual_tokens)
    with _stage("svr"):
        refined = svr(grid.tokens, cast, model.svr_layers, model.heads)
    with _stage("dts"):
        selected = dts(refined, cast["dts.w_s"])
    with _stage("dmtp"):
        pooled = dmtp(selected.tokens, model.pool_kernels, cast, model.scale_summary)
    with _stage("tta"):
        compact = tta(text.valid_tokens, pooled, cast, model.tta_layers, model.heads)
    if not np.isfinite(compact.tokens).all():
        raise NonFiniteError("tta", "non-finite compact tokens")
    return compact
