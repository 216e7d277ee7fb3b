"""Registry of differentiable ops: forward, analytic backward and a random instance sampler."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Callable, Dict, Mapping, Optional, Sequence, Tuple

import numpy as np

from . import dpo, encoder, tokenizer
from .errors import UnknownOpError
from .functional import mha_backward, mha_forward
from .models import SequenceScore
from .types import ScaleSummary

Tensors = Dict[str, np.ndarray]
Static = Dict[str, Any]


@dataclass(frozen=True)
class DifferentiableOp:
    name: str
    sample: Callable[..., Tuple[Tensors, Static]]
    forward: Callable[[Tensors, Static], np.ndarray]
    backward: Callable[[Tensors, Static, np.ndarray], Tensors]


REGISTRY: Dict[str, DifferentiableOp] = {}


def register(op: DifferentiableOp, registry: Optional[Dict[str, DifferentiableOp]] = None) -> DifferentiableOp:
    (REGISTRY if registry is None else registry)[op.name] = op
    return op


def get_op(name: str, registry: Optional[Mapping[str, DifferentiableOp]] = None) -> DifferentiableOp:
    table = REGISTRY if registry is None else registry
    try:
        return table[name]
    except KeyError:
        raise UnknownOpError(f"unknown op {name!r}; registered: {', '.join(sorted(table))}") from None


def _uniform(rng: np.random.Generator, shape: Sequence[int], fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=tuple(shape))


def _block_params(rng: np.random.Generator, prefix: str, embed: int, names: Sequence[str]) -> Tensors:
    tensors = {f"{prefix}.{name}": _uniform(rng, (embed, embed), embed) for name in names}
    tensors[f"{prefix}.ff1_w"] = _uniform(rng, (embed, 2 * embed), embed)
    tensors[f"{prefix}.ff1_b"] = _uniform(rng, (2 * embed,), embed)
    tensors[f"{prefix}.ff2_w"] = _uniform(rng, (2 * embed, embed), 2 * embed)
    tensors[f"{prefix}.ff2_b"] = _uniform(rng, (embed,), 2 * embed)
    return tensors


_RPE = "rpe"


def _rpe_sample(rng, batch=2, n=5, embed=8, heads=2, d_max=2):
    tensors = {"x": rng.normal(size=(batch, n, embed))}
    tensors[f"{_RPE}.rel_bias"] = rng.normal(scale=0.5, size=(heads, 2 * d_max + 1))
    for name in ("wq", "wk", "wv", "wo"):
        tensors[f"{_RPE}.{name}"] = _uniform(rng, (embed, embed), embed)
    return tensors, {"heads": heads}


def _rpe_run(tensors, static, keep_cache):
    x = tensors["x"]
    bias = tokenizer.rpe_bias(x.shape[1], tensors[f"{_RPE}.rel_bias"])
    weights = [tensors[f"{_RPE}.{name}"] for name in ("wq", "wk", "wv", "wo")]
    return mha_forward(x, x, *weights, static["heads"], bias=bias, keep_cache=keep_cache), weights


def _rpe_forward(tensors, static):
    (out, _), _ = _rpe_run(tensors, static, keep_cache=False)
    return out


def _rpe_backward(tensors, static, dout):
    (_, cache), weights = _rpe_run(tensors, static, keep_cache=True)
    grads = mha_backward(cache, *weights, dout)
    max_distance = (tensors[f"{_RPE}.rel_bias"].shape[1] - 1) // 2
    result = {"x": grads["xq"] + grads["xkv"]}
    result[f"{_RPE}.rel_bias"] = tokenizer.rpe_bias_backward(grads["bias"], max_distance)
    for name in ("wq", "wk", "wv", "wo"):
        result[f"{_RPE}.{name}"] = grads[name]
    return result


register(DifferentiableOp("rpe_attention", _rpe_sample, _rpe_forward, _rpe_backward))


def _svr_sample(rng, batch=2, n=5, embed=8, heads=2, d_max=2):
    tensors = {"x": rng.normal(size=(batch, n, embed))}
    tensors["svr.0.rel_bias"] = rng.normal(scale=0.5, size=(heads, 2 * d_max + 1))
    tensors.update(_block_params(rng, "svr.0", embed, ("wq", "wk", "wv", "wo")))
    return tensors, {"heads": heads}


def _svr_forward(tensors, static):
    out, _ = tokenizer.svr_layer(tensors["x"], tensors, "svr.0", static["heads"], keep_cache=False)
    return out


def _svr_backward(tensors, static, dout):
    _, cache = tokenizer.svr_layer(tensors["x"], tensors, "svr.0", static["heads"])
    return tokenizer.svr_layer_backward(cache, tensors, "svr.0", dout)


register(DifferentiableOp("svr_layer", _svr_sample, _svr_forward, _svr_backward))


def _dts_sample(rng, frames=1, tokens=3, embed=4, k=2):
    return {
        "tokens": rng.normal(size=(frames, tokens, embed)),
        "dts.w_s": rng.normal(size=(embed, k)),
    }, {}


register(
    DifferentiableOp(
        "dts",
        _dts_sample,
        lambda t, s: tokenizer.dts(t["tokens"], t["dts.w_s"]).tokens,
        lambda t, s, dout: tokenizer.dts_backward(t["tokens"], t["dts.w_s"], dout),
    )
)


def _dmtp_sampler(default_summary: ScaleSummary):
    def sample(rng, k=4, embed=4, kernels=(1, 2), summary=default_summary):
        summary = ScaleSummary(summary)
        width = embed if summary == ScaleSummary.MEAN else 2 * embed
        return {
            "tokens": rng.normal(size=(k, embed)),
            "dmtp.g1_w": rng.normal(size=(width, embed // 2)),
            "dmtp.g1_b": rng.normal(size=(embed // 2,)),
            "dmtp.g2_w": rng.normal(size=(embed // 2, 1)),
        }, {"kernels": list(kernels), "summary": summary}

    return sample


def _dmtp_forward(tensors, static):
    return tokenizer.dmtp(tensors["tokens"], static["kernels"], tensors, static["summary"]).tokens


def _dmtp_backward(tensors, static, dout):
    return tokenizer.dmtp_backward(tensors["tokens"], static["kernels"], tensors, static["summary"], dout)


register(DifferentiableOp("dmtp", _dmtp_sampler(ScaleSummary.MEAN), _dmtp_forward, _dmtp_backward))
register(DifferentiableOp("dmtp_mean_std", _dmtp_sampler(ScaleSummary.MEAN_STD), _dmtp_forward, _dmtp_backward))


def _tta_sample(rng, queries=2, pooled=3, text=3, embed=4, heads=2):
    tensors = {
        "queries": rng.normal(size=(queries, embed)),
        "text": rng.normal(size=(text, embed)),
        "pooled": rng.normal(size=(pooled, embed)),
    }
    tensors.update(_block_params(rng, "tta.0", embed, ("wq1", "wk1", "wv1", "wo1", "wq2", "wk2")))
    return tensors, {"heads": heads}


def _tta_forward(tensors, static):
    out, _, _ = tokenizer.tta_layer(
        tensors["queries"], tensors["text"], tensors["pooled"], tensors, "tta.0", static["heads"], keep_cache=False
    )
    return out


def _tta_backward(tensors, static, dout):
    _, _, cache = tokenizer.tta_layer(
        tensors["queries"], tensors["text"], tensors["pooled"], tensors, "tta.0", static["heads"]
    )
    return tokenizer.tta_layer_backward(cache, tensors, "tta.0", dout)


register(DifferentiableOp("tta_layer", _tta_sample, _tta_forward, _tta_backward))


def _encoder_sample(rng, frames=2, slices=2, height=4, width=4, patch=(2, 2, 2), embed=4):
    patch_dim = int(np.prod(patch))
    return {
        "frames": rng.uniform(size=(frames, slices, height, width)),
        "encoder.patch_w": _uniform(rng, (patch_dim, embed), patch_dim),
        "encoder.patch_b": _uniform(rng, (embed,), patch_dim),
        "encoder.global_w": _uniform(rng, (embed, embed), embed),
        "encoder.global_b": _uniform(rng, (embed,), embed),
    }, {"patch": tuple(patch)}


register(
    DifferentiableOp(
        "encode_frames",
        _encoder_sample,
        lambda t, s: encoder.encode_array(t["frames"], s["patch"], t),
        lambda t, s, dout: encoder.encode_array_backward(t["frames"], s["patch"], t, dout),
    )
)


def _dpo_sample(rng, beta=0.3):
    # chosen policy, chosen reference, rejected policy, rejected reference
    return {"logprobs": rng.normal(loc=-5.0, scale=2.0, size=4)}, {"beta": beta}


def _dpo_scores(logprobs):
    chosen = SequenceScore(logprob_policy=logprobs[0], logprob_reference=logprobs[1])
    rejected = SequenceScore(logprob_policy=logprobs[2], logprob_reference=logprobs[3])
    return chosen, rejected


def _dpo_forward(tensors, static):
    return np.asarray(dpo.dpo_loss(*_dpo_scores(tensors["logprobs"]), static["beta"]))


def _dpo_backward(tensors, static, dout):
    grads = dpo.dpo_loss_grad(*_dpo_scores(tensors["logprobs"]), static["beta"])
    order = ("chosen_policy", "chosen_reference", "rejected_policy", "rejected_reference")
    return {"logprobs": float(dout) * np.array([grads[name] for name in order])}


register(DifferentiableOp("dpo_loss", _dpo_sample, _dpo_forward, _dpo_backward))


def _bigram_sample(rng, prompt="Q: effusion?", response="No effusion.\n"):
    return {"logits": rng.normal(size=(dpo.STATES, dpo.STATES))}, {"prompt": prompt, "response": response}


register(
    DifferentiableOp(
        "bigram_logprob",
        _bigram_sample,
        lambda t, s: np.asarray(dpo.BigramLM(t["logits"]).logprob(s["prompt"], s["response"])),
        lambda t, s, dout: {"logits": float(dout) * dpo.BigramLM(t["logits"]).logprob_grad(s["prompt"], s["response"])},
    )
)
