"""Stand-in visual encoder (patch tokens plus one global token per frame) and toy text embedding."""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Sequence, Tuple

import numpy as np

from .errors import InvalidInputError, NonFiniteError
from .storage import write_lines
from .text import tokenize_words
from .volume import FrameStack

logger = logging.getLogger(__name__)

UNK_TOKEN = "<unk>"

Params = Mapping[str, np.ndarray]


@dataclass(frozen=True)
class TokenGrid:
    tokens: np.ndarray

    @property
    def frames(self) -> int:
        return int(self.tokens.shape[0])

    @property
    def n_visual_tokens(self) -> int:
        return int(self.tokens.shape[1])

    @property
    def embed_dim(self) -> int:
        return int(self.tokens.shape[2])


@dataclass(frozen=True)
class TextEmbedding:
    tokens: np.ndarray
    attention_mask: np.ndarray

    @property
    def valid_tokens(self) -> np.ndarray:
        return self.tokens[self.attention_mask]


class Vocab:
    """Line-delimited token list; index 0 is always the unknown token."""

    def __init__(self, tokens: Sequence[str]) -> None:
        tokens = [UNK_TOKEN] + [t for t in tokens if t != UNK_TOKEN]
        if len(set(tokens)) != len(tokens):
            raise InvalidInputError("vocabulary contains duplicate tokens")
        self.tokens: List[str] = tokens
        self._index: Dict[str, int] = {token: i for i, token in enumerate(tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self._index

    def lookup(self, token: str) -> int:
        return self._index.get(token, 0)

    def encode(self, text: str) -> List[int]:
        return [self.lookup(word) for word in tokenize_words(text)]


def build_vocab(corpus: Iterable[str], max_size: int, min_freq: int = 1) -> Vocab:
    counts: Counter[str] = Counter()
    for line in corpus:
        counts.update(tokenize_words(line))
    kept = [token for token, freq in counts.items() if freq >= min_freq]
    kept.sort(key=lambda token: (-counts[token], token))
    # One slot is reserved for the unknown token.
    return Vocab(kept[: max(0, max_size - 1)])


def load_vocab(path: Path) -> Vocab:
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except FileNotFoundError as exc:
        raise InvalidInputError(f"vocabulary file not found: {path}") from exc
    return Vocab([line.strip() for line in lines if line.strip()])


def save_vocab(path: Path, vocab: Vocab) -> None:
    write_lines(path, vocab.tokens)


def patch_count(frame_shape: Sequence[int], patch: Sequence[int]) -> int:
    for axis, size, p in zip(("K", "H", "W"), frame_shape, patch):
        if size % p:
            raise InvalidInputError(f"frame axis {axis}={size} is not divisible by patch size {p}")
    k, h, w = frame_shape
    pd, ph, pw = patch
    return (k // pd) * (h // ph) * (w // pw)


def patchify(frames: np.ndarray, patch: Sequence[int]) -> np.ndarray:
    """(T, K, H, W) -> (T, P, pd*ph*pw) with patches in (depth, row, column) raster order."""
    t, k, h, w = frames.shape
    patch_count((k, h, w), patch)
    pd, ph, pw = patch
    blocks = frames.reshape(t, k // pd, pd, h // ph, ph, w // pw, pw)
    blocks = blocks.transpose(0, 1, 3, 5, 2, 4, 6)
    return blocks.reshape(t, -1, pd * ph * pw)


def unpatchify(patches: np.ndarray, frame_shape: Sequence[int], patch: Sequence[int]) -> np.ndarray:
    k, h, w = frame_shape
    pd, ph, pw = patch
    t = patches.shape[0]
    blocks = patches.reshape(t, k // pd, h // ph, w // pw, pd, ph, pw)
    blocks = blocks.transpose(0, 1, 4, 2, 5, 3, 6)
    return blocks.reshape(t, k, h, w)


def encode_array(frames: np.ndarray, patch: Sequence[int], params: Params) -> np.ndarray:
    patches = patchify(frames, patch)
    tokens = patches @ params["encoder.patch_w"] + params["encoder.patch_b"]
    summary = tokens.mean(axis=1) @ params["encoder.global_w"] + params["encoder.global_b"]
    return np.concatenate([tokens, summary[:, None, :]], axis=1)


def encode_array_backward(
    frames: np.ndarray, patch: Sequence[int], params: Params, dout: np.ndarray
) -> Dict[str, np.ndarray]:
    patches = patchify(frames, patch)
    tokens = patches @ params["encoder.patch_w"] + params["encoder.patch_b"]
    mean = tokens.mean(axis=1)

    dglobal = dout[:, -1, :]
    dtokens = dout[:, :-1, :] + (dglobal @ params["encoder.global_w"].T)[:, None, :] / tokens.shape[1]
    dpatches = dtokens @ params["encoder.patch_w"].T
    return {
        "frames": unpatchify(dpatches, frames.shape[1:], patch),
        "encoder.patch_w": np.einsum("tpd,tpe->de", patches, dtokens),
        "encoder.patch_b": dtokens.sum(axis=(0, 1)),
        "encoder.global_w": mean.T @ dglobal,
        "encoder.global_b": dglobal.sum(axis=0),
    }


def encode_frames(stack: FrameStack, patch: Sequence[int], params: Params) -> TokenGrid:
    """Project every patch of every frame to E and append the frame's global token last.

    A constant volume gives identical patch tokens in every frame, but the global token is a
    separate projection and differs from them in general. Only when `encoder.global_w` is the
    identity and `encoder.global_b` is zero does it coincide with the patch tokens; then every
    token downstream, compact tokens included, is identical as well.
    """
    tokens = encode_array(stack.data, patch, params)
    if not np.isfinite(tokens).all():
        raise NonFiniteError("encode_frames", "encoder produced non-finite tokens")
    return TokenGrid(tokens=tokens)


def embed_text(question: str, vocab: Vocab, params: Params, n_q: int) -> TextEmbedding:
    if not question.strip():
        raise InvalidInputError("question is empty")
    table = params["text.table"]
    if table.shape[0] != len(vocab):
        raise InvalidInputError(
            f"text table has {table.shape[0]} rows but the vocabulary has {len(vocab)} tokens"
        )
    ids = vocab.encode(question)[:n_q]
    if not ids:
        raise InvalidInputError(f"question {question!r} has no word tokens")
    tokens = np.zeros((n_q, table.shape[1]), dtype=table.dtype)
    tokens[: len(ids)] = table[ids]
    mask = np.zeros(n_q, dtype=bool)
    mask[: len(ids)] = True
    return TextEmbedding(tokens=tokens, attention_mask=mask)


def encoder_param_shapes(
    patch: Sequence[int], hidden: int, vocab_size: int
) -> List[Tuple[str, Tuple[int, ...], int]]:
    """(name, shape, fan_in) for every encoder-side parameter."""
    patch_dim = int(np.prod(patch))
    return [
        ("encoder.patch_w", (patch_dim, hidden), patch_dim),
        ("encoder.patch_b", (hidden,), patch_dim),
        ("encoder.global_w", (hidden, hidden), hidden),
        ("encoder.global_b", (hidden,), hidden),
        ("text.table", (vocab_size, hidden), hidden),
    ]
