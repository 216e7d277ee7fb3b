"""Direct preference optimisation objective and a toy character bigram log-probability provider."""

from __future__ import annotations

import logging
from typing import Dict, Iterable, List, Optional, Protocol, Sequence, Tuple

import numpy as np
from scipy.special import expit, logsumexp

from .config import BETA_RANGE, DEFAULT_BETA
from .errors import InvalidInputError
from .models import PreferencePair, SequenceScore

logger = logging.getLogger(__name__)

ScoredPair = Tuple[SequenceScore, SequenceScore]


def check_beta(beta: float) -> float:
    low, high = BETA_RANGE
    if not low < beta < high:
        raise InvalidInputError(f"beta must lie in the open interval ({low}, {high}), got {beta}")
    return beta


def dpo_margin(chosen: SequenceScore, rejected: SequenceScore, beta: float) -> float:
    return beta * (chosen.log_ratio - rejected.log_ratio)


def dpo_loss(chosen: SequenceScore, rejected: SequenceScore, beta: float = DEFAULT_BETA) -> float:
    """-log sigmoid(beta * margin), evaluated as softplus(-z)."""
    check_beta(beta)
    return float(np.logaddexp(0.0, -dpo_margin(chosen, rejected, beta)))


def dpo_loss_grad(chosen: SequenceScore, rejected: SequenceScore, beta: float = DEFAULT_BETA) -> Dict[str, float]:
    check_beta(beta)
    dz = -float(expit(-dpo_margin(chosen, rejected, beta)))
    return {
        "chosen_policy": beta * dz,
        "chosen_reference": -beta * dz,
        "rejected_policy": -beta * dz,
        "rejected_reference": beta * dz,
    }


def batch_dpo_loss(pairs: Sequence[ScoredPair], beta: float = DEFAULT_BETA) -> float:
    if not pairs:
        raise InvalidInputError("DPO batch is empty")
    total = 0.0
    for chosen, rejected in pairs:
        total += dpo_loss(chosen, rejected, beta)
    return total / len(pairs)


class LogProbProvider(Protocol):
    def logprob(self, prompt: str, response: str) -> float:
        ...


# Printable ASCII plus newline; everything else maps to UNK. BOS opens every sequence.
ALPHABET = [chr(c) for c in range(32, 127)] + ["\n"]
_CHAR_INDEX = {ch: i for i, ch in enumerate(ALPHABET)}
UNK = len(ALPHABET)
BOS = UNK + 1
STATES = BOS + 1


def char_ids(text: str) -> List[int]:
    return [_CHAR_INDEX.get(ch, UNK) for ch in text]


def transition_counts(prompt: str, response: str) -> np.ndarray:
    """Counts of (previous, next) pairs over the response, conditioned on the prompt's last character."""
    counts = np.zeros((STATES, STATES))
    previous = char_ids(prompt[-1:])[0] if prompt else BOS
    for current in char_ids(response):
        counts[previous, current] += 1.0
        previous = current
    return counts


def log_softmax_rows(logits: np.ndarray) -> np.ndarray:
    return logits - logsumexp(logits, axis=1, keepdims=True)


class BigramLM:
    def __init__(self, logits: np.ndarray) -> None:
        if logits.shape != (STATES, STATES):
            raise InvalidInputError(f"bigram logits must be {STATES}x{STATES}, got {logits.shape}")
        self.logits = np.array(logits, dtype=np.float64)

    @classmethod
    def fit(cls, texts: Iterable[Tuple[str, str]], smoothing: float = 1.0) -> "BigramLM":
        counts = np.full((STATES, STATES), float(smoothing))
        for prompt, response in texts:
            counts += transition_counts(prompt, response)
        return cls(np.log(counts / counts.sum(axis=1, keepdims=True)))

    def copy(self) -> "BigramLM":
        return BigramLM(self.logits.copy())

    def logprob(self, prompt: str, response: str) -> float:
        return float(np.sum(transition_counts(prompt, response) * log_softmax_rows(self.logits)))

    def logprob_grad(self, prompt: str, response: str) -> np.ndarray:
        counts = transition_counts(prompt, response)
        probs = np.exp(log_softmax_rows(self.logits))
        return counts - counts.sum(axis=1, keepdims=True) * probs


def score_pair(
    pair: PreferencePair, policy: LogProbProvider, reference: LogProbProvider
) -> ScoredPair:
    chosen = SequenceScore(
        logprob_policy=policy.logprob(pair.question, pair.chosen),
        logprob_reference=reference.logprob(pair.question, pair.chosen),
    )
    rejected = SequenceScore(
        logprob_policy=policy.logprob(pair.question, pair.rejected),
        logprob_reference=reference.logprob(pair.question, pair.rejected),
    )
    return chosen, rejected


def pair_scores(
    pairs: Sequence[PreferencePair],
    policy: Optional[LogProbProvider] = None,
    reference: Optional[LogProbProvider] = None,
) -> List[ScoredPair]:
    """Stored log-probabilities win; otherwise the providers score the pair."""
    scored: List[ScoredPair] = []
    for pair in pairs:
        if pair.chosen_logprobs is not None and pair.rejected_logprobs is not None:
            scored.append((pair.chosen_logprobs, pair.rejected_logprobs))
        elif policy is not None and reference is not None:
            scored.append(score_pair(pair, policy, reference))
        else:
            raise InvalidInputError("pair has no stored log-probabilities and no provider was given")
    return scored


def train_policy_dpo(
    pairs: Sequence[PreferencePair],
    reference: BigramLM,
    beta: float = DEFAULT_BETA,
    steps: int = 50,
    lr: float = 1.0,
) -> Tuple[BigramLM, List[float]]:
    """Gradient descent on the batch loss of a bigram policy initialised from the reference."""
    check_beta(beta)
    if not pairs:
        raise InvalidInputError("DPO batch is empty")
    policy = reference.copy()
    losses: List[float] = []
    for step in range(steps + 1):
        scored = [score_pair(pair, policy, reference) for pair in pairs]
        losses.append(batch_dpo_loss(scored, beta))
        if step == steps:
            break
        grad = np.zeros_like(policy.logits)
        for pair, (chosen, rejected) in zip(pairs, scored):
            dz = -float(expit(-dpo_margin(chosen, rejected, beta)))
            direction = policy.logprob_grad(pair.question, pair.chosen) - policy.logprob_grad(pair.question, pair.rejected)
            grad += dz * beta * direction
        policy.logits -= lr * grad / len(pairs)
        logger.debug("dpo step %d loss %.6f", step, losses[-1])
    return policy, losses
