from __future__ import annotations

import logging
import math
from collections import Counter
from typing import List, Sequence, Tuple

from .errors import InvalidInputError
from .models import MetricReport
from .text import tokenize_words

logger = logging.getLogger(__name__)


def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i: i + n]) for i in range(len(tokens) - n + 1))


def _clipped_overlap(candidate: Sequence[str], reference: Sequence[str], n: int) -> int:
    ref_counts = _ngrams(reference, n)
    return sum(min(count, ref_counts[gram]) for gram, count in _ngrams(candidate, n).items())


def _tokens_or_warn(candidate: str, reference: str, metric: str) -> Tuple[List[str], List[str]]:
    cand = tokenize_words(candidate)
    ref = tokenize_words(reference)
    if not cand or not ref:
        logger.warning("%s: empty input after tokenization, scoring 0", metric)
    return cand, ref


def rouge1(candidate: str, reference: str) -> Tuple[float, float, float]:
    cand, ref = _tokens_or_warn(candidate, reference, "rouge1")
    if not cand or not ref:
        return 0.0, 0.0, 0.0
    overlap = _clipped_overlap(cand, ref, 1)
    precision = overlap / len(cand)
    recall = overlap / len(ref)
    if precision + recall == 0:
        return precision, recall, 0.0
    return precision, recall, 2 * precision * recall / (precision + recall)


def bleu(candidate: str, reference: str, max_n: int = 4) -> float:
    """Sentence BLEU with add-one smoothing of empty higher-order precisions and a brevity penalty."""
    if max_n < 1:
        raise InvalidInputError(f"max_n must be at least 1, got {max_n}")
    cand, ref = _tokens_or_warn(candidate, reference, "bleu")
    if not cand or not ref:
        return 0.0
    log_total = 0.0
    for n in range(1, max_n + 1):
        matched = _clipped_overlap(cand, ref, n)
        total = max(len(cand) - n + 1, 0)
        if matched == 0:
            if n == 1:
                return 0.0
            precision = (matched + 1) / (total + 1)
        else:
            precision = matched / total
        log_total += math.log(precision)
    brevity = math.exp(1 - len(ref) / len(cand)) if len(cand) < len(ref) else 1.0
    return brevity * math.exp(log_total / max_n)


def evaluate(candidate: str, reference: str) -> MetricReport:
    precision, recall, f1 = rouge1(candidate, reference)
    return MetricReport(
        bleu=bleu(candidate, reference),
        rouge1_precision=precision,
        rouge1_recall=recall,
        rouge1_f1=f1,
    )


def evaluate_corpus(candidates: Sequence[str], references: Sequence[str]) -> List[MetricReport]:
    if len(candidates) != len(references):
        raise InvalidInputError(
            f"got {len(candidates)} predictions but {len(references)} references"
        )
    return [evaluate(c, r) for c, r in zip(candidates, references)]


def corpus_means(reports: Sequence[MetricReport]) -> MetricReport:
    if not reports:
        raise InvalidInputError("no metric reports to average")
    fields = MetricReport.model_fields
    return MetricReport(
        **{name: min(1.0, sum(getattr(r, name) for r in reports) / len(reports)) for name in fields}
    )
