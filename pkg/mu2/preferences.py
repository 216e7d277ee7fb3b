"""Best/worst-of-n preference pair construction against reference reports."""

from __future__ import annotations

import logging
import random
import re
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import List, Optional, Protocol, Sequence, Tuple, Union

from pydantic import BaseModel, Field
from tqdm import tqdm

from .errors import GeneratorError, InvalidInputError, ScorerError
from .llm import ChatClient, report_sentences
from .metrics import rouge1
from .models import PreferencePair, PromptRecord, ScoredCandidate
from .prompts import PromptTemplate
from .transcripts import TranscriptStore
from .types import Stage

logger = logging.getLogger(__name__)

_NUMBER = re.compile(r"\d*\.?\d+")


class CandidateGenerator(Protocol):
    def generate(self, prompt: PromptRecord, n: int) -> List[str]:
        ...


class ReportScorer(Protocol):
    def score(self, reference: str, candidate: str) -> Tuple[float, str]:
        ...


class RougeScorer:
    label = "rouge1-f1"

    def score(self, reference: str, candidate: str) -> Tuple[float, str]:
        precision, recall, f1 = rouge1(candidate, reference)
        return f1, f"rouge1 precision={precision:.4f} recall={recall:.4f}"


def green_template(text: str) -> PromptTemplate:
    return PromptTemplate(Stage.SCORE, text, {"reference": "{reference}", "candidate": "{candidate}"})


def load_green_template(path: Path) -> PromptTemplate:
    try:
        return green_template(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise InvalidInputError(f"scorer prompt template not found: {path}") from exc


def parse_score(reply: str) -> float:
    for token in _NUMBER.findall(reply):
        value = float(token)
        if 0.0 <= value <= 1.0:
            return value
    raise ScorerError(f"no score in [0, 1] found in reply {reply[:80]!r}")


class RemoteGreenScorer:
    """Asks a chat model to grade a candidate report against the reference on a 0..1 scale."""

    def __init__(self, client: ChatClient, template: PromptTemplate) -> None:
        self.client = client
        self.template = template
        self.label = f"green:{getattr(client, 'model', 'remote')}"

    def score(self, reference: str, candidate: str) -> Tuple[float, str]:
        reply = self.client.complete(self.template.render(reference=reference, candidate=candidate))
        return parse_score(reply), reply.strip()


class PerturbationGenerator:
    """Candidate 0 is the reference itself; the rest drop and shuffle its sentences."""

    def __init__(self, seed: int, dropout: float = 0.3) -> None:
        self.seed = seed
        self.dropout = dropout
        self.label = f"perturb:{seed}:{dropout}"

    def generate(self, prompt: PromptRecord, n: int) -> List[str]:
        sentences = report_sentences(prompt.reference)
        if not sentences:
            raise GeneratorError(f"prompt {prompt.id} has an empty reference")
        candidates = [" ".join(sentences)]
        for i in range(1, n):
            rng = random.Random(f"{self.seed}:{prompt.id}:{i}")
            kept = [s for s in sentences if rng.random() >= self.dropout] or [rng.choice(sentences)]
            rng.shuffle(kept)
            candidates.append(" ".join(kept))
        return candidates


class CachedGenerator:
    def __init__(self, inner: CandidateGenerator, store: TranscriptStore, label: str) -> None:
        self.inner = inner
        self.store = store
        self.label = label

    def generate(self, prompt: PromptRecord, n: int) -> List[str]:
        request = {"generator": self.label, "prompt": prompt.model_dump(mode="json"), "n": n}
        cached = self.store.get("generate", request)
        if cached is None:
            cached = list(self.inner.generate(prompt, n))
            self.store.put("generate", request, cached)
        return cached


class CachedScorer:
    def __init__(self, inner: ReportScorer, store: TranscriptStore, label: str) -> None:
        self.inner = inner
        self.store = store
        self.label = label

    def score(self, reference: str, candidate: str) -> Tuple[float, str]:
        request = {"scorer": self.label, "reference": reference, "candidate": candidate}
        cached = self.store.get("score", request)
        if cached is None:
            value, summary = self.inner.score(reference, candidate)
            cached = {"score": value, "summary": summary}
            self.store.put("score", request, cached)
        return cached["score"], cached["summary"]


class SkippedPrompt(BaseModel):
    id: str
    reason: str


class BuildResult(BaseModel):
    pairs: List[PreferencePair] = Field(default_factory=list)
    skipped: List[SkippedPrompt] = Field(default_factory=list)

    @property
    def skip_count(self) -> int:
        return len(self.skipped)


def select_pair(candidates: Sequence[ScoredCandidate]) -> Optional[Tuple[ScoredCandidate, ScoredCandidate]]:
    """Highest and lowest score; ties go to the lexicographically smallest text. None if all scores tie."""
    best = min(candidates, key=lambda c: (-c.score, c.text))
    worst = min(candidates, key=lambda c: (c.score, c.text))
    if best.score == worst.score:
        return None
    return best, worst


def _pair_for(
    prompt: PromptRecord, generator: CandidateGenerator, scorer: ReportScorer, n_candidates: int
) -> Union[PreferencePair, SkippedPrompt]:
    try:
        texts = generator.generate(prompt, n_candidates)
    except Exception as exc:
        return SkippedPrompt(id=prompt.id, reason=f"generator failed: {exc}")
    if len(texts) < 2:
        return SkippedPrompt(id=prompt.id, reason=f"generator returned {len(texts)} candidate(s)")

    scored = []
    for text in texts:
        try:
            value, summary = scorer.score(prompt.reference, text)
            scored.append(ScoredCandidate(text=text, score=value, scorer_summary=summary))
        except Exception as exc:
            return SkippedPrompt(id=prompt.id, reason=f"scorer failed: {exc}")

    selected = select_pair(scored)
    if selected is None:
        return SkippedPrompt(id=prompt.id, reason="all candidate scores are equal")
    best, worst = selected
    return PreferencePair(
        volume=prompt.volume,
        question=prompt.question,
        chosen=best.text,
        rejected=worst.text,
        score_chosen=best.score,
        score_rejected=worst.score,
    )


def build_pairs(
    prompts: Sequence[PromptRecord],
    generator: CandidateGenerator,
    scorer: ReportScorer,
    n_candidates: int = 8,
    max_inflight: int = 1,
    progress: bool = False,
) -> BuildResult:
    if n_candidates < 2:
        raise InvalidInputError(f"n_candidates must be at least 2, got {n_candidates}")

    def work(prompt: PromptRecord) -> Union[PreferencePair, SkippedPrompt]:
        return _pair_for(prompt, generator, scorer, n_candidates)

    result = BuildResult()
    with ThreadPoolExecutor(max_workers=max_inflight) as pool:
        outcomes = tqdm(pool.map(work, prompts), total=len(prompts), desc="pref-build", disable=not progress)
        for outcome in outcomes:
            if isinstance(outcome, SkippedPrompt):
                logger.info("skipped prompt %s: %s", outcome.id, outcome.reason)
                result.skipped.append(outcome)
            else:
                result.pairs.append(outcome)
    logger.info("built %d pairs, skipped %d prompts", len(result.pairs), result.skip_count)
    return result
