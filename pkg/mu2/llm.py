"""Chat-completion clients: HTTP endpoint, transcript recording/replay and deterministic mocks."""

from __future__ import annotations

import logging
import re
import time
from typing import Callable, List, Optional, Protocol

import requests

from .config import ClientConfig
from .errors import ClientError, InvalidInputError
from .prompts import identify
from .settings import get_settings
from .text import tokenize_words
from .transcripts import TranscriptStore
from .types import Stage

logger = logging.getLogger(__name__)

_RETRY_STATUS = {429, 500, 502, 503, 504}


class ChatClient(Protocol):
    def complete(self, prompt: str) -> str:
        ...


class HttpChatClient:
    """Single-turn user message against an OpenAI-compatible /chat/completions endpoint."""

    def __init__(
        self,
        config: ClientConfig,
        api_key: str,
        session: Optional[requests.Session] = None,
        sleep: Callable[[float], None] = time.sleep,
    ) -> None:
        self.config = config
        self.api_key = api_key
        self.session = session or requests.Session()
        self._sleep = sleep

    @property
    def model(self) -> str:
        return self.config.model

    @classmethod
    def from_environment(cls, config: ClientConfig) -> "HttpChatClient":
        settings = get_settings()
        if not settings.api_key:
            raise InvalidInputError("remote client needs MU2_API_KEY (or OPENAI_API_KEY) in the environment")
        updates = {}
        if settings.base_url:
            updates["base_url"] = settings.base_url
        if settings.model:
            updates["model"] = settings.model
        return cls(config.model_copy(update=updates), settings.api_key)

    def _post(self, prompt: str) -> requests.Response:
        return self.session.post(
            f"{self.config.base_url.rstrip('/')}/chat/completions",
            headers={"Authorization": f"Bearer {self.api_key}"},
            json={
                "model": self.config.model,
                "messages": [{"role": "user", "content": prompt}],
                "temperature": self.config.temperature,
            },
            timeout=self.config.timeout,
        )

    def complete(self, prompt: str) -> str:
        attempts = self.config.max_retries + 1
        last_error = "no attempt made"
        for attempt in range(attempts):
            try:
                response = self._post(prompt)
            except requests.RequestException as exc:
                last_error = f"request failed: {exc}"
            else:
                if response.status_code == 200:
                    try:
                        content = response.json()["choices"][0]["message"]["content"]
                    except (ValueError, KeyError, IndexError, TypeError) as exc:
                        raise ClientError(f"malformed completion payload: {exc}") from exc
                    if not isinstance(content, str):
                        raise ClientError(f"completion content is {type(content).__name__}, expected text")
                    return content
                last_error = f"HTTP {response.status_code}"
                if response.status_code not in _RETRY_STATUS:
                    raise ClientError(f"{last_error}: {response.text[:200]}")
            if attempt + 1 < attempts:
                delay = self.config.backoff_base * (2 ** attempt)
                logger.warning("chat request attempt %d/%d failed (%s); retrying in %.1fs", attempt + 1, attempts, last_error, delay)
                self._sleep(delay)
        raise ClientError(f"gave up after {attempts} attempts: {last_error}")


class RecordingClient:
    def __init__(self, inner: ChatClient, store: TranscriptStore, model: str) -> None:
        self.inner = inner
        self.store = store
        self.model = model

    def complete(self, prompt: str) -> str:
        request = {"model": self.model, "prompt": prompt}
        cached = self.store.get("chat", request)
        if cached is not None:
            return cached
        reply = self.inner.complete(prompt)
        self.store.put("chat", request, reply)
        return reply


class ReplayClient:
    def __init__(self, store: TranscriptStore, model: str) -> None:
        self.store = store
        self.model = model

    def complete(self, prompt: str) -> str:
        reply = self.store.get("chat", {"model": self.model, "prompt": prompt})
        if reply is None:
            raise ClientError("no recorded transcript for this prompt")
        return reply


_SENTENCE_SPLIT = re.compile(r"(?<=\.)\s+")
_FINDING = re.compile(r"finding (\d+)")

_ECHO_FIELD = {
    Stage.REWRITE: "report",
    Stage.QUESTIONS: "report",
    Stage.ANSWERS: "question",
    Stage.FILTER: "answer",
    Stage.REFINE: "thinking",
    Stage.FUSE: "thinking_before",
    Stage.TRANSLATE: "source_input",
}

_REASONING_TAIL = (
    "Reviewing the image step by step, I inspect the relevant anatomy, compare it with the "
    "expected normal appearance and confirm this observation."
)


def report_sentences(report: str) -> List[str]:
    return [s for s in _SENTENCE_SPLIT.split(report.strip()) if s]


def _lower_first(text: str) -> str:
    return text[:1].lower() + text[1:]


class MockChatClient:
    """Offline client that recognises the prompt templates.

    "echo" returns the main input of every prompt unchanged. "scripted" plays a
    small deterministic radiologist: one question per report sentence, answers
    quoting that sentence, a word-count verdict and report-free refinement.
    """

    def __init__(self, mode: str = "scripted") -> None:
        if mode not in ("scripted", "echo"):
            raise InvalidInputError(f"unknown mock mode {mode!r}")
        self.mode = mode
        self.model = f"mock-{mode}"

    def complete(self, prompt: str) -> str:
        found = identify(prompt)
        if found is None:
            raise ClientError("mock client does not recognise the prompt")
        template, values = found
        if self.mode == "echo":
            return values[_ECHO_FIELD[template.stage]]
        handler = getattr(self, f"_{template.stage.value}", None)
        if handler is None:
            return values[_ECHO_FIELD[template.stage]]
        return handler(values)

    def _questions(self, values: dict) -> str:
        sentences = report_sentences(values["report"])
        lines = [f"{i}. What is seen in finding {i} of this study?" for i in range(1, len(sentences) + 1)]
        return "Here are the questions:\n" + "\n".join(lines)

    def _answers(self, values: dict) -> str:
        sentences = report_sentences(values["report"])
        found = _FINDING.search(values["question"])
        if not found or not 1 <= int(found.group(1)) <= len(sentences):
            return "I cannot answer this question."
        sentence = sentences[int(found.group(1)) - 1]
        return f"Thinking: The report states that {_lower_first(sentence)} {_REASONING_TAIL}\n\nAnswer: {sentence}"

    def _filter(self, values: dict) -> str:
        return "No" if len(tokenize_words(values["answer"])) < 4 else "Yes"

    def _refine(self, values: dict) -> str:
        return values["thinking"].replace("The report states that ", "The image shows that ")
