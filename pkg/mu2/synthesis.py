"""Five-stage reasoning synthesis over radiology reports, plus rewriting and translation."""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, TypeVar

from .config import SynthConfig
from .errors import ExtractionMiss, InvalidInputError, RefinementMiss
from .llm import ChatClient
from .models import (
    Datapoint,
    PipelineSummary,
    QAPair,
    QARecord,
    QuestionSet,
    ReasoningTrace,
    ReportRecord,
)
from .prompts import (
    ANSWER_TEMPLATE,
    FILTER_TEMPLATE,
    FUSE_TEMPLATE,
    QUESTIONS_TEMPLATE,
    REFINE_TEMPLATE,
    REWRITE_TEMPLATE,
    TRANSLATE_TEMPLATE,
    extract_questions,
    extract_thinking_answer,
)
from .storage import load_records, load_records_if_exists, write_json, write_jsonl
from .text import ascii_ratio, tokenize_words
from .types import RecordStatus, Stage

logger = logging.getLogger(__name__)

T = TypeVar("T")
R = TypeVar("R")

ContradictionRule = Callable[[QARecord], Optional[str]]

PIPELINE_STAGES = (Stage.QUESTIONS, Stage.ANSWERS, Stage.FILTER, Stage.REFINE, Stage.FUSE)

QUESTIONS_FILE = "questions.jsonl"
QA_FILE = "qa.jsonl"
ACCEPTED_FILE = "accepted.jsonl"
FILTERED_FILE = "filtered_out.jsonl"
REFINED_FILE = "refined.jsonl"
TRACES_FILE = "traces.jsonl"
DATAPOINTS_FILE = "datapoints.jsonl"
SUMMARY_FILE = "summary.json"

REVIEWER_NO = "reviewer answered no"
NON_CONFORMING = "non-conforming verdict"


def _require_text(value: str, what: str) -> None:
    if not value or not value.strip():
        raise InvalidInputError(f"{what} is empty")


def gen_questions(report: str, client: ChatClient) -> List[str]:
    _require_text(report, "report")
    return extract_questions(client.complete(QUESTIONS_TEMPLATE.render(report=report)))


def gen_answer(report: str, question: str, client: ChatClient) -> Tuple[str, str]:
    _require_text(question, "question")
    reply = client.complete(ANSWER_TEMPLATE.render(report=report, question=question))
    return extract_thinking_answer(reply)


@dataclass(frozen=True)
class FilterVerdict:
    accepted: bool
    reason: Optional[str]
    reply: str

    def __bool__(self) -> bool:
        return self.accepted


def filter_qa(report: str, question: str, answer: str, client: ChatClient) -> FilterVerdict:
    for value, what in ((report, "report"), (question, "question"), (answer, "answer")):
        _require_text(value, what)
    reply = client.complete(FILTER_TEMPLATE.render(report=report, question=question, answer=answer))
    verdict = reply.strip().casefold()
    if verdict == "yes":
        return FilterVerdict(True, None, reply)
    if verdict == "no":
        return FilterVerdict(False, REVIEWER_NO, reply)
    return FilterVerdict(False, NON_CONFORMING, reply)


def refine_thinking(thinking: str, client: ChatClient) -> str:
    _require_text(thinking, "thinking")
    refined = client.complete(REFINE_TEMPLATE.render(thinking=thinking)).strip()
    if not refined:
        raise RefinementMiss("refinement reply is empty")
    return refined


def thinking_before(records: Sequence[QARecord]) -> str:
    blocks = [f"Q: {r.question}\nThinking: {r.thinking}\nAnswer: {r.answer}" for r in records]
    return "\n\n".join(blocks)


def fuse_traces(records: Sequence[QARecord], client: ChatClient) -> ReasoningTrace:
    if not records:
        raise InvalidInputError("no refined records to fuse")
    not_refined = [r.record_id for r in records if r.status != RecordStatus.REFINED]
    if not_refined:
        raise InvalidInputError(f"records not refined: {', '.join(not_refined)}")
    report_ids = {r.report_id for r in records}
    if len(report_ids) != 1:
        raise InvalidInputError("fused records must come from a single report")
    ordered = sorted(records, key=lambda r: r.index)
    before = thinking_before(ordered)
    narrative = client.complete(FUSE_TEMPLATE.render(thinking_before=before)).strip()
    return ReasoningTrace(
        report_id=ordered[0].report_id,
        narrative=narrative,
        thinking_before=before,
        source_ids=[r.record_id for r in ordered],
    )


def rewrite_report(report: str, style_examples: str, client: ChatClient) -> str:
    _require_text(report, "report")
    return client.complete(REWRITE_TEMPLATE.render(style_examples=style_examples, report=report)).strip()


def translate_report(text: str, source_lang: str, target_lang: str, client: ChatClient) -> str:
    _require_text(text, "text")
    prompt = TRANSLATE_TEMPLATE.render(source_lang=source_lang, target_lang=target_lang, source_input=text)
    return client.complete(prompt).strip()


def heuristic_rejection(
    record: QARecord, config: SynthConfig, rules: Sequence[ContradictionRule] = ()
) -> Optional[str]:
    """Cheap checks run before the reviewer call; returns a rejection reason or None."""
    if ascii_ratio(record.thinking) < config.min_ascii_ratio:
        return "non-English chain of thought"
    if len(tokenize_words(record.thinking)) < config.min_thinking_tokens:
        return "vacuous chain of thought"
    for rule in rules:
        reason = rule(record)
        if reason:
            return reason
    return None


class _Failed:
    def __init__(self, key: str, error: Exception) -> None:
        self.key = key
        self.error = error


class SynthesisPipeline:
    """Stage-major runner: every stage reads the previous stage's file and rewrites its own."""

    def __init__(
        self,
        client: ChatClient,
        out_dir: Path,
        config: Optional[SynthConfig] = None,
        rules: Sequence[ContradictionRule] = (),
    ) -> None:
        self.client = client
        self.out_dir = Path(out_dir)
        self.config = config or SynthConfig()
        self.rules = list(rules)
        self.errors = 0

    def _path(self, name: str) -> Path:
        return self.out_dir / name

    def _map(self, fn: Callable[[T], R], items: Sequence[T], key: Callable[[T], str]) -> List[R]:
        def guarded(item: T):
            try:
                return fn(item)
            except Exception as exc:
                return _Failed(key(item), exc)

        with ThreadPoolExecutor(max_workers=self.config.max_inflight) as pool:
            results = list(pool.map(guarded, items))
        kept = []
        for result in results:
            if isinstance(result, _Failed):
                self.errors += 1
                logger.error("%s: %s", result.key, result.error)
            else:
                kept.append(result)
        return kept

    def _previous(self, name: str, model, resume: bool) -> Dict[str, object]:
        if not resume:
            return {}
        return {self._record_key(r): r for r in load_records_if_exists(self._path(name), model)}

    @staticmethod
    def _record_key(record) -> str:
        return getattr(record, "record_id", None) or record.report_id

    def _require(self, name: str, model) -> list:
        path = self._path(name)
        if not path.exists():
            raise InvalidInputError(f"{path} is missing; run the earlier stages first")
        return load_records(path, model)

    def stage_questions(self, reports: Sequence[ReportRecord], resume: bool) -> None:
        done = self._previous(QUESTIONS_FILE, QuestionSet, resume)
        todo = [r for r in reports if r.report_id not in done]

        def work(report: ReportRecord) -> QuestionSet:
            reply = self.client.complete(QUESTIONS_TEMPLATE.render(report=report.report_text))
            questions = extract_questions(reply)[: self.config.max_questions]
            if not questions:
                logger.info("%s: no questions extracted", report.report_id)
                return QuestionSet(report_id=report.report_id, miss=True, raw_reply=reply)
            return QuestionSet(report_id=report.report_id, questions=questions)

        for result in self._map(work, todo, lambda r: r.report_id):
            done[result.report_id] = result
        write_jsonl(self._path(QUESTIONS_FILE), [done[r.report_id] for r in reports if r.report_id in done])

    def stage_answers(self, reports: Sequence[ReportRecord], resume: bool) -> None:
        texts = {r.report_id: r.report_text for r in reports}
        pending: List[QARecord] = []
        for qset in self._require(QUESTIONS_FILE, QuestionSet):
            if qset.report_id not in texts:
                continue
            for index, question in enumerate(qset.questions):
                pending.append(
                    QARecord(
                        record_id=f"{qset.report_id}-q{index}",
                        report_id=qset.report_id,
                        index=index,
                        question=question,
                    )
                )
        done = self._previous(QA_FILE, QARecord, resume)

        def work(record: QARecord) -> QARecord:
            try:
                thinking, answer = gen_answer(texts[record.report_id], record.question, self.client)
            except ExtractionMiss as miss:
                logger.info("%s: %s", record.record_id, miss)
                return record.model_copy(update={"miss": True, "raw_reply": miss.raw_reply})
            return record.model_copy(update={"thinking": thinking, "answer": answer})

        todo = [r for r in pending if r.record_id not in done]
        for result in self._map(work, todo, lambda r: r.record_id):
            done[result.record_id] = result
        write_jsonl(self._path(QA_FILE), [done[r.record_id] for r in pending if r.record_id in done])

    def stage_filter(self, reports: Sequence[ReportRecord], resume: bool) -> None:
        texts = {r.report_id: r.report_text for r in reports}
        pending = [r for r in self._require(QA_FILE, QARecord) if not r.miss and r.report_id in texts]
        done = {**self._previous(ACCEPTED_FILE, QARecord, resume), **self._previous(FILTERED_FILE, QARecord, resume)}

        def work(record: QARecord) -> QARecord:
            reason = heuristic_rejection(record, self.config, self.rules)
            if reason:
                return record.advance(RecordStatus.FILTERED_OUT, reason)
            verdict = filter_qa(texts[record.report_id], record.question, record.answer, self.client)
            if verdict:
                return record.advance(RecordStatus.ACCEPTED)
            return record.advance(RecordStatus.FILTERED_OUT, verdict.reason)

        todo = [r for r in pending if r.record_id not in done]
        for result in self._map(work, todo, lambda r: r.record_id):
            done[result.record_id] = result
        ordered = [done[r.record_id] for r in pending if r.record_id in done]
        write_jsonl(self._path(ACCEPTED_FILE), [r for r in ordered if r.status == RecordStatus.ACCEPTED])
        write_jsonl(self._path(FILTERED_FILE), [r for r in ordered if r.status == RecordStatus.FILTERED_OUT])

    def stage_refine(self, reports: Sequence[ReportRecord], resume: bool) -> None:
        wanted = {r.report_id for r in reports}
        pending = [r for r in self._require(ACCEPTED_FILE, QARecord) if r.report_id in wanted]
        done = self._previous(REFINED_FILE, QARecord, resume)

        def work(record: QARecord) -> Optional[QARecord]:
            try:
                thinking = refine_thinking(record.thinking, self.client)
            except RefinementMiss as miss:
                logger.info("%s: %s; keeping the original thinking", record.record_id, miss)
                return None
            return record.advance(RecordStatus.REFINED).model_copy(update={"thinking": thinking})

        todo = [r for r in pending if r.record_id not in done]
        for result in self._map(work, todo, lambda r: r.record_id):
            if result is not None:
                done[result.record_id] = result
        write_jsonl(self._path(REFINED_FILE), [done[r.record_id] for r in pending if r.record_id in done])

    def stage_fuse(self, reports: Sequence[ReportRecord], resume: bool) -> None:
        refined = self._require(REFINED_FILE, QARecord)
        by_report: Dict[str, List[QARecord]] = {}
        for record in refined:
            by_report.setdefault(record.report_id, []).append(record)
        done = self._previous(TRACES_FILE, ReasoningTrace, resume)
        for report_id, trace in list(done.items()):
            current = [r.record_id for r in sorted(by_report.get(report_id, []), key=lambda r: r.index)]
            if trace.source_ids != current:
                logger.info("%s: refined records changed since the last fuse", report_id)
                del done[report_id]

        todo = [r for r in reports if r.report_id not in done and by_report.get(r.report_id)]
        for report in reports:
            if not by_report.get(report.report_id):
                logger.info("%s: no refined records, no trace", report.report_id)
        traces = self._map(lambda r: fuse_traces(by_report[r.report_id], self.client), todo, lambda r: r.report_id)
        for trace in traces:
            done[trace.report_id] = trace
        write_jsonl(self._path(TRACES_FILE), [done[r.report_id] for r in reports if r.report_id in done])

        accepted: Dict[str, List[QARecord]] = {}
        for record in load_records_if_exists(self._path(ACCEPTED_FILE), QARecord):
            accepted.setdefault(record.report_id, []).append(record)
        datapoints = [
            Datapoint(
                report_id=r.report_id,
                report_text=r.report_text,
                qa=[QAPair(question=q.question, answer=q.answer) for q in accepted.get(r.report_id, [])],
                trace=done.get(r.report_id),
            )
            for r in reports
        ]
        write_jsonl(self._path(DATAPOINTS_FILE), datapoints)

    def summarize(self, reports: Sequence[ReportRecord]) -> PipelineSummary:
        questions = load_records_if_exists(self._path(QUESTIONS_FILE), QuestionSet)
        qa = load_records_if_exists(self._path(QA_FILE), QARecord)
        accepted = load_records_if_exists(self._path(ACCEPTED_FILE), QARecord)
        refined = load_records_if_exists(self._path(REFINED_FILE), QARecord)
        traces = load_records_if_exists(self._path(TRACES_FILE), ReasoningTrace)
        refined_ids = {r.record_id for r in refined}
        return PipelineSummary(
            reports=len(reports),
            question_misses=sum(q.miss for q in questions),
            generated=sum(not r.miss for r in qa),
            answer_misses=sum(r.miss for r in qa),
            accepted=len(accepted),
            filtered_out=len(load_records_if_exists(self._path(FILTERED_FILE), QARecord)),
            refined=len(refined),
            refinement_misses=sum(r.record_id not in refined_ids for r in accepted) if self._path(REFINED_FILE).exists() else 0,
            traces=len(traces),
            untraced_reports=len(reports) - len(traces) if self._path(TRACES_FILE).exists() else 0,
            errors=self.errors,
        )

    def run(
        self,
        reports: Sequence[ReportRecord],
        stages: Sequence[Stage] = PIPELINE_STAGES,
        resume: bool = False,
    ) -> PipelineSummary:
        ids = [r.report_id for r in reports]
        if len(set(ids)) != len(ids):
            raise InvalidInputError("report ids must be unique")
        runners = {
            Stage.QUESTIONS: self.stage_questions,
            Stage.ANSWERS: self.stage_answers,
            Stage.FILTER: self.stage_filter,
            Stage.REFINE: self.stage_refine,
            Stage.FUSE: self.stage_fuse,
        }
        self.errors = 0
        for stage in PIPELINE_STAGES:
            if stage in stages:
                runners[stage](reports, resume)
                logger.info("stage %s done", stage.value)
        summary = self.summarize(reports)
        write_json(self._path(SUMMARY_FILE), summary)
        return summary


def run_pipeline(
    reports: Sequence[ReportRecord],
    client: ChatClient,
    out_dir: Path,
    config: Optional[SynthConfig] = None,
    stages: Sequence[Stage] = PIPELINE_STAGES,
    resume: bool = False,
    rules: Sequence[ContradictionRule] = (),
) -> PipelineSummary:
    return SynthesisPipeline(client, out_dir, config, rules).run(reports, stages, resume)


def _map_reports(
    reports: Sequence[ReportRecord], fn: Callable[[ReportRecord], str], max_inflight: int
) -> Tuple[List[ReportRecord], int]:
    def work(report: ReportRecord):
        try:
            return ReportRecord(report_id=report.report_id, report_text=fn(report))
        except Exception as exc:
            logger.error("%s: %s", report.report_id, exc)
            return None

    with ThreadPoolExecutor(max_workers=max_inflight) as pool:
        results = list(pool.map(work, reports))
    done = [r for r in results if r is not None]
    return done, len(results) - len(done)


def rewrite_reports(
    reports: Sequence[ReportRecord], style_examples: str, client: ChatClient, max_inflight: int = 1
) -> Tuple[List[ReportRecord], int]:
    """Paraphrase every report; returns the rewritten records and the number that failed."""
    return _map_reports(reports, lambda r: rewrite_report(r.report_text, style_examples, client), max_inflight)


def translate_reports(
    reports: Sequence[ReportRecord],
    source_lang: str,
    target_lang: str,
    client: ChatClient,
    max_inflight: int = 1,
) -> Tuple[List[ReportRecord], int]:
    return _map_reports(
        reports, lambda r: translate_report(r.report_text, source_lang, target_lang, client), max_inflight
    )
