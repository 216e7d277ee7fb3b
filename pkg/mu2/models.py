from __future__ import annotations

import math
from typing import Dict, List, Optional

from pydantic import BaseModel, Field, field_validator, model_validator

from .types import RecordStatus

_FORWARD = {
    RecordStatus.GENERATED: {RecordStatus.FILTERED_OUT, RecordStatus.ACCEPTED},
    RecordStatus.ACCEPTED: {RecordStatus.REFINED},
    RecordStatus.FILTERED_OUT: set(),
    RecordStatus.REFINED: set(),
}


class SequenceScore(BaseModel):
    logprob_policy: float
    logprob_reference: float

    @field_validator("logprob_policy", "logprob_reference")
    def finite(cls, v: float) -> float:
        if not math.isfinite(v):
            raise ValueError("log-probabilities must be finite")
        return v

    @property
    def log_ratio(self) -> float:
        return self.logprob_policy - self.logprob_reference


class PreferencePair(BaseModel):
    volume: Optional[str] = None
    question: str
    chosen: str
    rejected: str
    score_chosen: float = Field(..., ge=0.0, le=1.0)
    score_rejected: float = Field(..., ge=0.0, le=1.0)
    chosen_logprobs: Optional[SequenceScore] = None
    rejected_logprobs: Optional[SequenceScore] = None

    @model_validator(mode="after")
    def ordered_and_distinct(self) -> "PreferencePair":
        if self.chosen == self.rejected:
            raise ValueError("chosen and rejected responses must differ")
        if self.score_chosen < self.score_rejected:
            raise ValueError("chosen response must not score below the rejected one")
        return self


class PromptRecord(BaseModel):
    id: str
    volume: Optional[str] = None
    question: str
    reference: str


class ScoredCandidate(BaseModel):
    text: str
    score: float = Field(..., ge=0.0, le=1.0)
    scorer_summary: str = ""


class ReportRecord(BaseModel):
    report_id: str
    report_text: str

    @field_validator("report_text")
    def non_empty(cls, v: str) -> str:
        if not v.strip():
            raise ValueError("report_text is empty")
        return v


class QuestionSet(BaseModel):
    report_id: str
    questions: List[str] = Field(default_factory=list)
    miss: bool = False
    raw_reply: str = ""


class QARecord(BaseModel):
    record_id: str
    report_id: str
    index: int = Field(..., ge=0)
    question: str
    thinking: str = ""
    answer: str = ""
    status: RecordStatus = RecordStatus.GENERATED
    rejection_reason: Optional[str] = None
    miss: bool = False
    raw_reply: str = ""

    def advance(self, status: RecordStatus, reason: Optional[str] = None) -> "QARecord":
        if status not in _FORWARD[self.status]:
            raise ValueError(f"record {self.record_id}: cannot move from {self.status.value} to {status.value}")
        return self.model_copy(update={"status": status, "rejection_reason": reason})


class ReasoningTrace(BaseModel):
    report_id: str
    narrative: str
    thinking_before: str
    source_ids: List[str]


class QAPair(BaseModel):
    question: str
    answer: str


class Datapoint(BaseModel):
    report_id: str
    report_text: str
    qa: List[QAPair] = Field(default_factory=list)
    trace: Optional[ReasoningTrace] = None


class PipelineSummary(BaseModel):
    reports: int = 0
    question_misses: int = 0
    generated: int = 0
    answer_misses: int = 0
    accepted: int = 0
    filtered_out: int = 0
    refined: int = 0
    refinement_misses: int = 0
    traces: int = 0
    untraced_reports: int = 0
    errors: int = 0


class MetricReport(BaseModel):
    bleu: float = Field(..., ge=0.0, le=1.0)
    rouge1_precision: float = Field(..., ge=0.0, le=1.0)
    rouge1_recall: float = Field(..., ge=0.0, le=1.0)
    rouge1_f1: float = Field(..., ge=0.0, le=1.0)


class GradCheckReport(BaseModel):
    op: str
    errors: Dict[str, float]
    passed: bool
    step: float
    seed: int
    tol: float

    @model_validator(mode="after")
    def pass_matches_errors(self) -> "GradCheckReport":
        if self.passed != all(e <= self.tol for e in self.errors.values()):
            raise ValueError("passed flag disagrees with the reported errors")
        return self

    @property
    def failing(self) -> List[str]:
        return [name for name, err in self.errors.items() if err > self.tol]
