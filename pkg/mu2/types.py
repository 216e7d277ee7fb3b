from __future__ import annotations

from enum import Enum


class RecordStatus(str, Enum):
    GENERATED = "generated"
    FILTERED_OUT = "filtered_out"
    ACCEPTED = "accepted"
    REFINED = "refined"


class Stage(str, Enum):
    REWRITE = "rewrite"
    QUESTIONS = "questions"
    ANSWERS = "answers"
    FILTER = "filter"
    REFINE = "refine"
    FUSE = "fuse"
    TRANSLATE = "translate"
    SCORE = "score"


class ScorerKind(str, Enum):
    MOCK = "mock"
    REMOTE = "remote"


class ClientKind(str, Enum):
    MOCK = "mock"
    ECHO = "echo"
    REMOTE = "remote"
    REPLAY = "replay"


class ScaleSummary(str, Enum):
    MEAN = "mean"
    MEAN_STD = "mean_std"


class Precision(str, Enum):
    FLOAT64 = "float64"
    FLOAT32 = "float32"
