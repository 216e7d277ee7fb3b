from __future__ import annotations


class Mu2Error(Exception):
    """Base class for every error raised by the package."""


class InvalidInputError(Mu2Error, ValueError):
    """A precondition or configuration constraint was violated."""


class UnknownOpError(InvalidInputError, KeyError):
    def __str__(self) -> str:
        return str(self.args[0]) if self.args else "unknown op"


class StageError(Mu2Error, RuntimeError):
    def __init__(self, stage: str, message: str, *, layer: int | None = None) -> None:
        self.stage = stage
        self.layer = layer
        where = f"{stage}[layer {layer}]" if layer is not None else stage
        super().__init__(f"{where}: {message}")


class NonFiniteError(StageError):
    pass


class ClientError(StageError):
    def __init__(self, message: str) -> None:
        super().__init__("client", message)


class ScorerError(StageError):
    def __init__(self, message: str) -> None:
        super().__init__("scorer", message)


class GeneratorError(StageError):
    def __init__(self, message: str) -> None:
        super().__init__("generator", message)


class ExtractionMiss(InvalidInputError):
    def __init__(self, message: str, raw_reply: str) -> None:
        super().__init__(message)
        self.raw_reply = raw_reply


class RefinementMiss(InvalidInputError):
    pass
