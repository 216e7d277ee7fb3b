from __future__ import annotations

import json
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Tuple

from pydantic import BaseModel, Field, field_validator, model_validator

from .errors import InvalidInputError
from .types import Precision, ScaleSummary, ScorerKind

ROOT_DIR = Path(__file__).resolve().parent.parent
DATA_DIR = ROOT_DIR / "data"
DEFAULT_CONFIG = DATA_DIR / "configs" / "desk.json"
FULL_CONFIG = DATA_DIR / "configs" / "full.json"
DEFAULT_VOCAB = DATA_DIR / "assets" / "vocab.txt"
DEFAULT_GREEN_PROMPT = DATA_DIR / "assets" / "green_prompt.txt"
SAMPLES_DIR = DATA_DIR / "samples"

# Preprocessing defaults
FULL_TARGET = (8, 32, 256, 256)
FULL_PATCH = (4, 16, 16)

# Optimisation defaults
DEFAULT_BETA = 0.3
BETA_RANGE = (0.1, 0.5)

# Gradient oracle defaults
GRAD_STEP = 1e-5
GRAD_TOLERANCE = 1e-4
GRAD_FLOOR = 1e-7
GRAD_CURVE_STEPS = (1e-3, 1e-4, 1e-5)


class Mu2Config(BaseModel):
    svr_layers: int = Field(4, ge=1)
    tta_layers: int = Field(4, ge=1)
    heads: int = Field(8, ge=1)
    k: int = Field(1024, ge=1)
    n_queries: int = Field(1024, ge=1)
    hidden: int = Field(768, ge=2)
    pool_kernels: List[int] = Field(default_factory=lambda: [1, 2, 4])
    d_max: int = Field(32, ge=0)
    scale_summary: ScaleSummary = ScaleSummary.MEAN
    dtype: Precision = Precision.FLOAT64

    @field_validator("pool_kernels")
    def kernels_sorted_with_unit(cls, v: List[int]) -> List[int]:
        if not v or any(s < 1 for s in v):
            raise ValueError("pool_kernels must be positive integers")
        if v != sorted(set(v)):
            raise ValueError("pool_kernels must be strictly ascending")
        if v[0] != 1:
            raise ValueError("pool_kernels must contain 1")
        return v

    @model_validator(mode="after")
    def check_divisibility(self) -> "Mu2Config":
        largest = self.pool_kernels[-1]
        if self.k % largest:
            raise ValueError(f"k={self.k} is not divisible by the largest pool kernel {largest}")
        if self.hidden % self.heads:
            raise ValueError(f"hidden={self.hidden} is not divisible by heads={self.heads}")
        if self.hidden % 2:
            raise ValueError(f"hidden={self.hidden} must be even")
        return self

    @property
    def head_dim(self) -> int:
        return self.hidden // self.heads

    @property
    def pooled_length(self) -> int:
        return sum(self.k // s for s in self.pool_kernels)


class EncoderConfig(BaseModel):
    patch: Tuple[int, int, int] = FULL_PATCH
    n_q: int = Field(32, ge=1)
    vocab_path: Path = DEFAULT_VOCAB
    vocab_max_size: int = Field(4096, ge=1)
    vocab_min_freq: int = Field(1, ge=1)

    @field_validator("patch")
    def positive_patch(cls, v: Tuple[int, int, int]) -> Tuple[int, int, int]:
        if any(p < 1 for p in v):
            raise ValueError("patch dims must be positive")
        return v


class IngestConfig(BaseModel):
    target: Tuple[int, int, int, int] = FULL_TARGET
    noise_sigma: float = Field(0.0, ge=0.0)

    @field_validator("target")
    def positive_target(cls, v: Tuple[int, int, int, int]) -> Tuple[int, int, int, int]:
        if any(t < 1 for t in v):
            raise ValueError("target dims must be positive")
        return v


class ClientConfig(BaseModel):
    base_url: str = "https://api.openai.com/v1"
    model: str = "gpt-4o-mini"
    temperature: float = Field(0.0, ge=0.0)
    timeout: float = Field(60.0, gt=0.0)
    max_retries: int = Field(3, ge=0)
    backoff_base: float = Field(1.0, ge=0.0)
    max_inflight: int = Field(4, ge=1)


class PrefConfig(BaseModel):
    n_candidates: int = Field(8, ge=2)
    scorer: ScorerKind = ScorerKind.MOCK
    green_prompt_path: Path = DEFAULT_GREEN_PROMPT
    dropout: float = Field(0.3, ge=0.0, lt=1.0)
    max_inflight: int = Field(4, ge=1)


class SynthConfig(BaseModel):
    min_ascii_ratio: float = Field(0.95, ge=0.0, le=1.0)
    min_thinking_tokens: int = Field(20, ge=0)
    max_questions: Optional[int] = Field(None, ge=1)
    max_inflight: int = Field(4, ge=1)


class AppConfig(BaseModel):
    seed: int = 7
    model: Mu2Config = Field(default_factory=Mu2Config)
    encoder: EncoderConfig = Field(default_factory=EncoderConfig)
    ingest: IngestConfig = Field(default_factory=IngestConfig)
    client: ClientConfig = Field(default_factory=ClientConfig)
    pref: PrefConfig = Field(default_factory=PrefConfig)
    synth: SynthConfig = Field(default_factory=SynthConfig)

    @model_validator(mode="after")
    def check_patch_fits_frames(self) -> "AppConfig":
        _, slices, height, width = self.ingest.target
        for axis, size, patch in zip(("K", "H", "W"), (slices, height, width), self.encoder.patch):
            if size % patch:
                raise ValueError(f"frame axis {axis}={size} is not divisible by patch {patch}")
        return self


def _set_dotted(tree: Dict[str, Any], dotted: str, value: Any) -> None:
    parts = dotted.split(".")
    node = tree
    for part in parts[:-1]:
        node = node.setdefault(part, {})
        if not isinstance(node, dict):
            raise InvalidInputError(f"cannot override {dotted}: {part} is not a section")
    node[parts[-1]] = value


def resolve_path(path: Path, base: Path) -> Path:
    return path if path.is_absolute() else (base / path)


def load_config(path: Optional[Path] = None, overrides: Optional[Mapping[str, Any]] = None) -> AppConfig:
    """Read a JSON config file and apply dotted-path overrides (overrides win)."""
    data: Dict[str, Any] = {}
    if path is not None:
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except FileNotFoundError as exc:
            raise InvalidInputError(f"config file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise InvalidInputError(f"config file {path} is not valid JSON: {exc}") from exc
    for dotted, value in (overrides or {}).items():
        if value is not None:
            _set_dotted(data, dotted, value)
    config = AppConfig.model_validate(data)
    if path is not None:
        # Relative asset paths are resolved against the repository root.
        config.encoder.vocab_path = resolve_path(config.encoder.vocab_path, ROOT_DIR)
        config.pref.green_prompt_path = resolve_path(config.pref.green_prompt_path, ROOT_DIR)
    return config
