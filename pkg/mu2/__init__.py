from .cli import app as cli_app
from .config import (
    DEFAULT_BETA,
    DEFAULT_CONFIG,
    FULL_CONFIG,
    AppConfig,
    Mu2Config,
    load_config,
)
from .dpo import BigramLM, batch_dpo_loss, dpo_loss, dpo_loss_grad, train_policy_dpo
from .encoder import Vocab, build_vocab, embed_text, encode_frames, load_vocab
from .errors import (
    ClientError,
    ExtractionMiss,
    InvalidInputError,
    Mu2Error,
    NonFiniteError,
    RefinementMiss,
    StageError,
    UnknownOpError,
)
from .gradcheck import check_all, check_op, error_curve
from .metrics import bleu, evaluate, rouge1
from .models import (
    Datapoint,
    GradCheckReport,
    MetricReport,
    PreferencePair,
    QARecord,
    ReasoningTrace,
    SequenceScore,
)
from .preferences import build_pairs
from .synthesis import (
    filter_qa,
    fuse_traces,
    gen_answer,
    gen_questions,
    refine_thinking,
    rewrite_report,
    run_pipeline,
    translate_report,
)
from .tokenizer import CompactTokens, dmtp, dts, init_params, rpe_bias_matrix, svr, tokenize, tta
from .types import RecordStatus, Stage
from .volume import FrameStack, Volume, prepare_frames, read_volume, resample_and_frame, write_volume

__all__ = [
    "cli_app",
    "DEFAULT_BETA",
    "DEFAULT_CONFIG",
    "FULL_CONFIG",
    "AppConfig",
    "Mu2Config",
    "load_config",
    "BigramLM",
    "batch_dpo_loss",
    "dpo_loss",
    "dpo_loss_grad",
    "train_policy_dpo",
    "Vocab",
    "build_vocab",
    "embed_text",
    "encode_frames",
    "load_vocab",
    "ClientError",
    "ExtractionMiss",
    "InvalidInputError",
    "Mu2Error",
    "NonFiniteError",
    "RefinementMiss",
    "StageError",
    "UnknownOpError",
    "check_all",
    "check_op",
    "error_curve",
    "bleu",
    "evaluate",
    "rouge1",
    "Datapoint",
    "GradCheckReport",
    "MetricReport",
    "PreferencePair",
    "QARecord",
    "ReasoningTrace",
    "SequenceScore",
    "build_pairs",
    "filter_qa",
    "fuse_traces",
    "gen_answer",
    "gen_questions",
    "refine_thinking",
    "rewrite_report",
    "run_pipeline",
    "translate_report",
    "CompactTokens",
    "dmtp",
    "dts",
    "init_params",
    "rpe_bias_matrix",
    "svr",
    "tokenize",
    "tta",
    "RecordStatus",
    "Stage",
    "FrameStack",
    "Volume",
    "prepare_frames",
    "read_volume",
    "resample_and_frame",
    "write_volume",
]
