from __future__ import annotations

import json
import logging
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import typer
from pydantic import ValidationError

from .checkpoint import load_params, save_params
from .config import DEFAULT_BETA, DEFAULT_CONFIG, GRAD_STEP, GRAD_TOLERANCE, AppConfig, load_config
from .dpo import BigramLM, batch_dpo_loss, pair_scores, train_policy_dpo
from .encoder import build_vocab, load_vocab, save_vocab
from .errors import InvalidInputError, Mu2Error
from .gradcheck import check_all, check_op, error_curve
from .llm import ChatClient, HttpChatClient, MockChatClient, RecordingClient, ReplayClient
from .metrics import corpus_means, evaluate_corpus
from .models import PreferencePair, PromptRecord, ReportRecord
from .preferences import (
    CachedGenerator,
    CachedScorer,
    PerturbationGenerator,
    RemoteGreenScorer,
    RougeScorer,
    build_pairs,
    load_green_template,
)
from .storage import dumps_record, load_array, load_records, read_lines, save_array, write_jsonl, write_lines
from .synthesis import PIPELINE_STAGES, rewrite_reports, run_pipeline, translate_reports
from .tokenizer import init_params, tokenize as run_tokenize
from .transcripts import TranscriptStore
from .types import ClientKind, ScorerKind, Stage
from .volume import FrameStack, prepare_frames, read_volume, synthetic_volume, write_volume

logger = logging.getLogger(__name__)

# click's ClickException, whether typer uses the installed click or a bundled copy.
_ClickException = next(c for c in typer.BadParameter.__mro__ if c.__name__ == "ClickException")

app = typer.Typer(help="μ²Tokenizer toolkit: CT volume tokenization, preference data and report synthesis.")

ConfigOption = typer.Option(DEFAULT_CONFIG, "--config", "-c", help="JSON config file.")
SeedOption = typer.Option(None, "--seed", help="Overrides the config seed.")


@app.callback()
def main_options(
    verbose: bool = typer.Option(False, "--verbose", "-v", help="Debug logging."),
    quiet: bool = typer.Option(False, "--quiet", "-q", help="Warnings and errors only."),
) -> None:
    level = logging.DEBUG if verbose else logging.WARNING if quiet else logging.INFO
    logging.basicConfig(stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    logging.getLogger().setLevel(level)


def _ints(text: Optional[str], count: int, flag: str) -> Optional[List[int]]:
    if text is None:
        return None
    try:
        values = [int(part) for part in text.split(",")]
    except ValueError:
        raise typer.BadParameter(f"expected {count} comma-separated integers, got {text!r}", param_hint=flag)
    if len(values) != count:
        raise typer.BadParameter(f"expected {count} comma-separated integers, got {text!r}", param_hint=flag)
    return values


def _config(path: Path, overrides: Optional[Dict[str, Any]] = None) -> AppConfig:
    return load_config(path, overrides)


def _emit(record: Any) -> None:
    typer.echo(dumps_record(record))


def _chat_client(kind: ClientKind, config: AppConfig, transcripts: Optional[Path]) -> ChatClient:
    if kind == ClientKind.REPLAY:
        if transcripts is None:
            raise InvalidInputError("--client replay needs --transcripts")
        return ReplayClient(TranscriptStore(transcripts), config.client.model)
    if kind == ClientKind.REMOTE:
        inner: ChatClient = HttpChatClient.from_environment(config.client)
    else:
        inner = MockChatClient("echo" if kind == ClientKind.ECHO else "scripted")
    if transcripts is None:
        return inner
    return RecordingClient(inner, TranscriptStore(transcripts), config.client.model)


@app.command()
def phantom(
    out: Path = typer.Option(..., "--out", "-o", help="Volume container to write."),
    shape: str = typer.Option("16,32,32", "--shape", help="D,H,W voxel counts."),
    seed: int = typer.Option(7, "--seed"),
) -> None:
    """Write a synthetic CT-like volume for smoke runs."""
    volume = synthetic_volume(_ints(shape, 3, "--shape"), seed)
    write_volume(out, volume)
    logger.info("wrote %s volume to %s", "x".join(map(str, volume.shape)), out)


@app.command()
def ingest(
    volume: Path = typer.Option(..., "--volume", help="Volume container to read."),
    out: Path = typer.Option(..., "--out", "-o", help="Frame stack (.npy) to write."),
    target: Optional[str] = typer.Option(None, "--target", help="T,K,H,W frame layout."),
    noise_sigma: Optional[float] = typer.Option(None, "--noise-sigma"),
    seed: Optional[int] = SeedOption,
    config_path: Path = ConfigOption,
) -> None:
    config = _config(
        config_path,
        {"ingest.target": _ints(target, 4, "--target"), "ingest.noise_sigma": noise_sigma, "seed": seed},
    )
    stack = prepare_frames(read_volume(volume), config.ingest.target, config.ingest.noise_sigma, config.seed)
    save_array(out, stack.data)
    logger.info("frames %s written to %s", stack.data.shape, out)


@app.command("build-vocab")
def build_vocab_command(
    corpus: Path = typer.Option(..., "--corpus", help="One question per line."),
    out: Path = typer.Option(..., "--out", "-o"),
    config_path: Path = ConfigOption,
) -> None:
    config = _config(config_path)
    vocab = build_vocab(read_lines(corpus), config.encoder.vocab_max_size, config.encoder.vocab_min_freq)
    save_vocab(out, vocab)
    logger.info("vocabulary of %d tokens written to %s", len(vocab), out)


@app.command("init-params")
def init_params_command(
    out: Path = typer.Option(..., "--out", "-o", help="Checkpoint file; the manifest goes next to it."),
    vocab_path: Optional[Path] = typer.Option(None, "--vocab"),
    seed: Optional[int] = SeedOption,
    config_path: Path = ConfigOption,
) -> None:
    config = _config(config_path, {"seed": seed})
    vocab = load_vocab(vocab_path or config.encoder.vocab_path)
    save_params(out, init_params(config, len(vocab), config.seed))


@app.command()
def tokenize(
    question: str = typer.Option(..., "--question"),
    out: Path = typer.Option(..., "--out", "-o", help="Compact tokens (.npy) to write."),
    frames: Optional[Path] = typer.Option(None, "--frames", help="Frame stack from `ingest`."),
    volume: Optional[Path] = typer.Option(None, "--volume", help="Raw volume container; ingested on the fly."),
    params_path: Optional[Path] = typer.Option(None, "--params", help="Checkpoint; defaults to a seeded init."),
    vocab_path: Optional[Path] = typer.Option(None, "--vocab"),
    maps_out: Optional[Path] = typer.Option(None, "--maps-out", help="Per-layer aggregation maps (.npy)."),
    seed: Optional[int] = SeedOption,
    config_path: Path = ConfigOption,
) -> None:
    if (frames is None) == (volume is None):
        raise typer.BadParameter("give exactly one of --frames or --volume", param_hint="--frames/--volume")
    config = _config(config_path, {"seed": seed})
    if frames is not None:
        stack = FrameStack(data=load_array(frames, expected_ndim=4))
    else:
        stack = prepare_frames(read_volume(volume), config.ingest.target, 0.0, config.seed)
    vocab = load_vocab(vocab_path or config.encoder.vocab_path)
    params = load_params(params_path) if params_path else init_params(config, len(vocab), config.seed)
    compact = run_tokenize(stack, question, config, params, vocab)
    save_array(out, compact.tokens)
    if maps_out is not None:
        save_array(maps_out, compact.layer_maps)
    logger.info("compact tokens %s written to %s", compact.tokens.shape, out)


@app.command("grad-check")
def grad_check(
    op: Optional[str] = typer.Option(None, "--op", help="Registered op name."),
    all_ops: bool = typer.Option(False, "--all", help="Check every registered op."),
    tol: float = typer.Option(GRAD_TOLERANCE, "--tol"),
    step: float = typer.Option(GRAD_STEP, "--step"),
    seed: int = typer.Option(7, "--seed"),
    curve: bool = typer.Option(False, "--curve", help="Print the error-vs-step curve instead."),
) -> None:
    if (op is None) == (not all_ops):
        raise typer.BadParameter("give exactly one of --op or --all", param_hint="--op/--all")
    if curve:
        if op is None:
            raise typer.BadParameter("--curve needs --op", param_hint="--curve")
        for h, err in error_curve(op, seed):
            _emit({"op": op, "step": h, "max_error": err})
        return
    reports = check_all(seed, tol, step) if all_ops else [check_op(op, seed, tol, step)]
    for report in reports:
        _emit(report)
    if not all(r.passed for r in reports):
        raise typer.Exit(code=2)


@app.command("dpo-loss")
def dpo_loss_command(
    pairs_path: Path = typer.Option(..., "--pairs"),
    beta: float = typer.Option(DEFAULT_BETA, "--beta"),
    train_steps: int = typer.Option(0, "--train-steps", min=0, help="Run the bigram DPO demo for N steps."),
    lr: float = typer.Option(1.0, "--lr"),
) -> None:
    """Batch DPO loss; pairs without stored log-probabilities are scored by a fitted bigram model."""
    pairs = load_records(pairs_path, PreferencePair)
    if not pairs:
        raise InvalidInputError(f"{pairs_path} holds no preference pairs")
    reference = BigramLM.fit([(p.question, text) for p in pairs for text in (p.chosen, p.rejected)])
    if train_steps:
        _, losses = train_policy_dpo(pairs, reference, beta, train_steps, lr)
        _emit({"beta": beta, "pairs": len(pairs), "loss": losses[-1], "losses": losses})
        return
    loss = batch_dpo_loss(pair_scores(pairs, reference.copy(), reference), beta)
    _emit({"beta": beta, "pairs": len(pairs), "loss": loss})


@app.command("pref-build")
def pref_build(
    prompts_path: Path = typer.Option(..., "--in", help="Prompt records (JSON lines)."),
    out: Path = typer.Option(..., "--out", "-o"),
    n: Optional[int] = typer.Option(None, "--n", help="Candidates per prompt."),
    scorer_kind: Optional[ScorerKind] = typer.Option(None, "--scorer"),
    transcripts: Optional[Path] = typer.Option(None, "--transcripts", help="Cache generations and scores here."),
    progress: bool = typer.Option(False, "--progress"),
    seed: Optional[int] = SeedOption,
    config_path: Path = ConfigOption,
) -> None:
    config = _config(config_path, {"seed": seed, "pref.n_candidates": n, "pref.scorer": scorer_kind})
    generator = PerturbationGenerator(config.seed, config.pref.dropout)
    if config.pref.scorer == ScorerKind.REMOTE:
        client = HttpChatClient.from_environment(config.client)
        scorer = RemoteGreenScorer(client, load_green_template(config.pref.green_prompt_path))
    else:
        scorer = RougeScorer()
    if transcripts is not None:
        store = TranscriptStore(transcripts)
        generator = CachedGenerator(generator, store, generator.label)
        scorer = CachedScorer(scorer, store, scorer.label)
    prompts = load_records(prompts_path, PromptRecord)
    result = build_pairs(prompts, generator, scorer, config.pref.n_candidates, config.pref.max_inflight, progress)
    write_jsonl(out, result.pairs)
    logger.info("%d pairs written to %s, %d prompts skipped", len(result.pairs), out, result.skip_count)


@app.command("eval")
def eval_command(
    pred: Path = typer.Option(..., "--pred", help="One prediction per line."),
    ref: Path = typer.Option(..., "--ref", help="One reference per line."),
    out: Optional[Path] = typer.Option(None, "--out", "-o", help="Write here instead of standard output."),
) -> None:
    reports = evaluate_corpus(read_lines(pred), read_lines(ref))
    mean = corpus_means(reports)
    lines = [dumps_record({"scope": "line", "index": i, **r.model_dump()}) for i, r in enumerate(reports)]
    lines.append(dumps_record({"scope": "corpus", **mean.model_dump()}))
    if out is None:
        for line in lines:
            typer.echo(line)
    else:
        write_lines(out, lines)


_SYNTH_CHOICES = ["all"] + [s.value for s in PIPELINE_STAGES]


@app.command()
def synth(
    stage: str = typer.Argument("all", help=f"One of: {', '.join(_SYNTH_CHOICES)}."),
    reports_path: Path = typer.Option(..., "--in", help="Report records (JSON lines)."),
    out_dir: Path = typer.Option(..., "--out-dir"),
    resume: bool = typer.Option(False, "--resume", help="Keep records already written by an earlier run."),
    client_kind: ClientKind = typer.Option(ClientKind.MOCK, "--client"),
    transcripts: Optional[Path] = typer.Option(None, "--transcripts"),
    config_path: Path = ConfigOption,
) -> None:
    if stage not in _SYNTH_CHOICES:
        raise typer.BadParameter(f"unknown stage {stage!r}", param_hint="STAGE")
    config = _config(config_path)
    stages = PIPELINE_STAGES if stage == "all" else (Stage(stage),)
    client = _chat_client(client_kind, config, transcripts)
    summary = run_pipeline(load_records(reports_path, ReportRecord), client, out_dir, config.synth, stages, resume)
    logger.info("synthesis summary: %s", json.dumps(summary.model_dump(), sort_keys=True))


def _write_reports(out: Path, records: Sequence[ReportRecord], failed: int) -> None:
    write_jsonl(out, records)
    logger.info("%d reports written to %s", len(records), out)
    if failed:
        logger.error("%d reports failed", failed)
        raise typer.Exit(code=2)


@app.command()
def rewrite(
    reports_path: Path = typer.Option(..., "--in"),
    style: Path = typer.Option(..., "--style", help="Example reports that set the writing style."),
    out: Path = typer.Option(..., "--out", "-o"),
    client_kind: ClientKind = typer.Option(ClientKind.MOCK, "--client"),
    transcripts: Optional[Path] = typer.Option(None, "--transcripts"),
    config_path: Path = ConfigOption,
) -> None:
    config = _config(config_path)
    client = _chat_client(client_kind, config, transcripts)
    style_examples = "\n".join(read_lines(style)).strip()
    records, failed = rewrite_reports(
        load_records(reports_path, ReportRecord), style_examples, client, config.client.max_inflight
    )
    _write_reports(out, records, failed)


@app.command()
def translate(
    reports_path: Path = typer.Option(..., "--in"),
    source_lang: str = typer.Option(..., "--from"),
    target_lang: str = typer.Option(..., "--to"),
    out: Path = typer.Option(..., "--out", "-o"),
    client_kind: ClientKind = typer.Option(ClientKind.MOCK, "--client"),
    transcripts: Optional[Path] = typer.Option(None, "--transcripts"),
    config_path: Path = ConfigOption,
) -> None:
    config = _config(config_path)
    client = _chat_client(client_kind, config, transcripts)
    records, failed = translate_reports(
        load_records(reports_path, ReportRecord), source_lang, target_lang, client, config.client.max_inflight
    )
    _write_reports(out, records, failed)


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Run the CLI; 0 on success, 1 on usage or validation errors, 2 on runtime failures."""
    command = typer.main.get_command(app)
    try:
        result = command.main(
            args=list(argv) if argv is not None else None, prog_name="mu2", standalone_mode=False
        )
    except _ClickException as exc:
        exc.show()
        return 1
    except typer.Abort:
        return 1
    except (InvalidInputError, ValidationError) as exc:
        logger.error("%s", exc)
        return 1
    except Mu2Error as exc:
        logger.error("%s", exc)
        return 2
    except Exception:
        logger.exception("unexpected failure")
        return 2
    return result if isinstance(result, int) else 0


def run() -> None:
    sys.exit(main())


if __name__ == "__main__":
    run()
