"""Command implementations registered on the ``main`` click group.

CSV and generated text go to stdout; progress and diagnostics go to stderr,
so ``recurrent-windows sweep ... > curves.csv`` yields a clean file.
"""

import logging
import os
import sys
from pathlib import Path
from typing import Optional

import click
import tomli_w

from .config import OUTPUT_DIR_ENV, load_run_config
from .errors import ConfigError, InputError, RecurrentWindowsError
from .windowing import ExecutionMode

logger = logging.getLogger(__name__)

DEFAULT_OVERLAPS = (0, 5, 10, 30, 50, 75, 100, 150, 200)


def _progress(msg: str) -> None:
    click.echo(f"  {msg}", err=True)


def _fail(err: RecurrentWindowsError) -> None:
    click.echo(f"✗ {err}", err=True)
    sys.exit(err.exit_code)


def _int_list(ctx, param, value: Optional[str]) -> Optional[list[int]]:
    if value is None:
        return None
    try:
        return [int(v) for v in value.split(",") if v.strip()]
    except ValueError:
        raise click.BadParameter(f"expected comma-separated integers, got {value!r}")


def _ledger_dir(output_dir: Optional[Path], fallback: Path) -> Path:
    return Path(output_dir or os.getenv(OUTPUT_DIR_ENV) or fallback)


def _emit_csv(text: str, out: Optional[Path]) -> None:
    if out:
        out.write_text(text, encoding="utf-8")
        click.echo(f"✓ Wrote {out}", err=True)
    else:
        click.echo(text, nl=False)


# ============================================================
# TRAIN Command
# ============================================================

@click.command()
@click.option("--config", "-c", "config_path", type=click.Path(path_type=Path), help="TOML run file")
@click.option("--seed", type=int, help="Override the run seed")
@click.option("--output-dir", type=click.Path(path_type=Path), help="Override the output directory")
@click.option("--epochs", type=int, help="Override train.epochs")
@click.option("--lr", type=float, help="Override train.lr")
def train(config_path, seed, output_dir, epochs, lr):
    """Fine-tune a model as described by a run file.

    Writes run.toml, best.ckpt, last.ckpt and train_log.jsonl to the output
    directory and records the run in its ledger.
    """
    from .workflows import TrainWorkflow

    overrides = {"seed": seed, "output_dir": output_dir, "epochs": epochs, "lr": lr}
    try:
        run = load_run_config(config_path, overrides)
        click.echo(f"🔄 Training '{run.name}' into {run.output_dir}\n", err=True)
        outcome = TrainWorkflow(run).run(progress_callback=_progress)
    except RecurrentWindowsError as e:
        _fail(e)

    click.echo("\n📊 Results:", err=True)
    click.echo(f"  Steps:           {outcome.steps}", err=True)
    click.echo(f"  Tokens seen:     {outcome.tokens_seen}", err=True)
    click.echo(f"  Best val NLL:    {outcome.best_val_nll:.4f}", err=True)
    click.echo(f"  Best checkpoint: {outcome.best_checkpoint}", err=True)
    if outcome.resumed:
        click.echo("  (resumed from last.ckpt)", err=True)


# ============================================================
# EVAL / SWEEP Commands
# ============================================================

def _run_jobs(jobs, corpus, fmt, output_dir, workers, seed, command, out):
    from .repository import Repository
    from .workflows import SweepWorkflow

    repo = Repository(_ledger_dir(output_dir, jobs[0].model.path.parent))
    result = SweepWorkflow(corpus, fmt, repository=repo, workers=workers, command=command).run(
        jobs, seed=seed, progress_callback=_progress
    )
    _emit_csv(result.to_csv(), out)
    return result


@click.command(name="eval")
@click.argument("checkpoint", type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.option("--corpus", type=click.Path(exists=True, path_type=Path), help="Evaluation corpus (default: data.test of --config)")
@click.option("--format", "fmt", type=click.Choice(["raw-text", "token-binary"]), help="Corpus format")
@click.option("--window", "-T", type=int, help="Window size")
@click.option("--overlap", "-o", "overlaps", callback=_int_list, help="Overlap(s), comma-separated")
@click.option("--mode", type=click.Choice([m.value for m in ExecutionMode]), help="Execution mode (default: recurrent if the checkpoint has recurrence parameters)")
@click.option("--config", "-c", "config_path", type=click.Path(path_type=Path), help="Run file supplying [[eval]] rows and data.test")
@click.option("--output-dir", type=click.Path(path_type=Path), help="Ledger directory (default: the checkpoint's)")
@click.option("--out", type=click.Path(dir_okay=False, path_type=Path), help="Write CSV here instead of stdout")
def eval_cmd(checkpoint, corpus, fmt, window, overlaps, mode, config_path, output_dir, out):
    """Perplexity CSV rows for CHECKPOINT, one per (T, overlap, mode)."""
    from .workflows import EvalJob, LoadedModel

    try:
        model = LoadedModel.load(checkpoint)
        run = load_run_config(config_path, check_paths=False) if config_path else None
        corpus = corpus or (run.data.test if run else None)
        if corpus is None:
            raise ConfigError("eval needs --corpus or a run file with data.test", ["data.test: missing"])
        fmt = fmt or (run.data.format.value if run else "raw-text")
        if window is not None:
            default_mode = ExecutionMode.RECURRENT if model.recurrent else ExecutionMode.BASELINE
            jobs = [
                EvalJob(model, window, o, ExecutionMode(mode) if mode else default_mode)
                for o in (overlaps or [0])
            ]
        elif run and run.eval:
            jobs = [EvalJob(model, s.window, s.overlap, s.mode) for s in run.eval]
        else:
            raise ConfigError("eval needs --window or [[eval]] rows in --config", ["eval: missing"])
        for job in jobs:
            problem = job.problem()
            if problem:
                raise ConfigError(f"T={job.window}, overlap={job.overlap}: {problem}", [problem])

        _run_jobs(jobs, corpus, fmt, output_dir, 1, run.seed if run else 0, "eval", out)
    except RecurrentWindowsError as e:
        _fail(e)


@click.command()
@click.argument("checkpoints", nargs=-1, required=True, type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.option("--corpus", required=True, type=click.Path(exists=True, path_type=Path), help="Evaluation corpus")
@click.option("--format", "fmt", type=click.Choice(["raw-text", "token-binary"]), default="raw-text", show_default=True)
@click.option("--windows", required=True, callback=_int_list, help="Window sizes, comma-separated")
@click.option("--overlaps", default="0", callback=_int_list, help="Overlaps, comma-separated")
@click.option("--modes", default="baseline,recurrent", show_default=True, help="Execution modes, comma-separated")
@click.option("--workers", type=int, default=1, show_default=True, help="Parallel evaluation jobs")
@click.option("--seed", type=int, default=0, show_default=True, help="Seed recorded in the ledger")
@click.option("--output-dir", type=click.Path(path_type=Path), help="Ledger directory (default: first checkpoint's)")
@click.option("--out", type=click.Path(dir_okay=False, path_type=Path), help="Write CSV here instead of stdout")
def sweep(checkpoints, corpus, fmt, windows, overlaps, modes, workers, seed, output_dir, out):
    """Cross-product evaluation of CHECKPOINTS over window sizes and overlaps.

    Invalid (T, overlap) pairs, and recurrent mode for checkpoints without
    recurrence parameters, are skipped with a warning and an empty row.
    """
    from .workflows import LoadedModel, build_jobs

    try:
        mode_list = [ExecutionMode(m.strip()) for m in modes.split(",") if m.strip()]
    except ValueError as e:
        raise click.BadParameter(str(e), param_hint="--modes")
    if not windows or not overlaps or not mode_list:
        raise click.BadParameter("window, overlap and mode lists must be non-empty")

    try:
        labels = _unique_labels(checkpoints)
        models = [LoadedModel.load(path, label) for path, label in zip(checkpoints, labels)]
        jobs = build_jobs(models, windows, overlaps, mode_list)
        result = _run_jobs(jobs, corpus, fmt, output_dir, workers, seed, "sweep", out)
    except RecurrentWindowsError as e:
        _fail(e)
    if result.skipped:
        click.echo(f"⚠️  Skipped {len(result.skipped)} job(s)", err=True)


def _unique_labels(paths) -> list[str]:
    labels = [p.parent.name or p.stem for p in paths]
    if len(set(labels)) == len(labels):
        return labels
    return [f"{p.parent.name}/{p.stem}" for p in paths]


# ============================================================
# FLOPS Command
# ============================================================

@click.command()
@click.option("--config", "-c", "config_path", type=click.Path(path_type=Path), help="Run file supplying [model]")
@click.option("--preset", type=click.Choice(["gpt2-small"]), help="Use a preset model shape")
@click.option("--vocab-size", type=int, help="Vocabulary size when the run file leaves it to the corpus")
@click.option("--windows", default="300", callback=_int_list, show_default=True, help="Window sizes")
@click.option("--overlaps", default=",".join(map(str, DEFAULT_OVERLAPS)), callback=_int_list, show_default=True, help="Overlaps")
@click.option("--mode", type=click.Choice(["baseline", "recurrent", "both"]), default="both", show_default=True)
@click.option("--out", type=click.Path(dir_okay=False, path_type=Path), help="Write CSV here instead of stdout")
def flops(config_path, preset, vocab_size, windows, overlaps, mode, out):
    """FLOPs-per-token table (T, overlap, mode, flops_per_token)."""
    import csv
    import io

    from .flops import CSV_HEADER, flops_table
    from .model import ModelConfig

    try:
        if config_path:
            config = load_run_config(config_path, check_paths=False).model_config(vocab_size)
        else:
            if preset is None:
                logger.info("No --config given; using the gpt2-small preset")
            config = ModelConfig.gpt2_small(**({"vocab_size": vocab_size} if vocab_size else {}))
    except RecurrentWindowsError as e:
        _fail(e)

    rows = []
    for recurrent in {"baseline": [False], "recurrent": [True], "both": [False, True]}[mode]:
        rows.extend(flops_table(config, windows, overlaps, recurrent))
    buffer = io.StringIO()
    writer = csv.DictWriter(buffer, fieldnames=CSV_HEADER, lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    _emit_csv(buffer.getvalue(), out)


# ============================================================
# GENERATE Command
# ============================================================

@click.command()
@click.argument("checkpoint", type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.option("--prompt-file", required=True, type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.option("--n-tokens", "-n", type=int, default=100, show_default=True)
@click.option("--mode", type=click.Choice([m.value for m in ExecutionMode]), help="Execution mode (default: recurrent if available)")
@click.option("--window", "-T", type=int, help="Window size (default: max_positions)")
@click.option("--overlap", "-o", type=int, default=0, show_default=True)
@click.option("--mask-carry", is_flag=True, help="Mask the carry attention column")
def generate(checkpoint, prompt_file, n_tokens, mode, window, overlap, mask_carry):
    """Greedy continuation of a prompt.

    Raw-text models read the prompt as characters; token-id models read
    whitespace-separated integer ids and print ids.
    """
    from .corpus import OOV_ID, char_tokenize
    from .model import greedy_decode
    from .workflows import LoadedModel

    if n_tokens < 0:
        raise click.BadParameter("must be >= 0", param_hint="--n-tokens")
    try:
        model = LoadedModel.load(checkpoint)
        text = prompt_file.read_text(encoding="utf-8")
        if model.vocab is not None:
            prompt = char_tokenize(text, model.vocab)
            if prompt and all(t == OOV_ID for t in prompt):
                logger.warning("Every prompt character is out of vocabulary; continuing with OOV ids")
        else:
            try:
                prompt = [int(t) for t in text.split()]
            except ValueError as e:
                raise InputError(f"{prompt_file}: token-id prompts must be integers ({e})") from e
        if not prompt:
            raise InputError(f"{prompt_file}: prompt is empty after tokenization")
        if n_tokens == 0:
            return

        recurrent = (mode or ("recurrent" if model.recurrent else "baseline")) == "recurrent"
        if recurrent and not model.recurrent:
            raise ConfigError("recurrent mode needs a checkpoint with recurrence parameters", [])
        config = model.config.with_overrides(mask_carry=True) if mask_carry else model.config
        ids = greedy_decode(
            prompt, n_tokens, config, model.params,
            window=window, overlap=overlap, recurrent=recurrent,
        )
    except RecurrentWindowsError as e:
        _fail(e)

    if model.vocab is not None:
        click.echo(model.vocab.decode(ids))
    else:
        click.echo(" ".join(str(i) for i in ids))


# ============================================================
# GEN-DATA Command
# ============================================================

@click.command(name="gen-data")
@click.option("--output-dir", required=True, type=click.Path(file_okay=False, path_type=Path))
@click.option("--topics", type=int, default=4, show_default=True)
@click.option("--content-vocab", type=int, default=64, show_default=True)
@click.option("--doc-length", type=int, default=2048, show_default=True)
@click.option("--n-docs", type=int, default=64, show_default=True, help="Training documents (valid/test get a quarter each)")
@click.option("--concentration", type=float, default=0.1, show_default=True, help="Dirichlet concentration of topic distributions")
@click.option("--seed", type=int, default=0, show_default=True)
def gen_data(output_dir, topics, content_vocab, doc_length, n_docs, concentration, seed):
    """Write a synthetic topic-marker corpus (train/valid/test token binaries)."""
    from dataclasses import replace

    from .corpus import SyntheticSpec, export_token_binary, gen_synthetic

    try:
        spec = SyntheticSpec.dirichlet(
            topics, content_vocab, doc_length, seed, concentration=concentration, n_docs=n_docs
        )
        output_dir.mkdir(parents=True, exist_ok=True)
        held_out = replace(spec, n_docs=max(1, n_docs // 4))
        for split, split_spec in (("train", spec), ("valid", held_out), ("test", held_out)):
            export_token_binary(output_dir / f"{split}.bin", gen_synthetic(split_spec, split))
        (output_dir / "synthetic.toml").write_text(tomli_w.dumps(spec.to_dict()), encoding="utf-8")
    except RecurrentWindowsError as e:
        _fail(e)

    cond, marg = spec.analytic_perplexities()
    click.echo(f"✓ Wrote synthetic corpus to {output_dir}")
    click.echo(f"  Vocabulary:            {spec.vocab_size}")
    click.echo(f"  Optimal ppl (topic):   {cond:.4f}")
    click.echo(f"  Optimal ppl (no topic): {marg:.4f}")


# ============================================================
# RUNS Command
# ============================================================

@click.command()
@click.option("--output-dir", type=click.Path(file_okay=False, path_type=Path), help="Run directory (default: $RECURRENT_WINDOWS_OUTPUT_DIR)")
@click.option("--command", "command_filter", type=click.Choice(["train", "eval", "sweep"]), help="Only runs of this command")
def runs(output_dir, command_filter):
    """List runs recorded in an output directory's ledger."""
    from .models import LEDGER_FILENAME
    from .queries import RunsQuery
    from .repository import Repository

    directory = _ledger_dir(output_dir, Path.cwd())
    if not (directory / LEDGER_FILENAME).exists():
        click.echo(f"✗ No ledger in {directory}", err=True)
        sys.exit(2)

    query = RunsQuery(Repository(directory))
    summaries = query.list_runs(command_filter)
    click.echo(f"\nRuns in {directory} ({len(summaries)})\n")
    if not summaries:
        click.echo("  None")
        return
    click.echo(f"  {'ID':>4} {'Name':<20} {'Command':<8} {'Status':<8} {'Steps':>6} {'Rows':>5} {'Best NLL':>9}")
    click.echo(f"  {'-'*4} {'-'*20} {'-'*8} {'-'*8} {'-'*6} {'-'*5} {'-'*9}")
    for s in summaries:
        best = f"{s.best_val_nll:.4f}" if s.best_val_nll is not None else "-"
        click.echo(
            f"  {s.run_id:>4} {s.name[:20]:<20} {s.command:<8} {s.status:<8} {s.steps:>6} {s.eval_rows:>5} {best:>9}"
        )
    best_run = query.best_run()
    if best_run:
        click.echo(f"\n  Best training run: #{best_run.run_id} ({best_run.best_val_nll:.4f})")


def register_commands(cli_group):
    """Register every command with the root click group."""
    cli_group.add_command(train)
    cli_group.add_command(eval_cmd, name="eval")
    cli_group.add_command(sweep)
    cli_group.add_command(flops)
    cli_group.add_command(generate)
    cli_group.add_command(gen_data, name="gen-data")
    cli_group.add_command(runs)
