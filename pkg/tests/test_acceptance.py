"""Training experiments on the synthetic topic-marker corpus.

These train real (small) models for minutes and are deselected by default;
run them with ``pytest -m slow``.
"""

import csv
import statistics

try:
    import tomllib
except ImportError:
    import tomli as tomllib  # type: ignore

import numpy as np
import pytest
import tomli_w
from click.testing import CliRunner
from scipy import stats

from recurrent_windows.cli import main
from recurrent_windows.core.rng import Rng
from recurrent_windows.corpus import Document, SyntheticSpec, gen_synthetic, load_corpus
from recurrent_windows.model import ModelConfig, greedy_decode, init_params
from recurrent_windows.models import close_db
from recurrent_windows.training import TrainConfig, train_loop
from recurrent_windows.windowing import evaluate_corpus

pytestmark = pytest.mark.slow


def small_model(vocab_size, max_positions=128):
    return ModelConfig(
        layers=2,
        hidden=32,
        heads=2,
        max_positions=max_positions,
        vocab_size=vocab_size,
        insertion_layer=2,
        carry_hidden=32,
        carry_depth=1,
    )


def train_model(spec, window, recurrent, seed, epochs=2):
    config = small_model(spec.vocab_size)
    train = TrainConfig(
        window=window,
        overlap=0,
        windows_per_sequence=4,
        lr=3e-3,
        warmup_steps=20,
        epochs=epochs,
        validate_every_tokens=10**9,
        seed=seed,
        recurrent=recurrent,
    )
    params = init_params(config, Rng(seed), recurrent=recurrent)
    result = train_loop(
        gen_synthetic(spec, "train"), gen_synthetic(spec, "valid"), config, train, params
    )
    return config, result.best_params


def held_out_ppl(spec, config, params, window, overlap, recurrent):
    mode = "recurrent" if recurrent else "baseline"
    report = evaluate_corpus(config, params, gen_synthetic(spec, "test"), window, overlap, mode)
    return report.ppl_token


@pytest.fixture(scope="module")
def spec():
    return SyntheticSpec.dirichlet(4, 32, doc_length=2048, seed=0, concentration=0.1, n_docs=16)


class TestLongRangeBenefit:
    def test_recurrent_closes_part_of_the_topic_gap(self, spec):
        """Test that the carry recovers a quarter of the marginal-to-conditional gap at T=64."""
        config, baseline = train_model(spec, 64, recurrent=False, seed=0)
        _, recurrent = train_model(spec, 64, recurrent=True, seed=0)
        ppl_base = held_out_ppl(spec, config, baseline, 64, 0, recurrent=False)
        ppl_rec = held_out_ppl(spec, config, recurrent, 64, 0, recurrent=True)

        conditional, marginal = spec.analytic_perplexities()
        assert ppl_base - ppl_rec >= 0.25 * (marginal - conditional)

    def test_masking_the_carry_hurts(self, spec):
        """Test that masking the carry of a trained model raises perplexity."""
        config, params = train_model(spec, 64, recurrent=True, seed=1)
        unmasked = held_out_ppl(spec, config, params, 64, 0, recurrent=True)
        masked = held_out_ppl(spec, config.with_overrides(mask_carry=True), params, 64, 0, recurrent=True)
        assert unmasked < masked


class TestOverlapTrend:
    def test_more_overlap_never_hurts_baseline(self, spec):
        """Test that baseline median perplexity does not rise with overlap."""
        T = 64
        per_seed = []
        for seed in range(3):
            config, params = train_model(spec, T, recurrent=False, seed=seed)
            per_seed.append([held_out_ppl(spec, config, params, T, o, False) for o in (0, T // 8, T // 4)])
        medians = [statistics.median(col) for col in zip(*per_seed)]
        # Within 1% noise.
        assert medians[1] <= medians[0] * 1.01
        assert medians[2] <= medians[1] * 1.01


class TestWindowSweep:
    def test_gap_widens_as_window_shrinks(self, spec):
        """Test that the baseline-minus-recurrent gap grows as T shrinks."""
        gaps = {}
        for T in (32, 64, 128):
            per_seed = []
            for seed in range(3):
                config, baseline = train_model(spec, T, recurrent=False, seed=seed)
                _, recurrent = train_model(spec, T, recurrent=True, seed=seed)
                per_seed.append(
                    held_out_ppl(spec, config, baseline, T, 0, False)
                    - held_out_ppl(spec, config, recurrent, T, 0, True)
                )
            gaps[T] = statistics.median(per_seed)
        assert gaps[32] > gaps[64] > gaps[128]


class TestMemorization:
    def test_single_document_overfits(self):
        """Test that one short document can be memorized to ppl below 1.1."""
        tokens = np.random.default_rng(3).integers(0, 12, size=48)
        doc = Document(tokens=tokens, word_count=48, source_id="tiny")
        config = small_model(12, max_positions=16)
        train = TrainConfig(
            window=16,
            overlap=0,
            windows_per_sequence=3,
            lr=1e-2,
            warmup_steps=10,
            epochs=300,
            validate_every_tokens=10**9,
            seed=0,
        )
        result = train_loop([doc], [doc], config, train, init_params(config, Rng(0)))
        report = evaluate_corpus(config, result.best_params, [doc], 16, 0, "recurrent")
        assert report.ppl_token < 1.1


def periodic_document(phase, n_windows=12, window=4):
    """Windows of constant ids following the period [1111][1111][2222], shifted by ``phase``."""
    pattern = (1, 1, 2)
    ids = [pattern[(phase + i) % 3] for i in range(n_windows) for _ in range(window)]
    return Document(tokens=np.array(ids, dtype=np.int64), word_count=len(ids), source_id=f"periodic-{phase}")


class TestPeriodicContinuation:
    def test_greedy_decode_follows_the_period(self):
        """Test that greedy continuation needs the carry to tell the two 1111 windows apart."""
        docs = [periodic_document(phase) for phase in range(3)]
        config = small_model(3, max_positions=8)
        train = TrainConfig(
            window=4,
            overlap=0,
            windows_per_sequence=6,
            lr=1e-2,
            warmup_steps=10,
            epochs=40,
            validate_every_tokens=10**9,
            seed=0,
        )
        result = train_loop(docs, docs, config, train, init_params(config, Rng(0)))
        masked = config.with_overrides(mask_carry=True)

        for doc in docs:
            prompt = doc.tokens[:12].tolist()
            expected = doc.tokens[12:36].tolist()
            assert greedy_decode(prompt, 24, config, result.best_params, window=4) == expected
            # Without the carry a 1111 window has one successor, but the period needs both.
            assert greedy_decode(prompt, 24, masked, result.best_params, window=4) != expected


@pytest.fixture(scope="class")
def pipeline(tmp_path_factory):
    """Synthetic splits plus a recurrent and a baseline checkpoint, all made through the CLI."""
    root = tmp_path_factory.mktemp("pipeline")
    runner = CliRunner()
    data = root / "data"
    result = runner.invoke(main, [
        "gen-data", "--output-dir", str(data), "--topics", "4", "--content-vocab", "32",
        "--doc-length", "512", "--n-docs", "32", "--seed", "0",
    ])
    assert result.exit_code == 0, result.output

    checkpoints = {}
    for name in ("recurrent", "baseline"):
        run_file = root / f"{name}.toml"
        run_file.write_text(tomli_w.dumps({
            "seed": 0,
            "name": name,
            "model": {
                "layers": 2, "hidden": 32, "heads": 2, "max_positions": 16, "vocab_size": 36,
                "insertion_layer": 2, "carry_hidden": 32, "carry_depth": 1,
            },
            "train": {
                "window": 8, "overlap": 0, "windows_per_sequence": 8, "lr": 3e-3,
                "warmup_steps": 20, "epochs": 3, "validate_every_tokens": 10**9,
                "recurrent": name == "recurrent",
            },
            "data": {
                "format": "token-binary",
                "train": str(data / "train.bin"),
                "valid": str(data / "valid.bin"),
                "test": str(data / "test.bin"),
            },
        }), encoding="utf-8")
        result = runner.invoke(
            main, ["train", "--config", str(run_file), "--output-dir", str(root / name)]
        )
        assert result.exit_code == 0, result.output
        checkpoints[name] = root / name / "best.ckpt"

    yield data, checkpoints
    close_db()


class TestCommandLinePipeline:
    def test_sweep_ranks_recurrent_below_baseline(self, pipeline, tmp_path):
        """Test that at T=8 the recurrent checkpoint's perplexity beats the baseline's."""
        data, checkpoints = pipeline
        out = tmp_path / "sweep.csv"
        result = CliRunner().invoke(main, [
            "sweep", str(checkpoints["recurrent"]), str(checkpoints["baseline"]),
            "--corpus", str(data / "test.bin"), "--format", "token-binary",
            "--windows", "8", "--overlaps", "0", "--out", str(out),
        ])
        assert result.exit_code == 0, result.output
        with open(out, newline="", encoding="utf-8") as f:
            rows = {(r["model"], r["mode"]): r for r in csv.DictReader(f)}
        recurrent = float(rows[("recurrent", "recurrent")]["ppl_token"])
        baseline = float(rows[("baseline", "baseline")]["ppl_token"])
        assert recurrent < baseline

    def test_generation_stays_on_the_prompt_topic(self, pipeline, tmp_path):
        """Test that continuations are closer in KL to the prompt's topic than to the mixture."""
        data, checkpoints = pipeline
        with open(data / "synthetic.toml", "rb") as f:
            spec = SyntheticSpec.from_dict(tomllib.load(f))
        eps = 1e-6
        topics = np.zeros((spec.n_topics, spec.vocab_size))
        topics[:, : spec.content_vocab] = spec.topic_distributions
        topics += eps
        topics /= topics.sum(axis=1, keepdims=True)
        marginal = topics.mean(axis=0)

        runner = CliRunner()
        for i, doc in enumerate(load_corpus(data / "test.bin", "token-binary").documents):
            prompt = doc.tokens[:8].tolist()
            prompt_file = tmp_path / f"prompt-{i}.txt"
            prompt_file.write_text(" ".join(map(str, prompt)), encoding="utf-8")
            result = runner.invoke(main, [
                "generate", str(checkpoints["recurrent"]), "--prompt-file", str(prompt_file),
                "-n", "64", "-T", "8", "--mode", "recurrent",
            ])
            assert result.exit_code == 0, result.output
            ids = [int(t) for t in result.output.strip().splitlines()[-1].split()]
            assert len(ids) == 64

            observed = np.bincount(ids, minlength=spec.vocab_size) / len(ids)
            topic = prompt[0] - spec.content_vocab
            assert stats.entropy(observed, topics[topic]) < stats.entropy(observed, marginal)
