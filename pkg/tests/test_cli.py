"""End-to-end tests for the command-line interface."""

import csv
import shutil

try:
    import tomllib
except ImportError:
    import tomli as tomllib  # type: ignore

import numpy as np
import pytest
import tomli_w
from click.testing import CliRunner

from recurrent_windows.artifacts import RunArtifacts
from recurrent_windows.cli import main
from recurrent_windows.config import OUTPUT_DIR_ENV
from recurrent_windows.core.rng import Rng
from recurrent_windows.core.tensor import Tensor
from recurrent_windows.corpus import Document, SyntheticSpec, export_token_binary, load_corpus
from recurrent_windows.model import ModelConfig, greedy_decode, init_params
from recurrent_windows.models import close_db
from recurrent_windows.training import TrainRecord
from recurrent_windows.windowing import evaluate_corpus
from recurrent_windows.workflows import LoadedModel


@pytest.fixture(autouse=True)
def clean_env(monkeypatch):
    monkeypatch.delenv(OUTPUT_DIR_ENV, raising=False)
    yield
    close_db()


@pytest.fixture
def runner():
    return CliRunner()


@pytest.fixture
def trained(runner, run_file):
    """Train the tiny run file once; returns its output directory."""
    result = runner.invoke(main, ["train", "--config", str(run_file)])
    assert result.exit_code == 0, result.output
    return run_file.parent / "runs" / "smoke"


def read_csv(path):
    with open(path, newline="", encoding="utf-8") as f:
        return list(csv.DictReader(f))


def write_uniform_checkpoint(directory, recurrent=True):
    """V=4 model whose zero embedding table makes every prediction uniform."""
    config = ModelConfig(
        layers=1, hidden=8, heads=2, max_positions=8, vocab_size=4,
        insertion_layer=1, carry_hidden=8, carry_depth=1,
    )
    params = init_params(config, Rng(0), recurrent=recurrent)
    params["wte"] = Tensor(np.zeros(params["wte"].shape), name="wte")
    model = config.to_dict()
    model.pop("gelu_approximate")
    model["gelu"] = "exact"
    artifacts = RunArtifacts(directory)
    artifacts.write_run_config({"name": directory.name, "seed": 0, "model": model})
    artifacts.save_params(artifacts.best_ckpt, params)
    return artifacts.best_ckpt


@pytest.fixture
def token_corpus(tmp_path):
    path = tmp_path / "tokens.bin"
    export_token_binary(path, [
        Document(tokens=np.array([0, 1, 2, 3, 2, 1, 0, 3, 3, 1]), word_count=10, source_id="a"),
        Document(tokens=np.array([2, 2, 1, 0, 3, 0, 1]), word_count=7, source_id="b"),
    ])
    return path


class TestTrain:
    def test_writes_run_directory(self, trained):
        """Test that training writes checkpoints, run.toml, the log and the ledger."""
        for name in ("best.ckpt", "last.ckpt", "run.toml", "train_log.jsonl", "ledger.db"):
            assert (trained / name).exists(), name

    def test_missing_corpus_names_field(self, runner, run_file):
        """Test that a missing corpus exits 2 and names its field."""
        (run_file.parent / "corpus" / "valid.txt").unlink()
        result = runner.invoke(main, ["train", "--config", str(run_file)])
        assert result.exit_code == 2
        assert "data.valid" in result.output

    def test_same_seed_same_log(self, runner, run_file, tmp_path):
        """Test that one seed gives byte-identical train logs."""
        logs = []
        for name in ("a", "b"):
            out = tmp_path / name
            result = runner.invoke(
                main, ["train", "--config", str(run_file), "--seed", "5", "--output-dir", str(out)]
            )
            assert result.exit_code == 0, result.output
            logs.append((out / "train_log.jsonl").read_bytes())
        assert logs[0] == logs[1]
        assert logs[0]

    def test_resume_drops_records_after_last_save(self, runner, run_file):
        """Test that resuming rewinds the train log to the saved step before appending."""
        with open(run_file, "rb") as f:
            data = tomllib.load(f)
        data["train"]["resume"] = True
        run_file.write_text(tomli_w.dumps(data), encoding="utf-8")
        out = run_file.parent / "runs" / "smoke"

        first = runner.invoke(main, ["train", "--config", str(run_file), "--epochs", "1"])
        assert first.exit_code == 0, first.output
        artifacts = RunArtifacts(out)
        done = len(artifacts.read_train_log())
        assert done > 0
        # A record written after the last save, as left behind by an interrupted run.
        artifacts.append_train_log([TrainRecord(done + 1, 0, 0.0, 99.0)])

        second = runner.invoke(main, ["train", "--config", str(run_file), "--epochs", "2"])
        assert second.exit_code == 0, second.output
        assert "resumed" in second.output
        rows = artifacts.read_train_log()
        assert [r["step"] for r in rows] == list(range(1, 2 * done + 1))
        assert all(r["train_nll"] != 99.0 for r in rows)


class TestEval:
    def test_rows_match_library(self, runner, trained, run_file, tmp_path):
        """Test that eval CSV rows equal the library's reports."""
        out = tmp_path / "eval.csv"
        test_corpus = run_file.parent / "corpus" / "test.txt"
        result = runner.invoke(main, [
            "eval", str(trained / "best.ckpt"), "--corpus", str(test_corpus),
            "-T", "6", "-o", "0,2", "--out", str(out),
        ])
        assert result.exit_code == 0, result.output

        model = LoadedModel.load(trained / "best.ckpt")
        documents = model.load_corpus(test_corpus, "raw-text").documents
        expected = [
            evaluate_corpus(model.config, model.params, documents, 6, o, "recurrent", model=model.label).csv_row()
            for o in (0, 2)
        ]
        assert read_csv(out) == [{k: str(v) for k, v in row.items()} for row in expected]

    def test_rows_from_run_file(self, runner, trained, run_file, tmp_path):
        """Test that eval takes its grid from the run file's eval entries."""
        out = tmp_path / "eval.csv"
        result = runner.invoke(
            main, ["eval", str(trained / "best.ckpt"), "--config", str(run_file), "--out", str(out)]
        )
        assert result.exit_code == 0, result.output
        rows = read_csv(out)
        assert [(r["T"], r["overlap"], r["mode"]) for r in rows] == [
            ("6", "0", "recurrent"),
            ("6", "2", "baseline"),
        ]

    def test_invalid_overlap(self, runner, trained, run_file):
        """Test that an overlap of T exits 2."""
        result = runner.invoke(main, [
            "eval", str(trained / "best.ckpt"),
            "--corpus", str(run_file.parent / "corpus" / "test.txt"), "-T", "6", "-o", "6",
        ])
        assert result.exit_code == 2

    def test_checkpoint_without_run_toml(self, runner, trained, run_file, tmp_path):
        """Test that a checkpoint without run.toml exits 3."""
        bare = tmp_path / "bare"
        bare.mkdir()
        shutil.copy(trained / "best.ckpt", bare / "best.ckpt")
        result = runner.invoke(main, [
            "eval", str(bare / "best.ckpt"),
            "--corpus", str(run_file.parent / "corpus" / "test.txt"), "-T", "6",
        ])
        assert result.exit_code == 3

    def test_token_id_beyond_vocabulary(self, runner, tmp_path):
        """Test that a corpus id beyond the vocabulary exits 4."""
        checkpoint = write_uniform_checkpoint(tmp_path / "uniform")
        corpus = tmp_path / "wide.bin"
        export_token_binary(corpus, [Document(tokens=np.array([1, 7, 2]), word_count=3, source_id="x")])
        result = runner.invoke(main, [
            "eval", str(checkpoint), "--corpus", str(corpus), "--format", "token-binary", "-T", "4",
        ])
        assert result.exit_code == 4

    def test_uniform_model(self, runner, tmp_path, token_corpus):
        """Test that a uniform model scores perplexity V at every overlap."""
        checkpoint = write_uniform_checkpoint(tmp_path / "uniform")
        out = tmp_path / "eval.csv"
        result = runner.invoke(main, [
            "eval", str(checkpoint), "--corpus", str(token_corpus), "--format", "token-binary",
            "-T", "4", "-o", "0,1,2", "--out", str(out),
        ])
        assert result.exit_code == 0, result.output
        rows = read_csv(out)
        assert [r["ppl_token"] for r in rows] == ["4.000000"] * 3
        assert all(r["scored_tokens"] == "15" for r in rows)
        flops = [float(r["flops_per_token"]) for r in rows]
        assert flops[0] < flops[1] < flops[2]


class TestSweep:
    def test_skipped_rows_keep_schema(self, runner, tmp_path, token_corpus):
        """Test that skipped sweep jobs leave empty rows in the CSV."""
        recurrent = write_uniform_checkpoint(tmp_path / "uniform")
        baseline = write_uniform_checkpoint(tmp_path / "plain", recurrent=False)
        out = tmp_path / "sweep.csv"
        result = runner.invoke(main, [
            "sweep", str(recurrent), str(baseline),
            "--corpus", str(token_corpus), "--format", "token-binary",
            "--windows", "4,32", "--overlaps", "0", "--workers", "2", "--out", str(out),
        ])
        assert result.exit_code == 0, result.output
        rows = read_csv(out)
        assert len(rows) == 8
        evaluated = [(r["model"], r["T"], r["mode"]) for r in rows if r["ppl_token"]]
        assert evaluated == [("uniform", "4", "baseline"), ("uniform", "4", "recurrent"), ("plain", "4", "baseline")]
        skipped = [r for r in rows if not r["ppl_token"]]
        assert all(r["flops_per_token"] == "" for r in skipped)


class TestFlops:
    def test_table_skips_invalid_overlaps(self, runner, tmp_path):
        """Test that the flops table drops invalid overlaps."""
        out = tmp_path / "flops.csv"
        result = runner.invoke(main, [
            "flops", "--preset", "gpt2-small", "--windows", "300",
            "--overlaps", "0,5,300", "--mode", "baseline", "--out", str(out),
        ])
        assert result.exit_code == 0, result.output
        rows = read_csv(out)
        assert [r["overlap"] for r in rows] == ["0", "5"]
        assert float(rows[0]["flops_per_token"]) < float(rows[1]["flops_per_token"])

    def test_both_modes(self, runner, tmp_path):
        """Test that the default flops mode lists baseline and recurrent rows."""
        out = tmp_path / "flops.csv"
        result = runner.invoke(main, ["flops", "--windows", "300", "--overlaps", "0", "--out", str(out)])
        assert result.exit_code == 0, result.output
        assert [r["mode"] for r in read_csv(out)] == ["baseline", "recurrent"]


class TestGenerate:
    @pytest.fixture
    def prompt(self, tmp_path):
        path = tmp_path / "prompt.txt"
        path.write_text("a cab", encoding="utf-8")
        return path

    def test_matches_greedy_decode(self, runner, trained, prompt):
        """Test that generate prints the library's greedy continuation deterministically."""
        args = ["generate", str(trained / "best.ckpt"), "--prompt-file", str(prompt), "-n", "5"]
        first = runner.invoke(main, args)
        second = runner.invoke(main, args)
        assert first.exit_code == 0, first.output
        assert first.output == second.output

        model = LoadedModel.load(trained / "best.ckpt")
        ids = greedy_decode(model.vocab.encode("a cab"), 5, model.config, model.params, recurrent=True)
        assert model.vocab.decode(ids) in first.output

    def test_zero_tokens(self, runner, trained, prompt):
        """Test that -n 0 prints nothing."""
        result = runner.invoke(
            main, ["generate", str(trained / "best.ckpt"), "--prompt-file", str(prompt), "-n", "0"]
        )
        assert result.exit_code == 0
        assert result.output == ""

    def test_empty_prompt(self, runner, trained, tmp_path):
        """Test that an empty prompt exits 1."""
        empty = tmp_path / "empty.txt"
        empty.write_text("", encoding="utf-8")
        result = runner.invoke(main, ["generate", str(trained / "best.ckpt"), "--prompt-file", str(empty)])
        assert result.exit_code == 1


class TestGenData:
    def test_writes_splits(self, runner, tmp_path):
        """Test that gen-data writes three token splits and synthetic.toml."""
        out = tmp_path / "synthetic"
        result = runner.invoke(main, [
            "gen-data", "--output-dir", str(out), "--topics", "2", "--content-vocab", "8",
            "--doc-length", "32", "--n-docs", "4", "--seed", "1",
        ])
        assert result.exit_code == 0, result.output
        assert len(load_corpus(out / "train.bin", "token-binary")) == 4
        assert len(load_corpus(out / "valid.bin", "token-binary")) == 1
        assert len(load_corpus(out / "test.bin", "token-binary")) == 1
        with open(out / "synthetic.toml", "rb") as f:
            spec = SyntheticSpec.from_dict(tomllib.load(f))
        assert spec.vocab_size == 10
        assert "Vocabulary:            10" in result.output


class TestRuns:
    def test_lists_training_run(self, runner, trained):
        """Test that runs lists the training run and the best run."""
        result = runner.invoke(main, ["runs", "--output-dir", str(trained)])
        assert result.exit_code == 0, result.output
        assert "smoke" in result.output
        assert "Best training run" in result.output

    def test_missing_ledger(self, runner, tmp_path):
        """Test that a directory without a ledger exits 2."""
        result = runner.invoke(main, ["runs", "--output-dir", str(tmp_path / "nowhere")])
        assert result.exit_code == 2
