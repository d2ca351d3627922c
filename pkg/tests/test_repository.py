"""Tests for the run ledger, the runs query and run-directory artifacts."""

import math

import numpy as np
import pytest

from recurrent_windows.artifacts import RunArtifacts, has_recurrence, load_params
from recurrent_windows.core.optim import Adam
from recurrent_windows.corpus import CharVocab
from recurrent_windows.errors import CheckpointError
from recurrent_windows.models import close_db
from recurrent_windows.queries import RunsQuery
from recurrent_windows.repository import Repository
from recurrent_windows.training import LoopState, TrainRecord, param_arrays
from recurrent_windows.windowing import EvalReport, ExecutionMode


@pytest.fixture
def repo(tmp_path):
    repository = Repository(tmp_path / "ledger")
    yield repository
    close_db()


def make_report(model="m", nll=2.0, words=3):
    return EvalReport(
        total_nll=nll,
        scored_token_count=4,
        scored_word_count=words,
        flops_per_token=1e6,
        window=8,
        overlap=2,
        mode=ExecutionMode.RECURRENT,
        model=model,
    )


class TestRepository:
    def test_creates_ledger_file(self, repo, tmp_path):
        """Test that opening a repository creates ledger.db."""
        assert (tmp_path / "ledger" / "ledger.db").exists()

    def test_run_lifecycle(self, repo):
        """Test that a run moves from running to its final status with notes."""
        run = repo.start_run("smoke", "train", seed=4, config_toml="seed = 4\n")
        assert run.status == "running"
        repo.finish_run(run, "success", best_val_nll=1.5, notes="ok")

        stored = repo.get_run(run.id)
        assert stored.status == "success"
        assert stored.best_val_nll == 1.5
        assert stored.wallclock_ms >= 0
        assert stored.config_toml == "seed = 4\n"

    def test_infinite_best_is_not_stored(self, repo):
        """Test that an infinite best validation NLL is stored as null."""
        run = repo.start_run("x", "train")
        repo.finish_run(run, "failed", best_val_nll=math.inf)
        assert repo.get_run(run.id).best_val_nll is None

    def test_train_records_in_step_order(self, repo):
        """Test that train records come back ordered by step."""
        run = repo.start_run("x", "train")
        records = [
            TrainRecord(step=2, tokens_seen=20, lr=1e-3, train_nll=2.0, val_nll=2.2),
            TrainRecord(step=1, tokens_seen=10, lr=5e-4, train_nll=2.5),
        ]
        assert repo.add_train_records(run, records) == 2
        repo.add_train_record(run, TrainRecord(3, 30, 1e-3, 1.9), wallclock_ms=12.5)
        rows = repo.get_run_records(run)
        assert [r.step for r in rows] == [1, 2, 3]
        assert rows[1].val_nll == 2.2
        assert rows[0].wallclock_ms is None
        assert rows[2].wallclock_ms == 12.5

    def test_eval_rows(self, repo):
        """Test that eval rows keep insertion order and store infinite word perplexity."""
        run = repo.start_run("x", "sweep")
        repo.add_eval_report(run, make_report("a"))
        repo.add_eval_report(run, make_report("b", words=0))
        rows = repo.get_eval_rows(run)
        assert [r.model for r in rows] == ["a", "b"]
        assert rows[0].mode == "recurrent"
        assert rows[0].ppl_token == pytest.approx(math.exp(0.5))
        assert rows[1].ppl_word == math.inf

    def test_list_runs_filters_by_command(self, repo):
        """Test newest-first listing with an optional command filter."""
        repo.start_run("a", "train")
        repo.start_run("b", "eval")
        repo.start_run("c", "train")
        assert [r.name for r in repo.list_runs("train")] == ["c", "a"]
        assert len(repo.list_runs()) == 3


class TestRunsQuery:
    def test_summaries_count_children(self, repo):
        """Test that run summaries count train and eval rows."""
        run = repo.start_run("t", "train")
        repo.add_train_records(run, [TrainRecord(1, 10, 1e-3, 2.0)])
        (summary,) = RunsQuery(repo).list_runs()
        assert summary.steps == 1
        assert summary.eval_rows == 0
        assert not summary.is_finished

    def test_best_run_ignores_unfinished_and_failed(self, repo):
        """Test that the best run is the lowest successful validation NLL."""
        for name, status, nll in [("good", "success", 1.2), ("better", "success", 0.9), ("broken", "failed", 0.1)]:
            repo.finish_run(repo.start_run(name, "train"), status, best_val_nll=nll)
        repo.start_run("running", "train")
        assert RunsQuery(repo).best_run().name == "better"

    def test_no_best_run(self, repo):
        """Test that no finished training run gives None."""
        repo.start_run("e", "eval")
        assert RunsQuery(repo).best_run() is None


class TestRunArtifacts:
    @pytest.fixture
    def artifacts(self, tmp_path):
        return RunArtifacts(tmp_path / "run")

    @pytest.fixture
    def resolved(self, tiny_config):
        model = tiny_config.to_dict()
        model.pop("gelu_approximate")
        model["gelu"] = "tanh"
        return {"name": "t", "seed": 0, "model": model}

    def test_model_config_and_vocab_round_trip(self, artifacts, resolved, tiny_config):
        """Test that run.toml restores the model config and character vocabulary."""
        text = artifacts.write_run_config(resolved, CharVocab("ba c"))
        assert 'chars = " abc"' in text
        config, vocab = artifacts.load_model_config()
        assert config == tiny_config.with_overrides(gelu_approximate=True)
        assert vocab.encode("cab") == [4, 2, 3]

    def test_no_vocab_for_token_corpora(self, artifacts, resolved):
        """Test that token corpora store no vocabulary."""
        artifacts.write_run_config(resolved)
        assert artifacts.load_model_config()[1] is None

    def test_missing_run_toml(self, artifacts):
        """Test that a directory without run.toml raises CheckpointError."""
        with pytest.raises(CheckpointError):
            artifacts.load_model_config()

    def test_params_round_trip(self, artifacts, tiny_config, tiny_params):
        """Test that saved parameters load back exactly."""
        artifacts.ensure()
        artifacts.save_params(artifacts.best_ckpt, tiny_params)
        loaded = load_params(artifacts.best_ckpt, tiny_config, recurrent=True)
        assert has_recurrence(artifacts.best_ckpt)
        for name, p in tiny_params.items():
            np.testing.assert_array_equal(loaded[name].data, p.data)

    def test_baseline_load_ignores_recurrence(self, artifacts, tiny_config, tiny_params):
        """Test that a baseline load drops recurrence parameters."""
        artifacts.ensure()
        artifacts.save_params(artifacts.best_ckpt, tiny_params)
        loaded = load_params(artifacts.best_ckpt, tiny_config, recurrent=False)
        assert not any(name.startswith("recurrence.") for name in loaded)

    def test_shape_mismatch(self, artifacts, tiny_config, tiny_params):
        """Test that a parameter of the wrong shape is rejected."""
        artifacts.ensure()
        artifacts.save_params(artifacts.best_ckpt, tiny_params)
        with pytest.raises(CheckpointError, match="shape"):
            load_params(artifacts.best_ckpt, tiny_config.with_overrides(vocab_size=12), recurrent=True)

    def test_missing_recurrence(self, artifacts, tiny_config, tiny_params):
        """Test that a recurrent load needs recurrence parameters."""
        artifacts.ensure()
        baseline = {n: p for n, p in tiny_params.items() if not n.startswith("recurrence.")}
        artifacts.save_params(artifacts.best_ckpt, baseline)
        assert not has_recurrence(artifacts.best_ckpt)
        with pytest.raises(CheckpointError, match="missing"):
            load_params(artifacts.best_ckpt, tiny_config, recurrent=True)

    def test_training_state_round_trip(self, artifacts, tiny_config, tiny_params):
        """Test that params, Adam moments and loop state resume intact."""
        optimizer = Adam()
        grads = {name: np.ones(shape) for name, shape in tiny_config.parameter_shapes().items()}
        optimizer.apply(param_arrays(tiny_params), grads, lr=0.1)
        state = LoopState(epoch=1, doc_cursor=2, step=1, tokens_seen=7, next_validation=50, best_val_nll=3.0)
        artifacts.ensure()
        artifacts.save_training_state(tiny_params, optimizer, state, tiny_params)

        params, restored, loaded_state, best = artifacts.load_training_state(tiny_config, recurrent=True)
        assert loaded_state == state
        assert restored.step == 1
        np.testing.assert_array_equal(restored.moment1["wte"], optimizer.moment1["wte"])
        assert set(params) == set(best) == set(tiny_params)

    def test_train_log(self, artifacts):
        """Test that JSONL records append and read back in order."""
        artifacts.append_train_log([TrainRecord(1, 10, 1e-3, 2.0)])
        artifacts.append_train_log([TrainRecord(2, 20, 1e-3, 1.5, val_nll=1.7)])
        rows = artifacts.read_train_log()
        assert [r["step"] for r in rows] == [1, 2]
        assert rows[1]["val_nll"] == 1.7
        assert rows[0]["wallclock_ms"] is None

    def test_truncate_train_log(self, artifacts):
        """Test that records past the resume step are dropped and earlier ones kept."""
        artifacts.append_train_log([TrainRecord(step, 10 * step, 1e-3, 2.0) for step in (1, 2, 3, 4)])
        assert artifacts.truncate_train_log(2) == 2
        assert [r["step"] for r in artifacts.read_train_log()] == [1, 2]
        assert artifacts.truncate_train_log(2) == 0
        assert [r["step"] for r in artifacts.read_train_log()] == [1, 2]

    def test_truncate_missing_train_log(self, artifacts):
        """Test that truncating a log that was never written is a no-op."""
        assert artifacts.truncate_train_log(5) == 0
        assert not artifacts.train_log.exists()
