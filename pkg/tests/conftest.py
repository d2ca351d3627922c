"""Shared test fixtures: tiny model configs, seeded parameters and run files."""

import numpy as np
import pytest
import tomli_w

from recurrent_windows.config_provider import MockConfigProvider
from recurrent_windows.core.rng import Rng
from recurrent_windows.core.tensor import Tensor
from recurrent_windows.model import ModelConfig, init_params


@pytest.fixture
def tiny_config():
    """Two layers, k=16, carry inserted at layer 2."""
    return ModelConfig(
        layers=2,
        hidden=16,
        heads=2,
        max_positions=16,
        vocab_size=11,
        insertion_layer=2,
        carry_hidden=8,
        carry_depth=2,
    )


@pytest.fixture
def tiny_params(tiny_config):
    return init_params(tiny_config, Rng(0), recurrent=True)


@pytest.fixture
def perturbed_params(tiny_config, tiny_params):
    """Init params with every entry jittered, so biases, gains and alphas are non-trivial."""
    gen = np.random.default_rng(1234)
    return {
        name: Tensor(p.numpy() + gen.normal(0.0, 0.1, size=p.shape), name=name)
        for name, p in tiny_params.items()
    }


@pytest.fixture
def doc_tokens(tiny_config):
    gen = np.random.default_rng(7)
    return gen.integers(0, tiny_config.vocab_size, size=24).astype(np.int64)


@pytest.fixture
def mock_config_provider(tmp_path):
    """Provider describing a tiny raw-text run rooted at ``tmp_path``."""
    (tmp_path / "train.txt").write_text("the cat sat\n\non the mat\n", encoding="utf-8")
    (tmp_path / "valid.txt").write_text("the mat sat\n", encoding="utf-8")
    return MockConfigProvider(data={
        "": {"seed": 3, "name": "tiny", "output_dir": "out"},
        "model": {"layers": 1, "hidden": 8, "heads": 2, "max_positions": 8, "insertion_layer": 1},
        "train": {"window": 4, "overlap": 1, "epochs": 1, "checkpointing": "full"},
        "data": {"format": "raw-text", "train": "train.txt", "valid": "valid.txt"},
        "eval": [{"window": 4, "overlap": 0, "mode": "baseline"}],
    })


@pytest.fixture
def run_file(tmp_path):
    """Write a tiny raw-text run file and its corpora; returns the TOML path."""
    corpus = tmp_path / "corpus"
    corpus.mkdir()
    (corpus / "train.txt").write_text(
        "a cab sat by a bad cab\n\nbad cats sat by a cab\n\na cat ate a date\n",
        encoding="utf-8",
    )
    (corpus / "valid.txt").write_text("a bad cat sat by a cab\n", encoding="utf-8")
    (corpus / "test.txt").write_text("a cab ate a bad date\n", encoding="utf-8")
    data = {
        "seed": 0,
        "name": "smoke",
        "output_dir": "runs/smoke",
        "model": {
            "layers": 2, "hidden": 8, "heads": 2, "max_positions": 8,
            "insertion_layer": 2, "carry_hidden": 8, "carry_depth": 1,
        },
        "train": {
            "window": 6, "overlap": 0, "windows_per_sequence": 2, "lr": 0.01,
            "warmup_steps": 2, "epochs": 1, "validate_every_tokens": 40,
        },
        "data": {
            "format": "raw-text",
            "train": "corpus/train.txt",
            "valid": "corpus/valid.txt",
            "test": "corpus/test.txt",
        },
        "eval": [
            {"window": 6, "overlap": 0, "mode": "recurrent"},
            {"window": 6, "overlap": 2, "mode": "baseline"},
        ],
    }
    path = tmp_path / "run.toml"
    path.write_text(tomli_w.dumps(data), encoding="utf-8")
    return path
