"""Run directory layout.

    <output_dir>/run.toml          resolved run config (+ [vocab] for char corpora)
    <output_dir>/best.ckpt         parameters with the lowest validation loss
    <output_dir>/last.ckpt         parameters, Adam moments and loop state for resume
    <output_dir>/train_log.jsonl   one record per optimizer step
    <output_dir>/ledger.db         run ledger (see models.py)
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional

try:
    import tomllib
except ImportError:
    import tomli as tomllib  # type: ignore

import numpy as np
import tomli_w

from .core.optim import Adam
from .core.serialization import load_checkpoint, save_checkpoint
from .corpus import CharVocab
from .errors import CheckpointError, ConfigError
from .model import ModelConfig, Params
from .training import LoopState, TrainRecord, param_arrays, params_from_arrays

logger = logging.getLogger(__name__)

BEST_PREFIX = "best."


@dataclass
class RunArtifacts:
    output_dir: Path

    def __post_init__(self):
        self.output_dir = Path(self.output_dir)

    @property
    def run_toml(self) -> Path:
        return self.output_dir / "run.toml"

    @property
    def best_ckpt(self) -> Path:
        return self.output_dir / "best.ckpt"

    @property
    def last_ckpt(self) -> Path:
        return self.output_dir / "last.ckpt"

    @property
    def train_log(self) -> Path:
        return self.output_dir / "train_log.jsonl"

    def ensure(self) -> None:
        self.output_dir.mkdir(parents=True, exist_ok=True)

    # --- Config ---

    def write_run_config(self, resolved: dict, vocab: Optional[CharVocab] = None) -> str:
        """Write ``run.toml``; returns the TOML text (also stored in the ledger)."""
        self.ensure()
        data = dict(resolved)
        if vocab is not None:
            data["vocab"] = {"chars": "".join(vocab.chars)}
        text = tomli_w.dumps(data)
        self.run_toml.write_text(text, encoding="utf-8")
        logger.info(f"Wrote resolved config to {self.run_toml}")
        return text

    def read_run_config(self) -> dict:
        try:
            with open(self.run_toml, "rb") as f:
                return tomllib.load(f)
        except FileNotFoundError as e:
            raise CheckpointError(f"No run.toml next to the checkpoint in {self.output_dir}") from e
        except tomllib.TOMLDecodeError as e:
            raise ConfigError(f"{self.run_toml}: {e}", [f"config: {e}"]) from e

    def load_model_config(self) -> tuple[ModelConfig, Optional[CharVocab]]:
        """ModelConfig and char vocabulary recorded by a training run."""
        data = self.read_run_config()
        model = dict(data.get("model", {}))
        model["gelu_approximate"] = model.pop("gelu", "exact") == "tanh"
        try:
            config = ModelConfig(**model)
        except TypeError as e:
            raise ConfigError(f"{self.run_toml}: model: {e}", [f"model: {e}"]) from e
        chars = data.get("vocab", {}).get("chars")
        return config, CharVocab(chars) if chars is not None else None

    # --- Checkpoints ---

    def save_params(self, path: Path, params: Params) -> None:
        save_checkpoint(path, param_arrays(params))
        logger.info(f"Saved {len(params)} parameter arrays to {path}")

    def save_training_state(
        self, params: Params, optimizer: Adam, state: LoopState, best: Params
    ) -> None:
        arrays = dict(param_arrays(params))
        arrays.update(optimizer.state_arrays())
        arrays.update(state.to_arrays())
        arrays.update({BEST_PREFIX + name: p.numpy() for name, p in best.items()})
        save_checkpoint(self.last_ckpt, arrays)
        logger.debug(f"Saved resume state at step {state.step} to {self.last_ckpt}")

    def load_training_state(
        self, config: ModelConfig, recurrent: bool
    ) -> tuple[Params, Adam, LoopState, Params]:
        arrays = load_checkpoint(self.last_ckpt)
        expected = config.parameter_shapes(recurrent)
        params = _checked_params(arrays, expected, self.last_ckpt)
        best = _checked_params(
            {k[len(BEST_PREFIX):]: v for k, v in arrays.items() if k.startswith(BEST_PREFIX)},
            expected,
            self.last_ckpt,
        )
        optimizer = Adam()
        optimizer.load_state_arrays({k: v for k, v in arrays.items() if k.startswith("adam.")})
        state = LoopState.from_arrays(arrays)
        logger.info(f"Resuming from step {state.step} (epoch {state.epoch}, doc {state.doc_cursor})")
        return params, optimizer, state, best

    # --- Log ---

    def append_train_log(self, records: Iterable[TrainRecord]) -> None:
        self.ensure()
        with open(self.train_log, "a", encoding="utf-8") as f:
            for record in records:
                f.write(json.dumps(record.to_dict()) + "\n")

    def read_train_log(self) -> list[dict]:
        if not self.train_log.exists():
            return []
        with open(self.train_log, encoding="utf-8") as f:
            return [json.loads(line) for line in f if line.strip()]

    def truncate_train_log(self, step: int) -> int:
        """Drop log records past ``step``; returns how many were dropped."""
        records = self.read_train_log()
        kept = [r for r in records if r["step"] <= step]
        if len(kept) == len(records):
            return 0
        with open(self.train_log, "w", encoding="utf-8") as f:
            for record in kept:
                f.write(json.dumps(record) + "\n")
        dropped = len(records) - len(kept)
        logger.info(f"Dropped {dropped} train log records past step {step}")
        return dropped


def _checked_params(arrays: dict, expected: dict[str, tuple[int, ...]], path: Path) -> Params:
    missing = sorted(set(expected) - set(arrays))
    if missing:
        raise CheckpointError(f"{path}: missing parameters {missing[:5]}")
    for name, shape in expected.items():
        if tuple(arrays[name].shape) != tuple(shape):
            raise CheckpointError(
                f"{path}: parameter {name} has shape {arrays[name].shape}, config expects {shape}"
            )
    return params_from_arrays({name: np.asarray(arrays[name]) for name in expected})


def load_params(path: Path, config: ModelConfig, recurrent: bool) -> Params:
    """Load and shape-check model parameters from a checkpoint.

    Raises:
        CheckpointError: Unreadable file, or parameters disagree with ``config``
    """
    arrays = load_checkpoint(path)
    params = _checked_params(arrays, config.parameter_shapes(recurrent), Path(path))
    logger.info(f"Loaded {len(params)} parameter arrays from {path}")
    return params


def has_recurrence(path: Path) -> bool:
    """Whether a checkpoint carries recurrence.* parameters."""
    return any(name.startswith("recurrence.") for name in load_checkpoint(path))
