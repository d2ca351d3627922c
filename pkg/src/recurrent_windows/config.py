"""Run configuration for recurrent-windows.

Loads a TOML run file from, in order:
1. an explicit path (``--config``)
2. ./recurrent-windows.toml (working directory)
3. $XDG_CONFIG_HOME/recurrent-windows/run.toml

Layout:
    seed = 0
    output_dir = "runs/smoke"
    name = "smoke"

    [model]   layers, hidden, heads, max_positions, vocab_size (optional,
              derived from the training corpus when absent), insertion_layer,
              ffn_mult, carry_hidden, carry_depth, layernorm_eps,
              gelu = "exact" | "tanh", pooling = "mean" | "sum", mask_carry
    [train]   window, overlap, windows_per_sequence, lr, warmup_steps, epochs,
              validate_every_tokens, checkpointing = "full" | "bottleneck",
              recurrent, grad_clip, batch_size, max_steps, record_wallclock, resume
    [data]    format = "raw-text" | "token-binary", train, valid, test
    [[eval]]  window, overlap, mode = "baseline" | "recurrent"

Command-line flags override file values; RECURRENT_WINDOWS_OUTPUT_DIR
overrides ``output_dir`` from the file.
"""

import logging
import os
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, Optional

try:
    import tomllib
except ImportError:
    import tomli as tomllib  # type: ignore

from .config_provider import ConfigProvider
from .corpus import CorpusFormat
from .errors import ConfigError
from .model import ModelConfig
from .training import TrainConfig
from .windowing import ExecutionMode

logger = logging.getLogger(__name__)

CONFIG_FILENAME = "recurrent-windows.toml"
OUTPUT_DIR_ENV = "RECURRENT_WINDOWS_OUTPUT_DIR"

_MODEL_KEYS = {f.name for f in fields(ModelConfig)} | {"gelu"}
_TRAIN_KEYS = {f.name for f in fields(TrainConfig)} | {"resume"}


class Config:
    """TOML run-file loader."""

    def __init__(self, config_path: Optional[Path] = None):
        """Initialize config from file.

        Args:
            config_path: Optional explicit path to the run file

        Raises:
            ConfigError: If no run file is found or it is not valid TOML
        """
        self.config_path = Path(config_path) if config_path else self._find_config_file()
        self.data: Dict[str, Any] = {}

        if self.config_path and self.config_path.exists():
            self._load_from_file(self.config_path)
        else:
            where = self.config_path or f"./{CONFIG_FILENAME}"
            logger.error(f"Run config not found: {where}")
            raise ConfigError(f"Run config not found: {where}", [f"config: {where} does not exist"])

    @staticmethod
    def _find_config_file() -> Optional[Path]:
        local = Path.cwd() / CONFIG_FILENAME
        if local.exists():
            logger.info(f"Using run config: {local}")
            return local

        xdg_config = os.getenv("XDG_CONFIG_HOME")
        if xdg_config:
            xdg_path = Path(xdg_config) / "recurrent-windows" / "run.toml"
            if xdg_path.exists():
                logger.info(f"Using XDG run config: {xdg_path}")
                return xdg_path

        return None

    def _load_from_file(self, path: Path) -> None:
        try:
            with open(path, "rb") as f:
                self.data = tomllib.load(f)
        except tomllib.TOMLDecodeError as e:
            logger.error(f"Failed to parse {path}: {e}")
            raise ConfigError(f"{path}: {e}", [f"config: {e}"]) from e
        logger.info(f"Loaded config from {path}")

    def get(self, section: str, key: str, default: Any = None) -> Any:
        """Get config value.

        Args:
            section: Section name (e.g., 'model', 'train'); "" for top-level keys
            key: Key name
            default: Default value if not found
        """
        if not section:
            return self.data.get(key, default)
        return self.data.get(section, {}).get(key, default)

    def get_section(self, section: str) -> Any:
        """Get an entire section (a dict, or a list for ``[[eval]]``)."""
        return self.data.get(section, {})

    @property
    def base_dir(self) -> Path:
        return self.config_path.parent if self.config_path else Path.cwd()


@dataclass
class EvalSpec:
    window: int
    overlap: int
    mode: ExecutionMode

    def to_dict(self) -> dict:
        return {"window": self.window, "overlap": self.overlap, "mode": self.mode.value}


@dataclass
class DataConfig:
    format: CorpusFormat = CorpusFormat.RAW_TEXT
    train: Optional[Path] = None
    valid: Optional[Path] = None
    test: Optional[Path] = None

    def to_dict(self) -> dict:
        out: dict[str, Any] = {"format": self.format.value}
        for name in ("train", "valid", "test"):
            value = getattr(self, name)
            if value is not None:
                out[name] = str(value)
        return out


@dataclass
class RunConfig:
    """Resolved run: model + training protocol + evaluation grid + paths."""

    model: dict[str, Any]
    train: TrainConfig
    data: DataConfig
    eval: list[EvalSpec] = field(default_factory=list)
    seed: int = 0
    output_dir: Path = Path("runs/default")
    name: str = "run"
    resume: bool = False

    def model_config(self, vocab_size: Optional[int] = None) -> ModelConfig:
        """Build the ModelConfig, filling ``vocab_size`` from the corpus when not pinned."""
        values = dict(self.model)
        if vocab_size is not None and not values.get("vocab_size"):
            values["vocab_size"] = vocab_size
        if not values.get("vocab_size"):
            raise ConfigError("model.vocab_size: unknown until the corpus is loaded", [])
        try:
            return ModelConfig(**values)
        except TypeError as e:
            raise ConfigError(f"model: {e}", [f"model: {e}"]) from e

    def validate(self, check_paths: bool = True) -> tuple[bool, list[str]]:
        """Validate field values and (optionally) that data paths exist.

        Returns:
            (is_valid, list_of_errors), errors formatted as ``section.field: message``
        """
        errors: list[str] = []
        candidate = dict(self.model)
        candidate["vocab_size"] = candidate.get("vocab_size") or 2
        try:
            errors.extend(ModelConfig(**candidate).validate())
        except ConfigError as e:
            errors.extend(e.errors)
        except TypeError as e:
            errors.append(f"model: {e}")
        errors.extend(self.train.validate())
        max_positions = self.model.get("max_positions", 0)
        if self.train.window > max_positions:
            errors.append(f"train.window: {self.train.window} exceeds model.max_positions={max_positions}")

        if check_paths:
            for name in ("train", "valid"):
                path = getattr(self.data, name)
                if path is None:
                    errors.append(f"data.{name}: missing")
                elif not path.exists():
                    errors.append(f"data.{name}: {path} does not exist")
            if self.data.test is not None and not self.data.test.exists():
                errors.append(f"data.test: {self.data.test} does not exist")

        for i, spec in enumerate(self.eval):
            if not 0 <= spec.overlap < spec.window:
                errors.append(f"eval[{i}].overlap: {spec.overlap} must lie in 0..{spec.window - 1}")
            if spec.window > max_positions:
                errors.append(f"eval[{i}].window: {spec.window} exceeds model.max_positions")
        if not 0 <= self.seed < 2**64:
            errors.append("seed: must be a 64-bit unsigned integer")
        return len(errors) == 0, errors

    def to_dict(self, vocab_size: Optional[int] = None) -> dict:
        """Plain-TOML view (for writing the resolved ``run.toml``)."""
        model = {k: v for k, v in self.model.items() if v is not None}
        if vocab_size is not None:
            model["vocab_size"] = vocab_size
        model["gelu"] = "tanh" if model.pop("gelu_approximate", False) else "exact"
        train = {
            f.name: getattr(self.train, f.name)
            for f in fields(TrainConfig)
            if getattr(self.train, f.name) is not None
        }
        train["checkpointing"] = self.train.checkpointing.value
        train["resume"] = self.resume
        return {
            "name": self.name,
            "seed": self.seed,
            "output_dir": str(self.output_dir),
            "model": model,
            "train": train,
            "data": self.data.to_dict(),
            "eval": [spec.to_dict() for spec in self.eval],
        }

    @classmethod
    def from_provider(
        cls,
        provider: ConfigProvider,
        base_dir: Optional[Path] = None,
        overrides: Optional[dict[str, Any]] = None,
    ) -> "RunConfig":
        """Build a RunConfig from a provider, applying env and flag overrides.

        Raises:
            ConfigError: Unknown keys or values of the wrong type
        """
        base_dir = base_dir or Path.cwd()
        overrides = {k: v for k, v in (overrides or {}).items() if v is not None}
        errors: list[str] = []

        model = dict(provider.get_section("model"))
        for key in sorted(set(model) - _MODEL_KEYS):
            errors.append(f"model.{key}: unknown field")
        gelu = model.pop("gelu", "exact")
        if gelu not in ("exact", "tanh"):
            errors.append(f"model.gelu: {gelu!r} is not 'exact' or 'tanh'")
        model["gelu_approximate"] = gelu == "tanh"
        model = {k: v for k, v in model.items() if k in _MODEL_KEYS}

        train_values = dict(provider.get_section("train"))
        for key in sorted(set(train_values) - _TRAIN_KEYS):
            errors.append(f"train.{key}: unknown field")
        resume = bool(train_values.pop("resume", False))
        train_values = {k: v for k, v in train_values.items() if k in _TRAIN_KEYS}
        seed = overrides.get("seed", provider.get("", "seed", 0))
        train_values["seed"] = seed
        for key in ("epochs", "lr"):
            if key in overrides:
                train_values[key] = overrides[key]
        try:
            train = TrainConfig(**train_values)
        except (TypeError, ValueError) as e:
            errors.append(f"train: {e}")
            train = TrainConfig()

        data_section = provider.get_section("data")
        try:
            data = DataConfig(
                format=CorpusFormat(data_section.get("format", CorpusFormat.RAW_TEXT.value)),
                **{
                    name: _resolve(base_dir, data_section.get(name))
                    for name in ("train", "valid", "test")
                },
            )
        except ValueError as e:
            errors.append(f"data.format: {e}")
            data = DataConfig()

        evals = []
        for i, entry in enumerate(provider.get_section("eval") or []):
            try:
                evals.append(
                    EvalSpec(
                        window=int(entry["window"]),
                        overlap=int(entry.get("overlap", 0)),
                        mode=ExecutionMode(entry.get("mode", "recurrent")),
                    )
                )
            except (KeyError, ValueError) as e:
                errors.append(f"eval[{i}]: {e}")

        output_dir = (
            overrides.get("output_dir")
            or os.getenv(OUTPUT_DIR_ENV)
            or provider.get("", "output_dir", "runs/default")
        )
        if errors:
            raise ConfigError("Invalid run config:\n  " + "\n  ".join(errors), errors)
        return cls(
            model=model,
            train=train,
            data=data,
            eval=evals,
            seed=int(seed),
            output_dir=_resolve(base_dir, output_dir),
            name=str(provider.get("", "name", "run")),
            resume=resume,
        )


def _resolve(base_dir: Path, value: Optional[str]) -> Optional[Path]:
    if value is None:
        return None
    path = Path(value).expanduser()
    return path if path.is_absolute() else base_dir / path


def load_run_config(
    config_path: Optional[Path] = None,
    overrides: Optional[dict[str, Any]] = None,
    check_paths: bool = True,
) -> RunConfig:
    """Load, resolve and validate a run file.

    Raises:
        ConfigError: Missing/unparsable file or any validation failure
    """
    from .config_provider import TomlConfigProvider

    provider = TomlConfigProvider(config_path)
    run = RunConfig.from_provider(provider, provider.config.base_dir, overrides)
    is_valid, errors = run.validate(check_paths=check_paths)
    if not is_valid:
        for error in errors:
            logger.error(f"Config error: {error}")
        raise ConfigError("Invalid run config:\n  " + "\n  ".join(errors), errors)
    return run
