"""
Run configuration.

Layers, lowest to highest precedence:
1. field defaults
2. the TOML file passed with -c/--config
3. PUDDING_* environment variables (a .env file is loaded first by the CLI);
   nested fields use a double underscore, e.g. PUDDING_TRAIN__EPOCHS=3
4. command-line flags

Relative paths are resolved against the TOML file's directory.
"""

import hashlib
import logging
import tomllib
from pathlib import Path
from typing import Any, Literal

import pydantic
from pydantic import BaseModel, ConfigDict, Field
from pydantic_settings import (
    BaseSettings,
    PydanticBaseSettingsSource,
    SettingsConfigDict,
)

from errors import ConfigError
from models.tokenizer import TokenizerKind
from routing.router_model import RouterArch
from routing.training import TrainConfig
from scoring.losses import Criterion

logger = logging.getLogger(__name__)

SEED_STREAMS = ("search", "split", "train", "bench", "toy")


def derive_seed(seed: int, stream: str) -> int:
    """
    Independent sub-seed for one pipeline stage.

    Example:
        >>> derive_seed(0, "train") != derive_seed(0, "split")
        True
    """
    digest = hashlib.sha256(f"{seed}:{stream}".encode()).digest()
    return int.from_bytes(digest[:8], "little") % (2**63)


class DatasetSpec(BaseModel):
    """A named JSONL file of prompt/answer pairs."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    name: str
    path: Path


class BenchConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    repetitions: int = Field(default=5, ge=5)
    prompt_lengths: list[int] = Field(default_factory=lambda: [16, 64])
    gen_lengths: list[int] = Field(default_factory=lambda: [1, 16])
    pool_sizes: list[int] = Field(default_factory=lambda: [1, 2, 4])
    metric: Literal["tl", "accuracy"] = "tl"
    speedup: bool = True
    compare: bool = True
    heatmap: bool = True
    pool_size_ablation: bool = False
    training_loss_ablation: bool = False
    agreement: bool = False
    agreement_models: int = Field(default=20, gt=0)


class RunConfig(BaseSettings):
    """Everything one `pudding` invocation needs."""

    model_config = SettingsConfigDict(
        env_prefix="PUDDING_",
        env_nested_delimiter="__",
        extra="forbid",
        protected_namespaces=(),
    )

    model_path: Path | None = None
    tokenizer: TokenizerKind = TokenizerKind.IDS
    vocab_path: Path | None = None
    datasets: list[DatasetSpec] = Field(default_factory=list)
    router_datasets: list[DatasetSpec] | None = None
    eval_datasets: list[DatasetSpec] | None = None
    prompts_path: Path | None = None
    criteria: list[Criterion] = Field(
        default_factory=lambda: [Criterion.TL, Criterion.TLD]
    )
    k: int = Field(default=1, ge=0)
    pool_path: Path | None = None
    router_dataset_path: Path | None = None
    router_path: Path | None = None
    train: TrainConfig = Field(default_factory=TrainConfig)
    router: RouterArch = Field(default_factory=RouterArch)
    label_criterion: Criterion = Criterion.TL
    val_fraction: float = Field(default=0.1, ge=0.0, lt=1.0)
    calibration_samples: int | None = Field(default=128, gt=0)
    two_pass: bool = False
    max_new_tokens: int = Field(default=16, ge=0)
    memory_cap: bool = True
    use_cache: bool = False
    bench: BenchConfig = Field(default_factory=BenchConfig)
    seed: int = 0
    threads: int | None = Field(default=None, gt=0)
    out_dir: Path = Path("out")

    @classmethod
    def settings_customise_sources(
        cls,
        settings_cls: type[BaseSettings],
        init_settings: PydanticBaseSettingsSource,
        env_settings: PydanticBaseSettingsSource,
        dotenv_settings: PydanticBaseSettingsSource,
        file_secret_settings: PydanticBaseSettingsSource,
    ) -> tuple[PydanticBaseSettingsSource, ...]:
        # TOML values arrive as init kwargs and must lose to the environment.
        return env_settings, dotenv_settings, init_settings

    @property
    def pool_file(self) -> Path:
        return self.pool_path or self.out_dir / "pool.json"

    @property
    def router_dataset_file(self) -> Path:
        return self.router_dataset_path or self.out_dir / "router_dataset.jsonl"

    @property
    def router_file(self) -> Path:
        return self.router_path or self.out_dir / "router.pudr"

    def router_dataset_specs(self) -> list[DatasetSpec]:
        return self.router_datasets if self.router_datasets is not None else self.datasets

    def eval_dataset_specs(self) -> list[DatasetSpec]:
        return self.eval_datasets if self.eval_datasets is not None else self.datasets

    def resolve_paths(self, base: Path) -> "RunConfig":
        """Copy with every relative path anchored at ``base``."""

        def anchor(p: Path | None) -> Path | None:
            if p is None or p.is_absolute():
                return p
            return base / p

        def anchor_specs(specs: list[DatasetSpec] | None) -> list[DatasetSpec] | None:
            if specs is None:
                return None
            return [
                s if s.path.is_absolute() else DatasetSpec(name=s.name, path=base / s.path)
                for s in specs
            ]

        return self.model_copy(
            update={
                "model_path": anchor(self.model_path),
                "vocab_path": anchor(self.vocab_path),
                "prompts_path": anchor(self.prompts_path),
                "pool_path": anchor(self.pool_path),
                "router_dataset_path": anchor(self.router_dataset_path),
                "router_path": anchor(self.router_path),
                "out_dir": anchor(self.out_dir),
                "datasets": anchor_specs(self.datasets),
                "router_datasets": anchor_specs(self.router_datasets),
                "eval_datasets": anchor_specs(self.eval_datasets),
            }
        )

    def seed_for(self, stream: str) -> int:
        if stream not in SEED_STREAMS:
            raise ConfigError(f"Unknown seed stream '{stream}'")
        return derive_seed(self.seed, stream)


def _deep_merge(base: dict[str, Any], overrides: dict[str, Any]) -> dict[str, Any]:
    merged = dict(base)
    for key, value in overrides.items():
        if value is None:
            continue
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _deep_merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def load_config(
    path: str | Path | None = None, overrides: dict[str, Any] | None = None
) -> RunConfig:
    """
    Build a RunConfig from TOML, environment and CLI overrides.

    Args:
        path: TOML file; None uses defaults and the environment only
        overrides: CLI values (None entries are ignored; nested dicts merge)

    Returns:
        Validated RunConfig with paths resolved

    Raises:
        ConfigError: If the file is missing, unparsable or fails validation
    """
    raw: dict[str, Any] = {}
    base = Path.cwd()
    if path is not None:
        source = Path(path)
        if not source.is_file():
            raise ConfigError(f"Config file not found: {source}")
        try:
            raw = tomllib.loads(source.read_text(encoding="utf-8"))
        except tomllib.TOMLDecodeError as e:
            raise ConfigError(f"Invalid TOML in {source}: {e}") from e
        base = source.resolve().parent

    try:
        config = RunConfig(**raw)
        if overrides:
            merged = _deep_merge(config.model_dump(), overrides)
            config = RunConfig.model_validate(merged)
    except pydantic.ValidationError as e:
        raise ConfigError(f"Invalid configuration:\n{e}") from e

    logger.debug(f"Loaded config from {path or 'defaults'}")
    return config.resolve_paths(base)


def require_paths(**paths: Path | None) -> None:
    """
    Raises:
        ConfigError: Naming every path that is unset or does not exist
    """
    problems = []
    for name, value in paths.items():
        if value is None:
            problems.append(f"{name} is not set")
        elif not value.exists():
            problems.append(f"{name} does not exist: {value}")
    if problems:
        raise ConfigError("; ".join(problems))
