"""Run configuration: one JSON file mirroring every tunable section."""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .alignment import AlignConfig
from .dataio import PreprocessConfig
from .denoiser import GateConfig
from .evaluation import SyntheticSpec
from .model import ModelConfig
from .trainer import TrainConfig

SEED_ENV = "SEQDN_SEED"
TRAIN_KEYS = (
    "lr", "batch_size", "patience", "max_epochs", "seed", "w_ce", "w_info", "w_recon",
    "disable_info", "disable_recon", "long_only", "short_only",
)


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TrainSection:
    lr: float = 1e-4
    batch_size: int = 32
    patience: int = 10
    max_epochs: int = 100
    seed: int = 0
    w_ce: float = 1.0
    w_info: float = 1.0
    w_recon: float = 1.0
    disable_info: bool = False
    disable_recon: bool = False
    long_only: bool = False
    short_only: bool = False


@dataclass(frozen=True)
class EvalSection:
    bucket_mode: str = "items"
    n_buckets: int = 5

    def __post_init__(self):
        if self.bucket_mode not in ("items", "interactions"):
            raise ConfigError(f"eval.bucket_mode must be items or interactions, got {self.bucket_mode!r}")


@dataclass(frozen=True)
class PathSection:
    split: str | None = None
    semantic: str | None = None
    prefix: str | None = None
    labels: str | None = None


@dataclass(frozen=True)
class SemanticSection:
    prefix_mode: str = "mean_pool_surrogate"


@dataclass(frozen=True)
class RunConfig:
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    align: AlignConfig = field(default_factory=AlignConfig)
    gate: GateConfig = field(default_factory=GateConfig)
    train: TrainSection = field(default_factory=TrainSection)
    synthetic: SyntheticSpec = field(default_factory=SyntheticSpec)
    eval: EvalSection = field(default_factory=EvalSection)
    semantic: SemanticSection = field(default_factory=SemanticSection)
    paths: PathSection = field(default_factory=PathSection)

    def to_dict(self) -> dict:
        return asdict(self)

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()[:16]

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            **{k: getattr(self.train, k) for k in TRAIN_KEYS},
            model=self.model,
            gate=self.gate,
            align=self.align,
        )

    def with_overrides(self, **sections) -> "RunConfig":
        """``with_overrides(gate={"theta": 0.3})``; unknown keys are rejected."""
        out = self
        for name, values in sections.items():
            cur = getattr(out, name)
            _check_keys(type(cur), values, name)
            out = replace(out, **{name: replace(cur, **values)})
        return out


def _check_keys(cls, values: dict, where: str) -> None:
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) in [{where}]: {', '.join(unknown)}")


def from_dict(d: dict) -> RunConfig:
    if not isinstance(d, dict):
        raise ConfigError("config must be a JSON object")
    _check_keys(RunConfig, d, "top level")
    kwargs = {}
    for f in fields(RunConfig):
        section = d.get(f.name, {})
        if not isinstance(section, dict):
            raise ConfigError(f"[{f.name}] must be an object")
        cls = type(f.default_factory())
        _check_keys(cls, section, f.name)
        try:
            kwargs[f.name] = cls(**section)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"[{f.name}]: {exc}") from None
    return RunConfig(**kwargs)


def load_config(path=None, env=None) -> RunConfig:
    """Read a JSON config (or defaults); ``SEQDN_SEED`` fills the seed when the file leaves it unset."""
    env = os.environ if env is None else env
    raw: dict = {}
    if path is not None:
        try:
            raw = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    cfg = from_dict(raw)
    seed_set = "seed" in raw.get("train", {})
    if not seed_set and env.get(SEED_ENV):
        try:
            seed = int(env[SEED_ENV])
        except ValueError:
            raise ConfigError(f"{SEED_ENV} must be an integer") from None
        cfg = cfg.with_overrides(train={"seed": seed})
    return cfg


def write_config(path, cfg: RunConfig) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
