"""Experiment configuration: nested dataclasses with strict JSON round-tripping."""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, fields

from .data import DatasetSpec
from .losses import LossWeights

CONFIG_VERSION = 1
REGULARIZERS = ("none", "partmix", "partmix_no_mining", "intra_only", "inter_only",
                "mixup", "manifold_mixup", "cutmix")


class ConfigError(ValueError):
    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


@dataclass(frozen=True)
class ModelConfig:
    C_f: int = 16
    M: int = 6


@dataclass(frozen=True)
class MixConfig:
    B: int = 2
    U: int = 16
    Q: int = 64


@dataclass(frozen=True)
class MiningConfig:
    U_prime: int = 2
    Q_prime: int = 20


@dataclass(frozen=True)
class LossConfig:
    tau: float = 0.1
    rho: float = 1.0
    weights: LossWeights = field(default_factory=LossWeights)
    ema_momentum: float = 0.9


@dataclass(frozen=True)
class OptimizerConfig:
    lr: float = 0.03
    decay_epochs: tuple[int, ...] = (30,)
    decay_factor: float = 0.1


@dataclass(frozen=True)
class ScheduleConfig:
    warmup_epochs: int = 20
    total_epochs: int = 40


@dataclass(frozen=True)
class BatchConfig:
    P: int = 16
    K: int = 8


@dataclass(frozen=True)
class ExperimentConfig:
    version: int = CONFIG_VERSION
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    model: ModelConfig = field(default_factory=ModelConfig)
    mix: MixConfig = field(default_factory=MixConfig)
    mining: MiningConfig = field(default_factory=MiningConfig)
    losses: LossConfig = field(default_factory=LossConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    batch: BatchConfig = field(default_factory=BatchConfig)
    regularizer: str = "partmix"
    mix_alpha: float = 1.0
    seed: int = 0
    data_seed: int | None = None

    def validate(self) -> "ExperimentConfig":
        def need(cond, path, msg):
            if not cond:
                raise ConfigError(path, msg)

        need(self.version == CONFIG_VERSION, "version", f"expected {CONFIG_VERSION}")
        try:
            self.dataset.validate()
        except ValueError as e:
            raise ConfigError("dataset", str(e)) from None
        need(self.model.C_f >= 1, "model.C_f", "must be >= 1")
        need(self.model.M >= 1, "model.M", "must be >= 1")
        need(0 <= self.mix.B <= self.model.M, "mix.B", f"must lie in [0, M={self.model.M}]")
        need(self.mix.U >= 1, "mix.U", "must be >= 1")
        need(self.mix.Q >= 1, "mix.Q", "must be >= 1")
        need(self.mining.U_prime >= 1, "mining.U_prime", "must be >= 1")
        need(self.mining.Q_prime >= 1, "mining.Q_prime", "must be >= 1")
        need(self.losses.tau > 0, "losses.tau", "must be > 0")
        need(self.losses.rho >= 0, "losses.rho", "must be >= 0")
        need(0 <= self.losses.ema_momentum < 1, "losses.ema_momentum", "must lie in [0, 1)")
        need(self.optimizer.lr > 0, "optimizer.lr", "must be > 0")
        need(0 < self.optimizer.decay_factor <= 1, "optimizer.decay_factor", "must lie in (0, 1]")
        need(0 <= self.schedule.warmup_epochs <= self.schedule.total_epochs,
             "schedule.warmup_epochs", "must lie in [0, total_epochs]")
        need(self.batch.P >= 2, "batch.P", "must be >= 2")
        need(self.batch.K >= 2 and self.batch.K % 2 == 0, "batch.K", "must be even and >= 2")
        need(self.regularizer in REGULARIZERS, "regularizer",
             f"{self.regularizer!r} not in {REGULARIZERS}")
        need(self.mix_alpha > 0, "mix_alpha", "must be > 0")
        return self

    def replace(self, **changes) -> "ExperimentConfig":
        """Copy with changes; dotted keys reach into sections (``"mix.B"``)."""
        cfg = self
        for key, value in changes.items():
            cfg = _replace_path(cfg, key.split("."), value)
        return cfg

    def to_dict(self) -> dict:
        return _to_plain(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def hash(self) -> str:
        canon = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()[:16]

    @property
    def data_stream_seed(self) -> int:
        return self.seed if self.data_seed is None else self.data_seed

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        return _from_plain(cls, d, "").validate()

    @classmethod
    def from_json(cls, text: str) -> "ExperimentConfig":
        return cls.from_dict(json.loads(text))

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        with open(path) as fh:
            return cls.from_json(fh.read())


def long_schedule() -> ExperimentConfig:
    """Warm-up 20 epochs then 100 more; decay x0.1 at epochs 80 and 120 (counted from the start)."""
    return ExperimentConfig(
        optimizer=OptimizerConfig(lr=3.5e-4, decay_epochs=(80, 120), decay_factor=0.1),
        schedule=ScheduleConfig(warmup_epochs=20, total_epochs=120),
    )


def _replace_path(obj, path, value):
    head, rest = path[0], path[1:]
    if not dataclasses.is_dataclass(obj) or head not in {f.name for f in fields(obj)}:
        raise ConfigError(head, "unknown key")
    new = value if not rest else _replace_path(getattr(obj, head), rest, value)
    return dataclasses.replace(obj, **{head: new})


def _to_plain(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _to_plain(getattr(obj, f.name)) for f in fields(obj)}
    if isinstance(obj, tuple):
        return [_to_plain(v) for v in obj]
    return obj


def _from_plain(cls, data, prefix):
    if not isinstance(data, dict):
        raise ConfigError(prefix or "<root>", "expected an object")
    known = {f.name: f for f in fields(cls)}
    for key in data:
        if key not in known:
            raise ConfigError(f"{prefix}{key}", "unknown key")
    kwargs = {}
    defaults = cls()
    for name, value in data.items():
        path = f"{prefix}{name}"
        current = getattr(defaults, name)
        if dataclasses.is_dataclass(current):
            kwargs[name] = _from_plain(type(current), value, path + ".")
        elif isinstance(current, tuple):
            if not isinstance(value, list):
                raise ConfigError(path, "expected a list")
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = _coerce(current, value, path)
    try:
        return cls(**kwargs)
    except ValueError as e:
        raise ConfigError(prefix.rstrip(".") or "<root>", str(e)) from None


def _coerce(current, value, path):
    if isinstance(current, bool):
        ok = isinstance(value, bool)
    elif isinstance(current, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(current, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    elif isinstance(current, str):
        ok = isinstance(value, str)
    elif current is None:
        ok = value is None or (isinstance(value, int) and not isinstance(value, bool))
    else:
        ok = True
    if not ok:
        raise ConfigError(path, f"wrong type {type(value).__name__}")
    return value
