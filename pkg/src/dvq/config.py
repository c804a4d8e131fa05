"""Run configuration blocks with strict (unknown-key rejecting) parsing."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .adaptive import QUERY_ACTS, BottleneckSpec

FORMAT_VERSION = 1
MODES = ("none", "continuous", "fixed", "flat", "hierarchical")
TASKS = ("attribute", "referential")


class ConfigError(ValueError):
    """A configuration value is missing, malformed or inconsistent."""


@dataclass
class TaskConfig:
    kind: str = "attribute"
    A: int = 8
    V: int = 8
    complexity_set: list[int] = field(default_factory=lambda: [1, 2, 4])
    sizes: list[int] = field(default_factory=lambda: [2048, 512, 512])
    noise_sigma: float = 0.1
    distractors: int = 3
    seed: int = 0

    def validate(self):
        if self.kind not in TASKS:
            raise ConfigError(f"task.kind must be one of {TASKS}, got {self.kind!r}")
        if self.A < 1 or self.V < 1 or self.A * self.V > 256:
            raise ConfigError(f"task.A*task.V must be in [1, 256], got A={self.A}, V={self.V}")
        if not self.complexity_set or any(k < 1 or k > self.A for k in self.complexity_set):
            raise ConfigError(f"task.complexity_set entries must lie in [1, A={self.A}]")
        if len(self.sizes) != 3 or any(s < 1 for s in self.sizes):
            raise ConfigError("task.sizes must be three positive split sizes [train, val, test]")
        if self.noise_sigma < 0:
            raise ConfigError("task.noise_sigma must be >= 0")
        if self.distractors < 0:
            raise ConfigError("task.distractors must be >= 0")


@dataclass
class BranchConfig:
    G: int
    L: int = 16
    continuous: bool = False

    def to_spec(self) -> BottleneckSpec:
        return BottleneckSpec.continuous(self.G) if self.continuous else BottleneckSpec(self.G, self.L)


@dataclass
class ModelConfig:
    hidden: int = 64
    m: int = 16
    mode: str = "flat"
    branches: list[BranchConfig] = field(default_factory=lambda: [
        BranchConfig(1, 16), BranchConfig(2, 64), BranchConfig(4, 256)])
    query_dim: int = 32
    alpha: float = 1.0
    beta_commit: float = 0.25
    beta_cap: float = 0.7
    tau: float = 1.0
    tau_final: float | None = None
    select_warmup: int = 60
    detach_query: bool = True
    refresh_idle: bool = False
    query_act: str = "relu"
    message_dim: int = 16

    def validate(self):
        if self.mode not in MODES:
            raise ConfigError(f"model.mode must be one of {MODES}, got {self.mode!r}")
        if self.hidden < 1 or self.m < 1 or self.query_dim < 1 or self.message_dim < 1:
            raise ConfigError("model widths must be positive")
        if self.mode in ("fixed", "flat", "hierarchical") and not self.branches:
            raise ConfigError(f"model.branches must be non-empty for mode={self.mode}")
        for i, b in enumerate(self.branches):
            if b.G < 1 or b.L < 1:
                raise ConfigError(f"model.branches[{i}]: G and L must be positive")
            if self.m % b.G:
                raise ConfigError(f"model.branches[{i}]: G={b.G} must divide m={self.m} (divisibility rule)")
        if self.mode == "fixed" and self.branches[0].continuous:
            raise ConfigError("model.branches[0] must be discrete for mode=fixed")
        if self.mode == "hierarchical" and all(b.continuous for b in self.branches):
            raise ConfigError("hierarchical mode needs at least one discrete branch")
        if self.alpha < 0 or self.beta_cap < 0 or self.beta_commit < 0:
            raise ConfigError("model.alpha, model.beta_commit and model.beta_cap must be >= 0")
        if self.select_warmup < 0:
            raise ConfigError("model.select_warmup must be >= 0")
        if self.query_act not in QUERY_ACTS:
            raise ConfigError(f"model.query_act must be one of {QUERY_ACTS}, got {self.query_act!r}")
        if self.tau <= 0 or (self.tau_final is not None and self.tau_final <= 0):
            raise ConfigError("model.tau and model.tau_final must be positive")

    def specs(self) -> list[BottleneckSpec]:
        if self.mode == "continuous":
            cont = [b for b in self.branches if b.continuous]
            return [cont[0].to_spec() if cont else BottleneckSpec.continuous(1)]
        if self.mode == "fixed":
            return [self.branches[0].to_spec()]
        return [b.to_spec() for b in self.branches]


@dataclass
class OptimConfig:
    lr: float = 0.05
    momentum: float = 0.0
    epochs: int = 200
    batch_size: int = 32
    kmeans_iter: int = 50

    def validate(self):
        if self.lr <= 0:
            raise ConfigError("optim.lr must be positive")
        if not 0 <= self.momentum < 1:
            raise ConfigError("optim.momentum must lie in [0, 1)")
        if self.epochs < 1 or self.batch_size < 1 or self.kmeans_iter < 1:
            raise ConfigError("optim.epochs, optim.batch_size and optim.kmeans_iter must be >= 1")


@dataclass
class OutputConfig:
    dir: str = "runs/default"
    formats: list[str] = field(default_factory=lambda: ["json", "csv"])

    def validate(self):
        bad = set(self.formats) - {"json", "csv"}
        if bad:
            raise ConfigError(f"output.formats: unsupported {sorted(bad)}")


@dataclass
class RunConfig:
    task: TaskConfig = field(default_factory=TaskConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    output: OutputConfig = field(default_factory=OutputConfig)

    def validate(self) -> "RunConfig":
        self.task.validate()
        self.model.validate()
        self.optim.validate()
        self.output.validate()
        return self

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["format_version"] = FORMAT_VERSION
        return d


def _build(cls, data, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where} must be an object")
    names = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(names)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    kwargs = {}
    for key, val in data.items():
        if cls is ModelConfig and key == "branches":
            if not isinstance(val, list):
                raise ConfigError(f"{where}.branches must be a list")
            val = [_build(BranchConfig, b, f"{where}.branches[{i}]") for i, b in enumerate(val)]
        kwargs[key] = val
    try:
        return cls(**kwargs)
    except TypeError as err:
        raise ConfigError(f"{where}: {err}") from err


def config_from_dict(d: dict) -> RunConfig:
    if not isinstance(d, dict):
        raise ConfigError("config must be a JSON object")
    d = dict(d)
    version = d.pop("format_version", FORMAT_VERSION)
    if version != FORMAT_VERSION:
        raise ConfigError(f"format_version {version} not supported (expected {FORMAT_VERSION})")
    unknown = set(d) - {"task", "model", "optim", "output"}
    if unknown:
        raise ConfigError(f"config: unknown keys {sorted(unknown)}")
    cfg = RunConfig(
        task=_build(TaskConfig, d.get("task", {}), "task"),
        model=_build(ModelConfig, d.get("model", {}), "model"),
        optim=_build(OptimConfig, d.get("optim", {}), "optim"),
        output=_build(OutputConfig, d.get("output", {}), "output"),
    )
    return cfg.validate()


def load_config(path) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as err:
        raise ConfigError(f"cannot read config {path}: {err}") from err
    try:
        return config_from_dict(json.loads(text))
    except json.JSONDecodeError as err:
        raise ConfigError(f"config {path} is not valid JSON: {err}") from err
