"""Experiment configuration read from TOML files.

A config names the task, the network, optimizer and mask hyperparameters,
the list of mask stages, and pipeline-specific tables.  Every field has a
default so a config only needs to state what differs.  Example::

    [experiment]
    task = "addmul"
    seeds = [0, 1, 2]

    [model]
    preset = "addmul-ffn"

    [mask]
    beta = 1e-4

    [[stages]]
    name = "add"
    filter = "op=add"
"""
from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

TASKS = ("addmul", "double-add", "permuted-mnist", "mnist-leave-one-out")

PRESETS: dict[str, dict[str, Any]] = {
    "addmul-ffn": {"kind": "ffn", "sizes": [42, 400, 400, 200, 20]},
    "double-add-ffn": {"kind": "ffn", "sizes": [80, 400, 400, 200, 40]},
    "mnist-ffn": {"kind": "ffn", "sizes": [784, 400, 400, 64, 10]},
    "addmul-lstm": {"kind": "lstm", "input": 42, "hidden": 128, "output": 20,
                    "schedule": "repeat-all", "steps_per_segment": 3},
    "double-add-lstm": {"kind": "lstm", "input": 80, "hidden": 128, "output": 40,
                        "schedule": "sequential-pairs", "steps_per_segment": 3},
}


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    preset: str = ""
    kind: str = "ffn"
    sizes: list[int] = field(default_factory=list)
    input: int = 0
    hidden: int = 128
    output: int = 0
    schedule: str = "repeat-all"
    steps_per_segment: int = 3

    def resolved(self) -> "ModelConfig":
        if not self.preset:
            return self
        if self.preset not in PRESETS:
            raise ConfigError(f"unknown model preset {self.preset!r}; known: {sorted(PRESETS)}")
        base = {**PRESETS[self.preset]}
        # explicit fields override the preset (hidden size, for instance)
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            default = f.default_factory() if f.default_factory is not dataclasses.MISSING else f.default
            if f.name != "preset" and value != default:
                base[f.name] = value
        return ModelConfig(preset="", **base)


@dataclass
class OptimConfig:
    batch_size: int = 128
    weight_lr: float = 1e-3
    mask_lr: float = 1e-2
    clip: float = 1.0


@dataclass
class WeightsConfig:
    steps: int = 20_000
    eval_every: int = 0
    target: float | None = None


@dataclass
class MaskConfig:
    alpha: float | None = None
    beta: float | None = None
    k: int = 4
    tau: float = 1.0
    keep_prob: float = 0.9
    steps: int = 20_000
    eval_every: int = 0
    target: float | None = None
    exclude: list[str] = field(default_factory=list)


@dataclass
class StageConfig:
    name: str
    filter: str = "all"
    steps: int | None = None
    alpha: float | None = None
    beta: float | None = None
    frozen: str = "all"
    fixed_output_from: str | None = None


@dataclass
class EvalConfig:
    samples: int = 10_000
    seed: int = 12345
    variants: list[str] = field(default_factory=lambda: ["none", "stages", "inverted"])


@dataclass
class DataConfig:
    mnist_dir: str = ""
    train_limit: int = 0
    test_limit: int = 0
    fetch: bool = False
    base_url: str = "https://storage.googleapis.com/cvdf-datasets/mnist/"
    sha256: dict[str, str] = field(default_factory=dict)


@dataclass
class TransferConfig:
    num_tasks: int = 5
    steps: int = 3000
    alpha: float = 1e-5
    k: int = 8
    lr: float = 1e-2
    biased: bool = False
    p_old: float = 0.88
    p_new: float = 0.5


@dataclass
class SweepConfig:
    alphas: list[float] = field(default_factory=lambda: [1e-7, 1e-6, 1e-5, 1e-4])
    stage: str = "full"
    steps: int | None = None


@dataclass
class LeaveOneOutConfig:
    classes: list[int] = field(default_factory=lambda: list(range(10)))
    steps: int | None = None


@dataclass
class CopyIOConfig:
    steps: int | None = None  # per pair mask; defaults to the stage's steps


@dataclass
class ExperimentConfig:
    task: str = "addmul"
    name: str = ""
    seeds: list[int] = field(default_factory=lambda: [0])
    out: str = "runs"
    model: ModelConfig = field(default_factory=ModelConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    weights: WeightsConfig = field(default_factory=WeightsConfig)
    mask: MaskConfig = field(default_factory=MaskConfig)
    stages: list[StageConfig] = field(default_factory=list)
    eval: EvalConfig = field(default_factory=EvalConfig)
    data: DataConfig = field(default_factory=DataConfig)
    transfer: TransferConfig = field(default_factory=TransferConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)
    leave_one_out: LeaveOneOutConfig = field(default_factory=LeaveOneOutConfig)
    copy_io: CopyIOConfig = field(default_factory=CopyIOConfig)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.task not in TASKS:
            raise ConfigError(f"unknown task {self.task!r}; expected one of {TASKS}")
        if self.mask.alpha is not None and self.mask.beta is not None:
            raise ConfigError("set either mask.alpha or mask.beta, not both")
        names = [s.name for s in self.stages]
        dupes = {n for n in names if names.count(n) > 1}
        if dupes:
            raise ConfigError(f"duplicate stage names: {sorted(dupes)}")
        for s in self.stages:
            if s.alpha is not None and s.beta is not None:
                raise ConfigError(f"stage {s.name!r} sets both alpha and beta")
            if s.fixed_output_from is not None and s.fixed_output_from not in names[:names.index(s.name)]:
                raise ConfigError(f"stage {s.name!r} fixes its output mask from unknown or later stage "
                                  f"{s.fixed_output_from!r}")
            if s.frozen not in ("all", "none"):
                raise ConfigError(f"stage {s.name!r}: frozen must be 'all' or 'none'")
        if self.optim.batch_size < 1 or self.mask.k < 1:
            raise ConfigError("batch_size and k must be positive")
        if self.mask.k > self.optim.batch_size:
            raise ConfigError("k cannot exceed the batch size")
        if self.mask.tau <= 0:
            raise ConfigError("tau must be positive")
        if not 0 < self.mask.keep_prob < 1:
            raise ConfigError("keep_prob must lie in (0, 1)")
        self.model.resolved()

    def alpha_for(self, stage: StageConfig | None = None) -> float:
        """Regularization strength; ``beta`` is converted with ``alpha = beta / batch_size``."""
        for src in (stage, self.mask):
            if src is None:
                continue
            if src.alpha is not None:
                return float(src.alpha)
            if src.beta is not None:
                return float(src.beta) / self.optim.batch_size
        return 0.0

    def stage(self, name: str) -> StageConfig:
        for s in self.stages:
            if s.name == name:
                return s
        raise KeyError(f"no stage named {name!r}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def replace(self, **changes) -> "ExperimentConfig":
        out = copy.deepcopy(self)
        for k, v in changes.items():
            setattr(out, k, v)
        out.validate()
        return out


_SECTIONS = {
    "model": ModelConfig, "optim": OptimConfig, "weights": WeightsConfig, "mask": MaskConfig,
    "eval": EvalConfig, "data": DataConfig, "transfer": TransferConfig, "sweep": SweepConfig,
    "leave_one_out": LeaveOneOutConfig, "copy_io": CopyIOConfig,
}


def _build(cls, table: dict, where: str):
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(table) - known
    if unknown:
        raise ConfigError(f"[{where}] unknown keys: {sorted(unknown)}")
    try:
        return cls(**table)
    except TypeError as exc:
        raise ConfigError(f"[{where}] {exc}") from None


def from_dict(raw: dict) -> ExperimentConfig:
    raw = dict(raw)
    kwargs: dict[str, Any] = {}
    exp = raw.pop("experiment", {})
    for key in ("task", "name", "seeds", "out"):
        if key in exp:
            kwargs[key] = exp.pop(key)
    if exp:
        raise ConfigError(f"[experiment] unknown keys: {sorted(exp)}")
    for name, cls in _SECTIONS.items():
        if name in raw:
            kwargs[name] = _build(cls, raw.pop(name), name)
    kwargs["stages"] = [_build(StageConfig, s, "stages") for s in raw.pop("stages", [])]
    if raw:
        raise ConfigError(f"unknown top-level tables: {sorted(raw)}")
    return ExperimentConfig(**kwargs)


def to_toml_dict(cfg: ExperimentConfig) -> dict:
    """Inverse of :func:`from_dict` (``None`` values dropped, as TOML has no null)."""
    d = cfg.to_dict()

    def clean(x):
        if isinstance(x, dict):
            return {k: clean(v) for k, v in x.items() if v is not None}
        if isinstance(x, list):
            return [clean(v) for v in x]
        return x

    out = {"experiment": {k: d.pop(k) for k in ("task", "name", "seeds", "out")}}
    out.update(clean(d))
    return out


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    with path.open("rb") as f:
        try:
            raw = tomllib.load(f)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
    cfg = from_dict(raw)
    if not cfg.name:
        cfg.name = path.stem
    return cfg
