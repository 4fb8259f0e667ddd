"""Declarative run configuration: a YAML tree mapped strictly onto dataclasses.

Every key must name a field; unknown keys raise ConfigError naming the full
dotted path. Missing keys take the field defaults.
"""

from __future__ import annotations

import dataclasses
import enum
import os
import typing
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .consensus import Kernel, Metric
from .edges import LR, Arch
from .errors import ConfigError
from .graph import IterationConfig
from .world import DEFAULT_ROSTER, Corruption, SceneConfig, default_experts, roster


@dataclass(frozen=True)
class DatasetConfig:
    n_samples: int = 256
    val_frac: float = 0.1
    test_frac: float = 0.2
    split_seed: int = 0
    scene: SceneConfig = field(default_factory=SceneConfig)
    # Directory written by gen-dataset; empty means generate in memory.
    root: str = ""


@dataclass(frozen=True)
class ExpertsConfig:
    level: float = 0.1
    seed: int = 0
    overrides: dict[str, Corruption] = field(default_factory=dict)


@dataclass(frozen=True)
class TrainingConfig:
    metric: str = "perceptual"
    kernel: Kernel = field(default_factory=Kernel)
    retrain_from_scratch: bool = True
    epochs: int = 30
    batch: int = 2
    lr: float = LR
    arch: str = Arch.PATCH_MLP.value
    init_scale: float = 1.0
    seed: int = 0
    pin_rgb: bool = True
    class_temperature: float = 0.25
    probe_count: int = 4
    chunk: int = 16
    # Match depth pseudo-labels to the validation ground-truth histogram.
    depth_alignment: bool = False


@dataclass(frozen=True)
class NodeSweepConfig:
    dest: str = "depth"
    orderings: tuple[str, ...] = ("random", "performance")
    order_seed: int = 0


@dataclass(frozen=True)
class WeakExpertConfig:
    task: str = "depth"
    levels: tuple[float, ...] = (0.05, 0.1, 0.2)


@dataclass(frozen=True)
class MmdConfig:
    # SceneConfig fields changed for the second domain.
    shift: dict[str, typing.Any] = field(default_factory=lambda: {
        "palette_seed": 3, "ambient": 0.45, "fog": 0.6, "seed": 1000})
    samples: int = 24
    trials: int = 20
    bandwidth: str = "median"
    # Edges whose hidden activations serve as learned embeddings.
    feature_edges: tuple[str, ...] = ("depth", "normals")
    feature_epochs: int = 10


@dataclass(frozen=True)
class AblationConfig:
    metrics: tuple[str, ...] = tuple(m.value for m in Metric)
    tasks: tuple[str, ...] = ("depth",)


@dataclass(frozen=True)
class ExperimentsConfig:
    node_sweep: NodeSweepConfig = field(default_factory=NodeSweepConfig)
    weak_expert: WeakExpertConfig = field(default_factory=WeakExpertConfig)
    mmd: MmdConfig = field(default_factory=MmdConfig)
    ablation: AblationConfig = field(default_factory=AblationConfig)


@dataclass(frozen=True)
class RunConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    tasks: tuple[str, ...] = DEFAULT_ROSTER
    n_iters: int = 2
    experts: ExpertsConfig = field(default_factory=ExpertsConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    experiments: ExperimentsConfig = field(default_factory=ExperimentsConfig)
    output: str = "runs/default"

    def __post_init__(self):
        if len(set(self.tasks)) != len(self.tasks):
            raise ConfigError("tasks must be unique")
        if "rgb" not in self.tasks or len(self.tasks) < 2:
            raise ConfigError("tasks must include rgb and at least one other task")
        self.task_specs()
        self.iteration_config()
        for name in self.experts.overrides:
            if name not in self.tasks or name == "rgb":
                raise ConfigError(f"experts.overrides: {name!r} is not a non-rgb task")

    def task_specs(self):
        return roster(self.tasks, self.dataset.scene)

    def iteration_config(self, workers: int = 1, n_iters: int | None = None,
                         metric: str | None = None) -> IterationConfig:
        t = self.training
        return IterationConfig(
            n_iters=self.n_iters if n_iters is None else n_iters,
            metric=Metric.parse(t.metric if metric is None else metric), kernel=t.kernel,
            retrain_from_scratch=t.retrain_from_scratch, epochs=t.epochs, batch=t.batch,
            lr=t.lr, arch=Arch(t.arch), init_scale=t.init_scale, seed=t.seed,
            pin_rgb=t.pin_rgb, class_temperature=t.class_temperature,
            probe_count=t.probe_count, chunk=t.chunk, workers=workers)

    def experts_for(self, tasks=None) -> dict:
        tasks = self.task_specs() if tasks is None else tasks
        return default_experts(tasks, self.experts.level, self.experts.seed,
                               self.experts.overrides)


# -- strict loading ------------------------------------------------------------

def _convert(tp, value, path: str):
    origin = typing.get_origin(tp)
    if dataclasses.is_dataclass(tp):
        return build(tp, value, path)
    if tp is typing.Any:
        return value
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{path}: expected a list")
        args = typing.get_args(tp)
        if len(args) == 2 and args[1] is Ellipsis:
            args = (args[0],) * len(value)
        elif len(args) != len(value):
            raise ConfigError(f"{path}: expected {len(args)} items, got {len(value)}")
        return tuple(_convert(inner, v, f"{path}[{k}]")
                     for k, (inner, v) in enumerate(zip(args, value)))
    if origin is dict:
        if not isinstance(value, dict):
            raise ConfigError(f"{path}: expected a mapping")
        _, inner = typing.get_args(tp)
        return {str(k): _convert(inner, v, f"{path}.{k}") for k, v in value.items()}
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true or false")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string")
        return value
    if isinstance(tp, type) and issubclass(tp, enum.Enum):
        try:
            return tp(value)
        except ValueError:
            raise ConfigError(f"{path}: invalid value {value!r}") from None
    raise ConfigError(f"{path}: unsupported field type {tp}")


def build(cls, data, path: str = ""):
    """Instantiate dataclass ``cls`` from a mapping, rejecting unknown keys."""
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected a mapping")
    hints = typing.get_type_hints(cls)
    fields = {f.name for f in dataclasses.fields(cls) if f.init}
    kwargs = {}
    for key, value in data.items():
        where = f"{path}.{key}" if path else str(key)
        if key not in fields:
            raise ConfigError(f"unknown config key {where!r}")
        kwargs[key] = _convert(hints[key], value, where)
    try:
        return cls(**kwargs)
    except ConfigError as exc:
        raise ConfigError(f"{path or 'config'}: {exc}") from None
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path or 'config'}: {exc}") from None


def parse_config(text: str) -> RunConfig:
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"invalid YAML: {exc}") from None
    return build(RunConfig, data)


def load_config(path: str | os.PathLike) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(text)


def _plain(value):
    if dataclasses.is_dataclass(value):
        return {f.name: _plain(getattr(value, f.name)) for f in dataclasses.fields(value)
                if f.init}
    if isinstance(value, enum.Enum):
        return value.value
    if isinstance(value, (tuple, list)):
        return [_plain(v) for v in value]
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    return value


def dump_config(cfg: RunConfig) -> str:
    """YAML text that :func:`parse_config` maps back to ``cfg``."""
    return yaml.safe_dump(_plain(cfg), sort_keys=True)
