"""Experiment configuration: nested dataclasses read from and written to YAML.

Unknown keys are rejected at every level so a typo in a sweep file fails before
any compute starts.
"""

from __future__ import annotations

import copy
import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, List, Optional, Tuple

import yaml

from .attack.engine import AttackConfig
from .attack.plan import PLACEMENTS, STRATEGIES, uses_source
from .data.multiview_scene import MultiViewSpec
from .data.shapes import SceneSpec
from .detector import ModelConfig
from .multiview import MultiViewConfig, MultiViewTrainConfig
from .training import TrainConfig

COMMANDS = ("train", "attack", "sweep", "eval", "heatmap")
SWEEP_AXES = ("patch_size", "source_count", "target_count", "placement", "num_layers",
              "aggregator", "num_cameras", "patch_count")


class ConfigError(ValueError):
    pass


@dataclass
class PlanConfig:
    """How to lay out patches. Explicit locations override the generated layout."""

    num_sources: int = 1
    num_targets: int = 1
    patch_edge: int = 6
    target_edge: Optional[int] = None
    placement: str = "uniform"
    source_locations: Optional[List[Tuple[float, float]]] = None
    target_locations: Optional[List[Tuple[float, float]]] = None
    adversarial_views: Optional[List[int]] = None     # multi-view only; default all views

    def __post_init__(self):
        if self.placement not in PLACEMENTS:
            raise ConfigError(f"unknown placement {self.placement!r}")
        if self.num_sources < 0 or self.num_targets < 1 or self.patch_edge < 1:
            raise ConfigError("need num_sources >= 0, num_targets >= 1 and patch_edge >= 1")
        for name in ("source_locations", "target_locations"):
            v = getattr(self, name)
            if v is not None:
                setattr(self, name, [tuple(float(c) for c in loc) for loc in v])


@dataclass
class DataConfig:
    """Frames for detector training and for the attack (train/eval splits)."""

    detector_train_count: int = 360
    detector_eval_count: int = 40
    attack_train_count: int = 360
    attack_eval_count: int = 40
    attack_offset: int = 100_000     # dataset index where attack frames start
    scene: SceneSpec = field(default_factory=SceneSpec)
    multiview_scene: MultiViewSpec = field(default_factory=MultiViewSpec)


@dataclass
class SweepConfig:
    axis: str = "patch_size"
    values: List[Any] = field(default_factory=list)

    def __post_init__(self):
        if self.axis not in SWEEP_AXES:
            raise ConfigError(f"unknown sweep axis {self.axis!r}; choose from {SWEEP_AXES}")


@dataclass
class ExperimentConfig:
    command: str = "attack"
    multiview: bool = False
    seed: int = 0
    out_dir: Optional[str] = None
    checkpoint: Optional[str] = None
    patches_from: Optional[str] = None      # attack run whose frames eval/heatmap apply
    model: ModelConfig = field(default_factory=ModelConfig)
    multiview_model: MultiViewConfig = field(default_factory=MultiViewConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    multiview_train: MultiViewTrainConfig = field(default_factory=MultiViewTrainConfig)
    attack: AttackConfig = field(default_factory=AttackConfig)
    plan: PlanConfig = field(default_factory=PlanConfig)
    data: DataConfig = field(default_factory=DataConfig)
    sweep: Optional[SweepConfig] = None

    def validate(self):
        """Cross-field checks; raises ``ConfigError``."""
        if self.command not in COMMANDS:
            raise ConfigError(f"unknown command {self.command!r}")
        strategy = self.attack.strategy
        if strategy not in STRATEGIES:
            raise ConfigError(f"unknown strategy {strategy!r}")
        if self.command == "sweep":
            if self.sweep is None or not self.sweep.values:
                raise ConfigError("sweep command needs sweep.axis and a non-empty sweep.values")
            for value in self.sweep.values:
                apply_axis(self, self.sweep.axis, value).validate_point()
        else:
            self.validate_point()
        return self

    def validate_point(self):
        strategy = self.attack.strategy
        if self.multiview:
            mv, sc = self.multiview_model, self.data.multiview_scene
            if mv.num_views != sc.num_views or tuple(mv.view_size) != tuple(sc.view_size):
                raise ConfigError("multiview_model and data.multiview_scene disagree on views or view size")
        elif tuple(self.model.image_size) != tuple(self.data.scene.image_size):
            raise ConfigError(f"model.image_size {self.model.image_size} != scene image_size "
                              f"{self.data.scene.image_size}")
        R = self.multiview_model.num_points if self.multiview else self.model.num_points
        if strategy != "ATT" and self.plan.num_targets > R:
            raise ConfigError(f"{self.plan.num_targets} targets exceed R={R} pointers")
        if uses_source(strategy) and self.plan.num_sources < 1 and not self.plan.source_locations:
            raise ConfigError(f"{strategy} needs at least one source patch")
        if self.multiview and self.plan.adversarial_views is not None:
            bad = [v for v in self.plan.adversarial_views if not 0 <= v < self.multiview_model.num_views]
            if bad:
                raise ConfigError(f"adversarial views {bad} out of range")
        return self


def apply_axis(config: ExperimentConfig, axis: str, value) -> ExperimentConfig:
    """Copy of ``config`` with one sweep value applied; rejects invalid combinations."""
    cfg = copy.deepcopy(config)
    cfg.command = "attack" if axis != "num_layers" else config.command
    strategy = cfg.attack.strategy
    if axis == "patch_size":
        cfg.plan.patch_edge = int(value)
        cfg.plan.target_edge = None
    elif axis == "source_count":
        if not uses_source(strategy):
            raise ConfigError(f"source_count sweeps do not apply to {strategy} (no source patches)")
        cfg.plan.num_sources = int(value)
    elif axis == "target_count":
        cfg.plan.num_targets = int(value)
    elif axis == "placement":
        if value not in PLACEMENTS:
            raise ConfigError(f"unknown placement {value!r}")
        cfg.plan.placement = value
    elif axis == "num_layers":
        if cfg.multiview:
            cfg.multiview_model = dataclasses.replace(cfg.multiview_model, num_layers=int(value))
        else:
            cfg.model = dataclasses.replace(cfg.model, num_layers=int(value))
        cfg.checkpoint = None
    elif axis == "aggregator":
        cfg.attack = dataclasses.replace(cfg.attack, aggregator=str(value))
    elif axis == "num_cameras":
        if not cfg.multiview:
            raise ConfigError("num_cameras sweeps need multiview: true")
        n = int(value)
        if not 1 <= n <= cfg.multiview_model.num_views:
            raise ConfigError(f"num_cameras {n} outside 1..{cfg.multiview_model.num_views}")
        cfg.plan.adversarial_views = list(range(n))
    elif axis == "patch_count":
        n = int(value)
        cfg.plan.num_targets = n
        if uses_source(strategy):
            cfg.plan.num_sources = n
    else:
        raise ConfigError(f"unknown sweep axis {axis!r}")
    return cfg


def _hints(cls):
    return typing.get_type_hints(cls)


def _dataclass_of(tp):
    if dataclasses.is_dataclass(tp):
        return tp
    for arg in typing.get_args(tp):
        if dataclasses.is_dataclass(arg):
            return arg
    return None


def from_dict(cls, data, path: str = ""):
    """Build dataclass ``cls`` from nested dicts, rejecting unknown keys."""
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path or cls.__name__}: expected a mapping, got {type(data).__name__}")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"{path or cls.__name__}: unknown key(s) {unknown}")
    hints = _hints(cls)
    kwargs = {}
    for key, value in data.items():
        sub = _dataclass_of(hints[key])
        if sub is not None and value is not None:
            kwargs[key] = from_dict(sub, value, f"{path}.{key}" if path else key)
        else:
            kwargs[key] = value
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as err:
        raise ConfigError(f"{path or cls.__name__}: {err}") from err


def to_dict(obj):
    """Plain nested dict/list form (tuples become lists) suitable for YAML."""
    def plain(v):
        if dataclasses.is_dataclass(v):
            return {f.name: plain(getattr(v, f.name)) for f in dataclasses.fields(v)}
        if isinstance(v, (list, tuple)):
            return [plain(x) for x in v]
        if isinstance(v, dict):
            return {k: plain(x) for k, x in v.items()}
        return v
    return plain(obj)


def load_config(path) -> ExperimentConfig:
    text = Path(path).read_text()
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as err:
        raise ConfigError(f"{path}: not valid YAML ({err})") from err
    return from_dict(ExperimentConfig, data or {})


def parse_config(text: str) -> ExperimentConfig:
    return from_dict(ExperimentConfig, yaml.safe_load(text) or {})


def dump_config(config: ExperimentConfig) -> str:
    return yaml.safe_dump(to_dict(config), sort_keys=True)
