"""Experiment configuration: dataclasses, strict dict parsing, hashing.

Config files are JSON documents whose sections mirror the dataclasses
here (``backbone``, ``adapter``, ``decoder``, ``optim``, ``troa``,
``data``, ``tasks``, plus top-level ``seed``). Unknown keys are errors;
every field has a documented default (see README).
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, fields

from .backbone import BackboneConfig
from .errors import ConfigError

TASK_NAMES = ("segmentation", "depth", "normal", "edge")
LOSS_FOR_TASK = {"segmentation": "cross_entropy", "depth": "rmse",
                 "normal": "l1", "edge": "l1"}


@dataclass
class TaskSpec:
    task_id: int
    name: str
    head_channels: int
    loss_kind: str

    def __post_init__(self):
        if self.name not in TASK_NAMES:
            raise ConfigError(f"unknown task name {self.name!r}")
        if self.head_channels < 1:
            raise ConfigError("head_channels must be >= 1")
        if self.loss_kind != LOSS_FOR_TASK[self.name]:
            raise ConfigError(
                f"task {self.name} uses loss {LOSS_FOR_TASK[self.name]}, got {self.loss_kind!r}")


def default_task_specs(k_seg: int = 6) -> list[TaskSpec]:
    """The four dense-prediction tasks in canonical order."""
    channels = {"segmentation": k_seg, "depth": 1, "normal": 3, "edge": 1}
    return [TaskSpec(i, name, channels[name], LOSS_FOR_TASK[name])
            for i, name in enumerate(TASK_NAMES)]


@dataclass
class AdapterConfig:
    """Defaults are the full-scale 12/96 widths scaled by the toy 1/4 channel ratio."""

    bottleneck_dim: int = 3
    ffn_hidden: int = 24
    heads_per_stage: dict[int, int] = field(default_factory=lambda: {3: 8, 4: 16})
    placements: list[tuple[int, int]] | None = None  # None -> derived late-stage rule
    use_taa: bool = True
    use_tsn: bool = True
    use_bottleneck: bool = True
    film_hidden: int = 16
    tsn_hidden: int = 8

    def __post_init__(self):
        self.heads_per_stage = {int(k): int(v) for k, v in self.heads_per_stage.items()}
        if self.placements is not None:
            self.placements = [tuple(int(x) for x in p) for p in self.placements]


@dataclass
class DecoderConfig:
    blocks_per_stage: int = 2
    heads: tuple[int, ...] = (8, 4, 2, 1)
    attn_divisor: int = 8
    ffn_divisor: int = 4
    window_size: int = 4

    def __post_init__(self):
        self.heads = tuple(int(h) for h in self.heads)
        if len(self.heads) != 4:
            raise ConfigError("decoder expects four per-stage head counts")


@dataclass
class OptimConfig:
    lr: float = 5e-5
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-8
    epochs: int = 30
    warmup_epochs: int = 5
    batch_size: int = 16
    clip_norm: float = 5.0

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if not 0 <= self.warmup_epochs < self.epochs:
            raise ConfigError("need 0 <= warmup_epochs < epochs")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")


@dataclass
class TroaConfig:
    cadence: int = 50
    inner_steps: int = 1
    kappa: float = 1.0
    sign_convention: str = "paper_negative"
    burnin_epochs: int = 1

    def __post_init__(self):
        if self.cadence < 1 or self.inner_steps < 1:
            raise ConfigError("troa cadence and inner_steps must be >= 1")
        if self.kappa <= 0:
            raise ConfigError("kappa must be positive")
        if self.sign_convention not in ("paper_negative", "positive"):
            raise ConfigError(f"unknown sign convention {self.sign_convention!r}")


@dataclass
class DataConfig:
    train_count: int = 2000
    val_count: int = 200
    test_count: int = 200
    image_size: int = 64
    k_seg: int = 6
    domain: str = "A"

    def __post_init__(self):
        if self.domain not in ("A", "B"):
            raise ConfigError("domain must be 'A' or 'B'")
        if self.k_seg < 2:
            raise ConfigError("k_seg must be >= 2")


@dataclass
class TrainConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    adapter: AdapterConfig = field(default_factory=AdapterConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    troa: TroaConfig = field(default_factory=TroaConfig)
    data: DataConfig = field(default_factory=DataConfig)
    tasks: list[TaskSpec] | None = None
    seed: int = 0
    eval_every: int = 1

    def __post_init__(self):
        if self.tasks is None:
            self.tasks = default_task_specs(self.data.k_seg)
        if self.backbone.image_size != self.data.image_size:
            raise ConfigError("backbone.image_size must equal data.image_size")
        seg = [t for t in self.tasks if t.name == "segmentation"]
        if seg and seg[0].head_channels != self.data.k_seg:
            raise ConfigError("segmentation head_channels must equal data.k_seg")

    @property
    def n_tasks(self) -> int:
        return len(self.tasks)

    def to_dict(self) -> dict:
        return _asdict(self)

    def config_hash(self) -> str:
        return hashlib.sha256(
            json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


def _asdict(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _asdict(getattr(obj, f.name)) for f in fields(obj)}
    if isinstance(obj, dict):
        return {str(k): _asdict(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_asdict(v) for v in obj]
    return obj


_SECTION_TYPES = {
    "backbone": BackboneConfig,
    "adapter": AdapterConfig,
    "decoder": DecoderConfig,
    "optim": OptimConfig,
    "troa": TroaConfig,
    "data": DataConfig,
}


def _build_dataclass(cls, data: dict, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"section {where!r} must be a mapping")
    allowed = {f.name for f in fields(cls)}
    unknown = set(data) - allowed
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {sorted(unknown)}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad value in {where}: {exc}") from exc


def config_from_dict(doc: dict) -> TrainConfig:
    """Strict parse of a config document; unknown keys anywhere are errors."""
    if not isinstance(doc, dict):
        raise ConfigError("config root must be a mapping")
    top_allowed = set(_SECTION_TYPES) | {"tasks", "seed", "eval_every"}
    unknown = set(doc) - top_allowed
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {sorted(unknown)}")
    kwargs = {}
    for name, cls in _SECTION_TYPES.items():
        if name in doc:
            kwargs[name] = _build_dataclass(cls, doc[name], name)
    if "tasks" in doc:
        kwargs["tasks"] = [_build_dataclass(TaskSpec, t, f"tasks[{i}]")
                           for i, t in enumerate(doc["tasks"])]
    for key in ("seed", "eval_every"):
        if key in doc:
            kwargs[key] = int(doc[key])
    try:
        return TrainConfig(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path) -> TrainConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}")
    return config_from_dict(doc)
