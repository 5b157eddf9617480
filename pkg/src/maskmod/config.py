"""Run configuration (JSON).  Paths are relative to the config file."""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .data import DatasetSpec
from .masks import SURROGATES, VARIANTS, resolve_learnable
from .network import toy_arch, validate_arch
from .train import Schedule

SEED_ENV = "MASKMOD_SEED"


@dataclass
class RunConfig:
    arch: dict = field(default_factory=toy_arch)
    variant: str = "full"
    surrogate: str = "identity"
    learn_k: Optional[list] = None
    channel_wise: bool = False
    task_bn: bool = True
    schedule: Schedule = field(default_factory=Schedule)
    pretrain_schedule: Schedule = field(default_factory=lambda: Schedule(epochs=10, decay_epoch=8, adam_lr=1e-3, sgd_lr=1e-2))
    seed: int = 0
    pretrain: Optional[DatasetSpec] = None
    tasks: dict = field(default_factory=dict)
    metrics_dir: Optional[Path] = None
    base_dir: Path = field(default_factory=Path.cwd)

    def __post_init__(self):
        if self.arch == "toy":
            self.arch = toy_arch()
        validate_arch(self.arch)
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.surrogate not in SURROGATES:
            raise ValueError(f"unknown surrogate {self.surrogate!r}; expected one of {SURROGATES}")
        # reject impossible k selections early, for both kinds of layer
        resolve_learnable(self.variant, True, self.learn_k)

    def task_spec(self, name: str) -> DatasetSpec:
        if name not in self.tasks:
            raise KeyError(f"task {name!r} is not defined in the config (known: {sorted(self.tasks)})")
        return self.tasks[name]

    def to_dict(self) -> dict:
        return {
            "arch": self.arch,
            "variant": self.variant,
            "surrogate": self.surrogate,
            "learn_k": self.learn_k,
            "channel_wise": self.channel_wise,
            "task_bn": self.task_bn,
            "schedule": self.schedule.to_dict(),
            "pretrain_schedule": self.pretrain_schedule.to_dict(),
            "seed": self.seed,
            "pretrain": self.pretrain.to_dict() if self.pretrain else None,
            "tasks": {k: v.to_dict() for k, v in self.tasks.items()},
        }


def from_dict(d: dict, base_dir=None) -> RunConfig:
    d = dict(d)
    kwargs = {k: d[k] for k in ("arch", "variant", "surrogate", "learn_k", "channel_wise", "task_bn", "seed") if k in d}
    if "schedule" in d:
        kwargs["schedule"] = Schedule.from_dict(d["schedule"])
    if "pretrain_schedule" in d:
        kwargs["pretrain_schedule"] = Schedule.from_dict(d["pretrain_schedule"])
    if d.get("pretrain"):
        kwargs["pretrain"] = DatasetSpec.from_dict(d["pretrain"])
    kwargs["tasks"] = {name: DatasetSpec.from_dict({"name": name, **spec}) for name, spec in d.get("tasks", {}).items()}
    base = Path(base_dir) if base_dir is not None else Path.cwd()
    if d.get("metrics_dir"):
        kwargs["metrics_dir"] = base / d["metrics_dir"]
    kwargs["base_dir"] = base
    return RunConfig(**kwargs)


def load_config(path) -> RunConfig:
    path = Path(path)
    cfg = from_dict(json.loads(path.read_text()), base_dir=path.parent)
    if os.environ.get(SEED_ENV):
        cfg.seed = int(os.environ[SEED_ENV])
    return cfg
