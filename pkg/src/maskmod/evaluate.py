"""Error rates, the decathlon score, and mask density / k-value reports."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .checkpoint import pack_bits
from .network import masked_layers
from .train import Dataset, predict

PERFECT_TASK_SCORE = 1000.0


def error_rate(network, data: Dataset, batch_size: int = 256) -> float:
    """Fraction of misclassified samples, with batch norms on stored statistics."""
    if len(data) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    preds = predict(network, data, batch_size)
    return float(np.count_nonzero(preds != data.labels)) / len(data)


evaluate = error_rate


@dataclass
class DecathlonConfig:
    """Per-task maximum errors; a task at zero error scores 1000."""

    max_errors: dict

    def __post_init__(self):
        for task, e in self.max_errors.items():
            if not 0 < e <= 1:
                raise ValueError(f"max error for {task!r} must lie in (0, 1], got {e}")

    @classmethod
    def from_reference_errors(cls, reference: Mapping[str, float]) -> "DecathlonConfig":
        """Max error = twice the error of an individually fine-tuned model."""
        return cls({t: 2.0 * e for t, e in reference.items()})

    def alpha(self, task: str) -> float:
        return PERFECT_TASK_SCORE / self.max_errors[task] ** 2


def decathlon_score(errors: Mapping[str, float], cfg: DecathlonConfig) -> dict:
    """Per-task ``alpha * max(0, E_max - E)^2`` and their total."""
    missing = set(cfg.max_errors) ^ set(errors)
    if missing:
        raise KeyError(f"errors and max errors cover different tasks: {sorted(missing)}")
    per_task = {}
    for task, e in errors.items():
        gap = max(0.0, cfg.max_errors[task] - e)
        per_task[task] = cfg.alpha(task) * gap * gap
    return {"tasks": per_task, "total": float(sum(per_task.values()))}


@dataclass
class LayerDensity:
    layer: str
    depth: int
    density: float
    ones: int
    size: int
    k: dict = field(default_factory=dict)


@dataclass
class MaskDensityReport:
    task: str
    variant: str
    layers: list

    @property
    def mean_density(self) -> float:
        return float(np.mean([l.density for l in self.layers]))

    @classmethod
    def from_dict(cls, task: str, variant: str, rows: list) -> "MaskDensityReport":
        fixed = ("layer", "depth", "density", "ones", "size")
        layers = [LayerDensity(*(r[f] for f in fixed), {n: v for n, v in r.items() if n not in fixed}) for r in rows]
        return cls(task, variant, layers)

    def to_dict(self) -> list:
        return [
            {"layer": l.layer, "depth": l.depth, "density": l.density, "ones": l.ones, "size": l.size, **l.k}
            for l in self.layers
        ]

    def render_text(self, width: int = 40) -> str:
        lines = [f"task {self.task} ({self.variant}): fraction of ones per masked layer"]
        for l in self.layers:
            bar = "#" * int(round(l.density * width))
            ks = " ".join(f"{n}={v:+.4f}" for n, v in l.k.items() if not isinstance(v, list))
            lines.append(f"{l.depth:>3} {l.layer:<10} {bar:<{width}} {l.density:6.3f}  {ks}")
        lines.append(f"mean density {self.mean_density:.3f}")
        return "\n".join(lines)


def popcount_packed(mask: np.ndarray) -> int:
    """Count ones through the bit-packed representation."""
    packed = np.frombuffer(pack_bits(mask), dtype=np.uint8)
    return int(np.unpackbits(packed).sum())


def mask_density(omega, arch: dict = None) -> MaskDensityReport:
    """Fraction of ones in each mask, ordered by depth, with the layer's k1..k3."""
    names = [l["name"] for l in masked_layers(arch)] if arch else list(omega.k)
    rows = []
    for depth, name in enumerate(names):
        m = omega.mask(name)
        ones = popcount_packed(m)
        kv = omega.k[name].values()
        rows.append(LayerDensity(name, depth, ones / m.size, ones, int(m.size), {j: kv[j] for j in ("k1", "k2", "k3")}))
    return MaskDensityReport(omega.name, omega.variant, rows)
