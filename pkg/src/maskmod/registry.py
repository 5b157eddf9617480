"""Frozen baseline parameters, per-task parameters, and the networks built
from them.

The baseline (``BaselineParams``) owns the shared kernels of every masked
layer plus its own batch norms and classifier.  A task (``TaskParams``) owns
one mask and one set of k coefficients per masked layer, its own batch norms
and its own classifier.  Nothing a task does can write to the baseline: its
arrays are read-only and its digest is re-checked after every task.
"""
from __future__ import annotations

import logging
import zlib
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Optional, Sequence

import numpy as np

from . import checkpoint as ckpt
from .layers import BatchNormParams
from .masks import KParams, binarize, init_mask, resolve_learnable, threshold, transform_weights
from .network import bn_name, feature_dim, has_bias, masked_layers, run_backbone, validate_arch, weight_shape
from .tensor import Tensor, get_default_dtype

log = logging.getLogger(__name__)


class LayerMismatchError(ValueError):
    pass


class BaselineMismatchError(ValueError):
    """A task file was trained against a different baseline."""


class BaselineModifiedError(RuntimeError):
    """The shared parameters changed while a task was trained."""


def _frozen(arr) -> np.ndarray:
    arr = np.array(arr, dtype=get_default_dtype(), copy=True)
    arr.flags.writeable = False
    return arr


def _bn_records(container: ckpt.Container, name: str, p: BatchNormParams) -> None:
    container.add_array(f"{name}.scale", p.scale.data)
    container.add_array(f"{name}.bias", p.bias.data)
    container.add_array(f"{name}.running_mean", p.running_mean)
    container.add_array(f"{name}.running_var", p.running_var)


def _bn_from(container: ckpt.Container, name: str) -> BatchNormParams:
    dt = get_default_dtype()
    return BatchNormParams(
        scale=Tensor(container.get(f"{name}.scale").astype(dt), requires_grad=True),
        bias=Tensor(container.get(f"{name}.bias").astype(dt), requires_grad=True),
        running_mean=container.get(f"{name}.running_mean").astype(dt),
        running_var=container.get(f"{name}.running_var").astype(dt),
    )


# ---------------------------------------------------------------------------
# baseline


@dataclass
class BaselineParams:
    arch: dict
    weights: dict  # "<layer>.weight" / "<layer>.bias" -> read-only array
    bn: dict  # "<layer>.bn" -> BatchNormParams of the baseline task
    classifier_weight: np.ndarray
    classifier_bias: np.ndarray

    def __post_init__(self):
        validate_arch(self.arch)
        self.weights = {k: _frozen(v) for k, v in self.weights.items()}
        for layer in masked_layers(self.arch):
            w = self.weights.get(f"{layer['name']}.weight")
            if w is None or w.shape != weight_shape(layer):
                got = None if w is None else w.shape
                raise LayerMismatchError(f"layer {layer['name']}: kernel {got}, expected {weight_shape(layer)}")
        self.classifier_weight = _frozen(self.classifier_weight)
        self.classifier_bias = _frozen(self.classifier_bias)

    @property
    def num_classes(self) -> int:
        return self.classifier_weight.shape[0]

    @property
    def shared_param_count(self) -> int:
        return sum(v.size for v in self.weights.values())

    def container(self) -> ckpt.Container:
        c = ckpt.Container(ckpt.KIND_BASELINE, {"arch": self.arch, "num_classes": self.num_classes})
        for layer in masked_layers(self.arch):
            c.add_array(f"{layer['name']}.weight", self.weights[f"{layer['name']}.weight"])
            if has_bias(layer):
                c.add_array(f"{layer['name']}.bias", self.weights[f"{layer['name']}.bias"])
        for layer in masked_layers(self.arch):
            if layer.get("bn"):
                _bn_records(c, bn_name(layer), self.bn[bn_name(layer)])
        c.add_array("classifier.weight", self.classifier_weight)
        c.add_array("classifier.bias", self.classifier_bias)
        return c

    def to_bytes(self) -> bytes:
        return self.container().to_bytes()

    def digest(self) -> str:
        """Hex SHA-256 of the serialized parameters, recomputed on every call."""
        return ckpt.digest_of(self.to_bytes())

    def save(self, path) -> str:
        raw = ckpt.write(path, self.container())
        return ckpt.digest_of(raw)

    @classmethod
    def from_container(cls, c: ckpt.Container) -> "BaselineParams":
        arch = c.descriptor["arch"]
        weights, bn = {}, {}
        for layer in masked_layers(arch):
            weights[f"{layer['name']}.weight"] = c.get(f"{layer['name']}.weight")
            if has_bias(layer):
                weights[f"{layer['name']}.bias"] = c.get(f"{layer['name']}.bias")
            if layer.get("bn"):
                bn[bn_name(layer)] = _bn_from(c, bn_name(layer))
        return cls(arch, weights, bn, c.get("classifier.weight"), c.get("classifier.bias"))

    @classmethod
    def load(cls, path) -> "BaselineParams":
        return cls.from_container(ckpt.read(path, ckpt.KIND_BASELINE))

    def features(self, x, training: bool = False) -> Tensor:
        x = x if isinstance(x, Tensor) else Tensor(x)
        return run_backbone(
            self.arch,
            x,
            kernel=lambda layer: Tensor(self.weights[f"{layer['name']}.weight"]),
            bias=lambda layer: Tensor(self.weights[f"{layer['name']}.bias"]),
            bn=lambda layer: self.bn[bn_name(layer)],
            training=False,
        )

    def __call__(self, x, training: bool = False) -> Tensor:
        from .layers import linear

        return linear(self.features(x), Tensor(self.classifier_weight), Tensor(self.classifier_bias))


# ---------------------------------------------------------------------------
# tasks


@dataclass
class TaskParams:
    name: str
    num_classes: int
    variant: str
    surrogate: str
    k: dict  # layer -> KParams
    bn: dict  # "<layer>.bn" -> BatchNormParams
    classifier_weight: Tensor
    classifier_bias: Tensor
    real_masks: dict = field(default_factory=dict)  # layer -> Tensor, training state
    binary_masks: dict = field(default_factory=dict)  # layer -> bool array, final state
    channel_wise: bool = False
    learn_k: Optional[list] = None
    task_bn: bool = True  # False: the baseline's batch norms are reused, frozen
    theta_digest: Optional[str] = None  # the baseline this task was trained against
    meta: dict = field(default_factory=dict)
    history: list = field(default_factory=list, repr=False, compare=False)

    def mask(self, layer: str) -> np.ndarray:
        if layer in self.binary_masks:
            return self.binary_masks[layer]
        return threshold(self.real_masks[layer].data)

    @property
    def layers(self) -> list:
        return list(self.k)

    @property
    def is_final(self) -> bool:
        return not self.real_masks

    def finalize(self) -> "TaskParams":
        """Replace real masks by their thresholded bits (final artifact form)."""
        for layer, r in self.real_masks.items():
            self.binary_masks[layer] = threshold(r.data)
        self.real_masks = {}
        return self

    def mask_bits(self) -> int:
        return sum(int(np.prod(self.mask(layer).shape)) for layer in self.k)

    def scalar_count(self) -> int:
        """Stored 32-bit values outside masks and classifier: every k plus 4 per BN channel."""
        return sum(k.scalar_count for k in self.k.values()) + sum(4 * p.channels for p in self.bn.values())

    def parameter_groups(self) -> dict:
        adam = list(self.real_masks.values())
        for k in self.k.values():
            adam += k.trainable()
        for p in self.bn.values():
            adam += [p.scale, p.bias]
        return {"adam": adam, "sgd": [self.classifier_weight, self.classifier_bias]}

    def container(self, arch: dict, theta_digest: Optional[str] = None) -> ckpt.Container:
        desc = {
            "arch": arch,
            "task": {
                "name": self.name,
                "num_classes": self.num_classes,
                "variant": self.variant,
                "surrogate": self.surrogate,
                "channel_wise": self.channel_wise,
                "learn_k": self.learn_k,
                "task_bn": self.task_bn,
                "followed_by_bn": {layer: k.followed_by_bn for layer, k in self.k.items()},
                "theta_digest": theta_digest or self.theta_digest,
                "meta": self.meta,
            },
        }
        c = ckpt.Container(ckpt.KIND_TASK, desc)
        for layer, k in self.k.items():
            if layer in self.real_masks:
                c.add_array(f"{layer}.mask_real", self.real_masks[layer].data)
            else:
                c.add_mask(f"{layer}.mask", self.binary_masks[layer])
            for j, t in enumerate(k.tensors):
                c.add_array(f"{layer}.k{j}", t.data)
        for name, p in self.bn.items():
            _bn_records(c, name, p)
        c.add_array("classifier.weight", self.classifier_weight.data)
        c.add_array("classifier.bias", self.classifier_bias.data)
        return c

    def save(self, path, arch: dict, theta_digest: Optional[str] = None) -> bytes:
        return ckpt.write(path, self.container(arch, theta_digest))

    @classmethod
    def from_container(cls, c: ckpt.Container) -> "TaskParams":
        task = c.descriptor["task"]
        dt = get_default_dtype()
        names = set(c.names())
        k, real, bits = {}, {}, {}
        for layer in masked_layers(c.descriptor["arch"]):
            lname = layer["name"]
            if f"{lname}.mask" in names:
                bits[lname] = c.get(f"{lname}.mask")
            else:
                real[lname] = Tensor(c.get(f"{lname}.mask_real").astype(dt), requires_grad=True)
            followed = task["followed_by_bn"][lname]
            learnable = resolve_learnable(task["variant"], followed, task["learn_k"])
            ks = [Tensor(c.get(f"{lname}.k{j}").astype(dt), requires_grad=j in learnable) for j in range(4)]
            k[lname] = KParams(*ks, learnable=frozenset(learnable), followed_by_bn=followed)
        task_bn = task.get("task_bn", True)
        bn = {}
        if task_bn:
            bn = {bn_name(layer): _bn_from(c, bn_name(layer)) for layer in masked_layers(c.descriptor["arch"]) if layer.get("bn")}
        return cls(
            name=task["name"],
            num_classes=task["num_classes"],
            variant=task["variant"],
            surrogate=task["surrogate"],
            k=k,
            bn=bn,
            classifier_weight=Tensor(c.get("classifier.weight").astype(dt), requires_grad=True),
            classifier_bias=Tensor(c.get("classifier.bias").astype(dt), requires_grad=True),
            real_masks=real,
            binary_masks=bits,
            channel_wise=task["channel_wise"],
            learn_k=task["learn_k"],
            task_bn=task_bn,
            theta_digest=task.get("theta_digest"),
            meta=task.get("meta", {}),
        )

    @classmethod
    def load(cls, path) -> "TaskParams":
        return cls.from_container(ckpt.read(path, ckpt.KIND_TASK))


def task_rng(seed: int, task_name: str) -> np.random.Generator:
    """Per-task generator; depends only on the seed and the task's own name."""
    return np.random.default_rng([int(seed), zlib.crc32(task_name.encode("utf-8"))])


def new_task_params(
    theta: BaselineParams,
    name: str,
    num_classes: int,
    variant: str = "full",
    surrogate: str = "identity",
    channel_wise: bool = False,
    learn_k: Optional[Iterable[int]] = None,
    rng: Optional[np.random.Generator] = None,
    meta: Optional[dict] = None,
    task_bn: bool = True,
) -> TaskParams:
    """Fresh task parameters: all-ones masks, neutral k, the baseline's batch norms."""
    rng = rng if rng is not None else task_rng(0, name)
    learn = None if learn_k is None else sorted(set(learn_k))
    k, real, bn = {}, {}, {}
    for layer in masked_layers(theta.arch):
        lname = layer["name"]
        real[lname] = init_mask(weight_shape(layer), rng)
        k[lname] = KParams.initial(variant, bool(layer.get("bn")), layer["out"], channel_wise, learn)
        if layer.get("bn") and task_bn:
            bn[bn_name(layer)] = theta.bn[bn_name(layer)].copy()
    width = feature_dim(theta.arch)
    dt = get_default_dtype()
    return TaskParams(
        name=name,
        num_classes=num_classes,
        variant=variant,
        surrogate=surrogate,
        k=k,
        bn=bn,
        classifier_weight=Tensor((rng.standard_normal((num_classes, width)) * 0.01).astype(dt), requires_grad=True),
        classifier_bias=Tensor(np.zeros(num_classes, dt), requires_grad=True),
        real_masks=real,
        channel_wise=channel_wise,
        learn_k=learn,
        task_bn=task_bn,
        theta_digest=theta.digest(),
        meta=dict(meta or {}),
    )


class TaskNetwork:
    """f_i: the baseline architecture with transformed kernels and the task's own BN and classifier."""

    def __init__(self, theta: BaselineParams, omega: TaskParams):
        if omega.theta_digest is not None and omega.theta_digest != theta.digest():
            raise BaselineMismatchError(
                f"task {omega.name!r} was trained against baseline {omega.theta_digest[:12]}, got {theta.digest()[:12]}"
            )
        layer_names = [layer["name"] for layer in masked_layers(theta.arch)]
        for lname in layer_names:
            if lname not in omega.k:
                raise LayerMismatchError(f"task {omega.name!r} has no parameters for layer {lname!r}")
            shape = omega.mask(lname).shape
            if shape != theta.weights[f"{lname}.weight"].shape:
                raise LayerMismatchError(f"layer {lname}: mask {shape} does not match kernel {theta.weights[lname + '.weight'].shape}")
        extra = set(omega.k) - set(layer_names)
        if extra:
            raise LayerMismatchError(f"task {omega.name!r} has parameters for unknown layers {sorted(extra)}")
        for layer in masked_layers(theta.arch):
            if layer.get("bn") and omega.task_bn and bn_name(layer) not in omega.bn:
                raise LayerMismatchError(f"task {omega.name!r} has no batch norm for layer {layer['name']!r}")
        if omega.classifier_weight.shape != (omega.num_classes, feature_dim(theta.arch)):
            raise LayerMismatchError(f"classifier {omega.classifier_weight.shape} does not match {omega.num_classes} classes")
        self.theta = theta
        self.omega = omega

    def kernel(self, layer: dict, training: bool) -> Tensor:
        lname = layer["name"]
        om = self.omega
        if training and lname in om.real_masks:
            m = binarize(om.real_masks[lname], om.surrogate)
        else:
            m = Tensor(om.mask(lname).astype(get_default_dtype()))
        return transform_weights(self.theta.weights[f"{lname}.weight"], m, om.k[lname], om.variant)

    def features(self, x, training: bool = False) -> Tensor:
        x = x if isinstance(x, Tensor) else Tensor(x)
        return run_backbone(
            self.theta.arch,
            x,
            kernel=lambda layer: self.kernel(layer, training),
            bias=lambda layer: Tensor(self.theta.weights[f"{layer['name']}.bias"]),
            bn=lambda layer: self.omega.bn.get(bn_name(layer)) or self.theta.bn[bn_name(layer)],
            training=training,
            frozen_bn=() if self.omega.task_bn else self.theta.bn.keys(),
        )

    def __call__(self, x, training: bool = False) -> Tensor:
        from .layers import linear

        return linear(self.features(x, training), self.omega.classifier_weight, self.omega.classifier_bias)

    def parameter_groups(self) -> dict:
        return self.omega.parameter_groups()


def build_task_network(theta: BaselineParams, omega: TaskParams) -> TaskNetwork:
    return TaskNetwork(theta, omega)


# ---------------------------------------------------------------------------
# overhead


@dataclass
class OverheadReport:
    baseline_params: int
    task_names: list
    mask_bits: list  # per task
    scalars: list  # per task, 32-bit values
    payload_bytes: list  # per task, bytes of mask + scalar payload as serialized

    @property
    def extra_bits(self) -> list:
        return [b + 32 * s for b, s in zip(self.mask_bits, self.scalars)]

    @property
    def ratio(self) -> Fraction:
        return Fraction(32 * self.baseline_params + sum(self.extra_bits), 32 * self.baseline_params)

    def to_dict(self) -> dict:
        return {
            "baseline_params": self.baseline_params,
            "tasks": [
                {"task": n, "mask_bits": b, "scalars": s, "extra_bits": e, "payload_bytes": p}
                for n, b, s, e, p in zip(self.task_names, self.mask_bits, self.scalars, self.extra_bits, self.payload_bytes)
            ],
            "ratio": float(self.ratio),
            "ratio_exact": f"{self.ratio.numerator}/{self.ratio.denominator}",
        }


def overhead(theta: BaselineParams, omegas: Sequence[TaskParams]) -> OverheadReport:
    """Exact storage accounting in baseline-parameter units, classifiers excluded."""
    bits, scalars, payload = [], [], []
    for om in omegas:
        b = om.mask_bits()
        s = om.scalar_count()
        bits.append(b)
        scalars.append(s)
        payload.append(sum((om.mask(layer).size + 7) // 8 for layer in om.k) + 4 * s)
    return OverheadReport(theta.shared_param_count, [o.name for o in omegas], bits, scalars, payload)


def measured_payload_bytes(container: ckpt.Container) -> int:
    """Mask and scalar payload bytes actually present in a task file (classifier excluded)."""
    return sum(r.payload_bytes for r in container.records if not r.name.startswith("classifier."))


# ---------------------------------------------------------------------------
# adding tasks


def add_task(
    theta: BaselineParams,
    name: str,
    train_data,
    cfg,
    eval_data=None,
    metrics_path=None,
    meta: Optional[dict] = None,
) -> TaskParams:
    """Train a new task on top of the frozen baseline and return its final parameters.

    ``cfg`` is a :class:`maskmod.config.RunConfig`.  The result depends only on
    the baseline, the data, the config and the task name; other tasks never
    enter the computation.
    """
    from .train import train_task

    before = theta.digest()
    rng = task_rng(cfg.seed, name)
    omega = new_task_params(
        theta,
        name,
        train_data.classes,
        variant=cfg.variant,
        surrogate=cfg.surrogate,
        channel_wise=cfg.channel_wise,
        learn_k=cfg.learn_k,
        rng=rng,
        meta=meta,
        task_bn=cfg.task_bn,
    )
    history = train_task(TaskNetwork(theta, omega), train_data, cfg.schedule, rng, metrics_path, eval_data)
    after = theta.digest()
    if after != before:
        raise BaselineModifiedError(f"baseline digest changed while training {name!r}: {before} -> {after}")
    omega.history = history
    return omega.finalize()
