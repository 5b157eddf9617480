"""Unmasked networks: baseline pretraining and the two reference regimes
(classifier-only feature extraction and individual fine-tuning)."""
from __future__ import annotations

import numpy as np

from .layers import BatchNormParams, linear
from .network import bn_name, feature_dim, has_bias, masked_layers, run_backbone, validate_arch, weight_shape
from .registry import BaselineParams
from .tensor import Tensor, get_default_dtype


def he_init(shape: tuple, rng: np.random.Generator) -> np.ndarray:
    fan_in = int(np.prod(shape[1:]))
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(get_default_dtype())


class PlainNetwork:
    """All parameters are ordinary tensors.

    ``train_backbone`` decides whether kernels and batch norms are trained;
    with it off, batch norms also run on their stored statistics.
    """

    def __init__(self, arch, weights, bn, classifier_weight, classifier_bias, train_backbone=True):
        self.arch = arch
        self.weights = weights
        self.bn = bn
        self.classifier_weight = classifier_weight
        self.classifier_bias = classifier_bias
        self.train_backbone = train_backbone

    @classmethod
    def random(cls, arch: dict, num_classes: int, rng: np.random.Generator) -> "PlainNetwork":
        validate_arch(arch)
        dt = get_default_dtype()
        weights, bn = {}, {}
        for layer in masked_layers(arch):
            weights[f"{layer['name']}.weight"] = Tensor(he_init(weight_shape(layer), rng), requires_grad=True)
            if has_bias(layer):
                weights[f"{layer['name']}.bias"] = Tensor(np.zeros(layer["out"], dt), requires_grad=True)
            if layer.get("bn"):
                bn[bn_name(layer)] = BatchNormParams.fresh(layer["out"])
        width = feature_dim(arch)
        cw = Tensor((rng.standard_normal((num_classes, width)) * 0.01).astype(dt), requires_grad=True)
        cb = Tensor(np.zeros(num_classes, dt), requires_grad=True)
        return cls(arch, weights, bn, cw, cb)

    @classmethod
    def from_baseline(
        cls, theta: BaselineParams, num_classes: int, rng: np.random.Generator, train_backbone: bool = True
    ) -> "PlainNetwork":
        """Start from the baseline's backbone with a fresh classifier head."""
        dt = get_default_dtype()
        weights = {k: Tensor(np.array(v, dtype=dt), requires_grad=train_backbone) for k, v in theta.weights.items()}
        bn = {k: p.copy() for k, p in theta.bn.items()}
        width = feature_dim(theta.arch)
        cw = Tensor((rng.standard_normal((num_classes, width)) * 0.01).astype(dt), requires_grad=True)
        cb = Tensor(np.zeros(num_classes, dt), requires_grad=True)
        return cls(theta.arch, weights, bn, cw, cb, train_backbone=train_backbone)

    def features(self, x, training: bool = False) -> Tensor:
        x = x if isinstance(x, Tensor) else Tensor(x)
        return run_backbone(
            self.arch,
            x,
            kernel=lambda layer: self.weights[f"{layer['name']}.weight"],
            bias=lambda layer: self.weights[f"{layer['name']}.bias"],
            bn=lambda layer: self.bn[bn_name(layer)],
            training=training and self.train_backbone,
        )

    def __call__(self, x, training: bool = False) -> Tensor:
        return linear(self.features(x, training), self.classifier_weight, self.classifier_bias)

    def parameter_groups(self) -> dict:
        adam = []
        if self.train_backbone:
            adam = list(self.weights.values())
            for p in self.bn.values():
                adam += [p.scale, p.bias]
        return {"adam": adam, "sgd": [self.classifier_weight, self.classifier_bias]}

    def to_baseline(self) -> BaselineParams:
        return BaselineParams(
            self.arch,
            {k: t.data for k, t in self.weights.items()},
            {k: p.copy() for k, p in self.bn.items()},
            self.classifier_weight.data,
            self.classifier_bias.data,
        )
