"""Architecture descriptors and the forward pass shared by every network.

A descriptor is a plain JSON-able dict::

    {"input_shape": [3, 16, 16],
     "layers": [{"type": "conv", "name": "conv1", "in": 3, "out": 16,
                 "kernel": 3, "stride": 1, "padding": 1, "bn": true},
                {"type": "relu"}, {"type": "maxpool", "size": 2}, ...]}

``conv`` and ``dense`` layers are the masked layers; their kernels live in the
shared baseline parameters.  A masked layer with ``"bn": true`` is followed
by a batch normalization named ``<layer>.bn`` and carries no bias; without
one it has a frozen bias in the baseline parameters.
"""
from __future__ import annotations

import copy
from typing import Callable, Container, Iterator

import numpy as np

from . import layers as L
from .tensor import ShapeError, Tensor, relu

MASKED_TYPES = ("conv", "dense")

TOY_ARCH = {
    "input_shape": [3, 16, 16],
    "layers": [
        {"type": "conv", "name": "conv1", "in": 3, "out": 16, "kernel": 3, "stride": 1, "padding": 1, "bn": True},
        {"type": "relu"},
        {"type": "maxpool", "size": 2},
        {"type": "conv", "name": "conv2", "in": 16, "out": 32, "kernel": 3, "stride": 1, "padding": 1, "bn": True},
        {"type": "relu"},
        {"type": "maxpool", "size": 2},
        {"type": "conv", "name": "conv3", "in": 32, "out": 32, "kernel": 3, "stride": 1, "padding": 1, "bn": True},
        {"type": "relu"},
        {"type": "gap"},
        {"type": "dense", "name": "fc1", "in": 32, "out": 32, "bn": False},
        {"type": "relu"},
    ],
}


def toy_arch() -> dict:
    return copy.deepcopy(TOY_ARCH)


def masked_layers(arch: dict) -> Iterator[dict]:
    for layer in arch["layers"]:
        if layer["type"] in MASKED_TYPES:
            yield layer


def weight_shape(layer: dict) -> tuple:
    if layer["type"] == "conv":
        k = layer["kernel"]
        return (layer["out"], layer["in"], k, k)
    return (layer["out"], layer["in"])


def has_bias(layer: dict) -> bool:
    return not layer.get("bn", False)


def bn_name(layer: dict) -> str:
    return f"{layer['name']}.bn"


def validate_arch(arch: dict) -> int:
    """Check shapes flow through the layer list; return the feature width."""
    shape = tuple(arch["input_shape"])
    names = set()
    for i, layer in enumerate(arch["layers"]):
        kind = layer.get("type")
        if kind in MASKED_TYPES:
            if layer["name"] in names:
                raise ValueError(f"duplicate layer name {layer['name']!r}")
            names.add(layer["name"])
        if kind == "conv":
            if len(shape) != 3 or shape[0] != layer["in"]:
                raise ShapeError(f"layer {layer['name']}: expects {layer['in']} input channels, gets {shape}")
            s, p, k = layer.get("stride", 1), layer.get("padding", 0), layer["kernel"]
            shape = (layer["out"],) + tuple(L._conv_out(e, k, s, p, layer["name"]) for e in shape[1:])
        elif kind == "dense":
            if len(shape) != 1 or shape[0] != layer["in"]:
                raise ShapeError(f"layer {layer['name']}: expects {layer['in']} input features, gets {shape}")
            shape = (layer["out"],)
        elif kind == "maxpool":
            size = layer.get("size", 2)
            if len(shape) != 3 or shape[1] % size or shape[2] % size:
                raise ShapeError(f"layer {i} (maxpool): cannot pool {shape} by {size}")
            shape = (shape[0], shape[1] // size, shape[2] // size)
        elif kind == "gap":
            shape = (shape[0],)
        elif kind == "flatten":
            shape = (int(np.prod(shape)),)
        elif kind != "relu":
            raise ValueError(f"layer {i}: unknown type {kind!r}")
    if len(shape) != 1:
        raise ShapeError(f"architecture must end in a feature vector, ends in {shape}")
    return shape[0]


def feature_dim(arch: dict) -> int:
    return validate_arch(arch)


def run_backbone(
    arch: dict,
    x: Tensor,
    kernel: Callable[[dict], Tensor],
    bias: Callable[[dict], Tensor],
    bn: Callable[[dict], L.BatchNormParams],
    training: bool,
    frozen_bn: Container = (),
) -> Tensor:
    """Forward through every layer of ``arch``; the callables supply parameters.

    Batch norms named in ``frozen_bn`` always run on their stored statistics.
    """
    if tuple(x.shape[1:]) != tuple(arch["input_shape"]):
        raise ShapeError(f"input {x.shape} does not match architecture input {arch['input_shape']}")
    h = x
    for layer in arch["layers"]:
        kind = layer["type"]
        if kind == "conv":
            b = bias(layer) if has_bias(layer) else None
            h = L.conv2d(h, kernel(layer), b, layer.get("stride", 1), layer.get("padding", 0))
            if layer.get("bn"):
                h = L.batchnorm(h, bn(layer), training and bn_name(layer) not in frozen_bn)
        elif kind == "dense":
            h = L.linear(h, kernel(layer), bias(layer) if has_bias(layer) else None)
            if layer.get("bn"):
                h = L.batchnorm(h, bn(layer), training and bn_name(layer) not in frozen_bn)
        elif kind == "relu":
            h = relu(h)
        elif kind == "maxpool":
            h = L.maxpool2d(h, layer.get("size", 2))
        elif kind == "gap":
            h = L.global_avg_pool(h)
        elif kind == "flatten":
            h = L.flatten(h)
    return h
