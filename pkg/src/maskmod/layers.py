"""Layer vocabulary for the baseline and task networks."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .tensor import ShapeError, Tensor, _record, as_tensor, get_default_dtype

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def _conv_out(size: int, k: int, stride: int, padding: int, what: str) -> int:
    span = size + 2 * padding - k
    if span < 0:
        raise ShapeError(f"conv2d: kernel extent {k} exceeds padded input extent {size + 2 * padding} ({what})")
    if span % stride:
        raise ShapeError(f"conv2d: ({size} + 2*{padding} - {k}) is not divisible by stride {stride} ({what})")
    return span // stride + 1


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, oh: int, ow: int) -> np.ndarray:
    # [n,c,H,W] padded -> [c*kh*kw, n*oh*ow], filled one kernel offset at a time
    n, c = xp.shape[:2]
    cols = np.empty((c, kh, kw, n, oh, ow), dtype=xp.dtype)
    xt = xp.transpose(1, 0, 2, 3)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xt[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride]
    return cols.reshape(c * kh * kw, n * oh * ow)


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of ``x`` [n,c,h,w] with ``weight`` [o,c,kh,kw]."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-d input and kernel, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    o, ci, kh, kw = weight.shape
    if c != ci:
        raise ShapeError(f"conv2d: input channels {x.shape} do not match kernel {weight.shape}")
    oh = _conv_out(h, kh, stride, padding, "height")
    ow = _conv_out(w, kw, stride, padding, "width")

    pad = ((0, 0), (0, 0), (padding, padding), (padding, padding))
    xp = np.pad(x.data, pad) if padding else x.data
    cols = _im2col(xp, kh, kw, stride, oh, ow)
    wmat = weight.data.reshape(o, -1)
    out = (wmat @ cols).reshape(o, n, oh, ow).transpose(1, 0, 2, 3)
    if bias is not None:
        out = out + bias.data.reshape(1, -1, 1, 1)
    out = np.ascontiguousarray(out)

    def bwd(g):
        gt = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(o, -1)
        gw = (gt @ cols.T).reshape(weight.shape)
        gcols = (wmat.T @ gt).reshape(c, kh, kw, n, oh, ow)
        gxp = np.zeros((c, n) + xp.shape[2:], dtype=g.dtype)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += gcols[:, i, j]
        gx = gxp.transpose(1, 0, 2, 3)
        if padding:
            gx = gx[:, :, padding:padding + h, padding:padding + w]
        grads = [np.ascontiguousarray(gx), gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    inputs = [x, weight] + ([as_tensor(bias)] if bias is not None else [])
    return _record("conv2d", inputs, out, bwd)


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """``x @ weight.T + bias`` with ``weight`` stored [out, in] like a conv kernel."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear: input {x.shape} does not match weight {weight.shape}")
    out = x.data @ weight.data.T
    if bias is not None:
        if bias.shape != (weight.shape[0],):
            raise ShapeError(f"linear: bias {bias.shape} does not match weight {weight.shape}")
        out = out + bias.data

    def bwd(g):
        grads = [g @ weight.data, g.T @ x.data]
        if bias is not None:
            grads.append(g.sum(axis=0))
        return grads

    inputs = [x, weight] + ([as_tensor(bias)] if bias is not None else [])
    return _record("linear", inputs, out, bwd)


@dataclass
class BatchNormParams:
    scale: Tensor
    bias: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = BN_MOMENTUM
    eps: float = BN_EPS

    @classmethod
    def fresh(cls, channels: int) -> "BatchNormParams":
        dt = get_default_dtype()
        return cls(
            scale=Tensor(np.ones(channels, dt), requires_grad=True),
            bias=Tensor(np.zeros(channels, dt), requires_grad=True),
            running_mean=np.zeros(channels, dt),
            running_var=np.ones(channels, dt),
        )

    @property
    def channels(self) -> int:
        return self.scale.shape[0]

    def copy(self) -> "BatchNormParams":
        return BatchNormParams(
            Tensor(self.scale.data.copy(), requires_grad=True),
            Tensor(self.bias.data.copy(), requires_grad=True),
            self.running_mean.copy(),
            self.running_var.copy(),
            self.momentum,
            self.eps,
        )


def batchnorm(x: Tensor, p: BatchNormParams, training: bool) -> Tensor:
    """Per-channel normalization over every axis except 1.

    In training mode the batch statistics are used and the running statistics
    are updated in place; in eval mode the running statistics are used.
    """
    x = as_tensor(x)
    if x.ndim not in (2, 4) or x.shape[1] != p.channels:
        raise ShapeError(f"batchnorm: input {x.shape} does not match {p.channels} channels")
    axes = (0,) if x.ndim == 2 else (0, 2, 3)
    bshape = (1, -1) if x.ndim == 2 else (1, -1, 1, 1)
    count = x.size // p.channels
    gamma = p.scale.data.reshape(bshape)

    if not training:
        inv = 1.0 / np.sqrt(p.running_var + p.eps)
        xhat = (x.data - p.running_mean.reshape(bshape)) * inv.reshape(bshape)
        out = gamma * xhat + p.bias.data.reshape(bshape)

        def bwd_eval(g):
            return g * (gamma * inv.reshape(bshape)), (g * xhat).sum(axis=axes), g.sum(axis=axes)

        return _record("batchnorm", [x, p.scale, p.bias], out, bwd_eval)

    if count < 2:
        raise ShapeError(f"batchnorm: training mode needs at least 2 values per channel, got {x.shape}")
    mu = x.data.mean(axis=axes)
    var = x.data.var(axis=axes)
    inv = 1.0 / np.sqrt(var + p.eps)
    xhat = (x.data - mu.reshape(bshape)) * inv.reshape(bshape)
    out = gamma * xhat + p.bias.data.reshape(bshape)

    m = p.momentum
    p.running_mean[...] = (1 - m) * p.running_mean + m * mu
    p.running_var[...] = (1 - m) * p.running_var + m * var * count / (count - 1)

    def bwd(g):
        gxhat = g * gamma
        gx = (inv.reshape(bshape) / count) * (
            count * gxhat
            - gxhat.sum(axis=axes).reshape(bshape)
            - xhat * (gxhat * xhat).sum(axis=axes).reshape(bshape)
        )
        return gx, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    return _record("batchnorm", [x, p.scale, p.bias], out, bwd)


def maxpool2d(x: Tensor, size: int = 2) -> Tensor:
    x = as_tensor(x)
    n, c, h, w = x.shape
    if h % size or w % size:
        raise ShapeError(f"maxpool2d: extents {x.shape} not divisible by window {size}")
    offsets = [(i, j) for i in range(size) for j in range(size)]
    out = x.data[:, :, 0::size, 0::size].copy()
    arg = np.zeros(out.shape, dtype=np.int8)
    for idx, (i, j) in enumerate(offsets[1:], start=1):
        cand = x.data[:, :, i::size, j::size]
        better = cand > out  # strict: ties keep the first maximum
        np.copyto(out, cand, where=better)
        arg[better] = idx

    def bwd(g):
        gx = np.zeros_like(x.data)
        for idx, (i, j) in enumerate(offsets):
            gx[:, :, i::size, j::size] = np.where(arg == idx, g, 0)
        return (gx,)

    return _record("maxpool2d", [x], out, bwd)


def global_avg_pool(x: Tensor) -> Tensor:
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool: expected 4-d input, got {x.shape}")
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3))
    return _record("global_avg_pool", [x], out, lambda g: (np.broadcast_to(g[:, :, None, None] / (h * w), x.shape).copy(),))


def flatten(x: Tensor) -> Tensor:
    return as_tensor(x).reshape(x.shape[0], -1)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax_xent(logits: Tensor, labels: Sequence[int]) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(``logits``)."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"softmax_xent: logits {logits.shape} do not match labels {labels.shape}")
    n, k = logits.shape
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"softmax_xent: labels must lie in [0, {k}), got range [{labels.min()}, {labels.max()}]")
    logp = log_softmax(logits.data)
    loss = -logp[np.arange(n), labels].mean()

    def bwd(g):
        grad = np.exp(logp)
        grad[np.arange(n), labels] -= 1
        return (grad * (g / n),)

    return _record("softmax_xent", [logits], np.asarray(loss), bwd)
