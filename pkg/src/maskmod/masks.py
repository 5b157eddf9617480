"""Binary masks learned through thresholded real matrices, and the affine
weight transforms they drive.

A masked layer keeps the frozen baseline kernel ``W`` and produces

    k0 * W + k1 * 1 + k2 * M + k3 * (W * M)

with ``M = 1[R >= 0]``.  The ``piggyback`` variant pins (k0, k1, k2, k3) to
(0, 0, 0, 1), ``simple`` pins k3 to 0, ``full`` learns all of them.  When the
layer feeds a batch normalization, k0 is pinned to 1 outside piggyback.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Optional

import numpy as np

from .tensor import Tensor, _record, get_default_dtype

VARIANTS = ("piggyback", "simple", "full")
SURROGATES = ("identity", "sigmoid")
MASK_INIT_LOW = 1e-4
MASK_INIT_HIGH = 2e-4


class MaskConfigError(ValueError):
    """A variant and its k parameters disagree."""


def threshold(r: np.ndarray) -> np.ndarray:
    """Hard threshold ``1[r >= 0]`` as a boolean array; zero maps to one."""
    return np.asarray(r) >= 0


def surrogate_derivative(r: np.ndarray, kind: str) -> np.ndarray:
    if kind == "identity":
        return np.ones_like(r)
    if kind == "sigmoid":
        # s(1 - s) written through exp(-|r|) so the tails do not round to 0
        e = np.exp(-np.abs(r))
        d = e / (1.0 + e) ** 2
        return np.maximum(d, np.finfo(d.dtype).tiny)
    raise ValueError(f"unknown surrogate {kind!r}; expected one of {SURROGATES}")


def surrogate_backward(upstream: np.ndarray, r: np.ndarray, kind: str) -> np.ndarray:
    """Gradient w.r.t. the real mask given the gradient w.r.t. the binary mask."""
    upstream = np.asarray(upstream)
    r = np.asarray(r, dtype=upstream.dtype if upstream.dtype.kind == "f" else None)
    if upstream.shape != r.shape:
        raise ValueError(f"surrogate_backward: upstream {upstream.shape} does not match mask {r.shape}")
    if kind == "identity":
        return upstream.copy()
    out = upstream * surrogate_derivative(r, kind)
    # the derivative is positive, so only underflow could lose the sign
    lost = (out == 0) & (upstream != 0)
    if lost.any():
        out[lost] = np.copysign(np.finfo(out.dtype).smallest_subnormal, upstream[lost])
    return out


def binarize(real_mask: Tensor, surrogate: str) -> Tensor:
    """Forward: exact threshold.  Backward: the surrogate derivative."""
    if surrogate not in SURROGATES:
        raise ValueError(f"unknown surrogate {surrogate!r}; expected one of {SURROGATES}")
    r = real_mask.data
    out = threshold(r).astype(r.dtype)
    return _record("threshold", [real_mask], out, lambda g: (surrogate_backward(g, r, surrogate),))


def init_mask(shape: Iterable[int], rng: np.random.Generator, dtype=None) -> Tensor:
    """Real mask drawn uniformly from [1e-4, 2e-4], so every bit starts at one."""
    dt = np.dtype(dtype or get_default_dtype()).type
    r = rng.uniform(MASK_INIT_LOW, MASK_INIT_HIGH, size=tuple(shape)).astype(dt)
    lo, hi = dt(MASK_INIT_LOW), dt(MASK_INIT_HIGH)
    if lo < MASK_INIT_LOW:
        lo = np.nextafter(lo, dt(1))
    if hi > MASK_INIT_HIGH:
        hi = np.nextafter(hi, dt(0))
    return Tensor(np.clip(r, lo, hi), requires_grad=True)


@dataclass
class KParams:
    """The four per-layer coefficients and which of them are trained.

    ``k1`` is a scalar or, in channel-wise mode, one value per output channel.
    """

    k0: Tensor
    k1: Tensor
    k2: Tensor
    k3: Tensor
    learnable: frozenset = field(default_factory=frozenset)
    followed_by_bn: bool = False

    @classmethod
    def initial(
        cls,
        variant: str,
        followed_by_bn: bool,
        out_channels: int = 1,
        channel_wise: bool = False,
        learn_k: Optional[Iterable[int]] = None,
        dtype=None,
    ) -> "KParams":
        """k0 = 1, k1 = k2 = k3 = 0 (piggyback: 0, 0, 0, 1) so a new task
        starts as an exact copy of the baseline."""
        learnable = resolve_learnable(variant, followed_by_bn, learn_k)
        dt = dtype or get_default_dtype()
        start = (0.0, 0.0, 0.0, 1.0) if variant == "piggyback" else (1.0, 0.0, 0.0, 0.0)
        k1_shape = (out_channels,) if channel_wise else (1,)
        ks = [
            Tensor(np.full(k1_shape if j == 1 else (1,), start[j], dt), requires_grad=j in learnable)
            for j in range(4)
        ]
        return cls(*ks, learnable=frozenset(learnable), followed_by_bn=followed_by_bn)

    @property
    def tensors(self) -> tuple:
        return (self.k0, self.k1, self.k2, self.k3)

    def trainable(self) -> list:
        return [t for j, t in enumerate(self.tensors) if j in self.learnable]

    @property
    def channel_wise(self) -> bool:
        return self.k1.size > 1

    @property
    def scalar_count(self) -> int:
        return sum(t.size for t in self.tensors)

    def values(self) -> dict:
        return {f"k{j}": t.data.tolist() if t.size > 1 else float(t.data[0]) for j, t in enumerate(self.tensors)}

    def check(self, variant: str) -> None:
        """Raise MaskConfigError when the values break the variant's pinned entries."""
        if variant not in VARIANTS:
            raise MaskConfigError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
        k0, k1, k2, k3 = (t.data for t in self.tensors)
        if variant == "piggyback":
            pinned = {0: k0, 2: k2, 3: k3}
            expect = {0: 0.0, 2: 0.0, 3: 1.0}
            if 1 not in self.learnable:
                pinned[1], expect[1] = k1, 0.0
            for j, arr in pinned.items():
                if np.any(arr != expect[j]):
                    raise MaskConfigError(f"piggyback pins k{j} to {expect[j]}, got {arr.tolist()}")
            return
        if variant == "simple" and np.any(k3 != 0):
            raise MaskConfigError(f"simple variant pins k3 to 0, got {k3.tolist()}")
        if self.followed_by_bn and np.any(k0 != 1):
            raise MaskConfigError(f"a layer followed by batch normalization pins k0 to 1, got {k0.tolist()}")
        for j, arr in enumerate((k0, k1, k2, k3)):
            if j in (1, 2, 3) and j not in self.learnable and np.any(arr != 0):
                raise MaskConfigError(f"k{j} is not learned in this configuration and must stay 0")


def resolve_learnable(variant: str, followed_by_bn: bool, learn_k: Optional[Iterable[int]] = None) -> set:
    """Which of k0..k3 are trained.

    k0 is trained only outside piggyback on layers without a following batch
    norm.  ``learn_k`` selects among k1..k3; ``None`` means the variant default.
    """
    if variant not in VARIANTS:
        raise MaskConfigError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    allowed = {"piggyback": {1}, "simple": {1, 2}, "full": {1, 2, 3}}[variant]
    defaults = {"piggyback": set(), "simple": {1, 2}, "full": {1, 2, 3}}[variant]
    chosen = defaults if learn_k is None else set(learn_k)
    bad = chosen - allowed
    if bad:
        raise MaskConfigError(f"variant {variant!r} cannot learn k{sorted(bad)}; allowed: k{sorted(allowed)}")
    if variant != "piggyback" and not followed_by_bn:
        chosen.add(0)
    return chosen


def _per_out(coef: np.ndarray, ndim: int) -> np.ndarray:
    # scalar k broadcasts everywhere; a [C] vector runs along the output-channel axis
    if coef.size == 1:
        return coef.reshape(())
    return coef.reshape((-1,) + (1,) * (ndim - 1))


def affine_mask_weights(w: np.ndarray, m: np.ndarray, k0, k1, k2, k3) -> np.ndarray:
    """Plain-array form of the transform.

    Terms whose coefficient is exactly zero are skipped, so pinned
    configurations reproduce ``W * M`` or ``W`` bit for bit (signed zeros
    included).
    """
    m = np.asarray(m, dtype=w.dtype)
    out = None
    for coef, term in ((k3, lambda: w * m), (k0, lambda: w), (k1, None), (k2, lambda: m)):
        coef = np.asarray(coef, dtype=w.dtype)
        if not np.any(coef):
            continue
        c = _per_out(coef, w.ndim)
        piece = np.broadcast_to(c, w.shape) if term is None else c * term()
        out = piece if out is None else out + piece
    if out is None:
        return np.zeros_like(w)
    return np.array(out, dtype=w.dtype, copy=True)


def transform_weights(w, mask: Tensor, k: KParams, variant: str) -> Tensor:
    """Differentiable transform of the frozen kernel ``w`` (an array, never trained).

    ``mask`` is the binary mask tensor, normally the output of :func:`binarize`
    so that its gradient flows on to the real mask through the surrogate.
    """
    w = np.asarray(getattr(w, "data", w))
    if w.shape != mask.shape:
        raise ValueError(f"transform_weights: kernel {w.shape} and mask {mask.shape} differ")
    k.check(variant)
    if variant == "piggyback" and k.learnable - {1}:
        raise MaskConfigError("piggyback variant only supports learning k1")
    m = mask.data
    k0, k1, k2, k3 = (t.data for t in k.tensors)
    if variant == "simple":
        k3 = np.zeros_like(k3)
    out = affine_mask_weights(w, m, k0, k1, k2, k3)
    channel_axes = tuple(range(1, w.ndim))

    def bwd(g):
        gk1 = g.sum(axis=channel_axes) if k.k1.size > 1 else np.atleast_1d(g.sum())
        gm = None
        if mask.requires_grad:
            gm = g * _per_out(k2, w.ndim)
            if variant != "simple":
                gm = gm + g * w * _per_out(k3, w.ndim)
        return (
            gm,
            np.atleast_1d((g * w).sum()),
            gk1,
            np.atleast_1d((g * m).sum()),
            np.atleast_1d((g * w * m).sum()),
        )

    return _record("mask_transform", [mask, *k.tensors], out, bwd)
