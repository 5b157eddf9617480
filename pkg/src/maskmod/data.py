"""Dataset ingestion: IDX files and a synthetic multi-task suite."""
from __future__ import annotations

import gzip
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .train import Dataset

TRANSFORMS = ("none", "rotate90", "invert", "permute-labels", "channel-shuffle")
SUITE_TRANSFORMS = ("rotate90", "invert", "channel-shuffle", "permute-labels")

_IDX_TYPES = {
    0x08: np.dtype(">u1"),
    0x09: np.dtype(">i1"),
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}


class IdxError(ValueError):
    pass


class IdxTruncatedError(IdxError):
    pass


def read_idx(path) -> np.ndarray:
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise IdxTruncatedError(f"{path}: file ends inside the header")
    zero, code, ndim = struct.unpack(">HBB", raw[:4])
    if zero != 0 or code not in _IDX_TYPES or ndim == 0:
        raise IdxError(f"{path}: bad IDX magic {raw[:4].hex()}")
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise IdxTruncatedError(f"{path}: file ends inside the dimension table")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    dtype = _IDX_TYPES[code]
    need = int(np.prod(dims)) * dtype.itemsize
    if len(raw) - header < need:
        raise IdxTruncatedError(f"{path}: expected {need} data bytes, found {len(raw) - header}")
    if len(raw) - header > need:
        raise IdxError(f"{path}: {len(raw) - header - need} trailing bytes after data")
    return np.frombuffer(raw, dtype=dtype, count=int(np.prod(dims)), offset=header).reshape(dims)


def write_idx(path, arr: np.ndarray) -> None:
    arr = np.asarray(arr)
    code = {v.str[1:]: k for k, v in _IDX_TYPES.items()}[arr.dtype.newbyteorder(">").str[1:]]
    with open(path, "wb") as fh:
        fh.write(struct.pack(">HBB", 0, code, arr.ndim))
        fh.write(struct.pack(f">{arr.ndim}I", *arr.shape))
        fh.write(arr.astype(arr.dtype.newbyteorder(">")).tobytes())


def load_idx(images_path, labels_path, classes: int, mean: float = 0.0, std: float = 1.0) -> Dataset:
    """Images scaled to [0, 1], then normalized as (x - mean) / std."""
    images = read_idx(images_path)
    labels = read_idx(labels_path)
    if labels.ndim != 1:
        raise IdxError(f"{labels_path}: labels must be 1-d, got shape {labels.shape}")
    if images.shape[0] != labels.shape[0]:
        raise IdxError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    if images.ndim == 3:
        images = images[:, None]
    elif images.ndim != 4:
        raise IdxError(f"{images_path}: expected [n,h,w] or [n,c,h,w], got {images.shape}")
    x = images.astype(np.float64)
    if images.dtype.kind == "u" and images.dtype.itemsize == 1:
        x /= 255.0
    labels = labels.astype(np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= classes):
        raise IdxError(f"{labels_path}: labels span [{labels.min()}, {labels.max()}], outside [0, {classes})")
    x = ((x - mean) / std).astype(np.float32)
    return Dataset(x, labels, classes)


# ---------------------------------------------------------------------------
# synthetic suite


@dataclass
class DatasetSpec:
    source: str = "synthetic"
    name: str = "task"
    seed: int = 0  # class prototypes
    sample_seed: int = 0  # draws of train/test samples
    transform: str = "none"
    transform_seed: int = 0
    classes: int = 10
    train: int = 1000
    test: int = 500
    size: int = 16
    channels: int = 3
    noise: float = 0.25
    mean: float = 0.5
    std: float = 0.25
    train_images: Optional[str] = None
    train_labels: Optional[str] = None
    test_images: Optional[str] = None
    test_labels: Optional[str] = None

    def __post_init__(self):
        if self.source not in ("synthetic", "idx"):
            raise ValueError(f"unknown dataset source {self.source!r}")
        if self.transform not in TRANSFORMS:
            raise ValueError(f"unknown transform {self.transform!r}; expected one of {TRANSFORMS}")
        if self.classes < 2:
            raise ValueError("a dataset needs at least 2 classes")

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetSpec":
        return cls(**d)

    def to_dict(self) -> dict:
        return {k: v for k, v in asdict(self).items() if v is not None}


def _prototypes(spec: DatasetSpec) -> np.ndarray:
    """Class templates on a canvas 4 pixels wider than the image, values in [0, 1]."""
    rng = np.random.default_rng([spec.seed, 7])
    canvas = spec.size + 4
    yy, xx = np.mgrid[0:canvas, 0:canvas].astype(np.float64)
    protos = np.zeros((spec.classes, spec.channels, canvas, canvas))
    for c in range(spec.classes):
        for _ in range(3):
            cy, cx = rng.uniform(4, canvas - 4, size=2)
            theta = rng.uniform(0, np.pi)
            length = rng.uniform(3, 7)
            width = rng.uniform(0.8, 1.6)
            color = rng.uniform(0.2, 1.0, size=spec.channels)
            # oriented bar: distance along and across the stroke direction
            along = (xx - cx) * np.cos(theta) + (yy - cy) * np.sin(theta)
            across = -(xx - cx) * np.sin(theta) + (yy - cy) * np.cos(theta)
            stroke = np.exp(-0.5 * (across / width) ** 2) * (np.abs(along) < length)
            protos[c] += color[:, None, None] * stroke
    return np.clip(protos, 0, 1)


def apply_transform(images: np.ndarray, labels: np.ndarray, transform: str, classes: int, seed: int = 0):
    """Apply one suite transform to images in [0, 1] and their labels."""
    if transform == "none":
        return images, labels
    if transform == "rotate90":
        return np.rot90(images, k=1, axes=(-2, -1)).copy(), labels
    if transform == "invert":
        return 1.0 - images, labels
    rng = np.random.default_rng([seed, 11])
    if transform == "permute-labels":
        perm = rng.permutation(classes)
        return images, perm[labels]
    if transform == "channel-shuffle":
        n = images.shape[1]
        perm = np.arange(n)
        while n > 1 and np.array_equal(perm, np.arange(n)):
            perm = rng.permutation(n)
        return images[:, perm], labels
    raise ValueError(f"unknown transform {transform!r}")


def _draw(spec: DatasetSpec, protos: np.ndarray, count: int, split_key: int):
    rng = np.random.default_rng([spec.sample_seed, split_key, spec.seed])
    labels = np.arange(count) % spec.classes
    rng.shuffle(labels)
    dy, dx = rng.integers(0, 5, size=(2, count))
    amp = rng.uniform(0.7, 1.1, size=count)
    rows = dy[:, None] + np.arange(spec.size)
    cols = dx[:, None] + np.arange(spec.size)
    base = protos[labels]
    crops = base[np.arange(count)[:, None, None, None], np.arange(spec.channels)[None, :, None, None], rows[:, None, :, None], cols[:, None, None, :]]
    x = crops * amp[:, None, None, None] + rng.normal(0, spec.noise, size=crops.shape)
    return np.clip(x, 0, 1), labels.astype(np.int64)


def load_dataset(spec: DatasetSpec, base_dir=None) -> tuple:
    """Materialize ``(train, test)`` for a spec.  Synthetic splits use
    separate sample streams, so they never share a draw."""
    if spec.source == "idx":
        base = Path(base_dir or ".")
        train = load_idx(base / spec.train_images, base / spec.train_labels, spec.classes, spec.mean, spec.std)
        test = load_idx(base / spec.test_images, base / spec.test_labels, spec.classes, spec.mean, spec.std)
        return train, test
    protos = _prototypes(spec)
    out = []
    for key, count in ((0, spec.train), (1, spec.test)):
        x, y = _draw(spec, protos, count, key)
        x, y = apply_transform(x, y, spec.transform, spec.classes, spec.transform_seed)
        out.append(Dataset(((x - spec.mean) / spec.std).astype(np.float32), y, spec.classes))
    return tuple(out)


def make_synthetic_suite(seed: int, n_tasks: int, **overrides) -> list:
    """Task 0 (pretraining) plus ``n_tasks - 1`` new tasks.

    Every new task draws fresh class prototypes from the same stroke family
    (a held-out generator) and applies one transform, cycling through
    rotate90, invert, channel-shuffle and permute-labels.
    """
    if n_tasks < 2:
        raise ValueError("a suite needs the pretraining task and at least one new task")
    pre = dict(overrides.pop("pretrain", {}))
    specs = [DatasetSpec(name="task0", seed=seed, sample_seed=seed, transform="none", **{**overrides, **pre})]
    for i in range(1, n_tasks):
        specs.append(
            DatasetSpec(
                name=f"task{i}",
                seed=seed * 1000 + i,
                sample_seed=seed * 1000 + i,
                transform=SUITE_TRANSFORMS[(i - 1) % len(SUITE_TRANSFORMS)],
                transform_seed=seed * 1000 + i,
                **overrides,
            )
        )
    return specs
