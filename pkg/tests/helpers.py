"""Small architectures and baselines shared by the tests."""
import numpy as np

from maskmod.plain import PlainNetwork
from maskmod.train import Dataset

# one conv with BN, one conv without (so k0 is learned there), one dense
TINY_ARCH = {
    "input_shape": [2, 6, 6],
    "layers": [
        {"type": "conv", "name": "c1", "in": 2, "out": 3, "kernel": 3, "padding": 1, "bn": True},
        {"type": "relu"},
        {"type": "maxpool", "size": 2},
        {"type": "conv", "name": "c2", "in": 3, "out": 4, "kernel": 3, "padding": 1, "bn": False},
        {"type": "relu"},
        {"type": "gap"},
        {"type": "dense", "name": "d1", "in": 4, "out": 3, "bn": False},
    ],
}

# two BN convs, 9600 masked weights: the overhead worked example
OVERHEAD_ARCH = {
    "input_shape": [40, 5, 5],
    "layers": [
        {"type": "conv", "name": "a", "in": 40, "out": 8, "kernel": 5, "padding": 2, "bn": True},
        {"type": "relu"},
        {"type": "conv", "name": "b", "in": 8, "out": 8, "kernel": 5, "padding": 2, "bn": True},
        {"type": "gap"},
    ],
}


def tiny_baseline(seed=0, num_classes=2, arch=None):
    """A random baseline with non-trivial BN statistics."""
    rng = np.random.default_rng(seed)
    net = PlainNetwork.random(arch or TINY_ARCH, num_classes, rng)
    for p in net.bn.values():
        p.running_mean[...] = rng.normal(0, 0.3, p.channels)
        p.running_var[...] = rng.uniform(0.5, 2.0, p.channels)
        p.scale.data[...] = rng.uniform(0.5, 1.5, p.channels)
        p.bias.data[...] = rng.normal(0, 0.2, p.channels)
    return net.to_baseline()


def tiny_dataset(seed, n=64, classes=2, arch=None):
    """Labels depend on the sign of a fixed channel/quadrant contrast."""
    arch = arch or TINY_ARCH
    rng = np.random.default_rng(seed)
    shape = tuple(arch["input_shape"])
    x = rng.normal(0, 1, (n,) + shape).astype(np.float32)
    y = rng.integers(0, classes, n)
    x[:, 0, : shape[1] // 2] += (2.0 * y - (classes - 1))[:, None, None]
    return Dataset(x, y.astype(np.int64), classes)
