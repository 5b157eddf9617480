import json

import numpy as np
import pytest

from helpers import TINY_ARCH, tiny_baseline, tiny_dataset
from maskmod.config import RunConfig
from maskmod.registry import TaskNetwork, add_task, new_task_params
from maskmod.tensor import Tensor
from maskmod.train import Adam, Dataset, Schedule, SGDMomentum, TrainingError, train_task


def _param(values):
    return Tensor(np.array(values, dtype=np.float64), requires_grad=True, dtype=np.float64)


def test_adam_first_step_closed_form():
    p = _param([0.0])
    opt = Adam([p], lr=1e-4)
    p.grad = np.array([1.0])
    opt.step()
    assert p.data[0] == pytest.approx(-1e-4 / (1 + 1e-8), rel=1e-12)


@pytest.mark.parametrize("g", [-3.0, -1e-3, 2e-6, 7.0])
def test_adam_first_step_sign(g):
    p = _param([1.0])
    opt = Adam([p], lr=1e-3)
    p.grad = np.array([g])
    opt.step()
    assert np.sign(p.data[0] - 1.0) == -np.sign(g)


def test_adam_zero_gradient_keeps_params():
    p = _param([0.5, -2.0])
    opt = Adam([p], lr=0.1)
    for _ in range(3):
        p.grad = np.zeros(2)
        opt.step()
    np.testing.assert_array_equal(p.data, [0.5, -2.0])


def test_sgd_plain_when_no_momentum():
    p = _param([1.0, 2.0])
    opt = SGDMomentum([p], lr=0.5, momentum=0.0)
    p.grad = np.array([2.0, -2.0])
    opt.step()
    np.testing.assert_array_equal(p.data, [0.0, 3.0])


def test_sgd_two_momentum_steps():
    p = _param([0.0])
    opt = SGDMomentum([p], lr=1.0, momentum=0.9)
    for _ in range(2):
        p.grad = np.array([1.0])
        opt.step()
    assert p.data[0] == pytest.approx(-2.9)


def test_sgd_zero_gradient():
    p = _param([3.0])
    opt = SGDMomentum([p], lr=1.0, momentum=0.9)
    p.grad = np.zeros(1)
    opt.step()
    assert p.data[0] == 3.0


def test_missing_grad_is_skipped():
    p = _param([1.0])
    Adam([p], lr=1.0).step()
    SGDMomentum([p], lr=1.0).step()
    assert p.data[0] == 1.0


def test_schedule_decays_both_groups_by_ten():
    s = Schedule(epochs=20, decay_epoch=15, adam_lr=1e-4, sgd_lr=1e-3)
    assert s.lrs(14) == {"adam": 1e-4, "sgd": 1e-3}
    assert s.lrs(15) == {"adam": 1e-4 / 10, "sgd": 1e-3 / 10}
    assert s.lrs(19) == s.lrs(15)


@pytest.mark.parametrize("kw", [{"epochs": 5, "decay_epoch": 5}, {"batch_size": 1}, {"prefetch": -1}])
def test_schedule_validation(kw):
    with pytest.raises(ValueError):
        Schedule(**kw)


def test_dataset_label_validation():
    with pytest.raises(ValueError):
        Dataset(np.zeros((2, 1)), np.array([0, 2]), 2)


def _separable(n=128):
    rng = np.random.default_rng(0)
    x = rng.normal(0, 1, (n, *TINY_ARCH["input_shape"])).astype(np.float32)
    y = rng.integers(0, 2, n)
    x[:, 0] += np.where(y == 1, 2.0, -2.0)[:, None, None]
    return Dataset(x, y.astype(np.int64), 2)


def test_separable_task_simple_variant_reaches_99(tmp_path):
    theta = tiny_baseline(5)
    cfg = RunConfig(arch=TINY_ARCH, variant="simple", schedule=Schedule(epochs=6, decay_epoch=5, batch_size=16, adam_lr=1e-2, sgd_lr=1e-1))
    metrics = tmp_path / "m.jsonl"
    add_task(theta, "sep", _separable(), cfg, metrics_path=metrics)
    rows = [json.loads(line) for line in metrics.read_text().splitlines()]
    assert [r["epoch"] for r in rows] == list(range(6))
    assert set(rows[0]) == {"epoch", "split", "loss", "accuracy", "lrs"}
    assert rows[-1]["accuracy"] >= 0.99
    losses = [r["loss"] for r in rows]
    assert losses[-1] < losses[0]
    assert rows[-1]["lrs"] == {"adam": 1e-3, "sgd": 1e-2}


def test_first_epoch_loss_decreases_on_fixed_batch():
    theta = tiny_baseline(5)
    data = _separable(64)
    om = new_task_params(theta, "sep", 2, variant="simple", rng=np.random.default_rng(0))
    net = TaskNetwork(theta, om)
    probe = Tensor(data.images[:32])
    from maskmod.layers import softmax_xent

    def fixed_loss():
        return float(softmax_xent(net(probe, training=False), data.labels[:32]).data)

    start = fixed_loss()
    train_task(net, data, Schedule(epochs=1, decay_epoch=0, batch_size=8, adam_lr=1e-2, sgd_lr=1e-1), np.random.default_rng(0))
    assert fixed_loss() < start


def test_frozen_parameters_unchanged_after_steps():
    theta = tiny_baseline(6)
    digest = theta.digest()
    om = new_task_params(theta, "t", 2, variant="piggyback", rng=np.random.default_rng(0))
    frozen = {(layer, j): k.tensors[j].data.copy() for layer, k in om.k.items() for j in range(4)}
    train_task(TaskNetwork(theta, om), tiny_dataset(0), Schedule(epochs=1, decay_epoch=0, batch_size=16), np.random.default_rng(0))
    assert theta.digest() == digest
    for (layer, j), before in frozen.items():
        assert om.k[layer].tensors[j].data.tobytes() == before.tobytes()


def test_parameter_groups_partition():
    theta = tiny_baseline(6)
    om = new_task_params(theta, "t", 2, variant="full", rng=np.random.default_rng(0))
    groups = om.parameter_groups()
    adam_ids = {id(t) for t in groups["adam"]}
    sgd_ids = {id(t) for t in groups["sgd"]}
    assert not adam_ids & sgd_ids
    assert sgd_ids == {id(om.classifier_weight), id(om.classifier_bias)}
    for r in om.real_masks.values():
        assert id(r) in adam_ids
    for bn in om.bn.values():
        assert {id(bn.scale), id(bn.bias)} <= adam_ids
    assert id(om.k["c1"].k0) not in adam_ids  # followed by BN
    assert id(om.k["c2"].k0) in adam_ids


def test_nan_loss_aborts_with_diagnostic():
    theta = tiny_baseline(6)
    data = tiny_dataset(0)
    data.images[3] = np.nan
    om = new_task_params(theta, "t", 2, rng=np.random.default_rng(0))
    with pytest.raises(TrainingError, match=r"epoch 0, batch \d+, lrs"):
        train_task(TaskNetwork(theta, om), data, Schedule(epochs=1, decay_epoch=0, batch_size=16), np.random.default_rng(0))


def test_prefetch_keeps_batch_order():
    theta = tiny_baseline(6)
    out = []
    for prefetch in (0, 3):
        om = new_task_params(theta, "t", 2, rng=np.random.default_rng(0))
        sched = Schedule(epochs=2, decay_epoch=1, batch_size=16, mirror=True, prefetch=prefetch)
        train_task(TaskNetwork(theta, om), tiny_dataset(0), sched, np.random.default_rng(0))
        out.append(om.finalize().container(theta.arch).to_bytes())
    assert out[0] == out[1]
