import struct
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import OVERHEAD_ARCH, TINY_ARCH, tiny_baseline, tiny_dataset
from maskmod import checkpoint as ckpt
from maskmod import registry
from maskmod.config import RunConfig
from maskmod.registry import (
    BaselineMismatchError,
    BaselineModifiedError,
    BaselineParams,
    LayerMismatchError,
    TaskNetwork,
    TaskParams,
    add_task,
    measured_payload_bytes,
    new_task_params,
    overhead,
)
from maskmod.tensor import Tensor
from maskmod.train import Schedule

FAST = Schedule(epochs=2, decay_epoch=1, batch_size=16, adam_lr=1e-2, sgd_lr=1e-1)


def _cfg(**kw):
    return RunConfig(arch=TINY_ARCH, schedule=FAST, **kw)


@pytest.fixture(scope="module")
def theta():
    return tiny_baseline(11)


@pytest.fixture(scope="module")
def probe():
    return np.random.default_rng(99).normal(0, 1, (32, *TINY_ARCH["input_shape"])).astype(np.float32)


def _logits(theta, omega, x):
    return TaskNetwork(theta, omega)(Tensor(x), training=False).data


# -- container format


@given(st.lists(st.booleans(), min_size=1, max_size=70))
@settings(max_examples=60, deadline=None)
def test_bits_roundtrip(bits):
    m = np.array(bits)
    raw = ckpt.pack_bits(m)
    assert len(raw) == (len(bits) + 7) // 8
    np.testing.assert_array_equal(ckpt.unpack_bits(raw, m.shape), m)


def test_nine_weights_pack_into_two_bytes():
    m = np.array([1, 0, 1, 1, 0, 0, 0, 0, 1], dtype=bool).reshape(3, 3)
    raw = ckpt.pack_bits(m)
    assert raw == bytes([0b00001101, 0b00000001])


def test_container_layout_is_little_endian():
    c = ckpt.Container(ckpt.KIND_TASK, {"a": 1})
    c.add_array("x", np.array([1.0], np.float32))
    raw = c.to_bytes()
    assert raw[:4] == b"MTMK"
    assert struct.unpack_from("<HB", raw, 4) == (1, 1)
    (dlen,) = struct.unpack_from("<I", raw, 7)
    assert raw[11:11 + dlen] == b'{"a":1}'
    assert len(raw) == 11 + dlen + 2 + 1 + 2 + 4 + 4 + 32


def test_baseline_roundtrip_is_idempotent(theta, tmp_path):
    d1 = theta.save(tmp_path / "t.mtmk")
    again = BaselineParams.load(tmp_path / "t.mtmk")
    assert again.to_bytes() == theta.to_bytes()
    assert again.digest() == d1
    for arr in again.weights.values():
        assert not arr.flags.writeable


def test_task_roundtrip_real_and_final(theta, tmp_path):
    om = new_task_params(theta, "t", 3, rng=np.random.default_rng(0))
    om.real_masks["c1"].data[0, 0] = -1.0
    raw = om.save(tmp_path / "r.mtmk", theta.arch)
    assert TaskParams.load(tmp_path / "r.mtmk").container(theta.arch).to_bytes() == raw
    om.finalize()
    raw = om.save(tmp_path / "f.mtmk", theta.arch)
    back = TaskParams.load(tmp_path / "f.mtmk")
    assert back.is_final and back.container(theta.arch).to_bytes() == raw
    assert not back.mask("c1")[0, 0].any()


def _sample_raw(theta):
    om = new_task_params(theta, "t", 3, rng=np.random.default_rng(0)).finalize()
    return om.container(theta.arch).to_bytes()


def test_corrupt_byte_detected(theta):
    raw = bytearray(_sample_raw(theta))
    for pos in (20, len(raw) // 2, len(raw) - 40, len(raw) - 1):
        bad = bytearray(raw)
        bad[pos] ^= 0x01
        with pytest.raises(ckpt.CheckpointError):
            ckpt.Container.from_bytes(bytes(bad))
    bad = bytearray(raw)
    bad[len(raw) // 2] ^= 0x10
    with pytest.raises(ckpt.DigestMismatchError):
        ckpt.Container.from_bytes(bytes(bad))


def test_truncation_detected(theta):
    raw = _sample_raw(theta)
    for cut in (5, 9, 40, len(raw) // 2, len(raw) - 33, len(raw) - 1):
        with pytest.raises((ckpt.TruncatedError, ckpt.DigestMismatchError)):
            ckpt.Container.from_bytes(raw[:cut])
    with pytest.raises(ckpt.TruncatedError):
        ckpt.Container.from_bytes(raw[: len(raw) // 2])


def test_bad_magic_and_version(theta):
    raw = _sample_raw(theta)
    with pytest.raises(ckpt.BadMagicError):
        ckpt.Container.from_bytes(b"XXXX" + raw[4:])
    with pytest.raises(ckpt.VersionError):
        ckpt.Container.from_bytes(raw[:4] + struct.pack("<H", 2) + raw[6:])


def test_kind_checked_on_read(theta, tmp_path):
    theta.save(tmp_path / "t.mtmk")
    with pytest.raises(ckpt.CheckpointError):
        TaskParams.load(tmp_path / "t.mtmk")


# -- overhead accounting


def test_overhead_worked_example():
    th = tiny_baseline(0, arch=OVERHEAD_ARCH)
    assert th.shared_param_count == 9600
    om = new_task_params(th, "t", 4, rng=np.random.default_rng(0)).finalize()
    rep = overhead(th, [om])
    assert rep.mask_bits == [9600]
    assert rep.scalars == [8 + 64]
    assert rep.extra_bits == [11904]
    assert rep.ratio == Fraction(9600 + 372, 9600) == Fraction("1.03875")
    assert measured_payload_bytes(om.container(th.arch)) * 8 == 11904


@pytest.mark.parametrize("channel_wise,task_bn", [(False, True), (True, True), (False, False)])
def test_overhead_matches_serialized_payload(theta, channel_wise, task_bn):
    oms = [
        new_task_params(theta, f"t{i}", 3, channel_wise=channel_wise, task_bn=task_bn, rng=np.random.default_rng(i)).finalize()
        for i in range(3)
    ]
    rep = overhead(theta, oms)
    for om, payload in zip(oms, rep.payload_bytes):
        assert measured_payload_bytes(om.container(theta.arch)) == payload


def test_classifier_excluded_from_overhead(theta):
    small = new_task_params(theta, "t", 2, rng=np.random.default_rng(0)).finalize()
    large = new_task_params(theta, "t", 50, rng=np.random.default_rng(0)).finalize()
    assert overhead(theta, [small]).ratio == overhead(theta, [large]).ratio


# -- task networks and forgetting


def test_read_only_baseline(theta):
    with pytest.raises(ValueError):
        theta.weights["c1.weight"][0, 0, 0, 0] = 1.0


def test_layer_mismatch(theta):
    other_arch = {**TINY_ARCH, "layers": [dict(l) for l in TINY_ARCH["layers"]]}
    other_arch["layers"][3]["out"] = 5
    other_arch["layers"][6]["in"] = 5
    other = tiny_baseline(1, arch=other_arch)
    om = new_task_params(other, "t", 2, rng=np.random.default_rng(0))
    om.theta_digest = None
    with pytest.raises(LayerMismatchError):
        TaskNetwork(theta, om)


def test_task_bound_to_its_baseline(theta):
    other = tiny_baseline(12)
    om = new_task_params(other, "t", 2, rng=np.random.default_rng(0))
    with pytest.raises(BaselineMismatchError):
        TaskNetwork(theta, om)


def test_finalize_keeps_eval_logits(theta, probe):
    om = new_task_params(theta, "t", 3, rng=np.random.default_rng(0))
    for r in om.real_masks.values():
        r.data[...] = np.random.default_rng(1).normal(0, 1, r.shape)
    before = _logits(theta, om, probe)
    om.finalize()
    assert _logits(theta, om, probe).tobytes() == before.tobytes()


def test_forgetting_free(theta, probe):
    digest = theta.digest()
    a = add_task(theta, "A", tiny_dataset(1), _cfg())
    before = _logits(theta, a, probe)
    add_task(theta, "B", tiny_dataset(2), _cfg(variant="simple"))
    add_task(theta, "C", tiny_dataset(3), _cfg(variant="piggyback"))
    assert theta.digest() == digest
    assert _logits(theta, a, probe).tobytes() == before.tobytes()


def test_task_order_does_not_matter(theta):
    data = {"B": tiny_dataset(2), "C": tiny_dataset(3)}
    first = {n: add_task(theta, n, data[n], _cfg()).container(theta.arch).to_bytes() for n in ("B", "C")}
    second = {n: add_task(theta, n, data[n], _cfg()).container(theta.arch).to_bytes() for n in ("C", "B")}
    assert first == second


def test_add_task_deterministic(theta):
    runs = [add_task(theta, "A", tiny_dataset(1), _cfg(surrogate="sigmoid")).container(theta.arch).to_bytes() for _ in range(2)]
    assert runs[0] == runs[1]


def test_training_changes_task_params_only(theta):
    om = add_task(theta, "A", tiny_dataset(1), _cfg())
    assert len(om.history) == FAST.epochs
    assert not om.mask("c1").all() or not om.mask("c2").all()
    assert om.k["c2"].k0.data[0] != 1.0  # no BN after c2, so k0 is trained
    assert om.k["c1"].k0.data[0] == 1.0


def test_frozen_bn_task_uses_baseline_statistics(theta):
    digest = theta.digest()
    om = add_task(theta, "A", tiny_dataset(1), _cfg(variant="piggyback", task_bn=False))
    assert om.bn == {} and theta.digest() == digest
    assert om.scalar_count() == 4 * 3
    back = TaskParams.from_container(ckpt.Container.from_bytes(om.container(theta.arch).to_bytes()))
    assert not back.task_bn


def test_baseline_modification_detected(theta, monkeypatch):
    import maskmod.train

    def tampering(network, *args, **kwargs):
        network.theta.bn["c1.bn"].running_mean[0] += 1.0
        return []

    th = BaselineParams.from_container(theta.container())
    monkeypatch.setattr(maskmod.train, "train_task", tampering)
    with pytest.raises(BaselineModifiedError):
        add_task(th, "A", tiny_dataset(1), _cfg())


def test_task_rng_depends_on_seed_and_name():
    draw = lambda s, n: registry.task_rng(s, n).integers(0, 2**31)
    assert draw(0, "A") == draw(0, "A")
    assert draw(0, "A") != draw(0, "B")
    assert draw(0, "A") != draw(1, "A")


def test_no_tasks_ratio_is_one(theta):
    assert overhead(theta, []).ratio == 1


def test_trained_task_roundtrip_gives_same_logits(theta, probe, tmp_path):
    om = add_task(theta, "A", tiny_dataset(1), _cfg(channel_wise=True))
    om.save(tmp_path / "a.mtmk", theta.arch)
    back = TaskParams.load(tmp_path / "a.mtmk")
    assert _logits(theta, back, probe).tobytes() == _logits(theta, om, probe).tobytes()


def test_ratio_approaches_one_bit_per_weight():
    big = {
        "input_shape": [64, 4, 4],
        "layers": [{"type": "conv", "name": "a", "in": 64, "out": 64, "kernel": 3, "padding": 1, "bn": True}, {"type": "gap"}],
    }
    th = tiny_baseline(0, arch=big)
    # without task batch norms only the four k remain next to the mask bits
    oms = [new_task_params(th, f"t{i}", 2, task_bn=False, rng=np.random.default_rng(i)).finalize() for i in range(4)]
    for m in (1, 2, 4):
        r = overhead(th, oms[:m]).ratio
        assert 1 + Fraction(m, 32) < r < 1 + Fraction(m, 32) * Fraction(101, 100)
