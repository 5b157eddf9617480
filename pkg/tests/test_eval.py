import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from helpers import tiny_baseline
from maskmod.evaluate import DecathlonConfig, decathlon_score, error_rate, mask_density, popcount_packed
from maskmod.plotting import plot_density
from maskmod.registry import new_task_params
from maskmod.tensor import Tensor
from maskmod.train import Dataset


class Constant:
    def __init__(self, k, label):
        self.k, self.label = k, label

    def __call__(self, x, training=False):
        out = np.zeros((x.shape[0], self.k))
        out[:, self.label] = 1
        return Tensor(out)


class Oracle:
    """Reads the label from the first pixel."""

    def __call__(self, x, training=False):
        y = x.data[:, 0, 0, 0].astype(int)
        return Tensor(np.eye(3)[y])


def _balanced(n=10):
    y = np.arange(n) % 2
    return Dataset(y.reshape(n, 1, 1, 1).astype(np.float32), y, 2)


def test_majority_classifier_on_balanced_set():
    assert error_rate(Constant(2, 0), _balanced()) == 0.5


def test_perfect_classifier():
    data = Dataset(np.array([0, 1, 2, 2], np.float32).reshape(4, 1, 1, 1), np.array([0, 1, 2, 2]), 3)
    assert error_rate(Oracle(), data) == 0.0


def test_evaluation_repeatable():
    theta = tiny_baseline(0)
    rng = np.random.default_rng(0)
    data = Dataset(rng.normal(0, 1, (40, 2, 6, 6)).astype(np.float32), rng.integers(0, 2, 40), 2)
    assert error_rate(theta, data) == error_rate(theta, data)


def test_empty_dataset_rejected():
    with pytest.raises(ValueError):
        error_rate(Constant(2, 0), Dataset(np.zeros((0, 1, 1, 1)), np.zeros(0, int), 2))


@pytest.mark.parametrize("emax", [0.02, 0.3, 1.0])
def test_decathlon_calibration(emax):
    cfg = DecathlonConfig({"a": emax, "b": emax / 3})
    assert decathlon_score({"a": emax / 2, "b": emax / 6}, cfg)["tasks"] == pytest.approx({"a": 250, "b": 250}, rel=1e-9)
    assert decathlon_score({"a": 0.0, "b": 0.0}, cfg)["total"] == pytest.approx(2000, rel=1e-9)
    assert decathlon_score({"a": emax, "b": 1.0}, cfg)["total"] == 0.0


def test_reference_errors_are_doubled():
    cfg = DecathlonConfig.from_reference_errors({"a": 0.1})
    assert cfg.max_errors == {"a": 0.2}
    assert decathlon_score({"a": 0.1}, cfg)["total"] == pytest.approx(250, rel=1e-12)


@given(st.floats(1e-3, 1.0))
def test_alpha_identity(emax):
    cfg = DecathlonConfig({"t": emax})
    assert cfg.alpha("t") * emax**2 == pytest.approx(1000, rel=1e-12)


@given(st.floats(0.01, 1.0), st.floats(0, 1), st.floats(0, 1))
@settings(max_examples=100)
def test_score_monotone_in_error(emax, e1, e2):
    cfg = DecathlonConfig({"t": emax})
    lo, hi = sorted((e1, e2))
    assert decathlon_score({"t": lo}, cfg)["total"] >= decathlon_score({"t": hi}, cfg)["total"]


def test_mismatched_tasks_rejected():
    with pytest.raises(KeyError):
        decathlon_score({"a": 0.1}, DecathlonConfig({"a": 0.2, "b": 0.2}))


@pytest.mark.parametrize("bad", [0.0, -0.1, 1.5])
def test_max_error_range(bad):
    with pytest.raises(ValueError):
        DecathlonConfig({"a": bad})


def test_fresh_masks_have_density_one():
    theta = tiny_baseline(0)
    rep = mask_density(new_task_params(theta, "t", 2, rng=np.random.default_rng(0)))
    assert [l.density for l in rep.layers] == [1.0, 1.0, 1.0]
    assert [l.depth for l in rep.layers] == [0, 1, 2]
    assert [l.layer for l in rep.layers] == ["c1", "c2", "d1"]


def test_density_of_small_mask():
    assert popcount_packed(np.array([1, 0, 1, 1], bool)) / 4 == 0.75


@given(hnp.arrays(bool, st.tuples(st.integers(1, 5), st.integers(1, 13))))
@settings(max_examples=80)
def test_packed_popcount_matches_unpacked(m):
    assert popcount_packed(m) == int(m.sum())


def test_report_outputs(tmp_path):
    theta = tiny_baseline(0)
    om = new_task_params(theta, "t", 2, channel_wise=True, rng=np.random.default_rng(0))
    om.real_masks["c2"].data[:2] = -1
    om.k["c2"].k2.data[...] = 0.25
    rep = mask_density(om)
    rows = json.loads(json.dumps(rep.to_dict()))
    assert rows[1]["layer"] == "c2" and rows[1]["k2"] == 0.25
    assert rows[1]["density"] == pytest.approx(1 - 2 / 4)
    assert isinstance(rows[0]["k1"], list)  # channel-wise
    text = rep.render_text()
    assert "c2" in text and "k2=+0.2500" in text
    png = plot_density(rep, tmp_path / "d.png")
    assert png.read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"
