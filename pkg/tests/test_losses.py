import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dtcseg import losses as L
from dtcseg import tensor as T
from dtcseg.nn import DualTaskNet, NetConfig


def _img(values):
    return np.asarray(values, dtype=np.float64).reshape(1, 1, 2, 2)


def test_dice_perfect_overlap():
    y = _img([1, 1, 0, 0])
    assert L.dice_loss(y, y).item() < 1e-4


def test_dice_disjoint():
    assert L.dice_loss(_img([1, 1, 0, 0]), _img([0, 0, 1, 1])).item() == pytest.approx(1.0, abs=1e-12)


def test_dice_hand_case():
    # 1 - 2 * 1 / (2 + 2 + eps)
    value = L.dice_loss(_img([0.5] * 4), _img([1, 1, 0, 0])).item()
    assert value == pytest.approx(1 - 2 / (4 + L.DICE_EPS), abs=1e-15)
    assert value == pytest.approx(0.5, abs=1e-5)


def test_dice_is_mean_of_per_image():
    rng = np.random.default_rng(0)
    p = rng.uniform(0.01, 0.99, size=(3, 1, 4, 4))
    y = (rng.random((3, 1, 4, 4)) < 0.5).astype(float)
    per_image = [1 - 2 * (p[i] * y[i]).sum() / (p[i].sum() + y[i].sum() + 1e-5) for i in range(3)]
    assert L.dice_loss(p, y).item() == pytest.approx(np.mean(per_image), abs=1e-14)


def test_shape_mismatch_rejected():
    with pytest.raises(T.ShapeError):
        L.dice_loss(np.zeros((1, 1, 2, 2)), np.zeros((1, 1, 2, 3)))
    with pytest.raises(T.ShapeError):
        L.lsf_loss(np.zeros((2, 1, 2, 2)), np.zeros((1, 1, 2, 2)))
    with pytest.raises(T.ShapeError):
        L.dtc_loss(np.zeros((1, 1, 2, 2)), np.zeros((1, 1, 3, 2)))


def test_lsf_loss_cases():
    rng = np.random.default_rng(3)
    a = rng.uniform(-1, 1, size=(2, 1, 4, 4))
    assert L.lsf_loss(a, a).item() == 0.0
    assert L.lsf_loss(a + 0.1, a).item() == pytest.approx(0.01, abs=1e-15)
    b = rng.uniform(-1, 1, size=a.shape)
    direct = sum((x - y) ** 2 for x, y in zip(a.ravel(), b.ravel())) / a.size
    assert L.lsf_loss(a, b).item() == pytest.approx(direct, abs=1e-12)


def test_dtc_loss_cases():
    z = np.random.default_rng(5).uniform(-0.01, 0.01, size=(2, 1, 3, 3))
    consistent = np.where(-1500 * z >= 0, 1 / (1 + np.exp(1500 * z)), np.exp(-1500 * z) / (1 + np.exp(-1500 * z)))
    assert L.dtc_loss(consistent, z, 1500).item() < 1e-30
    assert L.dtc_loss(np.full((1, 1, 2, 2), 0.5), np.zeros((1, 1, 2, 2))).item() == 0.0
    # (1 - sigmoid(-1500))^2
    expected = (1 - math.exp(-1500) / (1 + math.exp(-1500))) ** 2
    assert L.dtc_loss(np.ones((1, 1, 2, 2)), np.ones((1, 1, 2, 2)), 1500).item() == pytest.approx(expected, abs=1e-15)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from([1.0, 30.0, 1500.0]))
def test_dtc_equals_mse_of_materialized_transform(seed, k):
    rng = np.random.default_rng(seed)
    p = rng.uniform(0, 1, size=(2, 1, 3, 3))
    z = rng.uniform(-0.02, 0.02, size=(2, 1, 3, 3))
    u = -k * z
    target = np.where(u >= 0, 1 / (1 + np.exp(-np.abs(u))), np.exp(-np.abs(u)) / (1 + np.exp(-np.abs(u))))
    assert L.dtc_loss(p, z, k).item() == pytest.approx(L.mse(p, target).item(), abs=1e-12)


def test_ramp_weight_values():
    assert L.ramp_weight(100, 100) == 1.0
    assert L.ramp_weight(0, 100) == pytest.approx(math.exp(-5), abs=1e-15)
    assert L.ramp_weight(0, 100) == pytest.approx(0.0067379, abs=1e-7)
    assert L.ramp_weight(50, 100) == pytest.approx(0.28650, abs=1e-5)
    assert L.ramp_weight(150, 100) == 1.0


def test_ramp_weight_strictly_increasing():
    values = [L.ramp_weight(t, 200) for t in range(201)]
    assert all(b > a for a, b in zip(values, values[1:]))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000))
def test_losses_nonnegative(seed):
    rng = np.random.default_rng(seed)
    p = rng.uniform(1e-6, 1 - 1e-6, size=(2, 1, 4, 4))
    y = (rng.random((2, 1, 4, 4)) < 0.4).astype(float)
    z = rng.uniform(-1, 1, size=(2, 1, 4, 4))
    for v in (L.dice_loss(p, y), L.lsf_loss(z, z[::-1]), L.dtc_loss(p, z)):
        assert np.isfinite(v.item()) and v.item() >= 0


# total loss -------------------------------------------------------------------


@pytest.fixture
def toy_batch():
    rng = np.random.default_rng(11)
    masks = np.zeros((2, 1, 8, 8))
    masks[0, 0, 2:6, 2:5] = 1
    masks[1, 0, 1:4, 3:7] = 1
    targets = rng.uniform(-1, 1, size=(2, 1, 8, 8))
    images = rng.normal(size=(4, 1, 8, 8))
    return images, masks, targets


def test_zero_init_heads_have_zero_dtc(toy_batch):
    images, masks, targets = toy_batch
    net = DualTaskNet.init(NetConfig(base_channels=2, depth=1, zero_heads=True))
    seg, lsf = net(images)
    _, b = L.total_loss(seg, lsf, masks, targets, 2, 0, 10)
    assert b.dtc == 0.0
    assert b.total == pytest.approx(b.seg + b.lsf, abs=1e-15)


def test_breakdown_recomposes(toy_batch):
    images, masks, targets = toy_batch
    net = DualTaskNet.init(NetConfig(base_channels=2, depth=1, seed=4))
    seg, lsf = net(images)
    total, b = L.total_loss(seg, lsf, masks, targets, 2, 3, 10, k=50.0)
    assert b.total == pytest.approx(b.seg + b.lsf + b.lambda_d * b.dtc, abs=1e-12)
    assert b.seg == pytest.approx(L.dice_loss(seg.data[:2], masks).item(), abs=1e-12)
    assert b.lsf == pytest.approx(L.lsf_loss(lsf.data[:2], targets).item(), abs=1e-12)
    assert b.dtc == pytest.approx(L.dtc_loss(seg.data, lsf.data, 50.0).item(), abs=1e-12)
    assert b.lambda_d == L.ramp_weight(3, 10)
    assert total.item() == b.total


def test_unlabeled_only_mode(toy_batch):
    images, _, _ = toy_batch
    net = DualTaskNet.init(NetConfig(base_channels=2, depth=1, seed=4))
    seg, lsf = net(images)
    _, b = L.total_loss(seg, lsf, None, None, 0, 5, 10, k=20.0, mode="dtc")
    assert b.seg == 0.0 and b.lsf == 0.0
    assert b.total == pytest.approx(b.lambda_d * b.dtc, abs=1e-15)


def test_supervised_mode_needs_labels(toy_batch):
    images, _, _ = toy_batch
    net = DualTaskNet.init(NetConfig(base_channels=2, depth=1))
    seg, lsf = net(images)
    with pytest.raises(ValueError, match="labeled"):
        L.total_loss(seg, lsf, None, None, 0, 0, 10, mode="seg")


@pytest.mark.parametrize("mode", L.MODES)
def test_mode_gating(toy_batch, mode):
    images, masks, targets = toy_batch
    net = DualTaskNet.init(NetConfig(base_channels=2, depth=1, seed=1))
    seg, lsf = net(images)
    _, b = L.total_loss(seg, lsf, masks, targets, 2, 5, 10, k=30.0, mode=mode)
    assert (b.seg > 0) == ("seg" in mode)
    assert (b.lsf > 0) == (mode != "seg")
    assert (b.dtc > 0) == mode.endswith("dtc")
