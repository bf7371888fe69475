import math

import numpy as np
import pytest

from uqd import autodiff as ad
from uqd.autodiff import Tensor
from uqd.errors import ConfigError, ContractError, NumericError
from uqd.metrics import nll
from uqd.models import ArchConfig, SegNet
from uqd.training import (OptimizerState, TrainConfig, adam_step, batches, bce_loss, bce_with_logits,
                          cosine_lr, epoch_rng, train_member)

TINY = ArchConfig(2, 4, 8)


class TestBCE:
    def test_half(self):
        assert bce_loss(Tensor(np.full(4, 0.5)), np.array([0, 1, 0, 1.0])).item() == pytest.approx(math.log(2))

    def test_perfect(self):
        assert bce_loss(Tensor(np.array([1.0, 0.0])), np.array([1.0, 0.0])).item() == 0.0

    def test_hand_value(self):
        # -(ln 0.8 + ln 0.7) / 2
        v = bce_loss(Tensor(np.array([0.8, 0.3])), np.array([1.0, 0.0])).item()
        assert v == pytest.approx(0.289909, abs=1e-6)

    def test_matches_nll_metric(self):
        rng = np.random.default_rng(0)
        p, y = rng.random((6, 6)), (rng.random((6, 6)) < 0.5).astype(float)
        assert bce_loss(Tensor(p), y).item() == pytest.approx(nll(p, y), abs=1e-14)

    def test_shape_mismatch(self):
        with pytest.raises(ContractError):
            bce_loss(Tensor(np.zeros(3)), np.zeros(4))

    def test_logit_gradient(self):
        rng = np.random.default_rng(1)
        y = (rng.random(10) < 0.5).astype(float)
        x = Tensor(rng.normal(size=10), requires_grad=True)
        with ad.GradTape() as tape:
            loss = bce_with_logits(x, y)
        ad.backward(loss, tape)
        # d/dz of mean BCE is (sigmoid(z) - y) / n
        expected = (1 / (1 + np.exp(-x.data)) - y) / 10
        np.testing.assert_allclose(x.grad, expected, atol=1e-12)


class TestAdam:
    def test_zero_gradient_fixed_point(self):
        p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
        p.grad = np.zeros(2)
        state = OptimizerState()
        for _ in range(5):
            adam_step([p], state, 0.1)
        np.testing.assert_array_equal(p.data, [1.0, -2.0])

    def test_first_step_is_signed_lr(self):
        p = Tensor(np.array([0.0, 0.0, 0.0]), requires_grad=True)
        p.grad = np.array([3.0, -0.5, 1e-3])
        adam_step([p], OptimizerState(), 0.01)
        np.testing.assert_allclose(p.data, [-0.01, 0.01, -0.01], rtol=1e-4)

    def test_weight_decay_is_l2(self):
        p = Tensor(np.array([2.0]), requires_grad=True)
        p.grad = np.zeros(1)
        adam_step([p], OptimizerState(), 0.01, weight_decay=0.1)
        # the decay term alone drives the first step
        assert p.data[0] == pytest.approx(2.0 - 0.01, rel=1e-6)

    def test_nonfinite_gradient(self):
        p = Tensor(np.array([1.0]), requires_grad=True)
        p.grad = np.array([np.inf])
        with pytest.raises(NumericError):
            adam_step([p], OptimizerState(), 0.1)
        assert p.data[0] == 1.0

    def test_minimizes_quadratic(self):
        p = Tensor(np.array([3.0, -4.0]), requires_grad=True)
        state = OptimizerState()
        for _ in range(2000):
            with ad.GradTape() as tape:
                loss = ad.sum_(p * p)
            ad.backward(loss, tape)
            adam_step([p], state, 0.05)
        assert np.abs(p.data).max() < 1e-2


class TestCosine:
    def test_endpoints(self):
        assert cosine_lr(0, 100, 1e-4) == 1e-4
        assert cosine_lr(100, 100, 1e-4, 1e-6) == pytest.approx(1e-6, abs=1e-20)

    def test_midpoint(self):
        assert cosine_lr(50, 100, 1e-4, 0.0) == pytest.approx(5e-5, rel=1e-12)

    def test_monotone(self):
        lrs = [cosine_lr(s, 37, 1.0, 0.1) for s in range(38)]
        assert all(a >= b for a, b in zip(lrs, lrs[1:]))

    def test_out_of_range(self):
        with pytest.raises(ContractError):
            cosine_lr(11, 10, 1.0)


def test_batches_cover_all():
    idx = np.concatenate(batches(10, 4, np.random.default_rng(0)))
    assert sorted(idx.tolist()) == list(range(10))
    assert [len(b) for b in batches(10, 4, np.random.default_rng(0))] == [4, 4, 2]


def test_epoch_rng_deterministic():
    assert epoch_rng(3, 2).random() == epoch_rng(3, 2).random()
    assert epoch_rng(3, 2).random() != epoch_rng(3, 3).random()


def test_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(epochs=0).validate()
    with pytest.raises(ConfigError):
        TrainConfig(lr_init=-1).validate()
    with pytest.raises(ConfigError):
        TrainConfig(lr_init=1e-4, eta_min=1e-3).validate()


def one_image(seed=0):
    rng = np.random.default_rng(seed)
    y = np.zeros((1, 8, 8))
    y[0, 2:5, 3:7] = 1
    return y[0:1] * 0.5 + 0.25 + 0.05 * rng.random((1, 8, 8)), y


def test_overfits_one_image(tmp_path):
    x, y = one_image()
    net = train_member(x, y, TrainConfig(epochs=200, batch_size=1, lr_init=1e-2), 0,
                       log_path=tmp_path / "log.csv")
    rows = (tmp_path / "log.csv").read_text().splitlines()
    assert rows[0] == "epoch,step,lr,loss" and len(rows) == 201
    first, last = float(rows[1].split(",")[3]), float(rows[-1].split(",")[3])
    assert last < first / 5
    assert net.mode == "eval"


def test_seed_determinism(tmp_path):
    x, y = one_image()
    cfg = TrainConfig(epochs=3, batch_size=1, lr_init=1e-3)
    train_member(x, y, cfg, 4, arch=TINY, dropout_rate=0.2, checkpoint_path=tmp_path / "a.uqd")
    train_member(x, y, cfg, 4, arch=TINY, dropout_rate=0.2, checkpoint_path=tmp_path / "b.uqd")
    train_member(x, y, cfg, 5, arch=TINY, dropout_rate=0.2, checkpoint_path=tmp_path / "c.uqd")
    a, b, c = ((tmp_path / n).read_bytes() for n in ("a.uqd", "b.uqd", "c.uqd"))
    assert a == b and a != c


def test_diverging_loss_aborts():
    x, y = one_image()
    x = x.copy()
    x[0, 0, 0] = np.nan
    with pytest.raises(NumericError, match="epoch 0"):
        train_member(x, y, TrainConfig(epochs=1, batch_size=1), 0, arch=TINY)


def test_empty_training_set():
    with pytest.raises(ContractError):
        train_member(np.zeros((0, 8, 8)), np.zeros((0, 8, 8)), TrainConfig(epochs=1), 0, arch=TINY)
