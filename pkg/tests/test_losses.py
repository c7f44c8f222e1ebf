import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from asatse import autodiff as ad, losses
from asatse.autodiff import Tensor
from asatse.dsp import sisdr
from asatse.errors import InvalidArgumentError
from asatse.gradcheck import check_grads
from asatse.losses import cross_entropy, mtl_loss, sisdr_loss


def test_sisdr_loss_extremes():
    x = np.random.default_rng(0).normal(size=256)
    assert sisdr_loss(Tensor(x.copy()), x).item() <= -60
    t = np.arange(256)
    a, b = np.sin(2 * np.pi * 4 * t / 256), np.cos(2 * np.pi * 4 * t / 256)
    assert sisdr_loss(Tensor(b), a).item() >= 60


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_sisdr_loss_is_negative_metric(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=128)
    est = x + rng.normal(size=128)
    assert sisdr_loss(Tensor(est), x).item() == pytest.approx(-sisdr(est, x, clamp=False), abs=1e-10)


@pytest.mark.parametrize("seed", range(5))
def test_sisdr_loss_gradient(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=64)
    est = Tensor(x + 0.7 * rng.normal(size=64), requires_grad=True)
    assert check_grads(lambda: sisdr_loss(est, x), [est]) < 1e-4


def test_cross_entropy_values():
    assert cross_entropy(Tensor(np.zeros(8)), 3).item() == pytest.approx(math.log(8), abs=1e-12)
    z = np.array([0.3, -1.2, 2.0])
    want = -z[1] + math.log(np.exp(z).sum())
    assert cross_entropy(Tensor(z), 1).item() == pytest.approx(want, abs=1e-12)
    assert cross_entropy(Tensor(1e6 * np.eye(1, 5, 2)[0]), 2).item() == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(InvalidArgumentError):
        cross_entropy(Tensor(np.zeros(3)), 3)


def test_cross_entropy_gradient():
    z = Tensor(np.random.default_rng(1).normal(size=(6, 1)), requires_grad=True)
    assert check_grads(lambda: cross_entropy(z, 4), [z]) < 1e-6


def test_mtl_identity_and_skip():
    rng = np.random.default_rng(2)
    x = rng.normal(size=200)
    est = Tensor(x + rng.normal(size=200))
    logits = Tensor(np.zeros((8, 1)))
    total, rep = mtl_loss(est, x, logits, 5, 0.5)
    assert rep.ce_term == pytest.approx(math.log(8), abs=1e-12)
    assert abs(rep.total - (rep.sisdr_term + 0.5 * rep.ce_term)) < 1e-12
    assert total.item() == rep.total

    before = losses.calls["cross_entropy"]
    total0, rep0 = mtl_loss(est, x, None, None, 0.0)
    assert losses.calls["cross_entropy"] == before
    assert rep0.total == rep0.sisdr_term and not rep0.ce_evaluated

    with pytest.raises(InvalidArgumentError):
        mtl_loss(est, x, None, None, 0.5)
    with pytest.raises(InvalidArgumentError):
        mtl_loss(est, x, logits, 0, -1.0)


def test_mtl_gradient_reaches_both_inputs():
    rng = np.random.default_rng(3)
    x = rng.normal(size=64)
    est = Tensor(x + rng.normal(size=64), requires_grad=True)
    logits = Tensor(rng.normal(size=(4, 1)), requires_grad=True)
    assert check_grads(lambda: mtl_loss(est, x, logits, 2, 0.5)[0], [est, logits]) < 1e-4
