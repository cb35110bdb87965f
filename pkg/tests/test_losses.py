import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from hazegan import tensor as T
from hazegan.gradcheck import grad_check
from hazegan.losses import (
    PROB_EPS,
    LossWeights,
    adversarial_d_loss,
    adversarial_g_loss,
    combined_loss,
    feature_loss,
    l2_loss,
    preset,
    smooth_l1_loss,
)
from hazegan.models import FeatureNet
from hazegan.tensor import ShapeError, Tensor


def full(v, shape=(1, 1, 2, 2)):
    return Tensor(np.full(shape, v, dtype=np.float64))


def test_presets():
    assert preset("GEN") == LossWeights(w_adv=0, w_l2=1, w_s1=0, w_feat=1, tap=2)
    assert preset("CANDY-L1-9P") == LossWeights(w_adv=1, w_l2=0, w_s1=1, w_feat=1, tap=2)
    assert preset("CANDY-L2-9P") == LossWeights(w_adv=1, w_l2=1, w_s1=0, w_feat=1, tap=2)
    assert preset("CANDY-L1-23P").tap == 4 and preset("CANDY-L2-23P").tap == 4
    with pytest.raises(ValueError):
        preset("CANDY-L3")


def test_weights_validation():
    with pytest.raises(ValueError):
        LossWeights(0, 0, 0, 0)
    with pytest.raises(ValueError):
        LossWeights(-1, 1, 0, 0)


def test_l2_examples():
    assert l2_loss(full(0.3), full(0.3)).item() == 0
    assert l2_loss(Tensor(np.ones(2)), Tensor(np.zeros(2))).item() == 1.0
    with pytest.raises(ShapeError):
        l2_loss(Tensor(np.ones(2)), Tensor(np.ones(3)))


def test_l2_gradient_closed_form():
    rng = np.random.default_rng(0)
    y, o = rng.normal(size=6), rng.normal(size=6)
    with T.precision(np.float64):
        out = Tensor(o, requires_grad=True)
        T.backward(l2_loss(Tensor(y), out))
    np.testing.assert_allclose(out.grad, 2 * (o - y) / 6, rtol=1e-12)


def test_smooth_l1_examples():
    assert smooth_l1_loss(full(0.5), full(0.0)).item() == pytest.approx(0.125)
    assert smooth_l1_loss(full(2.0), full(0.0)).item() == pytest.approx(1.5)
    assert smooth_l1_loss(full(1.0), full(0.0)).item() == pytest.approx(0.5)
    # continuity across |d| = 1
    lo = smooth_l1_loss(full(1.0 - 1e-9), full(0.0)).item()
    hi = smooth_l1_loss(full(1.0 + 1e-9), full(0.0)).item()
    assert abs(lo - hi) < 1e-6


@given(st.floats(-50, 50, allow_nan=False))
def test_smooth_l1_bounds(d):
    with T.precision(np.float64):
        out = Tensor(np.array([d]), requires_grad=True)
        s = smooth_l1_loss(Tensor(np.zeros(1)), out)
        T.backward(s)
    assert s.item() <= d * d / 2 + 0.5 + 1e-12
    assert abs(out.grad[0]) <= 1.0


def test_feature_loss_identical_is_zero():
    x = Tensor(np.random.default_rng(0).uniform(-1, 1, size=(1, 3, 16, 16)))
    assert feature_loss(FeatureNet(), x, x, 2).item() == 0


def test_feature_loss_with_delta_net_is_pooled_l2():
    net = FeatureNet(widths=(3,))
    w = np.zeros((3, 3, 3, 3), np.float32)
    for c in range(3):
        w[c, c, 1, 1] = 1
    net.block1.weight.data[...] = w
    net.block1.bias.data[...] = 0
    rng = np.random.default_rng(1)
    # positive inputs so the ReLU is transparent
    y, o = rng.uniform(0.1, 1, size=(2, 3, 8, 8)), rng.uniform(0.1, 1, size=(2, 3, 8, 8))

    def pool(a):
        return a.reshape(2, 3, 4, 2, 4, 2).mean(axis=(3, 5))

    got = feature_loss(net, Tensor(y), Tensor(o), 1).item()
    assert got == pytest.approx(np.mean((pool(y) - pool(o)) ** 2), rel=1e-5)


def test_feature_loss_gradient_16x16():
    rng = np.random.default_rng(2)
    net = FeatureNet(widths=(8, 8))
    y = Tensor(rng.uniform(-1, 1, size=(1, 3, 16, 16)))
    o = Tensor(y.data + 0.1 * rng.normal(size=y.shape))
    with T.precision(np.float64):
        err = grad_check(lambda: feature_loss(net, y, o, 2), [o], max_entries=64)
    assert err < 1e-3


def test_feature_loss_reaches_output_only():
    net = FeatureNet(widths=(4,))
    y = Tensor(np.ones((1, 3, 4, 4)), requires_grad=True)
    o = Tensor(np.zeros((1, 3, 4, 4)), requires_grad=True)
    T.backward(feature_loss(net, y, o, 1))
    assert y.grad is None and o.grad is not None


def test_adversarial_examples():
    assert adversarial_d_loss(full(0.5), full(0.5)).item() == pytest.approx(2 * math.log(2), abs=1e-6)
    assert adversarial_d_loss(full(0.9), full(0.1)).item() == pytest.approx(-2 * math.log(0.9), abs=1e-5)
    assert adversarial_d_loss(full(1.0), full(0.0)).item() == pytest.approx(2 * -math.log(1 - PROB_EPS), abs=1e-6)
    assert adversarial_g_loss(full(0.5)).item() == pytest.approx(math.log(2), abs=1e-6)
    assert adversarial_g_loss(full(1 - PROB_EPS)).item() == pytest.approx(0, abs=1e-6)
    assert adversarial_g_loss(full(0.1)).item() == pytest.approx(2.30259, abs=1e-5)


def test_adversarial_saturation_is_finite():
    assert math.isfinite(adversarial_g_loss(full(0.0)).item())
    assert math.isfinite(adversarial_d_loss(full(0.0), full(1.0)).item())


def _components(seed=0):
    rng = np.random.default_rng(seed)
    return {k: Tensor(np.array([v])) for k, v in zip(("adv", "l2", "s1", "feat"), rng.uniform(0.1, 2, size=4))}


def test_gen_preset_zeroes_adversarial_and_s1():
    comps = _components()
    rep = combined_loss(preset("GEN"), comps)
    assert rep.total.item() == pytest.approx(comps["l2"].item() + comps["feat"].item())
    assert rep.terms["l2"] == pytest.approx(comps["l2"].item())


def test_l2_only_equals_l2_loss():
    comps = _components()
    rep = combined_loss(LossWeights(0, 1, 0, 0), comps)
    assert rep.total.item() == comps["l2"].item()


def test_linearity_in_feature_weight():
    comps = _components(3)
    base = combined_loss(LossWeights(1, 1, 1, 1), comps).total.item()
    doubled = combined_loss(LossWeights(1, 1, 1, 2), comps).total.item()
    assert doubled - base == pytest.approx(comps["feat"].item())


def test_missing_weighted_component_is_an_error():
    with pytest.raises(KeyError):
        combined_loss(preset("CANDY-L1-9P"), {"s1": Tensor([1.0]), "feat": Tensor([1.0])})
