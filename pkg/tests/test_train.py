import math

import numpy as np
import pytest
from scipy.stats import norm

from kronlab.errors import ExtentMismatch, LabelOutOfRange, NonFinite
from kronlab.kron import KronShape
from kronlab.layers import (
    ConvLayer,
    FcLayer,
    Flatten,
    KConvConfig,
    KConvLayer,
    KfcConfig,
    SvdFcLayer,
    kfc_random_init,
)
from kronlab.train import (
    ToyNet,
    grad_check,
    make_rng,
    sgd_step,
    softmax_xent,
    toy_data,
    train_toy,
)


# -- softmax_xent -------------------------------------------------------------

def test_softmax_uniform_logits_give_log_m():
    loss, _ = softmax_xent(np.full((7, 3), 0.3), [0, 4, 6])
    assert loss == pytest.approx(math.log(7), rel=1e-14)


def test_softmax_saturates():
    logits = np.zeros((5, 2))
    logits[[1, 3], [0, 1]] = 50.0
    loss, d = softmax_xent(logits, [1, 3])
    assert 0.0 <= loss < 1e-20
    assert np.all(np.isfinite(d))


def test_softmax_huge_logits_stay_finite():
    loss, d = softmax_xent(np.array([[1e300, -1e300], [0.0, 0.0]]), [0, 1])
    assert np.isfinite(loss) and np.all(np.isfinite(d))


def test_softmax_gradient_matches_finite_differences(rng):
    logits = rng.standard_normal((6, 4))
    labels = np.array([0, 5, 2, 2])
    _, d = softmax_xent(logits, labels)
    h = 1e-5
    fd = np.zeros_like(logits)
    for idx in np.ndindex(logits.shape):
        up, dn = logits.copy(), logits.copy()
        up[idx] += h
        dn[idx] -= h
        fd[idx] = (softmax_xent(up, labels)[0] - softmax_xent(dn, labels)[0]) / (2 * h)
    assert np.max(np.abs(fd - d) / np.maximum(np.abs(d), 1e-8)) < 1e-6


def test_softmax_gradient_columns_sum_to_zero(rng):
    _, d = softmax_xent(rng.standard_normal((4, 9)), rng.integers(0, 4, 9))
    np.testing.assert_allclose(d.sum(axis=0), 0.0, atol=1e-16)


def test_softmax_label_checks():
    with pytest.raises(LabelOutOfRange):
        softmax_xent(np.zeros((3, 2)), [0, 3])
    with pytest.raises(LabelOutOfRange):
        softmax_xent(np.zeros((3, 2)), [-1, 0])
    with pytest.raises(ExtentMismatch):
        softmax_xent(np.zeros((3, 2)), [0])


# -- sgd_step -----------------------------------------------------------------

def test_sgd_zero_lr_and_unit_step(rng):
    p = {"w": rng.standard_normal((3, 2)), "b": rng.standard_normal(3)}
    same = sgd_step(p, p, 0.0)
    zero = sgd_step(p, p, 1.0)
    for k in p:
        np.testing.assert_array_equal(same[k], p[k])
        np.testing.assert_array_equal(zero[k], 0.0)


def test_sgd_quadratic_bowl():
    # gradient of ||p||^2 / 2 is p, so every step scales p by 0.9
    p = {"p": np.ones(4)}
    for _ in range(100):
        p = sgd_step(p, {"p": p["p"]}, 0.1)
    assert np.linalg.norm(p["p"]) == pytest.approx(2.0 * 0.9**100, rel=1e-10)


def test_sgd_does_not_mutate(rng):
    p = {"w": rng.standard_normal(3)}
    keep = p["w"].copy()
    sgd_step(p, {"w": np.ones(3)}, 0.5)
    np.testing.assert_array_equal(p["w"], keep)


def test_sgd_mismatch():
    with pytest.raises(ExtentMismatch):
        sgd_step({"w": np.zeros(3)}, {"w": np.zeros(4)}, 0.1)
    with pytest.raises(ExtentMismatch):
        sgd_step({"w": np.zeros(3)}, {"v": np.zeros(3)}, 0.1)


# -- grad_check ---------------------------------------------------------------

def test_grad_check_linear_fc(rng):
    # no truncation error for an affine map; what is left is round-off of order eps*|y|/step
    layer = FcLayer(rng.standard_normal((5, 7)), rng.standard_normal(5))
    x = rng.standard_normal((7, 4))
    errs = [grad_check(layer, x, seed=s) for s in range(5)]
    assert max(errs) < 1e-8
    assert np.median(errs) < 1e-9


@pytest.mark.parametrize("outside", [False, True])
@pytest.mark.parametrize("share", [False, True])
def test_grad_check_kfc_relu(rng, outside, share):
    cfg = KfcConfig(
        (KronShape(4, 2, 3, 4), KronShape(2, 4, 6, 2)), (2, 2),
        outside_sum=outside, share_bias=share, activation="relu",
    )
    layer = kfc_random_init(cfg, 1)
    layer = layer.with_params({"bias": rng.standard_normal(layer.params["bias"].shape)})
    assert grad_check(layer, rng.standard_normal((12, 5)), seed=3) <= 1e-6


def test_grad_check_kconv(rng):
    cfg = KConvConfig.from_tuple(2, 2, 3, 3, 1, (4, 6, 3, 3))
    layer = KConvLayer.random(cfg, 0, "relu").with_params({"bias": rng.standard_normal(4)})
    assert grad_check(layer, rng.standard_normal((2, 6, 5, 5)), seed=1) <= 1e-6


def test_grad_check_whole_net(rng):
    cfg = KConvConfig.from_tuple(2, 1, 2, 1, 3, (3, 2, 3, 3))
    net = ToyNet(
        [
            KConvLayer.random(cfg, 0, "relu"),
            ConvLayer.random(2, 3, 1, 1, 1),
            Flatten(),
            SvdFcLayer.random(4, 18, 2, 2, "relu"),
            FcLayer.random(3, 4, 3),
        ],
        (2, 5, 5),
    )
    assert grad_check(net, rng.standard_normal((2, 2, 5, 5)), seed=0) <= 1e-6


def test_grad_check_catches_wrong_backward(rng):
    class Broken(FcLayer):
        def backward(self, cache, dy):
            g = super().backward(cache, dy)
            g.d_params["w"] = 1.01 * g.d_params["w"]
            return g

        def _rebuild(self, p):
            return Broken(p["w"], p["bias"], self.activation)

    layer = Broken(rng.standard_normal((3, 4)), np.zeros(3))
    assert grad_check(layer, rng.standard_normal((4, 2))) > 1e-3


def test_grad_check_subsamples_deterministically(rng):
    layer = FcLayer.random(20, 30, 0, "relu")
    x = rng.standard_normal((30, 8))
    a = grad_check(layer, x, seed=4, max_probes=50)
    assert a == grad_check(layer, x, seed=4, max_probes=50)
    assert a <= 1e-6


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_grad_check_non_finite():
    layer = FcLayer(np.array([[1e308, 1e308]]), np.zeros(1))
    with pytest.raises(NonFinite):
        grad_check(layer, np.array([[1.0], [1.0]]))


# -- toy_data -----------------------------------------------------------------

def test_toy_data_deterministic():
    a = toy_data(100, 8, 3, seed=7)
    b = toy_data(100, 8, 3, seed=7)
    np.testing.assert_array_equal(a[0], b[0])
    np.testing.assert_array_equal(a[1], b[1])
    assert not np.array_equal(a[0], toy_data(100, 8, 3, seed=8)[0])


def test_toy_data_single_class():
    X, y = toy_data(20, 4, 1)
    assert X.shape == (4, 20)
    assert np.all(y == 0)


def test_toy_data_balanced_and_shaped():
    X, y = toy_data(90, 6, 3)
    assert X.shape == (6, 90)
    assert np.bincount(y).tolist() == [30, 30, 30]


def test_toy_data_bayes_rate():
    # two unit-variance clusters 4 apart: the optimal rule errs with probability Phi(-2)
    X, y = toy_data(200_000, 16, 2, seed=3)
    mu = np.stack([X[:, y == c].mean(axis=1) for c in (0, 1)], axis=1)
    assert np.linalg.norm(mu[:, 0] - mu[:, 1]) == pytest.approx(4.0, abs=0.05)
    mid = mu.mean(axis=1)
    guess = ((mu[:, 1] - mu[:, 0]) @ (X - mid[:, None]) > 0).astype(int)
    acc = np.mean(guess == y)
    assert acc == pytest.approx(norm.cdf(2.0), abs=3e-3)


def test_toy_data_linear_classifier_train_accuracy():
    X, y = toy_data(512, 64, 2, seed=0)
    net = ToyNet([FcLayer.random(2, 64, 1)], (64,))
    res = train_toy(net, (X, y), epochs=50, lr=0.05, seed=0)
    assert res.accuracy[-1] >= 0.99


# -- ToyNet / train_toy -------------------------------------------------------

def test_toynet_rejects_bad_chain():
    with pytest.raises(ExtentMismatch):
        ToyNet([FcLayer.random(8, 4), FcLayer.random(2, 9)], (4,))


def test_train_toy_zero_lr_is_flat():
    X, y = toy_data(64, 8, 2, seed=1)
    net = ToyNet([FcLayer.random(4, 8, 0, "relu"), FcLayer.random(2, 4, 1)], (8,))
    res = train_toy(net, (X, y), epochs=5, lr=0.0, seed=0)
    assert len(res.accuracy) == 6
    assert len(set(res.accuracy)) == 1
    assert len(set(res.loss)) == 1


def test_train_toy_is_deterministic():
    X, y = toy_data(64, 8, 2, seed=1)
    net = ToyNet([FcLayer.random(4, 8, 0, "relu"), FcLayer.random(2, 4, 1)], (8,))
    a = train_toy(net, (X, y), epochs=3, lr=0.1, seed=5)
    b = train_toy(net, (X, y), epochs=3, lr=0.1, seed=5)
    assert a.loss == b.loss
    for k, v in a.net.params.items():
        np.testing.assert_array_equal(v, b.net.params[k])


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_train_toy_diverges_loudly():
    X, y = toy_data(64, 8, 2, seed=1)
    net = ToyNet([FcLayer.random(2, 8, 1)], (8,))
    with pytest.raises(NonFinite):
        train_toy(net, (X * 1e150, y), epochs=5, lr=1e10, seed=0)


@pytest.mark.slow
def test_fc_and_kfc_nets_train():
    X, y = toy_data(512, 64, 4, seed=0)
    fc = ToyNet([FcLayer.random(32, 64, 1, "relu"), FcLayer.random(4, 32, 2)], (64,))
    cfg = KfcConfig.from_tuple(4, 8, 8, 8, 8, activation="relu")
    kfc = ToyNet([kfc_random_init(cfg, 1), FcLayer.random(4, 32, 2)], (64,))
    a = train_toy(fc, (X, y), epochs=50, lr=0.05, seed=0).accuracy[-1]
    b = train_toy(kfc, (X, y), epochs=50, lr=0.05, seed=0).accuracy[-1]
    assert a >= 0.95
    assert b >= a - 0.02


def test_make_rng_reproducible():
    assert make_rng(3).standard_normal(4).tolist() == make_rng(3).standard_normal(4).tolist()
