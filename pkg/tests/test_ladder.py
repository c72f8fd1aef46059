from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from lsv import ladder as lad
from lsv import nets
from lsv.numcore import DimensionError, ParamTensor, RngStream, grad_check

from helpers import CHECK_SEED, check_system, tiny_system

finite = st.floats(-5, 5, allow_nan=False, allow_infinity=False)


def _vecs(*values, d=3):
    return [np.full(d, float(v)) for v in values]


def test_corrupt_zero_sigma_is_identity():
    h = np.random.default_rng(0).normal(size=(4, 7))
    out = lad.corrupt(h, 0.0, RngStream(0, "n"))
    assert out is h or np.array_equal(out, h)
    assert lad.corrupt(h, 0.3, RngStream(0, "n")).shape == (4, 7)


def test_corrupt_statistics():
    z = lad.corrupt(np.zeros((100_000, 1)), 0.3, RngStream(1, "noise"))
    assert abs(z.mean()) < 0.005
    assert 0.297 <= z.std() <= 0.303


def test_corrupt_negative_sigma():
    with pytest.raises(lad.LadderConfigError):
        lad.corrupt(np.zeros((1, 1)), -0.1, RngStream(0))


def test_combinator_mu_cases():
    u = np.random.default_rng(2).normal(size=(5, 3))
    assert np.array_equal(lad.combinator_mu(u, *_vecs(0, 0, 0, 0, 0)), np.zeros_like(u))
    assert np.array_equal(lad.combinator_mu(u, *_vecs(0, 0, 0, 1, 0)), u)
    assert np.allclose(lad.combinator_mu(u, *_vecs(1, 0, 0, 0, 0)), 0.5)


def test_combinator_nu_cases():
    u = np.random.default_rng(3).normal(size=(5, 3))
    assert np.array_equal(lad.combinator_nu(u, *_vecs(0, 0, 0, 0, 0)), np.zeros_like(u))
    assert np.array_equal(lad.combinator_nu(u, *_vecs(0, 0, 0, 0, 1)), np.ones_like(u))
    assert np.allclose(lad.combinator_nu(u, *_vecs(2, 0, 0, 0, 0)), 1.0)


def test_combinator_length_mismatch():
    with pytest.raises(DimensionError):
        lad.combinator_mu(np.zeros((2, 3)), *_vecs(0, 0, 0, 0, 0, d=4))


def test_denoise_cases():
    rng = np.random.default_rng(4)
    ht, u = rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
    assert np.array_equal(lad.denoise(ht, u, lad.init_combinator(3)), ht)
    a = np.zeros((10, 3))
    a[3] = 1.0  # mu = u, nu = 0
    assert np.array_equal(lad.denoise(ht, u, a), u)
    # h_tilde=2, mu=1, nu=0.5 -> 1.5
    a = np.zeros((10, 1))
    a[4], a[9] = 1.0, 0.5
    assert lad.denoise(np.array([[2.0]]), np.array([[0.3]]), a)[0, 0] == 1.5
    with pytest.raises(DimensionError):
        lad.denoise(np.zeros((2, 3)), np.zeros((2, 4)), np.zeros((10, 3)))


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_denoise_backward_finite_differences(seed):
    rng = RngStream(seed, "t")
    ht = ParamTensor("ht", rng.normal((4, 3)))
    u = ParamTensor("u", rng.normal((4, 3)))
    a = ParamTensor("a", lad.init_combinator(3, "random", rng))
    R = rng.normal((4, 3))

    def loss():
        out = lad.denoise(ht.value, u.value, a.value)
        ht.grad[...], u.grad[...], a.grad[...] = lad.denoise_backward(R, ht.value, u.value, a.value)
        return float((R * out).sum())

    assert grad_check(loss, [ht, u, a]) < 1e-5


def test_denoising_cost_cases():
    h = np.random.default_rng(5).normal(size=(3, 4))
    same = [lad.LadderLayerState(h, h, h_hat=h.copy())]
    assert lad.denoising_cost(same, [2.0]) == 0.0
    one = [lad.LadderLayerState(np.array([[1.0, 0.0]]), None, h_hat=np.zeros((1, 2)))]
    assert lad.denoising_cost(one, [1.0]) == 1.0
    assert lad.denoising_cost(one, [lad.DEFAULT_LAMBDA0]) == 1000.0


def test_denoising_cost_errors():
    st_ = lad.LadderLayerState(np.zeros((1, 2)), None)
    with pytest.raises(lad.LadderStateError):
        lad.denoising_cost([st_], [1.0])
    with pytest.raises(lad.LadderConfigError):
        lad.denoising_cost([st_], [1.0, 2.0])


@given(arrays(np.float64, (3, 4), elements=finite), arrays(np.float64, (3, 4), elements=finite),
       st.floats(0, 100))
def test_denoising_cost_nonnegative_and_zero_iff_equal(h, h_hat, lam):
    cost = lad.denoising_cost([lad.LadderLayerState(h, h, h_hat=h_hat)], [lam])
    assert cost >= 0
    # the iff needs lam * d**2 to stay above the float64 underflow threshold
    d = np.abs(h - h_hat)
    if lam >= 1e-100 and np.all((d == 0) | (d >= 1e-100)):
        assert (cost == 0) == np.array_equal(h, h_hat)


def test_ladder_config_validation_and_preset():
    with pytest.raises(lad.LadderConfigError):
        lad.LadderConfig(sigma=-1)
    with pytest.raises(lad.LadderConfigError):
        lad.LadderConfig(lambdas=(1.0, -1.0))
    cfg = lad.LadderConfig.preset(4)
    assert cfg.sigma == 0.3 and cfg.lambdas == (1000.0, 10.0, 0.1, 0.1, 0.1)


def test_lambda_normalization():
    cfg = lad.LadderConfig.preset(2)
    assert cfg.normalized((100, 10, 4), "sum") == cfg
    assert cfg.normalized((100, 10, 4), "unit").lambdas == (10.0, 1.0, 0.025)
    with pytest.raises(lad.LadderConfigError):
        cfg.normalized((100, 10, 4), "mean")


def test_ladder_pass_total_is_sum():
    net, batch, _ = tiny_system("d-ladder", 0)
    ce, cost, total, grads = lad.ladder_pass(net, batch, rng=RngStream(0, "noise"))
    assert total == ce + cost
    assert set(grads) == set(net.params)
    assert any(np.any(g != 0) for n, g in grads.items() if ".comb" in n)


@pytest.mark.parametrize("system", ["d-ladder", "x-ladder"])
def test_zero_lambda_zero_sigma_matches_supervised(system):
    net, batch, _ = tiny_system(system, 1)
    depth = net.depth + 1
    ce, cost, total, _ = lad.ladder_pass(net, batch, lad.LadderConfig(0.0, (0.0,) * depth), RngStream(1, "n"))
    base = nets.Network(replace(net.config, ladder=None),
                        {p.name: p for p in net.classification_params()})
    ref = base.loss_and_grad(batch, RngStream(1, "n"))
    assert cost == 0.0
    assert abs(total - ref.total) < 1e-10


def test_ladder_pass_requires_attachment():
    net = nets.build_dvector(3, width=4, feat_dim=1)
    with pytest.raises(lad.LadderConfigError):
        lad.ladder_pass(net, nets.Batch(np.zeros((2, 51)), np.array([0, 1])))


@pytest.mark.parametrize("system", ["d-ladder", "x-ladder"])
def test_ladder_gradients(system):
    assert check_system(system, CHECK_SEED) < 1e-4
