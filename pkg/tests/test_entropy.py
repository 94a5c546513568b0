import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.stats import norm

from splatcodec.diffmath import ContractError, grad_check, philox
from splatcodec.entropy import (P_FLOOR, FactorizedDensity, gaussian_bits, quantize, round_half_away,
                                symbols, total_rate, uniform_noise)

finite = st.floats(-50, 50)
positive = st.floats(0.05, 20.0)


def test_round_half_away_from_zero():
    assert list(round_half_away(np.array([-2.5, -1.5, -0.5, 0.5, 1.5, 2.49]))) == [-3, -2, -1, 1, 2, 2]


def test_quantize_modes():
    v = np.array([0.26, -0.74])
    assert np.allclose(quantize(v, 0.5, mu=0.1, mode="infer"), [0.1, -0.9])
    assert np.allclose(quantize(v, 0.5, mode="train", noise=np.array([0.5, -0.5])), [0.51, -0.99])
    with pytest.raises(ContractError):
        quantize(v, 0.0)
    with pytest.raises(ContractError):
        quantize(v, 0.5, mode="train")


def test_symbols_center_on_mean():
    assert list(symbols(np.array([1.0, 1.24, 1.26, 0.74]), 1.0, 0.5)) == [0, 0, 1, -1]


def test_uniform_noise_range_and_dtype():
    u = uniform_noise(philox(1), (1000,), np.float32)
    assert u.dtype == np.float32 and u.min() > -0.5 and u.max() <= 0.5


@given(finite, finite, positive, st.floats(0.05, 2.0))
def test_gaussian_bits_matches_normal_cdf(v, mu, sigma, q):
    p, bits = gaussian_bits(v, mu, sigma, q)
    ref = norm.cdf(v + q / 2, mu, sigma) - norm.cdf(v - q / 2, mu, sigma)
    ref_tail = norm.sf(v - q / 2, mu, sigma) - norm.sf(v + q / 2, mu, sigma)
    best = max(ref, ref_tail)
    if best > 1e-6:
        assert p == pytest.approx(best, rel=1e-7)
    assert 0.0 <= p <= 1.0 and np.isfinite(bits) and bits >= 0.0
    assert bits == pytest.approx(-np.log2(max(p, P_FLOOR)))


@given(finite, finite, st.floats(1e-4, 1e4), st.floats(1e-3, 10.0))
def test_gaussian_bits_always_finite(v, mu, sigma, q):
    p, bits = gaussian_bits(v, mu, sigma, q)
    assert np.isfinite(p) and np.isfinite(bits) and bits >= 0


def test_gaussian_bits_gradients_finite_difference():
    rng = philox(11)
    for _ in range(100):
        mu = rng.normal()
        sigma, q = rng.uniform(0.05, 2.0), rng.uniform(0.1, 1.0)
        v = mu + sigma * rng.uniform(-4.0, 4.0)

        def f(x):
            _, b, g = gaussian_bits(x[0], x[1], x[2], x[3], grad=True)
            return b, np.array(g)
        assert grad_check(f, np.array([v, mu, sigma, q]), eps=1e-6) < 1e-3


def test_floor_region_keeps_pulling_mean():
    _, bits, (d_v, d_mu, d_sigma, _) = gaussian_bits(10.0, 0.0, 0.5, 0.5, grad=True)
    assert bits == pytest.approx(-np.log2(P_FLOOR))
    assert d_mu < 0 < d_v          # descent moves mu toward v
    assert d_sigma < 0             # and widens sigma


def test_float32_inputs_stay_float32():
    p, b = gaussian_bits(np.zeros(3, np.float32), np.float32(0), np.ones(3, np.float32), np.float32(1))
    assert p.dtype == np.float32 and b.dtype == np.float32


def test_quantization_is_straight_through_on_linear_probe():
    # the gradient of sum(w * v_hat) w.r.t. v is w whether v_hat = v or the quantized v
    v = philox(2).normal(size=5)
    w = philox(3).normal(size=5)
    noise = uniform_noise(philox(4), 5)
    for mode, kw in (("train", {"noise": noise}), ("infer", {})):
        eps = 1e-7
        g_id = (np.sum(w * (v + eps)) - np.sum(w * (v - eps))) / (2 * eps)
        assert g_id == pytest.approx(np.sum(w))
        # the STE passes w unchanged; in train mode this is exact
        if mode == "train":
            g = (np.sum(w * quantize(v + eps, 0.5, mode=mode, **kw))
                 - np.sum(w * quantize(v - eps, 0.5, mode=mode, **kw))) / (2 * eps)
            assert g == pytest.approx(np.sum(w), rel=1e-6)


def _density(seed=0, channels=3):
    return FactorizedDensity(channels).randomize(philox(seed), 0.7)


@given(st.integers(0, 1000))
def test_density_cdf_monotone(seed):
    d = _density(seed)
    x = np.sort(philox(seed, 1).normal(0, 5, (3, 64)), axis=1)
    c = d.cdf(x)
    assert np.all(np.diff(c, axis=1) >= 0) and np.all((c >= 0) & (c <= 1))


def test_density_bins_sum_to_one():
    d = _density(1, 2)
    s = d.step
    n = np.arange(-4000, 4001)[:, None] * s[None, :]
    p, _ = d.bits(n)
    assert np.allclose(p.sum(axis=0), 1.0, atol=1e-6)


def test_density_bits_match_cdf_difference():
    d = _density(2, 2)
    z = np.array([[0.0, 1.0], [-2.0, 0.5]])
    p, bits = d.bits(z)
    s = d.step
    ref = d.cdf((z + s / 2).T) - d.cdf((z - s / 2).T)
    assert np.allclose(p, ref.T, rtol=1e-9)


def test_density_gradients_finite_difference():
    d = _density(3, 2)
    z = philox(5).normal(size=(7, 2))
    for name in d.param_order():
        def f(v):
            d.params()[name][...] = v
            d.zero_grad()
            _, bits, saved = d.bits(z, grad=True)
            d.bits_backward(z, saved, np.ones_like(bits))
            return float(bits.sum()), d.grads[name].copy()
        assert grad_check(f, d.params()[name].copy(), eps=1e-6) < 1e-3, name

    def g(zz):
        _, bits, saved = d.bits(zz, grad=True)
        return float(bits.sum()), d.bits_backward(zz, saved, np.ones_like(bits))
    assert grad_check(g, z, eps=1e-6) < 1e-3


def _restrict(m, idx):
    from splatcodec.model import SceneModel
    return SceneModel(m.variant, m.x[idx], m.feat[idx], m.scale[idx], m.offsets[idx], m.mask_logits[idx],
                      m.grid, m.penet, m.heads, m.fpnet, m.icenc, m.density, seed=m.seed)


def test_total_rate_zero_anchors_and_additivity(small_targets, trained_models):
    from splatcodec.model import SceneModel
    empty = small_targets.subset(np.arange(0))
    assert total_rate(SceneModel.from_targets(empty, "predict_hyper")) == 0.0
    for m in trained_models.values():
        idx = np.arange(m.num_anchors)
        a, b = _restrict(m, idx[:150]), _restrict(m, idx[150:])
        assert total_rate(a) + total_rate(b) == pytest.approx(total_rate(m), rel=1e-5)
