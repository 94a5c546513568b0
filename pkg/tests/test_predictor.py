import numpy as np
import pytest
from hypothesis import given, strategies as st

from splatcodec.diffmath import ContractError, grad_check, philox
from splatcodec.predictor import (FEATURE_DIM, HYPER_DIM, Q0_FEATURE, Q0_OFFSET, Q0_SCALE, Q_SPAN, RESIDUAL_DIM,
                                  SIGMA_MIN, EntropyParams, PENet, encode_context, estimate_params,
                                  make_fpnet, make_icencoder, offset_mask_apply, offset_mask_backward,
                                  predict_feature)


def test_dimensions():
    assert make_fpnet().in_dim == FEATURE_DIM + RESIDUAL_DIM and make_fpnet().out_dim == FEATURE_DIM
    assert make_icencoder().in_dim == RESIDUAL_DIM and make_icencoder().out_dim == HYPER_DIM


def test_predict_feature_concatenates_condition_first():
    net = make_fpnet()
    fc = philox(1).normal(size=(3, FEATURE_DIM))
    fr = philox(2).normal(size=(3, RESIDUAL_DIM))
    fp, _ = predict_feature(net, fc, fr)
    assert np.allclose(fp, net(np.concatenate([fc, fr], axis=1)))
    with pytest.raises(ContractError):
        predict_feature(net, fc, fr[:, :-1])


def test_encode_context_shape():
    z, _ = encode_context(make_icencoder(), np.zeros((5, RESIDUAL_DIM)))
    assert z.shape == (5, HYPER_DIM)


def test_channel_layout():
    assert EntropyParams.slice(25, "feature") == slice(0, 25)
    assert EntropyParams.slice(25, "scale") == slice(25, 28)
    assert EntropyParams.slice(25, "offset") == slice(28, None)


@given(st.integers(0, 500))
def test_penet_output_ranges(seed):
    pe = PENet(FEATURE_DIM + HYPER_DIM, RESIDUAL_DIM, 10)
    ctx = philox(seed).normal(0, 10, (8, FEATURE_DIM + HYPER_DIM))
    p, _ = estimate_params(pe, ctx[:, :HYPER_DIM], ctx[:, HYPER_DIM:])
    C = RESIDUAL_DIM + 3 + 30
    assert p.mu.shape == p.sigma.shape == p.q.shape == (8, C)
    assert np.all(p.sigma >= SIGMA_MIN)
    q0 = np.array([Q0_FEATURE] * RESIDUAL_DIM + [Q0_SCALE] * 3 + [Q0_OFFSET] * 30)
    assert np.all(p.q >= q0 / Q_SPAN * (1 - 1e-12)) and np.all(p.q <= q0 * Q_SPAN * (1 + 1e-12))


def test_penet_rejects_mismatched_net():
    from splatcodec.diffmath import Mlp2
    with pytest.raises(ContractError):
        PENet(FEATURE_DIM, RESIDUAL_DIM, 10, net=Mlp2(FEATURE_DIM, 8, 5))


def test_penet_backward_finite_difference():
    pe = PENet(6, 2, 1, hidden=7, seed=3)
    ctx = philox(4).normal(size=(5, 6))
    w = philox(5).normal(size=(3, 5, pe.channels))

    def f(c):
        pe.net.zero_grad()
        p, cache = pe.forward(c)
        val = float(np.sum(w[0] * p.mu) + np.sum(w[1] * p.sigma) + np.sum(w[2] * p.q))
        return val, pe.backward(cache, w[0], w[1], w[2])
    assert grad_check(f, ctx, eps=1e-6) < 1e-3


def test_mask_hard_threshold_and_loss():
    logits = np.array([[-1.0, 0.0, 2.0]])
    mask, loss = offset_mask_apply(logits)
    assert list(mask[0]) == [0.0, 1.0, 1.0]
    assert loss == pytest.approx(np.mean(1 / (1 + np.exp(-logits))))


def test_mask_straight_through_gradient():
    logits = philox(6).normal(size=(4, 3))
    d_mask = philox(7).normal(size=(4, 3))
    s = 1 / (1 + np.exp(-logits))
    g = offset_mask_backward(logits, d_mask, d_loss=2.0)
    assert np.allclose(g, (d_mask + 2.0 / logits.size) * s * (1 - s))
