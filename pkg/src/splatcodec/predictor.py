"""Feature prediction, hyperprior encoder and entropy-parameter network.

Channel layout of every per-anchor entropy parameter block (frozen; the
bitstream depends on it): coded feature channels first (the 25-dim residual,
or the 32-dim raw feature in the baseline path), then 3 scale channels, then
``3k`` offset channels in offset-major order.  The PE-Net output vector is
``[mu(C), raw_sigma(C), raw_q(C)]`` over those ``C`` channels.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .diffmath import ContractError, Mlp2, inv_softplus, sigmoid

FEATURE_DIM = 32
RESIDUAL_DIM = 25
HYPER_DIM = 4
NUM_OFFSETS = 10
Q0_FEATURE, Q0_SCALE, Q0_OFFSET = 1.0, 0.001, 0.2
# q = Q0 * Q_SPAN**tanh(raw): steps range over [Q0/Q_SPAN, Q0*Q_SPAN]
Q_SPAN = 4.0
SIGMA_EPS = 1e-6
SIGMA_MIN = 1e-4
# initial sigma per attribute, only sets the PE-Net output bias
SIGMA_INIT = (1.0, 0.01, 0.4)


def make_fpnet(cond_dim=FEATURE_DIM, residual_dim=RESIDUAL_DIM, hidden=64, seed=11, dtype=np.float64) -> Mlp2:
    return Mlp2(cond_dim + residual_dim, hidden, FEATURE_DIM, seed=seed, dtype=dtype)


def make_icencoder(residual_dim=RESIDUAL_DIM, hidden=16, seed=12, dtype=np.float64) -> Mlp2:
    return Mlp2(residual_dim, hidden, HYPER_DIM, seed=seed, dtype=dtype)


def predict_feature(fpnet: Mlp2, fc: np.ndarray, fr_hat: np.ndarray):
    """``f_p = P([f_c, f_r_hat])``; returns ``(f_p, cache)``."""
    if np.shape(fc)[-1] + np.shape(fr_hat)[-1] != fpnet.in_dim:
        raise ContractError("condition + residual width does not match FP-Net input")
    return fpnet.forward(np.concatenate([fc, fr_hat], axis=-1))


def encode_context(icenc: Mlp2, fr: np.ndarray):
    """Hyperprior ``z = E(f_r)`` from the raw residual; returns ``(z, cache)``."""
    return icenc.forward(fr)


@dataclass
class EntropyParams:
    mu: np.ndarray
    sigma: np.ndarray
    q: np.ndarray
    feat_dim: int
    k: int

    def block(self, name: str):
        s = self.slice(self.feat_dim, name)
        return self.mu[..., s], self.sigma[..., s], self.q[..., s]

    @staticmethod
    def slice(feat_dim: int, name: str) -> slice:
        if name == "feature":
            return slice(0, feat_dim)
        if name == "scale":
            return slice(feat_dim, feat_dim + 3)
        if name == "offset":
            return slice(feat_dim + 3, None)
        raise KeyError(name)


@dataclass
class PECache:
    mlp: object
    dsigma_draw: np.ndarray     # d sigma / d raw, zero where sigma sits on its floor
    dq_draw: np.ndarray         # d q / d raw


class PENet:
    """``{mu, sigma, q} = M(context)`` for every coded anchor channel."""

    def __init__(self, ctx_dim: int, feat_dim: int = RESIDUAL_DIM, k: int = NUM_OFFSETS,
                 hidden: int = 64, seed: int = 13, dtype=np.float64, net: Mlp2 | None = None):
        self.ctx_dim, self.feat_dim, self.k = ctx_dim, feat_dim, k
        C = self.channels
        self.q0 = np.concatenate([np.full(feat_dim, Q0_FEATURE), np.full(3, Q0_SCALE),
                                  np.full(3 * k, Q0_OFFSET)]).astype(dtype)
        if net is None:
            net = Mlp2(ctx_dim, hidden, 3 * C, seed=seed, dtype=dtype)
            init_sigma = np.concatenate([np.full(feat_dim, SIGMA_INIT[0]), np.full(3, SIGMA_INIT[1]),
                                         np.full(3 * k, SIGMA_INIT[2])])
            net.params["b2"][C:2 * C] = [inv_softplus(s) for s in init_sigma]
            net.params["W2"][C:2 * C] *= 0.1
        if net.in_dim != ctx_dim or net.out_dim != 3 * C:
            raise ContractError("PE-Net shape does not match the channel layout")
        self.net = net

    @property
    def channels(self) -> int:
        return self.feat_dim + 3 + 3 * self.k

    def copy(self, dtype=None) -> "PENet":
        return PENet(self.ctx_dim, self.feat_dim, self.k, dtype=dtype or self.net.dtype,
                     net=self.net.astype(dtype or self.net.dtype))

    def forward(self, ctx: np.ndarray) -> tuple[EntropyParams, PECache]:
        raw, mcache = self.net.forward(ctx)
        C = self.channels
        mu = raw[..., :C]
        rs = raw[..., C:2 * C]
        tq = np.tanh(raw[..., 2 * C:])
        e = np.exp(-np.abs(rs))
        sp = SIGMA_EPS + (np.maximum(rs, 0.0) + np.log1p(e))
        sigma = np.maximum(sp, SIGMA_MIN)
        q = self.q0 * Q_SPAN ** tq
        # softplus' = sigmoid, from the same exp(-|x|)
        dsig = np.where(rs >= 0, 1.0, e) / (1.0 + e) * (sp > SIGMA_MIN)
        dq = q * math.log(Q_SPAN) * (1.0 - tq * tq)
        return EntropyParams(mu, sigma, q, self.feat_dim, self.k), PECache(mcache, dsig, dq)

    def backward(self, cache: PECache, d_mu, d_sigma, d_q) -> np.ndarray:
        C = self.channels
        d_raw = np.empty(d_mu.shape[:-1] + (3 * C,), self.net.dtype)
        d_raw[..., :C] = d_mu
        np.multiply(d_sigma, cache.dsigma_draw, out=d_raw[..., C:2 * C])
        np.multiply(d_q, cache.dq_draw, out=d_raw[..., 2 * C:])
        return self.net.backward(cache.mlp, d_raw)


def estimate_params(penet: PENet, z_hat: np.ndarray | None, fc: np.ndarray):
    """Entropy parameters from decoder-side context ``[z_hat, f_c]`` (or ``f_c`` alone)."""
    ctx = fc if z_hat is None else np.concatenate([z_hat, fc], axis=-1)
    return penet.forward(ctx)


def offset_mask_apply(logits: np.ndarray):
    """Hard keep-mask (``sigmoid(m) >= 0.5``) and the mask loss ``mean(sigmoid(m))``."""
    logits = np.asarray(logits)
    mask = (logits >= 0.0).astype(logits.dtype if logits.dtype.kind == "f" else np.float64)
    loss = float(np.mean(sigmoid(logits))) if logits.size else 0.0
    return mask, loss


def offset_mask_backward(logits: np.ndarray, d_mask: np.ndarray, d_loss: float = 0.0) -> np.ndarray:
    """Straight-through gradient: the hard mask borrows the sigmoid derivative."""
    s = sigmoid(logits)
    ds = s * (1.0 - s)
    return (d_mask + d_loss / max(logits.size, 1)) * ds
