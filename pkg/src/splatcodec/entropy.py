"""Differentiable rate terms: quantization, Gaussian-conditional bits and a
learnable factorized density for the hyperprior channels."""

from __future__ import annotations

import math

import numba
import numpy as np

from .diffmath import ContractError, inv_softplus, sigmoid, softplus

P_FLOOR = 1e-9
SIGMA_MIN = 1e-4
# plain floats so float32 arrays stay float32
LN2 = float(np.log(2.0))
INV_SQRT_2PI = float(1.0 / np.sqrt(2.0 * np.pi))
_SQRT1_2 = float(np.sqrt(0.5))


def round_half_away(x):
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def uniform_noise(rng: np.random.Generator, shape, dtype=np.float64) -> np.ndarray:
    """Samples in (-1/2, 1/2]."""
    dtype = np.dtype(dtype)
    if dtype == np.float32:
        return np.float32(0.5) - rng.random(shape, dtype=np.float32)
    return (0.5 - rng.random(shape)).astype(dtype)


def quantize(v, q, mu=0.0, mode: str = "infer", noise=None):
    """Noise-perturb (``train``) or snap to the lattice ``mu + q*n`` (``infer``).

    In ``train`` mode ``noise`` holds unit-step samples in (-1/2, 1/2]; the
    perturbation is ``q * noise``.  Both modes are identity in the STE sense.
    """
    q = np.asarray(q)
    if np.any(q <= 0):
        raise ContractError("quantization step must be positive")
    if mode == "train":
        if noise is None:
            raise ContractError("train-mode quantization needs a noise sample")
        return v + q * noise
    if mode == "infer":
        return mu + q * round_half_away((v - mu) / q)
    raise ContractError(f"unknown quantization mode {mode!r}")


def symbols(v, mu, q) -> np.ndarray:
    return round_half_away((np.asarray(v) - mu) / q).astype(np.int64)


def _phi(x):
    return INV_SQRT_2PI * np.exp(-0.5 * x * x)


@numba.njit(cache=True, nogil=True, inline="always")
def _bits_at(d, sigma, q):
    # bin mass around d, its floored bits and the raw partials; float64 arithmetic
    inv = 1.0 / sigma
    t = -abs(d)
    half = 0.5 * q
    a = (t + half) * inv
    b = (t - half) * inv
    pi = 0.5 * (math.erfc(-a * _SQRT1_2) - math.erfc(-b * _SQRT1_2))
    return pi, -math.log2(max(pi, P_FLOOR)), a, b, inv


@numba.njit(cache=True, nogil=True, inline="always")
def _partials(d, q, pi, a, b, inv):
    if pi > P_FLOOR:
        pa = INV_SQRT_2PI * math.exp(-0.5 * a * a)
        pb = INV_SQRT_2PI * math.exp(-0.5 * b * b)
        g = -inv / (pi * LN2)
        sgn = 1.0 if d > 0 else (-1.0 if d < 0 else 0.0)
        return -sgn * (pa - pb) * g, -(a * pa - b * pb) * g, 0.5 * (pa + pb) * g
    # floored outlier: follow the density approximation -log2(q * pdf(d))
    # so mu and sigma keep moving toward it
    return d * inv * inv / LN2, (inv - d * d * inv * inv * inv) / LN2, -1.0 / (q * LN2)


@numba.njit(cache=True, nogil=True)
def _gaussian_bits_kernel(v, mu, sigma, q, p, bits, d_v, d_sigma, d_q, grad):
    # 2-D, possibly strided inputs of one shape
    for i in range(v.shape[0]):
        for j in range(v.shape[1]):
            d = v[i, j] - mu[i, j]
            pi, b_ij, a, b, inv = _bits_at(d, sigma[i, j], q[i, j])
            p[i, j] = pi
            bits[i, j] = b_ij
            if grad:
                d_v[i, j], d_sigma[i, j], d_q[i, j] = _partials(d, q[i, j], pi, a, b, inv)


def gaussian_bits(v, mu, sigma, q, grad: bool = False):
    """Probability of the quantization bin around ``v`` and its cost in bits.

    Returns ``(p, bits)`` or, with ``grad``, ``(p, bits, (d_v, d_mu, d_sigma, d_q))``
    where each entry is the derivative of ``bits``.  The mass is evaluated in
    the lower tail (``-|v - mu|``) for accuracy.  Below the probability floor
    the bits are constant, so the partials there come from the Gaussian
    density instead of being zero.
    """
    arrs = [np.asarray(a) for a in (v, mu, sigma, q)]
    dtype = np.result_type(*arrs, np.float32)
    shape = np.broadcast_shapes(*(a.shape for a in arrs))
    if len(shape) == 2 and all(a.shape == shape and a.dtype == dtype for a in arrs):
        grid = arrs                       # common case: same-shape (N, C) views, no copies
    else:
        grid = [np.ascontiguousarray(np.broadcast_to(a, shape), dtype=dtype).reshape(1, -1) for a in arrs]
    out = [np.empty(grid[0].shape, dtype) for _ in range(2 + 3 * grad)]
    if grad:
        _gaussian_bits_kernel(*grid, *out, True)
    else:
        _gaussian_bits_kernel(*grid, out[0], out[1], out[0], out[0], out[0], False)
    out = [o.reshape(shape) for o in out]
    if shape == ():
        out = [o[()] for o in out]
    if not grad:
        return out[0], out[1]
    p, bits, d_v, d_sigma, d_q = out
    return p, bits, (d_v, -d_v, d_sigma, d_q)


class FactorizedDensity:
    """Per-channel monotone CDF ``c(x) = sigmoid(g_K(...g_1(x)))``.

    Stage ``g_k(u) = W u + b + tanh(a) * tanh(W u + b)`` with
    ``W = softplus(H_k) >= 0`` keeps every stage nondecreasing.  Each channel
    also owns a quantization step ``s = exp(raw_step)``.
    """

    def __init__(self, channels: int, filters=(3, 3), dtype=np.float64):
        self.channels = channels
        self.widths = (1, *filters, 1)
        self.H, self.b, self.a = [], [], []
        for k in range(len(self.widths) - 1):
            d_in, d_out = self.widths[k], self.widths[k + 1]
            self.H.append(np.full((channels, d_out, d_in), inv_softplus(1.0 / d_in), dtype))
            self.b.append(np.zeros((channels, d_out), dtype))
            self.a.append(np.zeros((channels, d_out), dtype))
        self.raw_step = np.zeros(channels, dtype)
        self.grads = {k: np.zeros_like(v) for k, v in self.params().items()}

    @property
    def stages(self) -> int:
        return len(self.H)

    @property
    def step(self) -> np.ndarray:
        return np.exp(self.raw_step)

    def params(self) -> dict:
        out = {}
        for k in range(self.stages):
            out[f"H{k}"] = self.H[k]
            out[f"b{k}"] = self.b[k]
            out[f"a{k}"] = self.a[k]
        out["raw_step"] = self.raw_step
        return out

    def zero_grad(self):
        for g in self.grads.values():
            g.fill(0.0)

    def copy(self, dtype=None) -> "FactorizedDensity":
        dtype = dtype or self.raw_step.dtype
        out = FactorizedDensity(self.channels, self.widths[1:-1], dtype)
        for k, v in self.params().items():
            out.params()[k][...] = v
        return out

    def tensors(self) -> list[np.ndarray]:
        return [self.params()[k] for k in self.param_order()]

    def param_order(self) -> list[str]:
        names = []
        for k in range(self.stages):
            names += [f"H{k}", f"b{k}", f"a{k}"]
        return names + ["raw_step"]

    def randomize(self, rng: np.random.Generator, spread: float = 1.0) -> "FactorizedDensity":
        for k, v in self.params().items():
            if k != "raw_step":
                v[...] = rng.normal(0.0, spread, v.shape)
        return self

    def logits(self, x: np.ndarray):
        """Pre-sigmoid CDF values for ``x`` shaped ``(C, M)``."""
        # stage activations are kept as (C, width, M) so M stays contiguous
        u = np.asarray(x, dtype=self.raw_step.dtype)[:, None, :]
        cache = []
        for k in range(self.stages):
            W = softplus(self.H[k])
            pre = np.matmul(W, u)
            pre += self.b[k][:, :, None]
            tp = np.tanh(pre)
            ta = np.tanh(self.a[k])[:, :, None]
            cache.append((u, W, tp, ta))
            u = pre + ta * tp
        return u[:, 0, :], cache

    def logits_backward(self, cache, d_out: np.ndarray) -> np.ndarray:
        d_u = d_out[:, None, :]
        g = self.grads
        for k in reversed(range(self.stages)):
            u, W, tp, ta = cache[k]
            d_pre = d_u * (1.0 + ta * (1.0 - tp * tp))
            g[f"a{k}"] += np.sum(d_u * tp, axis=2) * (1.0 - ta[:, :, 0] ** 2)
            g[f"b{k}"] += d_pre.sum(axis=2)
            dW = np.matmul(d_pre, u.transpose(0, 2, 1))
            g[f"H{k}"] += dW * sigmoid(self.H[k])
            d_u = np.matmul(W.transpose(0, 2, 1), d_pre)
        return d_u[:, 0, :]

    def cdf(self, x) -> np.ndarray:
        """CDF for ``x`` shaped ``(C, M)`` (or a scalar on a 1-channel density)."""
        x = np.asarray(x, dtype=np.float64)
        scalar = x.ndim == 0
        arr = x.reshape(1, 1) if scalar else x
        out = sigmoid(self.logits(arr)[0])
        return float(out[0, 0]) if scalar else out

    def bits(self, zhat: np.ndarray, grad: bool = False):
        """Bin probability and bits for ``zhat`` shaped ``(N, C)``.

        With ``grad`` a third item carries the state :meth:`bits_backward` needs.
        """
        zhat = np.asarray(zhat)
        n = zhat.shape[0]
        s = self.step[None, :]
        upper = (zhat + 0.5 * s).T
        lower = (zhat - 0.5 * s).T
        lg, cache = self.logits(np.concatenate([upper, lower], axis=1))
        gu, gl = lg[:, :n], lg[:, n:]
        # flip to the lower tail where both logits are positive
        flip = np.where(gu + gl > 0.0, -1.0, 1.0).astype(gu.dtype)
        p = np.abs(sigmoid(flip * gu) - sigmoid(flip * gl)).T
        live = p > P_FLOOR
        bits = -np.log2(np.where(live, p, P_FLOOR))
        if not grad:
            return p, bits
        return p, bits, (cache, gu, gl, live, p)

    def bits_backward(self, zhat: np.ndarray, saved, d_bits: np.ndarray) -> np.ndarray:
        """Accumulate parameter/step grads for ``sum(d_bits * bits)``; return d_zhat."""
        cache, gu, gl, live, p = saved
        n = zhat.shape[0]
        su, sl = sigmoid(gu), sigmoid(gl)
        db_dp = np.where(live, -d_bits / (np.where(live, p, 1.0) * LN2), 0.0)
        d_gu = (db_dp * (su * (1.0 - su)).T).T
        d_gl = -(db_dp * (sl * (1.0 - sl)).T).T
        d_in = self.logits_backward(cache, np.concatenate([d_gu, d_gl], axis=1))
        d_upper, d_lower = d_in[:, :n].T, d_in[:, n:].T
        d_step = 0.5 * (d_upper - d_lower)
        self.grads["raw_step"] += np.sum(d_step, axis=0) * self.step
        return d_upper + d_lower


def total_rate(model, mode: str = "infer") -> float:
    """Estimated entropy bits of all anchor attributes and the hyperprior."""
    if model.num_anchors == 0:
        return 0.0
    return float(sum(v.sum() for v in model.rate_terms(mode=mode).values()))
