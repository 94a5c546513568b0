"""Small dense building blocks with hand-written reverse-mode gradients.

Every learned component of the codec is a two-layer ReLU network (``Mlp2``).
Networks keep their parameters and accumulated gradients in plain dicts of
numpy arrays so the optimizer and the serializer can walk them by name.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from typing import Callable

import numba
import numpy as np

PARAM_NAMES = ("W1", "b1", "W2", "b2")


class ContractError(ValueError):
    """Raised when a caller violates a documented pre-condition."""


def philox(seed: int, *counter: int) -> np.random.Generator:
    """Counter-based generator keyed by ``seed``; ``counter`` selects a stream."""
    words = [0, 0, 0, 0]
    for i, c in enumerate(counter[:3]):
        words[1 + i] = int(c) & 0xFFFFFFFFFFFFFFFF
    return np.random.Generator(np.random.Philox(key=int(seed) & 0xFFFFFFFFFFFFFFFF, counter=words))


def softplus(x):
    x = np.asarray(x)
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def sigmoid(x):
    # exp overflow for very negative x is harmless here
    with np.errstate(over="ignore"):
        return 1.0 / (1.0 + np.exp(-x))


def inv_softplus(y: float) -> float:
    return float(np.log(np.expm1(y)))


@dataclass
class MlpCache:
    owner: "Mlp2"
    x: np.ndarray
    pre: np.ndarray
    act: np.ndarray


class Mlp2:
    """``y = W2 relu(W1 x + b1) + b2`` over single vectors or row batches."""

    def __init__(self, in_dim: int, hidden_dim: int, out_dim: int, seed: int = 0,
                 dtype=np.float64, zero: bool = False):
        self.in_dim, self.hidden_dim, self.out_dim = in_dim, hidden_dim, out_dim
        if zero:
            self.params = {
                "W1": np.zeros((hidden_dim, in_dim), dtype),
                "b1": np.zeros(hidden_dim, dtype),
                "W2": np.zeros((out_dim, hidden_dim), dtype),
                "b2": np.zeros(out_dim, dtype),
            }
        else:
            rng = philox(seed)
            lim1 = np.sqrt(1.0 / in_dim)
            lim2 = np.sqrt(1.0 / hidden_dim)
            self.params = {
                "W1": rng.uniform(-lim1, lim1, (hidden_dim, in_dim)).astype(np.float32).astype(dtype),
                "b1": rng.uniform(-lim1, lim1, hidden_dim).astype(np.float32).astype(dtype),
                "W2": rng.uniform(-lim2, lim2, (out_dim, hidden_dim)).astype(np.float32).astype(dtype),
                "b2": rng.uniform(-lim2, lim2, out_dim).astype(np.float32).astype(dtype),
            }
        self.grads = {k: np.zeros_like(v) for k, v in self.params.items()}

    @property
    def dtype(self):
        return self.params["W1"].dtype

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, MlpCache]:
        x = np.asarray(x, dtype=self.dtype)
        if x.shape[-1] != self.in_dim:
            raise ContractError(f"Mlp2 expects input dim {self.in_dim}, got {x.shape[-1]}")
        p = self.params
        pre = x @ p["W1"].T + p["b1"]
        act = np.maximum(pre, 0.0)
        y = act @ p["W2"].T + p["b2"]
        return y, MlpCache(self, x, pre, act)

    def __call__(self, x):
        return self.forward(x)[0]

    def backward(self, cache: MlpCache, dy: np.ndarray) -> np.ndarray:
        """Accumulate parameter gradients and return the input gradient."""
        if cache.owner is not self:
            raise ContractError("cache was produced by a different network")
        dy = np.asarray(dy, dtype=self.dtype)
        if dy.shape != cache.pre.shape[:-1] + (self.out_dim,):
            raise ContractError(f"upstream gradient shape {dy.shape} does not match forward output")
        p, g = self.params, self.grads
        dact = dy @ p["W2"]
        dpre = dact
        dpre *= cache.pre > 0.0
        if dy.ndim == 1:
            g["W2"] += np.outer(dy, cache.act)
            g["b2"] += dy
            g["W1"] += np.outer(dpre, cache.x)
            g["b1"] += dpre
        else:
            g["W2"] += dy.T @ cache.act
            g["b2"] += dy.sum(axis=0)
            g["W1"] += dpre.T @ cache.x
            g["b1"] += dpre.sum(axis=0)
        return dpre @ p["W1"]

    def zero_grad(self) -> None:
        for v in self.grads.values():
            v.fill(0.0)

    def astype(self, dtype) -> "Mlp2":
        out = Mlp2.__new__(Mlp2)
        out.in_dim, out.hidden_dim, out.out_dim = self.in_dim, self.hidden_dim, self.out_dim
        out.params = {k: v.astype(dtype, copy=True) for k, v in self.params.items()}
        out.grads = {k: np.zeros_like(v) for k, v in out.params.items()}
        return out

    def copy(self) -> "Mlp2":
        return self.astype(self.dtype)

    def tensors(self) -> list[np.ndarray]:
        return [self.params[k] for k in PARAM_NAMES]

    @classmethod
    def from_tensors(cls, tensors: list[np.ndarray], dtype=np.float64) -> "Mlp2":
        W1, b1, W2, b2 = tensors
        if W1.ndim != 2 or W2.ndim != 2 or b1.shape != (W1.shape[0],) or b2.shape != (W2.shape[0],) \
                or W2.shape[1] != W1.shape[0]:
            raise ContractError("inconsistent Mlp2 tensor shapes")
        net = cls(W1.shape[1], W1.shape[0], W2.shape[0], dtype=dtype, zero=True)
        for k, t in zip(PARAM_NAMES, tensors):
            net.params[k][...] = t
        return net


@dataclass
class AdamState:
    lr: float = 2e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


@numba.njit(cache=True, nogil=True)
def _adam_kernel(p, g, m, v, b1, b2, lr_c, c2, eps):
    for i in range(p.size):
        gi = g[i]
        mi = b1 * m[i] + (1.0 - b1) * gi
        vi = b2 * v[i] + (1.0 - b2) * gi * gi
        m[i] = mi
        v[i] = vi
        p[i] -= lr_c * mi / (math.sqrt(vi / c2) + eps)


def adam_step(params: dict, grads: dict, state: AdamState, lr_scale: dict | None = None) -> dict:
    """Bias-corrected Adam update applied in place; ``grads`` are left untouched."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient in parameter block '{name}'")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, p in params.items():
        if not p.flags.c_contiguous:
            raise ContractError(f"parameter block '{name}' must be contiguous")
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        lr = state.lr * (lr_scale.get(name, 1.0) if lr_scale else 1.0)
        g = np.ascontiguousarray(grads[name], dtype=p.dtype)
        _adam_kernel(p.reshape(-1), g.reshape(-1), state.m[name].reshape(-1), state.v[name].reshape(-1),
                     b1, b2, lr / c1, c2, state.eps)
    return params


def grad_check(f: Callable[[np.ndarray], tuple[float, np.ndarray]], x: np.ndarray,
               eps: float = 1e-3) -> float:
    """Max relative error between ``f``'s analytic gradient and central differences.

    ``f`` returns ``(value, gradient)``; only the gradient at ``x`` is used.
    """
    x = np.array(x, dtype=np.float64)
    _, analytic = f(x.copy())
    analytic = np.asarray(analytic, dtype=np.float64).reshape(x.shape)
    worst = 0.0
    flat = x.reshape(-1)
    for i in range(flat.size):
        xp = flat.copy()
        xm = flat.copy()
        xp[i] += eps
        xm[i] -= eps
        fp = float(f(xp.reshape(x.shape))[0])
        fm = float(f(xm.reshape(x.shape))[0])
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise FloatingPointError(f"non-finite evaluation at coordinate {i}")
        numeric = (fp - fm) / (2.0 * eps)
        a = analytic.reshape(-1)[i]
        err = abs(a - numeric) / max(1e-12, abs(a) + abs(numeric))
        worst = max(worst, err)
    return worst


# -- tensor wire format: 3 x u32 shape (0 = absent axis), then f32 LE row-major --

def pack_tensor(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    if arr.ndim > 3:
        raise ContractError("tensor format holds at most 3 axes")
    shape = list(arr.shape) if arr.ndim else [1]
    shape += [0] * (3 - len(shape))
    return struct.pack("<3I", *shape) + np.ascontiguousarray(arr, dtype="<f4").tobytes()


def unpack_tensor(buf: bytes, pos: int = 0) -> tuple[np.ndarray, int]:
    if pos + 12 > len(buf):
        raise EOFError("tensor header truncated")
    dims = [d for d in struct.unpack_from("<3I", buf, pos) if d]
    pos += 12
    count = int(np.prod(dims)) if dims else 0
    end = pos + 4 * count
    if end > len(buf):
        raise EOFError("tensor payload truncated")
    arr = np.frombuffer(buf, dtype="<f4", count=count, offset=pos).reshape(dims).astype(np.float64)
    return arr, end
