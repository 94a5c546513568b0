"""Multi-resolution 3D hash grid with binarized entries.

Each level stores a ``2^T x F`` table of raw parameters.  Lookups read the
binarized view ``sign(theta) * delta_l`` (sign(0) = +1) and interpolate the 8
cell corners trilinearly; the per-level features are concatenated from the
coarsest to the finest level.  Gradients reach the raw table through a
straight-through estimator that passes where ``|theta| <= 1``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numba
import numpy as np

from .diffmath import ContractError, philox, sigmoid

PRIMES = (1, 2654435761, 805459861)
P_CLAMP = 1e-6


@numba.njit(cache=True, nogil=True)
def _gather(idx, w, view, out, col):
    n, corners = idx.shape
    F = view.shape[1]
    for i in range(n):
        for f in range(F):
            acc = 0.0
            for c in range(corners):
                acc += w[i, c] * view[idx[i, c], f]
            out[i, col + f] = acc


@numba.njit(cache=True, nogil=True)
def _scatter(idx, w, d, col, g):
    n, corners = idx.shape
    F = g.shape[1]
    for i in range(n):
        for c in range(corners):
            j = idx[i, c]
            wc = w[i, c]
            for f in range(F):
                g[j, f] += wc * d[i, col + f]


@dataclass
class HashGridConfig:
    levels: int = 8
    table_size_log2: int = 13
    feat_per_level: int = 4
    base_resolution: int = 16
    max_resolution: int = 512
    bbox: tuple = ((0.0, 0.0, 0.0), (1.0, 1.0, 1.0))

    def __post_init__(self):
        if self.levels < 1:
            raise ContractError("hash grid needs at least one level")
        res = self.resolutions
        if any(b <= a for a, b in zip(res, res[1:])):
            raise ContractError(f"resolutions must increase strictly, got {res}")
        lo, hi = np.asarray(self.bbox[0], float), np.asarray(self.bbox[1], float)
        if lo.shape != (3,) or hi.shape != (3,) or np.any(hi <= lo):
            raise ContractError("bbox must be a non-empty axis-aligned box")

    @property
    def resolutions(self) -> list[int]:
        if self.levels == 1:
            return [self.base_resolution]
        growth = np.log(self.max_resolution / self.base_resolution) / (self.levels - 1)
        return [int(round(self.base_resolution * np.exp(growth * i))) for i in range(self.levels)]

    @property
    def table_size(self) -> int:
        return 1 << self.table_size_log2

    @property
    def out_dim(self) -> int:
        return self.levels * self.feat_per_level


def hash_index(corners: np.ndarray, resolution: int, table_size_log2: int) -> np.ndarray:
    """Row index of integer lattice corners (``(..., 3)``) at one level."""
    corners = np.asarray(corners, dtype=np.int64)
    if np.any(corners < 0) or np.any(corners > resolution):
        raise ContractError(f"corner outside [0, {resolution}]")
    size = 1 << table_size_log2
    side = resolution + 1
    if side ** 3 <= size:
        return corners[..., 0] + corners[..., 1] * side + corners[..., 2] * side * side
    c = corners.astype(np.uint64)
    h = (c[..., 0] * np.uint64(PRIMES[0])) ^ (c[..., 1] * np.uint64(PRIMES[1])) \
        ^ (c[..., 2] * np.uint64(PRIMES[2]))
    return (h & np.uint64(size - 1)).astype(np.int64)


@dataclass
class GridLookup:
    """Corner rows and trilinear weights for a fixed set of query points."""
    idx: list          # per level (N, 8) int64
    weights: list      # per level (N, 8)


@dataclass
class HashGrid:
    config: HashGridConfig
    tables: list = field(default_factory=list)
    level_scale: np.ndarray = None
    bernoulli_logit: np.ndarray = None

    @classmethod
    def create(cls, config: HashGridConfig, seed: int = 0, dtype=np.float64,
               init_scale: float = 0.1) -> "HashGrid":
        rng = philox(seed, 0x6772)
        shape = (config.table_size, config.feat_per_level)
        tables = [rng.uniform(-1e-4, 1e-4, shape).astype(dtype) for _ in range(config.levels)]
        grid = cls(config, tables,
                   np.full(config.levels, init_scale, dtype),
                   np.zeros(config.levels, dtype))
        return grid

    def __post_init__(self):
        self.grad_tables = [np.zeros_like(t) for t in self.tables]
        self.grad_level_scale = np.zeros_like(self.level_scale)
        self.grad_bernoulli_logit = np.zeros_like(self.bernoulli_logit)

    def zero_grad(self):
        for g in self.grad_tables:
            g.fill(0.0)
        self.grad_level_scale.fill(0.0)
        self.grad_bernoulli_logit.fill(0.0)

    @property
    def dtype(self):
        return self.tables[0].dtype

    def copy(self, dtype=None) -> "HashGrid":
        dtype = dtype or self.dtype
        return HashGrid(self.config, [t.astype(dtype, copy=True) for t in self.tables],
                        self.level_scale.astype(dtype, copy=True),
                        self.bernoulli_logit.astype(dtype, copy=True))

    def index(self, level: int, corner) -> int:
        res = self.config.resolutions[level]
        return int(hash_index(np.asarray(corner), res, self.config.table_size_log2))

    def binarize(self, level: int | None = None):
        """Binary view ``sign(theta) * delta`` (sign(0) = +1) of one or all levels."""
        if level is None:
            return [self.binarize(i) for i in range(self.config.levels)]
        return np.where(self.tables[level] >= 0.0, self.level_scale[level], -self.level_scale[level])

    def lookup(self, x: np.ndarray) -> GridLookup:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if not np.all(np.isfinite(x)):
            raise ContractError("non-finite query position")
        cfg = self.config
        lo = np.asarray(cfg.bbox[0], float)
        hi = np.asarray(cfg.bbox[1], float)
        unit = np.clip((x - lo) / (hi - lo), 0.0, 1.0)
        corner_bits = np.array([[(j >> a) & 1 for a in range(3)] for j in range(8)], dtype=np.int64)
        idx, weights = [], []
        for res in cfg.resolutions:
            pos = unit * res
            cell = np.minimum(np.floor(pos).astype(np.int64), res - 1)
            frac = pos - cell
            corners = cell[:, None, :] + corner_bits[None, :, :]
            w = np.where(corner_bits[None, :, :] == 1, frac[:, None, :], 1.0 - frac[:, None, :]).prod(axis=2)
            idx.append(hash_index(corners, res, cfg.table_size_log2))
            weights.append(w.astype(self.dtype))
        return GridLookup(idx, weights)

    def query(self, x, binarize: bool = True, lookup: GridLookup | None = None) -> np.ndarray:
        """Spatial condition for one point (``(3,)``) or a batch (``(N, 3)``)."""
        single = np.ndim(x) == 1
        lk = lookup if lookup is not None else self.lookup(x)
        views = self.binarize() if binarize else self.tables
        F = self.config.feat_per_level
        out = np.empty((len(lk.idx[0]), self.config.out_dim), dtype=self.dtype)
        for lvl, (idx, w) in enumerate(zip(lk.idx, lk.weights)):
            _gather(idx, w, np.ascontiguousarray(views[lvl], dtype=self.dtype), out, lvl * F)
        return out[0] if single else out

    def query_backward(self, lookup: GridLookup, d_fc: np.ndarray, binarize: bool = True) -> None:
        d_fc = np.ascontiguousarray(np.atleast_2d(d_fc))
        cfg = self.config
        F = cfg.feat_per_level
        for lvl in range(cfg.levels):
            g_view = np.zeros((cfg.table_size, F))
            _scatter(lookup.idx[lvl], lookup.weights[lvl], d_fc, lvl * F, g_view)
            if binarize:
                theta = self.tables[lvl]
                sign = np.where(theta >= 0.0, 1.0, -1.0)
                self.grad_level_scale[lvl] += np.sum(g_view * sign)
                self.grad_tables[lvl] += np.where(np.abs(theta) <= 1.0, g_view, 0.0)
            else:
                self.grad_tables[lvl] += g_view

    def positive_counts(self) -> np.ndarray:
        return np.array([int(np.count_nonzero(t >= 0.0)) for t in self.tables])

    def bernoulli_p(self) -> np.ndarray:
        return np.clip(sigmoid(self.bernoulli_logit.astype(np.float64)), P_CLAMP, 1.0 - P_CLAMP)

    def rate(self) -> float:
        """Estimated bits of all sign bits under the per-level Bernoulli model."""
        p = self.bernoulli_p()
        pos = self.positive_counts()
        neg = self.tables[0].size - pos
        return float(np.sum(-pos * np.log2(p) - neg * np.log2(1.0 - p)))

    def rate_backward(self, scale: float = 1.0) -> None:
        raw = sigmoid(self.bernoulli_logit.astype(np.float64))
        p = np.clip(raw, P_CLAMP, 1.0 - P_CLAMP)
        pos = self.positive_counts()
        neg = self.tables[0].size - pos
        d_p = (-pos / p + neg / (1.0 - p)) / np.log(2.0)
        inside = (raw > P_CLAMP) & (raw < 1.0 - P_CLAMP)
        self.grad_bernoulli_logit += scale * np.where(inside, d_p * raw * (1.0 - raw), 0.0)

    def params(self, prefix: str = "grid") -> dict:
        out = {f"{prefix}.table{i}": t for i, t in enumerate(self.tables)}
        out[f"{prefix}.level_scale"] = self.level_scale
        out[f"{prefix}.bernoulli_logit"] = self.bernoulli_logit
        return out

    def grads(self, prefix: str = "grid") -> dict:
        out = {f"{prefix}.table{i}": t for i, t in enumerate(self.grad_tables)}
        out[f"{prefix}.level_scale"] = self.grad_level_scale
        out[f"{prefix}.bernoulli_logit"] = self.grad_bernoulli_logit
        return out
