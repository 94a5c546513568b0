"""Integer CDF tables for the range coder.

Gaussian tables are indexed by the symbol ``n = round((v - mu) / q)`` and only
depend on the ratio ``q / sigma``.  A table spans the smallest centered
symbol range holding mass >= 1 - 2^-15 (at most +-4096 symbols); every symbol
keeps a count of at least 1 and the counts total exactly 2^16.

The Gaussian builder is compiled and shared by the encoder and decoder, so
both sides derive identical tables from identical ``(sigma, q)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numba
import numpy as np
from scipy.special import ndtri

from .rangecoder import (TOTAL, dec_get, dec_state, enc_buffer, enc_finish, enc_put, enc_state)

TAIL_MASS = 2.0 ** -15
MAX_HALF_WIDTH = 4096
_Z_TAIL = float(ndtri(1.0 - TAIL_MASS / 2.0))
_SQRT1_2 = math.sqrt(0.5)


class TableError(ValueError):
    pass


@dataclass
class CdfTable:
    offset: int            # symbol held by the first entry
    cdf: np.ndarray        # (W + 1,) int64, cdf[0] = 0, cdf[-1] = 2^16

    @property
    def num_symbols(self) -> int:
        return len(self.cdf) - 1

    def counts(self) -> np.ndarray:
        return np.diff(self.cdf)

    def clamp(self, sym: int) -> int:
        return min(max(sym, self.offset), self.offset + self.num_symbols - 1)


@numba.njit(cache=True, nogil=True)
def _normalize(counts, width):
    """Make ``counts[:width]`` total 2^16 keeping every entry >= 1; False if impossible."""
    total = 0
    top = 0
    for j in range(width):
        total += counts[j]
        if counts[j] > counts[top]:
            top = j
    deficit = TOTAL - total
    if counts[top] + deficit >= 1:
        counts[top] += deficit
        return True
    # take the excess from the largest counts, in a fixed order
    need = -deficit
    order = np.argsort(-counts[:width], kind="mergesort")
    for j in order:
        if need == 0:
            break
        take = min(need, counts[j] - 1)
        counts[j] -= take
        need -= take
    return need == 0


@numba.njit(cache=True, nogil=True)
def _half_width(sigma, q):
    h = math.ceil(_Z_TAIL * sigma / q - 0.5)
    return int(min(max(h, 0), MAX_HALF_WIDTH))


@numba.njit(cache=True, nogil=True)
def _gaussian_cum(sigma, q, counts, cum):
    """Fill ``cum[:2h + 2]`` for one channel; returns ``h`` (-1 if degenerate)."""
    if not (sigma > 0.0 and q > 0.0 and math.isfinite(sigma) and math.isfinite(q)):
        return -1
    h = _half_width(sigma, q)
    r = q / sigma
    width = 2 * h + 1
    for j in range(width):
        t = -abs(j - h)
        pmf = 0.5 * (math.erfc(-(t + 0.5) * r * _SQRT1_2) - math.erfc(-(t - 0.5) * r * _SQRT1_2))
        counts[j] = max(1, int(math.floor(pmf * TOTAL + 0.5)))
    if not _normalize(counts, width):
        return -1
    cum[0] = 0
    for j in range(width):
        cum[j + 1] = cum[j] + counts[j]
    return h


def build_cdf_table(mu, sigma, q) -> CdfTable:
    """Table for one Gaussian-conditional channel (``mu`` only fixes the lattice)."""
    if not np.isfinite(mu):
        raise TableError("non-finite mean")
    counts = np.empty(2 * MAX_HALF_WIDTH + 1, np.int64)
    cum = np.empty(2 * MAX_HALF_WIDTH + 2, np.int64)
    h = _gaussian_cum(float(sigma), float(q), counts, cum)
    if h < 0:
        raise TableError("degenerate sigma/q for table construction")
    return CdfTable(-h, cum[:2 * h + 2].copy())


@numba.njit(cache=True, nogil=True)
def _encode_gaussian(sigma, q, sym, out, clamped):
    counts = np.empty(2 * MAX_HALF_WIDTH + 1, np.int64)
    cum = np.empty(2 * MAX_HALF_WIDTH + 2, np.int64)
    st = enc_state()
    n_clamped = 0
    for i in range(sym.size):
        h = _gaussian_cum(sigma[i], q[i], counts, cum)
        if h < 0:
            return out[:0], -1 - i
        s = sym[i]
        if s < -h or s > h:
            s = -h if s < -h else h
            n_clamped += 1
        clamped[i] = s
        c = s + h
        enc_put(st, out, cum[c], cum[c + 1] - cum[c])
    return enc_finish(st, out), n_clamped


@numba.njit(cache=True, nogil=True)
def _decode_gaussian(data, sigma, q, sym):
    counts = np.empty(2 * MAX_HALF_WIDTH + 1, np.int64)
    cum = np.empty(2 * MAX_HALF_WIDTH + 2, np.int64)
    st = dec_state(data)
    for i in range(sym.size):
        h = _gaussian_cum(sigma[i], q[i], counts, cum)
        if h < 0:
            return i, 0
        sym[i] = dec_get(st, data, cum, 2 * h + 1) - h
    return -1, st[2] - data.size


def encode_gaussian(sigma, q, symbols) -> tuple[bytes, np.ndarray, int]:
    """Range-code Gaussian-conditional symbols; returns ``(bytes, coded symbols, clamp count)``.

    Symbols beyond a table's range are clamped to its extreme symbol; the
    returned array holds what the decoder will see.
    """
    sigma = np.ascontiguousarray(sigma, np.float64).ravel()
    q = np.ascontiguousarray(q, np.float64).ravel()
    sym = np.ascontiguousarray(symbols, np.int64).ravel()
    coded = np.empty_like(sym)
    data, n = _encode_gaussian(sigma, q, sym, enc_buffer(sym.size), coded)
    if n < 0:
        raise TableError(f"degenerate sigma/q at element {-1 - n}")
    return bytes(data), coded, int(n)


def decode_gaussian(data: bytes, sigma, q) -> tuple[np.ndarray, int]:
    """Inverse of :func:`encode_gaussian`; also returns how far the decoder read past the end."""
    sigma = np.ascontiguousarray(sigma, np.float64).ravel()
    q = np.ascontiguousarray(q, np.float64).ravel()
    sym = np.empty(sigma.size, np.int64)
    bad, over = _decode_gaussian(np.frombuffer(data, np.uint8), sigma, q, sym)
    if bad >= 0:
        raise TableError(f"degenerate sigma/q at element {bad}")
    return sym, int(over)


def factorized_table(density, channel: int) -> CdfTable:
    """Table over the hyperprior lattice ``z = s * n`` of one density channel."""
    s = float(density.step[channel])
    if not (np.isfinite(s) and s > 0):
        raise TableError("degenerate hyperprior step")
    n = np.arange(-MAX_HALF_WIDTH, MAX_HALF_WIDTH + 1, dtype=np.float64)
    edges = np.concatenate([(n - 0.5) * s, [(n[-1] + 0.5) * s]])
    x = np.zeros((density.channels, edges.size))
    x[channel] = edges
    c = density.cdf(x)[channel]
    pmf = np.maximum(np.diff(c), 0.0)
    # centered mass for half width h: c(s(h+.5)) - c(-s(h+.5))
    center = MAX_HALF_WIDTH
    hs = np.arange(MAX_HALF_WIDTH + 1)
    mass = c[center + hs + 1] - c[center - hs]
    ok = np.nonzero(mass >= 1.0 - TAIL_MASS)[0]
    h = int(ok[0]) if ok.size else MAX_HALF_WIDTH
    counts = np.maximum(1, np.floor(pmf[center - h:center + h + 1] * TOTAL + 0.5)).astype(np.int64)
    if not _normalize(counts, counts.size):
        raise TableError("cannot normalize hyperprior table")
    return CdfTable(-h, np.concatenate([[0], np.cumsum(counts)]))


def bernoulli_table(p_one: float) -> CdfTable:
    """Two-symbol table, symbol 1 with probability ``p_one``."""
    c1 = int(min(max(np.floor(p_one * TOTAL + 0.5), 1), TOTAL - 1))
    return CdfTable(0, np.array([0, TOTAL - c1, TOTAL], np.int64))
