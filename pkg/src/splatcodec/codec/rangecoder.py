"""Carry-propagating range coder with 16-bit frequency tables.

The coder keeps a 56-bit range inside a 64-bit low word (one carry bit plus a
pending-0xFF counter, as in the LZMA coder) and renormalizes a byte at a time
whenever the range drops below 2^48.  Frequency totals are always 2^16.

``RangeEncoder``/``RangeDecoder`` are the plain reference implementation.
The ``*_symbols`` functions run the same algorithm compiled, over whole
symbol arrays; both produce identical bytes.
"""

from __future__ import annotations

from bisect import bisect_right

import numba
import numpy as np

PRECISION = 16
TOTAL = 1 << PRECISION
RANGE_BITS = 56
TOP = 1 << (RANGE_BITS - 8)
MASK = (1 << RANGE_BITS) - 1
SHIFT = RANGE_BITS - 8
FLUSH_BYTES = RANGE_BITS // 8 + 1
_LOW_LIMIT = 0xFF << SHIFT


class RangeEncoder:
    def __init__(self):
        self.low = 0
        self.range = MASK
        self.cache = 0
        self.pending = 1
        self.out = bytearray()

    def _shift_low(self):
        low = self.low
        if low < _LOW_LIMIT or low > MASK:
            carry = low >> RANGE_BITS
            byte = self.cache
            out = self.out
            while self.pending:
                out.append((byte + carry) & 0xFF)
                byte = 0xFF
                self.pending -= 1
            self.cache = (low >> SHIFT) & 0xFF
        self.pending += 1
        self.low = (low << 8) & MASK

    def encode(self, start: int, size: int) -> None:
        r = self.range >> PRECISION
        self.low += r * start
        self.range = r * size
        while self.range < TOP:
            self.range <<= 8
            self._shift_low()

    def encode_many(self, starts, sizes) -> None:
        for start, size in zip(starts, sizes):
            self.encode(int(start), int(size))

    def finish(self) -> bytes:
        for _ in range(FLUSH_BYTES):
            self._shift_low()
        return bytes(self.out)


class RangeDecoder:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0
        self.range = MASK
        self.code = 0
        for _ in range(FLUSH_BYTES):
            self.code = ((self.code << 8) | self._byte()) & MASK

    def _byte(self) -> int:
        if self.pos < len(self.data):
            b = self.data[self.pos]
            self.pos += 1
            return b
        self.pos += 1
        return 0

    @property
    def overrun(self) -> bool:
        """True once the decoder has read past the end of its input."""
        return self.pos > len(self.data)

    def decode(self, cum) -> int:
        """Decode one symbol against cumulative counts ``cum`` (``cum[-1] == TOTAL``).

        Returns the column index ``i`` with ``cum[i] <= target < cum[i + 1]``.
        """
        r = self.range >> PRECISION
        target = min(self.code // r, TOTAL - 1)
        i = bisect_right(cum, target) - 1
        start = cum[i]
        self.code -= r * start
        self.range = r * (cum[i + 1] - start)
        while self.range < TOP:
            self.code = ((self.code << 8) | self._byte()) & MASK
            self.range <<= 8
        return i


# -- compiled coder; state lives in small int64 arrays ------------------------
# encoder state: [low, range, cache, pending, out_pos]; decoder: [code, range, pos]

@numba.njit(cache=True, nogil=True)
def enc_state():
    return np.array([0, MASK, 0, 1, 0], dtype=np.int64)


@numba.njit(cache=True, nogil=True)
def _shift_low(st, out):
    low = st[0]
    if low < _LOW_LIMIT or low > MASK:
        carry = low >> RANGE_BITS
        byte = st[2]
        while st[3] > 0:
            out[st[4]] = (byte + carry) & 0xFF
            st[4] += 1
            byte = 0xFF
            st[3] -= 1
        st[2] = (low >> SHIFT) & 0xFF
    st[3] += 1
    st[0] = (low << 8) & MASK


@numba.njit(cache=True, nogil=True)
def enc_put(st, out, start, size):
    r = st[1] >> PRECISION
    st[0] += r * start
    st[1] = r * size
    while st[1] < TOP:
        st[1] <<= 8
        _shift_low(st, out)


@numba.njit(cache=True, nogil=True)
def enc_finish(st, out):
    for _ in range(FLUSH_BYTES):
        _shift_low(st, out)
    return out[:st[4]]


def enc_buffer(num_symbols: int) -> np.ndarray:
    # every symbol costs at most 16 bits; one extra byte per symbol covers carries
    return np.empty(3 * num_symbols + 2 * FLUSH_BYTES + 8, np.uint8)


@numba.njit(cache=True, nogil=True)
def _next_byte(st, data):
    pos = st[2]
    st[2] = pos + 1
    if pos < data.size:
        return np.int64(data[pos])
    return np.int64(0)


@numba.njit(cache=True, nogil=True)
def dec_state(data):
    st = np.array([0, MASK, 0], dtype=np.int64)
    for _ in range(FLUSH_BYTES):
        st[0] = ((st[0] << 8) | _next_byte(st, data)) & MASK
    return st


@numba.njit(cache=True, nogil=True)
def dec_get(st, data, cum, width):
    """Decode one column against ``cum[:width + 1]``."""
    r = st[1] >> PRECISION
    target = min(st[0] // r, TOTAL - 1)
    lo, hi = 0, width          # invariant: cum[lo] <= target < cum[hi]
    while hi - lo > 1:
        mid = (lo + hi) >> 1
        if cum[mid] <= target:
            lo = mid
        else:
            hi = mid
    start = cum[lo]
    st[0] -= r * start
    st[1] = r * (cum[lo + 1] - start)
    while st[1] < TOP:
        st[0] = ((st[0] << 8) | _next_byte(st, data)) & MASK
        st[1] <<= 8
    return lo


@numba.njit(cache=True, nogil=True)
def _encode_table_symbols(cums, widths, table_idx, cols, out):
    st = enc_state()
    for i in range(cols.size):
        row = cums[table_idx[i]]
        c = cols[i]
        enc_put(st, out, row[c], row[c + 1] - row[c])
    return enc_finish(st, out)


@numba.njit(cache=True, nogil=True)
def _decode_table_symbols(data, cums, widths, table_idx, cols):
    st = dec_state(data)
    for i in range(cols.size):
        t = table_idx[i]
        cols[i] = dec_get(st, data, cums[t], widths[t])
    return st[2] - data.size


def pad_tables(tables) -> tuple[np.ndarray, np.ndarray]:
    """Stack cumulative tables into a rectangle; padding repeats the total."""
    width = np.array([len(t.cdf) - 1 for t in tables], np.int64)
    cums = np.full((len(tables), int(width.max(initial=1)) + 1), TOTAL, np.int64)
    for i, t in enumerate(tables):
        cums[i, :len(t.cdf)] = t.cdf
    return cums, width


def encode_symbols(tables, table_idx, symbols) -> bytes:
    """Range-code ``symbols[i]`` under ``tables[table_idx[i]]`` (symbols must be in range)."""
    table_idx = np.ascontiguousarray(table_idx, np.int64)
    offsets = np.array([t.offset for t in tables], np.int64)
    cums, widths = pad_tables(tables)
    cols = np.asarray(symbols, np.int64) - offsets[table_idx]
    if np.any(cols < 0) or np.any(cols >= widths[table_idx]):
        raise ValueError("symbol outside its table")
    return bytes(_encode_table_symbols(cums, widths, table_idx, np.ascontiguousarray(cols),
                                       enc_buffer(len(cols))))


def decode_symbols(data: bytes, tables, table_idx) -> tuple[np.ndarray, int]:
    """Inverse of :func:`encode_symbols`; also returns how far the decoder read past the end."""
    table_idx = np.ascontiguousarray(table_idx, np.int64)
    offsets = np.array([t.offset for t in tables], np.int64)
    cums, widths = pad_tables(tables)
    cols = np.empty(len(table_idx), np.int64)
    over = _decode_table_symbols(np.frombuffer(data, np.uint8), cums, widths, table_idx, cols)
    return cols + offsets[table_idx], int(over)
