"""Byte-oriented renormalizing range coder plus quantized CDF tables.

The coder is the classic 32-bit low/range formulation with 16-bit symbol
probabilities: frequencies are integer counts summing to 2^16, every symbol
keeps at least one count, and residuals outside a table's support go
through an escape symbol followed by a raw 16-bit value. Each stream ends
with a two-byte sentinel so truncation or corruption surfaces as a decode
error instead of silently wrong symbols.
"""

from __future__ import annotations

import math
from bisect import bisect_right
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

PROB_BITS = 16
PROB_TOTAL = 1 << PROB_BITS
_MASK = 0xFFFFFFFF
_TOP = 1 << 24
_BOTTOM = 1 << 16

SCALES_MIN = 0.11
SCALES_MAX = 256.0
SCALES_LEVELS = 64

_SENTINEL = (0xA5, 0x5A)


def scale_table() -> np.ndarray:
    """64 coding scales, log-spaced over [0.11, 256]."""
    return np.exp(np.linspace(math.log(SCALES_MIN), math.log(SCALES_MAX),
                              SCALES_LEVELS))


_SCALE_TABLE = scale_table()


def scale_to_index(sigma: np.ndarray) -> np.ndarray:
    """Map scales to the nearest table entry not below them (top entry caps)."""
    sigma = np.asarray(sigma, dtype=np.float64)
    idx = np.searchsorted(_SCALE_TABLE, sigma, side="left")
    return np.minimum(idx, SCALES_LEVELS - 1).astype(np.int64)


@dataclass
class CdfTable:
    """Quantized CDF over integer symbols [offset, offset + n - 1] plus escape.

    ``cdf`` has n + 2 entries: cdf[0] = 0, cdf[-1] = 65536, strictly
    increasing; the final symbol slot is the escape.
    """

    cdf: list[int]
    offset: int

    @property
    def num_regular(self) -> int:
        return len(self.cdf) - 2

    @property
    def escape_index(self) -> int:
        return len(self.cdf) - 2

    def symbol_index(self, value: int) -> int:
        idx = value - self.offset
        if 0 <= idx < self.num_regular:
            return idx
        return self.escape_index


def quantize_pmf(pmf: np.ndarray, escape_mass: float) -> list[int]:
    """Turn probabilities into integer counts summing to 2^16, each >= 1."""
    probs = np.concatenate([np.asarray(pmf, dtype=np.float64), [escape_mass]])
    probs = np.clip(probs, 0.0, None)
    n = probs.shape[0]
    if n >= PROB_TOTAL:
        raise ValueError("alphabet too large for 16-bit probabilities")
    budget = PROB_TOTAL - n
    total = probs.sum()
    if total <= 0:
        counts = np.ones(n, dtype=np.int64)
        counts[0] += budget
    else:
        counts = np.floor(probs / total * budget).astype(np.int64) + 1
        remainder = PROB_TOTAL - int(counts.sum())
        if remainder > 0:
            # hand leftover counts to the most probable symbols, deterministically
            order = np.lexsort((np.arange(n), -probs))
            for i in range(remainder):
                counts[order[i % n]] += 1
    cdf = [0]
    for c in counts:
        cdf.append(cdf[-1] + int(c))
    assert cdf[-1] == PROB_TOTAL
    return cdf


def _std_normal_cdf(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.vectorize(math.erf)(x / math.sqrt(2.0)))


@lru_cache(maxsize=SCALES_LEVELS)
def build_cdf(scale_index: int) -> CdfTable:
    """Zero-mean discretized-Gaussian table for one scale-table entry."""
    if not 0 <= scale_index < SCALES_LEVELS:
        raise ValueError(f"scale index {scale_index} out of range")
    scale = float(_SCALE_TABLE[scale_index])
    tail = int(math.ceil(6.0 * scale)) + 1
    symbols = np.arange(-tail, tail + 1, dtype=np.float64)
    upper = _std_normal_cdf((symbols + 0.5) / scale)
    lower = _std_normal_cdf((symbols - 0.5) / scale)
    pmf = upper - lower
    escape_mass = max(0.0, 1.0 - float(pmf.sum()))
    return CdfTable(cdf=quantize_pmf(pmf, escape_mass), offset=-tail)


# 256 byte symbols with 255 counts each plus a 256-count escape slot the
# coder never emits; the slot keeps the table shape uniform with the rest.
_UNIFORM_BYTE = CdfTable(
    cdf=[i * 255 for i in range(257)] + [PROB_TOTAL],
    offset=0,
)


class RangeEncoder:
    def __init__(self):
        self.low = 0
        self.range = _MASK
        self.out = bytearray()

    def _normalize(self):
        low, rng = self.low, self.range
        while (low ^ (low + rng)) < _TOP or rng < _BOTTOM:
            if (low ^ (low + rng)) >= _TOP:
                rng = (_MASK + 1 - low) & (_BOTTOM - 1)
            self.out.append((low >> 24) & 0xFF)
            low = (low << 8) & _MASK
            rng = (rng << 8) & _MASK
        self.low, self.range = low, rng

    def encode_index(self, table: CdfTable, index: int):
        cum = table.cdf[index]
        freq = table.cdf[index + 1] - cum
        r = self.range >> PROB_BITS
        self.low = (self.low + cum * r) & _MASK
        self.range = freq * r
        self._normalize()

    def encode_symbol(self, table: CdfTable, value: int):
        index = table.symbol_index(value)
        self.encode_index(table, index)
        if index == table.escape_index:
            raw = value + 32768
            if not 0 <= raw <= 0xFFFF:
                raise ValueError(f"symbol {value} outside the 16-bit escape range")
            self.encode_index(_UNIFORM_BYTE, raw >> 8)
            self.encode_index(_UNIFORM_BYTE, raw & 0xFF)

    def finish(self) -> bytes:
        for b in _SENTINEL:
            self.encode_index(_UNIFORM_BYTE, b)
        low = self.low
        for _ in range(4):
            self.out.append((low >> 24) & 0xFF)
            low = (low << 8) & _MASK
        return bytes(self.out)


class StreamCorrupt(ValueError):
    """Raised when a payload fails to decode cleanly."""


class RangeDecoder:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0
        self.low = 0
        self.range = _MASK
        self.code = 0
        for _ in range(4):
            self.code = ((self.code << 8) | self._next_byte()) & _MASK

    def _next_byte(self) -> int:
        if self.pos >= len(self.data):
            raise StreamCorrupt("payload truncated")
        b = self.data[self.pos]
        self.pos += 1
        return b

    def _normalize(self):
        low, rng, code = self.low, self.range, self.code
        while (low ^ (low + rng)) < _TOP or rng < _BOTTOM:
            if (low ^ (low + rng)) >= _TOP:
                rng = (_MASK + 1 - low) & (_BOTTOM - 1)
            code = ((code << 8) | self._next_byte()) & _MASK
            low = (low << 8) & _MASK
            rng = (rng << 8) & _MASK
        self.low, self.range, self.code = low, rng, code

    def decode_index(self, table: CdfTable) -> int:
        r = self.range >> PROB_BITS
        target = ((self.code - self.low) & _MASK) // r
        if target >= PROB_TOTAL:
            target = PROB_TOTAL - 1
        index = bisect_right(table.cdf, target) - 1
        if index < 0 or index >= len(table.cdf) - 1:
            raise StreamCorrupt("decoded symbol out of table range")
        cum = table.cdf[index]
        freq = table.cdf[index + 1] - cum
        self.low = (self.low + cum * r) & _MASK
        self.range = freq * r
        self._normalize()
        return index

    def decode_symbol(self, table: CdfTable) -> int:
        index = self.decode_index(table)
        if index == table.escape_index:
            hi = self.decode_index(_UNIFORM_BYTE)
            lo = self.decode_index(_UNIFORM_BYTE)
            if hi > 255 or lo > 255:
                raise StreamCorrupt("escape payload out of range")
            return ((hi << 8) | lo) - 32768
        return index + table.offset

    def check_sentinel(self):
        for expect in _SENTINEL:
            got = self.decode_index(_UNIFORM_BYTE)
            if got != expect:
                raise StreamCorrupt("stream sentinel mismatch")


def rc_encode(symbols, tables) -> bytes:
    """Range-encode a symbol sequence; tables is one CdfTable per symbol."""
    enc = RangeEncoder()
    for value, table in zip(symbols, tables, strict=True):
        enc.encode_symbol(table, int(value))
    return enc.finish()


def rc_decode(data: bytes, tables) -> list[int]:
    """Inverse of :func:`rc_encode`; raises StreamCorrupt on bad payloads."""
    dec = RangeDecoder(data)
    symbols = [dec.decode_symbol(table) for table in tables]
    dec.check_sentinel()
    return symbols


def coded_bits(symbols, tables) -> float:
    """Ideal code length of the sequence under the quantized tables, in bits."""
    bits = 0.0
    for value, table in zip(symbols, tables, strict=True):
        index = table.symbol_index(int(value))
        freq = table.cdf[index + 1] - table.cdf[index]
        bits += PROB_BITS - math.log2(freq)
        if index == table.escape_index:
            bits += 16.0
    return bits
