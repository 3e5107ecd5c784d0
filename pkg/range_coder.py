"""
Carry-less 64-bit range coder (Subbotin style) over integer CDF tables.

A CDF table is a non-decreasing integer sequence cdf[0] = 0 ... cdf[K] = total,
total <= 2**16; symbol s occupies [cdf[s], cdf[s+1]). Zero-width symbols are
not codable.

Stream layout: renormalization bytes followed by a 4-byte flush. The decoder
reads 8 bytes up front and so runs exactly 4 bytes past a valid stream; any
further read means the stream was truncated.
"""

import logging
from bisect import bisect_right
from typing import List, Sequence

import numpy as np

from constants import CDF_PRECISION
from errors import CodingError, DecodeError

logger = logging.getLogger(__name__)

MASK = (1 << 64) - 1
TOP = 1 << 56
BOT = 1 << 48
MAX_TOTAL = 1 << CDF_PRECISION
FLUSH_BYTES = 4
PHANTOM_BYTES = 4


def pmf_to_quantized_cdf(pmf: Sequence[float], precision: int = CDF_PRECISION) -> np.ndarray:
    """
    Quantize a probability vector to an integer CDF with total 2**precision.
    Every symbol keeps a frequency of at least 1.
    """
    pmf = np.asarray(pmf, dtype=np.float64)
    total = 1 << precision
    if pmf.ndim != 1 or len(pmf) == 0:
        raise CodingError("pmf must be a non-empty vector")
    if len(pmf) > total:
        raise CodingError(f"alphabet of {len(pmf)} symbols exceeds {total} frequency slots")
    if not np.all(np.isfinite(pmf)) or np.any(pmf < 0):
        raise CodingError("pmf must be finite and non-negative")
    mass = pmf.sum()
    if mass <= 0:
        raise CodingError("pmf has no mass")
    freq = np.maximum(np.floor(pmf / mass * total).astype(np.int64), 1)
    diff = total - int(freq.sum())
    if diff > 0:
        freq[int(np.argmax(pmf))] += diff
    else:
        # take the surplus from the largest bins, never below 1
        for i in np.argsort(-freq, kind="stable"):
            if diff == 0:
                break
            take = min(-diff, int(freq[i]) - 1)
            freq[i] -= take
            diff += take
    cdf = np.zeros(len(freq) + 1, dtype=np.int64)
    np.cumsum(freq, out=cdf[1:])
    return cdf


def validate_cdf(cdf: Sequence[int]) -> List[int]:
    """Return the table as a list of ints, raising CodingError if malformed."""
    table = [int(c) for c in cdf]
    if len(table) < 2 or table[0] != 0:
        raise CodingError("CDF table must start at 0 and hold at least one symbol")
    if table[-1] > MAX_TOTAL or table[-1] < 1:
        raise CodingError(f"CDF total {table[-1]} outside (0, {MAX_TOTAL}]")
    if any(b < a for a, b in zip(table, table[1:])):
        raise CodingError("CDF table must be non-decreasing")
    return table


class RangeEncoder:
    """Incremental encoder; call encode() per symbol then finish()."""

    def __init__(self):
        self.low = 0
        self.range = MASK
        self.output = bytearray()
        self._finished = False

    def encode(self, symbol: int, cdf: Sequence[int]) -> None:
        if not 0 <= symbol < len(cdf) - 1:
            raise CodingError(f"symbol {symbol} outside table support [0, {len(cdf) - 2}]")
        start, end, total = cdf[symbol], cdf[symbol + 1], cdf[-1]
        if end <= start:
            raise CodingError(f"symbol {symbol} has zero frequency")
        r = self.range // total
        self.low += start * r
        self.range = (end - start) * r
        self._normalize()

    def _normalize(self) -> None:
        while True:
            if (self.low ^ (self.low + self.range)) >= TOP:
                if self.range >= BOT:
                    break
                self.range = (-self.low) & (BOT - 1)
            self.output.append(self.low >> 56)
            self.low = (self.low << 8) & MASK
            self.range = (self.range << 8) & MASK

    def finish(self) -> bytes:
        if not self._finished:
            # any value in [low, low + range) identifies the stream; round low up
            # so that its low 32 bits are zero and need not be written
            value = -(-self.low >> 32) << 32
            for i in range(FLUSH_BYTES):
                self.output.append((value >> (56 - 8 * i)) & 0xFF)
            self._finished = True
        return bytes(self.output)


class RangeDecoder:
    def __init__(self, stream: bytes):
        self.stream = bytes(stream)
        self.pos = 0
        self.low = 0
        self.range = MASK
        self.code = 0
        for _ in range(8):
            self.code = (self.code << 8) | self._next_byte()

    def _next_byte(self) -> int:
        pos = self.pos
        self.pos += 1
        if pos < len(self.stream):
            return self.stream[pos]
        if pos >= len(self.stream) + PHANTOM_BYTES:
            raise DecodeError("truncated stream")
        return 0

    def decode(self, cdf: Sequence[int]) -> int:
        total = cdf[-1]
        r = self.range // total
        value = (self.code - self.low) // r
        if value < 0 or value >= total:
            raise DecodeError("corrupt stream: code value outside the table")
        symbol = bisect_right(cdf, value) - 1
        self.low += cdf[symbol] * r
        self.range = (cdf[symbol + 1] - cdf[symbol]) * r
        self._normalize()
        return symbol

    def _normalize(self) -> None:
        while True:
            if (self.low ^ (self.low + self.range)) >= TOP:
                if self.range >= BOT:
                    break
                self.range = (-self.low) & (BOT - 1)
            self.code = ((self.code << 8) & MASK) | self._next_byte()
            self.low = (self.low << 8) & MASK
            self.range = (self.range << 8) & MASK


def range_encode(symbols: Sequence[int], cdfs: Sequence[Sequence[int]]) -> bytes:
    """
    Encode symbols[i] with table cdfs[i].

    Raises:
        CodingError: symbol outside its table's support, or length mismatch
    """
    if len(symbols) != len(cdfs):
        raise CodingError(f"{len(symbols)} symbols but {len(cdfs)} tables")
    encoder = RangeEncoder()
    for symbol, cdf in zip(symbols, cdfs):
        encoder.encode(int(symbol), cdf)
    return encoder.finish()


def range_decode(stream: bytes, cdfs: Sequence[Sequence[int]], count: int) -> List[int]:
    """
    Inverse of range_encode.

    Raises:
        DecodeError: truncated or corrupt stream
    """
    if count != len(cdfs):
        raise DecodeError(f"asked for {count} symbols but got {len(cdfs)} tables")
    decoder = RangeDecoder(stream)
    return [decoder.decode(cdf) for cdf in cdfs]
