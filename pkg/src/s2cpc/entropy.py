"""Carry-less range coder plus the fixed-point probability plumbing around it.

The coder is the classic 32-bit low/range scheme that renormalizes a byte at
a time and, when the range underflows 2**16, truncates it to the next 2**24
boundary instead of tracking carries. All frequencies live on a 16-bit scale
(total = 65536), so ``range >> 16`` never loses the top frequency bit.
"""

from __future__ import annotations

import struct

import numpy as np

from .errors import DistributionError, RangeError, ShapeError, StreamCorruptError, SymbolError

TOP = 1 << 24
BOT = 1 << 16
MASK = (1 << 32) - 1
TOTAL = 1 << 16


class RangeEncoder:
    def __init__(self):
        self._low = 0
        self._range = MASK
        self._out = bytearray()

    def _normalize(self):
        low, rng, out = self._low, self._range, self._out
        while True:
            if (low ^ ((low + rng) & MASK)) < TOP:
                pass
            elif rng < BOT:
                # Interval straddles a 2**24 boundary while too small to
                # emit; clamp it to end on the boundary so the byte settles.
                rng = (-low) & (BOT - 1)
            else:
                break
            out.append((low >> 24) & 0xFF)
            low = (low << 8) & MASK
            rng = (rng << 8) & MASK
        self._low, self._range = low, rng

    def _encode(self, start: int, freq: int):
        r = self._range >> 16
        self._low = (self._low + r * start) & MASK
        self._range = r * freq
        self._normalize()

    def encode_bit(self, p16: int, bit: int):
        """Code one binary symbol; ``p16 / 65536`` is the probability of 1."""
        if not 1 <= p16 <= 65535:
            raise RangeError(f"p16 must be in [1, 65535], got {p16}")
        if bit:
            self._encode(TOTAL - p16, p16)
        else:
            self._encode(0, TOTAL - p16)

    def encode_bits(self, p16s, bits):
        p16s = np.asarray(p16s, dtype=np.int64).reshape(-1)
        bits = np.asarray(bits).reshape(-1)
        if p16s.shape != bits.shape:
            raise ShapeError("p16s and bits must have equal length")
        if p16s.size and (p16s.min() < 1 or p16s.max() > 65535):
            raise RangeError("p16 values must be in [1, 65535]")
        for p16, bit in zip(p16s.tolist(), bits.tolist()):
            if bit:
                self._encode(TOTAL - p16, p16)
            else:
                self._encode(0, TOTAL - p16)

    def encode_symbol(self, freqs, symbol: int):
        """Code a symbol under integer frequencies summing to 65536."""
        if not 0 <= symbol < len(freqs):
            raise SymbolError(f"symbol {symbol} outside alphabet of {len(freqs)}")
        freq = int(freqs[symbol])
        if freq <= 0:
            # A zero-width interval would collapse the coder range to zero.
            raise DistributionError(f"symbol {symbol} has zero frequency")
        start = int(sum(freqs[:symbol]))
        self._encode(start, freq)

    def encode_symbols(self, freq_table, symbols):
        freq_table = np.asarray(freq_table, dtype=np.int64)
        symbols = np.asarray(symbols, dtype=np.int64).reshape(-1)
        if freq_table.ndim != 2 or len(freq_table) != len(symbols):
            raise ShapeError("freq_table must be (N, K) aligned with symbols")
        if symbols.size and (symbols.min() < 0 or symbols.max() >= freq_table.shape[1]):
            raise SymbolError("symbol outside alphabet")
        starts = np.cumsum(freq_table, axis=1) - freq_table
        take = np.arange(len(symbols))
        picked = freq_table[take, symbols]
        if picked.size and picked.min() <= 0:
            raise DistributionError("coded symbol has zero frequency")
        for s, f in zip(starts[take, symbols].tolist(), picked.tolist()):
            self._encode(s, f)

    def tell(self) -> int:
        """Bytes emitted so far, excluding the final flush."""
        return len(self._out)

    def finish(self) -> bytes:
        low = self._low
        for _ in range(4):
            self._out.append((low >> 24) & 0xFF)
            low = (low << 8) & MASK
        return bytes(self._out)


class RangeDecoder:
    def __init__(self, data: bytes):
        self._data = data
        self._pos = 0
        self._low = 0
        self._range = MASK
        self._code = 0
        for _ in range(4):
            self._code = ((self._code << 8) | self._next_byte()) & MASK

    def _next_byte(self) -> int:
        if self._pos >= len(self._data):
            raise StreamCorruptError("entropy stream exhausted")
        b = self._data[self._pos]
        self._pos += 1
        return b

    def _peek(self) -> int:
        r = self._range >> 16
        v = ((self._code - self._low) & MASK) // r
        return min(v, TOTAL - 1)

    def _update(self, start: int, freq: int):
        r = self._range >> 16
        low, rng = (self._low + r * start) & MASK, r * freq
        code = self._code
        while True:
            if (low ^ ((low + rng) & MASK)) < TOP:
                pass
            elif rng < BOT:
                rng = (-low) & (BOT - 1)
            else:
                break
            code = ((code << 8) | self._next_byte()) & MASK
            low = (low << 8) & MASK
            rng = (rng << 8) & MASK
        self._low, self._range, self._code = low, rng, code

    def decode_bit(self, p16: int) -> int:
        if not 1 <= p16 <= 65535:
            raise RangeError(f"p16 must be in [1, 65535], got {p16}")
        if self._peek() < TOTAL - p16:
            self._update(0, TOTAL - p16)
            return 0
        self._update(TOTAL - p16, p16)
        return 1

    def decode_bits(self, p16s) -> np.ndarray:
        p16s = np.asarray(p16s, dtype=np.int64).reshape(-1)
        if p16s.size and (p16s.min() < 1 or p16s.max() > 65535):
            raise RangeError("p16 values must be in [1, 65535]")
        out = np.zeros(len(p16s), dtype=np.int64)
        for i, p16 in enumerate(p16s.tolist()):
            out[i] = self.decode_bit(p16)
        return out

    def decode_symbol(self, freqs) -> int:
        v = self._peek()
        start = 0
        for symbol, f in enumerate(freqs):
            f = int(f)
            if v < start + f:
                self._update(start, f)
                return symbol
            start += f
        raise StreamCorruptError("decoded value outside cumulative frequency table")

    def decode_symbols(self, freq_table) -> np.ndarray:
        freq_table = np.asarray(freq_table, dtype=np.int64)
        if freq_table.ndim != 2:
            raise ShapeError("freq_table must be (N, K)")
        out = np.zeros(len(freq_table), dtype=np.int64)
        for i, row in enumerate(freq_table.tolist()):
            out[i] = self.decode_symbol(row)
        return out


def quantize_prob(p) -> np.ndarray:
    """Round probabilities of a set bit onto the 16-bit scale, never 0 or 65536."""
    p = np.asarray(p, dtype=np.float64)
    if not np.all(np.isfinite(p)):
        raise DistributionError("probability is not finite")
    if p.size and (p.min() < 0.0 or p.max() > 1.0):
        raise DistributionError("probability outside [0, 1]")
    return np.clip(np.rint(p * TOTAL), 1, TOTAL - 1).astype(np.int64)


def quantize_cdf(probs) -> np.ndarray:
    """Turn (..., K) probability rows into integer frequencies summing to 65536.

    Every symbol keeps frequency >= 1 so the coder can always represent it;
    the rounding deficit lands on the most probable symbol.
    """
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim < 1 or probs.shape[-1] < 2:
        raise ShapeError("need at least two symbols per row")
    if not np.all(np.isfinite(probs)) or np.any(probs < 0):
        raise DistributionError("probabilities must be finite and nonnegative")
    total = probs.sum(axis=-1, keepdims=True)
    if np.any(total <= 0):
        raise DistributionError("probability rows must have positive mass")
    # Reserve one count per symbol, distribute the rest by flooring.
    budget = TOTAL - probs.shape[-1]
    freqs = np.floor(probs / total * budget).astype(np.int64) + 1
    deficit = TOTAL - freqs.sum(axis=-1)
    top = np.argmax(freqs, axis=-1)
    np.put_along_axis(freqs, np.expand_dims(top, -1),
                      np.take_along_axis(freqs, np.expand_dims(top, -1), -1) + np.expand_dims(deficit, -1), -1)
    return freqs


def write_section(payload: bytes, symbol_count: int) -> bytes:
    """Frame a coded payload with its byte length and symbol count."""
    return struct.pack("<IQ", len(payload), symbol_count) + payload


def read_section(buf: bytes, offset: int) -> tuple[bytes, int, int]:
    if offset + 12 > len(buf):
        raise StreamCorruptError("section header truncated")
    length, count = struct.unpack_from("<IQ", buf, offset)
    offset += 12
    if offset + length > len(buf):
        raise StreamCorruptError("section payload truncated")
    return buf[offset:offset + length], count, offset + length


def pack_coords(coords, depth: int) -> bytes:
    """Bit-pack raw coordinates, 3 * depth bits per point, x bits first."""
    coords = np.asarray(coords, dtype=np.int64)
    if coords.ndim != 2 or coords.shape[1] != 3:
        raise ShapeError(f"expected (N, 3) coordinates, got {coords.shape}")
    if len(coords) == 0:
        return b""
    shifts = np.arange(depth - 1, -1, -1)
    bits = ((coords[:, :, None] >> shifts) & 1).astype(np.uint8)
    return np.packbits(bits.reshape(-1)).tobytes()


def unpack_coords(data: bytes, count: int, depth: int) -> np.ndarray:
    nbits = count * 3 * depth
    if len(data) * 8 < nbits:
        raise StreamCorruptError("raw point section too short")
    if count == 0:
        return np.zeros((0, 3), dtype=np.int64)
    bits = np.unpackbits(np.frombuffer(data, dtype=np.uint8), count=nbits)
    bits = bits.reshape(count, 3, depth).astype(np.int64)
    shifts = np.arange(depth - 1, -1, -1)
    return (bits << shifts).sum(axis=2)
