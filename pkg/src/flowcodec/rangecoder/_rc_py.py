"""Pure-Python 64-bit carry-less range coder.

Byte-oriented renormalization: a byte is emitted either when the top
byte of the interval is settled, or when the interval has shrunk below
the frequency resolution, in which case the range is clamped to the
next 2^16 boundary (losing a fraction of a bit instead of propagating
carries).  The Cython backend implements the identical scheme; streams
are byte-for-byte interchangeable.

All frequency tables use a fixed total of 2^16, so the range split is
a shift, not a division.  Symbols are coded per channel from cumulative
tables whose last slot is an escape; escaped values follow as two raw
16-bit halves of the int32 value.
"""

from bisect import bisect_right

import numpy as np

from ..errors import CorruptStream, TruncatedStream

MASK64 = (1 << 64) - 1
TOP = 1 << 56
BOT = 1 << 16
TOT = 1 << 16


class RangeEncoder:
    def __init__(self):
        self.low = 0
        self.range = MASK64
        self.out = bytearray()

    def encode(self, cum, freq):
        r = self.range >> 16
        self.low = (self.low + r * cum) & MASK64
        self.range = r * freq
        low, rng, out = self.low, self.range, self.out
        while True:
            if (low ^ ((low + rng) & MASK64)) < TOP:
                pass
            elif rng < BOT:
                rng = (-low) & (BOT - 1)
            else:
                break
            out.append((low >> 56) & 0xFF)
            low = (low << 8) & MASK64
            rng = (rng << 8) & MASK64
        self.low, self.range = low, rng

    def finish(self):
        low = self.low
        for _ in range(8):
            self.out.append((low >> 56) & 0xFF)
            low = (low << 8) & MASK64
        return bytes(self.out)


class RangeDecoder:
    def __init__(self, data):
        self.data = data
        self.pos = 0
        self.low = 0
        self.range = MASK64
        self.code = 0
        for _ in range(8):
            self.code = (self.code << 8) | self._next_byte()

    def _next_byte(self):
        if self.pos >= len(self.data):
            raise TruncatedStream("range coder input exhausted")
        b = self.data[self.pos]
        self.pos += 1
        return b

    def decode_freq(self):
        r = self.range >> 16
        dv = ((self.code - self.low) & MASK64) // r
        if dv >= TOT:
            raise CorruptStream("decoded frequency out of range")
        return dv

    def decode_update(self, cum, freq):
        r = self.range >> 16
        self.low = (self.low + r * cum) & MASK64
        self.range = r * freq
        low, rng, code = self.low, self.range, self.code
        while True:
            if (low ^ ((low + rng) & MASK64)) < TOP:
                pass
            elif rng < BOT:
                rng = (-low) & (BOT - 1)
            else:
                break
            code = ((code << 8) | self._next_byte()) & MASK64
            low = (low << 8) & MASK64
            rng = (rng << 8) & MASK64
        self.low, self.range, self.code = low, rng, code


def encode_channels(symbols, starts, cdf_flat, cdf_starts, offsets):
    """Encode channel-major int32 symbols against per-channel tables.

    symbols[starts[c]:starts[c+1]] belong to channel c; its cumulative
    table is cdf_flat[cdf_starts[c]:cdf_starts[c+1]] and its smallest
    in-table value is offsets[c].  Returns the payload bytes.
    """
    symbols = np.ascontiguousarray(symbols, dtype=np.int32)
    if symbols.size == 0:
        return b""
    enc = RangeEncoder()
    nchan = len(offsets)
    for c in range(nchan):
        cdf = [int(v) for v in cdf_flat[int(cdf_starts[c]):int(cdf_starts[c + 1])]]
        esc = len(cdf) - 2
        off = int(offsets[c])
        esc_cum = cdf[esc]
        esc_freq = cdf[esc + 1] - esc_cum
        for v in symbols[int(starts[c]):int(starts[c + 1])]:
            s = int(v) - off
            if 0 <= s < esc:
                enc.encode(cdf[s], cdf[s + 1] - cdf[s])
            else:
                enc.encode(esc_cum, esc_freq)
                u = int(v) & 0xFFFFFFFF
                enc.encode(u >> 16, 1)
                enc.encode(u & 0xFFFF, 1)
    return enc.finish()


def decode_channels(payload, counts, cdf_flat, cdf_starts, offsets):
    """Inverse of encode_channels; returns the flat int32 symbol array."""
    total = int(np.sum(counts))
    out = np.empty(total, dtype=np.int32)
    if total == 0:
        return out
    dec = RangeDecoder(payload)
    pos = 0
    nchan = len(offsets)
    for c in range(nchan):
        cdf = [int(v) for v in cdf_flat[int(cdf_starts[c]):int(cdf_starts[c + 1])]]
        esc = len(cdf) - 2
        off = int(offsets[c])
        for _ in range(int(counts[c])):
            dv = dec.decode_freq()
            s = bisect_right(cdf, dv) - 1
            dec.decode_update(cdf[s], cdf[s + 1] - cdf[s])
            if s == esc:
                hi = dec.decode_freq()
                dec.decode_update(hi, 1)
                lo = dec.decode_freq()
                dec.decode_update(lo, 1)
                u = (hi << 16) | lo
                out[pos] = u - (1 << 32) if u >= (1 << 31) else u
            else:
                out[pos] = s + off
            pos += 1
    return out
