# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled 64-bit carry-less range coder.

Byte-for-byte identical streams to the pure-Python backend in _rc_py;
see that module for the scheme description.  Only the two
channel-batched entry points are exported.
"""

import numpy as np

cimport numpy as cnp

from ..errors import CorruptStream, TruncatedStream

ctypedef unsigned long long u64

cdef u64 TOP = (<u64>1) << 56
cdef u64 BOT = (<u64>1) << 16
cdef u64 TOT = (<u64>1) << 16


cdef class _Sink:
    cdef unsigned char* buf
    cdef Py_ssize_t cap, pos
    cdef object arr

    def __cinit__(self, Py_ssize_t initial):
        self.arr = np.empty(max(initial, 64), dtype=np.uint8)
        self.buf = <unsigned char*> cnp.PyArray_DATA(<cnp.ndarray> self.arr)
        self.cap = len(self.arr)
        self.pos = 0

    cdef void _grow(self):
        self.arr = np.concatenate([self.arr, np.empty(self.cap, dtype=np.uint8)])
        self.cap = len(self.arr)
        self.buf = <unsigned char*> cnp.PyArray_DATA(<cnp.ndarray> self.arr)

    cdef inline void put(self, unsigned char b):
        if self.pos >= self.cap:
            self._grow()
        self.buf[self.pos] = b
        self.pos += 1

    cdef bytes tobytes(self):
        return bytes(self.arr[:self.pos].tobytes())


def encode_channels(symbols, starts, cdf_flat, cdf_starts, offsets):
    """Encode channel-major int32 symbols against per-channel tables."""
    cdef cnp.int32_t[::1] sym = np.ascontiguousarray(symbols, dtype=np.int32)
    cdef cnp.int64_t[::1] st = np.ascontiguousarray(starts, dtype=np.int64)
    cdef cnp.uint32_t[::1] cdf = np.ascontiguousarray(cdf_flat, dtype=np.uint32)
    cdef cnp.int64_t[::1] cst = np.ascontiguousarray(cdf_starts, dtype=np.int64)
    cdef cnp.int32_t[::1] off = np.ascontiguousarray(offsets, dtype=np.int32)

    if sym.shape[0] == 0:
        return b""

    cdef _Sink sink = _Sink(sym.shape[0] * 3 + 64)
    cdef u64 low = 0, rng = <u64>0xFFFFFFFFFFFFFFFF, r, t
    cdef Py_ssize_t c, i, s, base, esc
    cdef long long v
    cdef unsigned long u
    cdef u64 cum, freq, esc_cum, esc_freq

    for c in range(off.shape[0]):
        base = cst[c]
        esc = (cst[c + 1] - base) - 2
        esc_cum = cdf[base + esc]
        esc_freq = cdf[base + esc + 1] - esc_cum
        for i in range(st[c], st[c + 1]):
            v = sym[i]
            s = v - off[c]
            if 0 <= s < esc:
                cum = cdf[base + s]
                freq = cdf[base + s + 1] - cum
                low, rng = _enc_step(sink, low, rng, cum, freq)
            else:
                low, rng = _enc_step(sink, low, rng, esc_cum, esc_freq)
                u = <unsigned long> (<unsigned int> v)
                low, rng = _enc_step(sink, low, rng, <u64>(u >> 16), 1)
                low, rng = _enc_step(sink, low, rng, <u64>(u & 0xFFFF), 1)

    # flush
    for i in range(8):
        sink.put(<unsigned char>((low >> 56) & 0xFF))
        low = low << 8
    return sink.tobytes()


cdef inline (u64, u64) _enc_step(_Sink sink, u64 low, u64 rng, u64 cum, u64 freq):
    cdef u64 r = rng >> 16
    low = low + r * cum
    rng = r * freq
    while True:
        if (low ^ (low + rng)) < TOP:
            pass
        elif rng < BOT:
            rng = (0 - low) & (BOT - 1)
        else:
            break
        sink.put(<unsigned char>((low >> 56) & 0xFF))
        low = low << 8
        rng = rng << 8
    return low, rng


def decode_channels(payload, counts, cdf_flat, cdf_starts, offsets):
    """Inverse of encode_channels; returns the flat int32 symbol array."""
    cdef cnp.int64_t[::1] cnts = np.ascontiguousarray(counts, dtype=np.int64)
    cdef cnp.uint32_t[::1] cdf = np.ascontiguousarray(cdf_flat, dtype=np.uint32)
    cdef cnp.int64_t[::1] cst = np.ascontiguousarray(cdf_starts, dtype=np.int64)
    cdef cnp.int32_t[::1] off = np.ascontiguousarray(offsets, dtype=np.int32)

    cdef Py_ssize_t total = 0
    cdef Py_ssize_t c, i, n, base, esc, s, pos = 0
    for c in range(cnts.shape[0]):
        total += cnts[c]
    out_arr = np.empty(total, dtype=np.int32)
    cdef cnp.int32_t[::1] out = out_arr
    if total == 0:
        return out_arr

    cdef const unsigned char[::1] data = payload
    cdef Py_ssize_t dlen = data.shape[0], dpos = 0
    cdef u64 low = 0, rng = <u64>0xFFFFFFFFFFFFFFFF, code = 0, r, dv
    cdef u64 cum, freq
    cdef unsigned long u, hi16, lo16

    if dlen < 8:
        raise TruncatedStream("range coder input exhausted")
    for i in range(8):
        code = (code << 8) | data[dpos]
        dpos += 1

    for c in range(cnts.shape[0]):
        base = cst[c]
        n = (cst[c + 1] - base) - 1      # slot count including escape
        esc = n - 1
        for i in range(cnts[c]):
            r = rng >> 16
            dv = (code - low) // r
            if dv >= TOT:
                raise CorruptStream("decoded frequency out of range")
            s = _search(cdf, base, n, dv)
            cum = cdf[base + s]
            freq = cdf[base + s + 1] - cum
            low, rng, code, dpos = _dec_step(data, dlen, dpos, low, rng, code, cum, freq)
            if s == esc:
                r = rng >> 16
                hi16 = <unsigned long>((code - low) // r)
                if hi16 >= TOT:
                    raise CorruptStream("decoded frequency out of range")
                low, rng, code, dpos = _dec_step(data, dlen, dpos, low, rng, code, <u64>hi16, 1)
                r = rng >> 16
                lo16 = <unsigned long>((code - low) // r)
                if lo16 >= TOT:
                    raise CorruptStream("decoded frequency out of range")
                low, rng, code, dpos = _dec_step(data, dlen, dpos, low, rng, code, <u64>lo16, 1)
                u = (hi16 << 16) | lo16
                out[pos] = <cnp.int32_t>(<int> u)
            else:
                out[pos] = <cnp.int32_t>(s + off[c])
            pos += 1
    return out_arr


cdef inline Py_ssize_t _search(cnp.uint32_t[::1] cdf, Py_ssize_t base, Py_ssize_t n, u64 dv):
    # smallest s in [0, n) with cdf[base+s] <= dv < cdf[base+s+1]
    cdef Py_ssize_t lo = 0, hi = n, mid
    while lo + 1 < hi:
        mid = (lo + hi) >> 1
        if cdf[base + mid] <= dv:
            lo = mid
        else:
            hi = mid
    return lo


cdef inline (u64, u64, u64, Py_ssize_t) _dec_step(const unsigned char[::1] data,
                                                  Py_ssize_t dlen, Py_ssize_t dpos,
                                                  u64 low, u64 rng, u64 code,
                                                  u64 cum, u64 freq):
    cdef u64 r = rng >> 16
    low = low + r * cum
    rng = r * freq
    while True:
        if (low ^ (low + rng)) < TOP:
            pass
        elif rng < BOT:
            rng = (0 - low) & (BOT - 1)
        else:
            break
        if dpos >= dlen:
            raise TruncatedStream("range coder input exhausted")
        code = (code << 8) | data[dpos]
        dpos += 1
        low = low << 8
        rng = rng << 8
    return low, rng, code, dpos
