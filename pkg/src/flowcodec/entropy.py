"""Learned per-channel factorized entropy model.

Each channel of the code tensor gets an independent scalar CDF built
from a chain of small monotone stages: an affine map with
softplus-constrained weights, followed by a bounded residual
nonlinearity u + tanh(a) * tanh(u), and a final sigmoid.  Monotonicity
holds by construction (non-negative weights, |tanh(a)| < 1), so bin
probabilities CDF(t + 1/2) - CDF(t - 1/2) are non-negative for any
parameter values.

The same model serves two purposes: a differentiable bit-rate estimate
during training, and frozen integer frequency tables for the range
coder at encode/decode time.
"""

import math
import struct
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import CorruptStream, ShapeError

LOG2E = 1.0 / math.log(2.0)
PROB_FLOOR = 1e-9
TOTAL_FREQ = 1 << 16
MAX_SUPPORT = 1 << 14
FILTERS = (3, 3, 3)


class FactorizedEntropyModel:
    """Independent learned CDFs, one per channel."""

    def __init__(self, channels, rng=None, dtype=np.float32, init_scale=10.0,
                 name="em"):
        if rng is None:
            rng = np.random.default_rng(0)
        self.channels = int(channels)
        self.name = name
        self.params = {}
        dims = (1,) + FILTERS + (1,)
        scale = init_scale ** (1.0 / (len(FILTERS) + 1))
        self._stages = []
        for i in range(len(FILTERS) + 1):
            fin, fout = dims[i], dims[i + 1]
            winit = math.log(math.expm1(1.0 / scale / fout))
            w = Tensor(np.full((channels, fout, fin), winit, dtype=dtype),
                       requires_grad=True)
            b = Tensor(rng.uniform(-0.5, 0.5, (channels, fout, 1)).astype(dtype),
                       requires_grad=True)
            self.params[f"{name}/stage{i}/weight"] = w
            self.params[f"{name}/stage{i}/bias"] = b
            a = None
            if i < len(FILTERS):
                a = Tensor(np.zeros((channels, fout, 1), dtype=dtype),
                           requires_grad=True)
                self.params[f"{name}/stage{i}/factor"] = a
            self._stages.append((w, b, a))

    # -- differentiable path ------------------------------------------------

    def _logits(self, t):
        """t: Tensor (C, 1, M) -> logit of the CDF, same shape."""
        u = t
        for w, b, a in self._stages:
            u = ad.bias_add(ad.matmul(ad.softplus(w), u), b)
            if a is not None:
                u = ad.add(u, ad.scale_mul(ad.tanh(u), ad.tanh(a)))
        return u

    def bin_prob(self, t):
        """Probability of the unit bin centered on t; floored at 1e-9."""
        hi = ad.sigmoid(self._logits(ad.add(t, 0.5)))
        lo = ad.sigmoid(self._logits(ad.add(t, -0.5)))
        return ad.lower_bound(ad.sub(hi, lo), PROB_FLOOR)

    def total_bits(self, y):
        """Differentiable code length of an NHWC tensor, in bits."""
        if y.data.ndim != 4 or y.data.shape[3] != self.channels:
            raise ShapeError(f"expected NHWC with {self.channels} channels, "
                             f"got {y.data.shape}")
        n, h, w, c = y.data.shape
        t = ad.reshape(ad.transpose(y, (3, 0, 1, 2)), (c, 1, n * h * w))
        p = self.bin_prob(t)
        return ad.mul(ad.neg(ad.tsum(ad.log(p))), LOG2E)

    # -- frozen numpy path ---------------------------------------------------

    def _logits_np(self, t64):
        """Same chain in float64 numpy; t64 is (C, 1, M)."""
        u = t64
        for w, b, a in self._stages:
            u = np.logaddexp(0.0, w.data.astype(np.float64)) @ u + b.data.astype(np.float64)
            if a is not None:
                u = u + np.tanh(a.data.astype(np.float64)) * np.tanh(u)
        return u

    def build_tables(self, tail_mass=PROB_FLOOR, max_support=MAX_SUPPORT):
        """Freeze integer frequency tables for range coding."""
        c = self.channels
        grid = np.arange(-max_support, max_support + 1, dtype=np.float64)
        edges = np.concatenate([grid - 0.5, [max_support + 0.5]])
        logits = self._logits_np(np.broadcast_to(edges, (c, 1, edges.size)).copy())
        cdf = _sigmoid_np(logits[:, 0, :])
        pmf = np.maximum(cdf[:, 1:] - cdf[:, :-1], 0.0)
        offsets = np.empty(c, dtype=np.int32)
        cdfs = []
        for i in range(c):
            alive = np.nonzero(pmf[i] >= tail_mass)[0]
            if alive.size:
                reach = max(abs(int(grid[alive[0]])), abs(int(grid[alive[-1]])))
            else:
                reach = 0
            li = min(max(reach + 1, 1), max_support)
            lo = max_support - li
            probs = pmf[i, lo:lo + 2 * li + 1]
            escape = max(1.0 - probs.sum(), tail_mass)
            counts = quantize_pmf(np.concatenate([probs, [escape]]))
            offsets[i] = -li
            cdfs.append(np.concatenate([[0], np.cumsum(counts)]).astype(np.uint32))
        return CdfTable(offsets=offsets, cdfs=cdfs)

    # -- state ----------------------------------------------------------------

    def state(self):
        return {k: t.data.copy() for k, t in self.params.items()}

    def load_state(self, state):
        missing = set(self.params) - set(state)
        extra = set(state) - set(self.params)
        if missing or extra:
            raise ShapeError(f"entropy state mismatch: missing {sorted(missing)[:3]}, "
                             f"extra {sorted(extra)[:3]}")
        for k, t in self.params.items():
            arr = np.asarray(state[k])
            if arr.shape != t.data.shape:
                raise ShapeError(f"{k}: shape {arr.shape} != {t.data.shape}")
            t.data = arr.astype(t.data.dtype)

    def cast(self, dtype):
        ad.cast_params(self.params, dtype)
        return self


def _sigmoid_np(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def quantize_pmf(probs, total=TOTAL_FREQ):
    """Turn a probability vector into integer counts summing to total.

    Every slot gets at least one count.  The rounding deficit goes to
    the largest fractional remainders (ties broken by index); any excess
    from bumped zeros is taken back from the largest counts.
    """
    probs = np.maximum(np.asarray(probs, dtype=np.float64), 0.0)
    n = probs.size
    if n < 1 or n > total:
        raise ShapeError(f"cannot quantize {n} slots into {total} counts")
    s = probs.sum()
    probs = probs / s if s > 0 else np.full(n, 1.0 / n)
    scaled = probs * total
    counts = np.floor(scaled).astype(np.int64)
    rem = scaled - counts
    counts = np.maximum(counts, 1)
    diff = total - counts.sum()
    if diff > 0:
        order = np.lexsort((np.arange(n), -rem))
        counts[order[:diff]] += 1
    while diff < 0:
        order = np.argsort(-counts, kind="stable")
        for idx in order:
            if diff == 0:
                break
            if counts[idx] > 1:
                take = min(counts[idx] - 1, -diff)
                counts[idx] -= take
                diff += take
        if diff < 0 and not np.any(counts > 1):
            raise ShapeError("cannot satisfy count total")
    return counts.astype(np.uint32)


@dataclass
class CdfTable:
    """Frozen per-channel cumulative frequency tables.

    cdfs[c] is a uint32 array of length n_c + 1 with cdfs[c][0] == 0 and
    cdfs[c][-1] == 65536; real symbol values run from offsets[c] upward,
    and the final slot is the escape used for out-of-support values.
    """

    offsets: np.ndarray
    cdfs: list

    @property
    def channels(self):
        return len(self.cdfs)

    def n_symbols(self, c):
        return len(self.cdfs[c]) - 1

    def escape_index(self, c):
        return self.n_symbols(c) - 1

    def ideal_bits(self, symbols):
        """Code length the tables imply for an int (M, C) symbol grid,
        counting escapes at their escape-slot cost plus 32 raw bits."""
        total = 0.0
        m, c = symbols.shape
        for ch in range(c):
            cdf = self.cdfs[ch].astype(np.float64)
            freqs = np.diff(cdf)
            idx = symbols[:, ch].astype(np.int64) - int(self.offsets[ch])
            n_real = self.n_symbols(ch) - 1
            inside = (idx >= 0) & (idx < n_real)
            total += -np.sum(np.log2(freqs[idx[inside]] / TOTAL_FREQ))
            n_esc = int((~inside).sum())
            if n_esc:
                esc_bits = -math.log2(freqs[-1] / TOTAL_FREQ) + 32.0
                total += n_esc * esc_bits
        return total

    def to_bytes(self):
        out = [struct.pack("<I", self.channels)]
        for c in range(self.channels):
            freqs = np.diff(self.cdfs[c]).astype(np.int64)
            if freqs.min() < 1 or freqs.max() > 0xFFFF:
                raise ShapeError("frequency out of u16 range")
            out.append(struct.pack("<iI", int(self.offsets[c]), freqs.size))
            out.append(freqs.astype("<u2").tobytes())
        return b"".join(out)

    @classmethod
    def from_bytes(cls, blob):
        try:
            (channels,) = struct.unpack_from("<I", blob, 0)
            pos = 4
            offsets = np.empty(channels, dtype=np.int32)
            cdfs = []
            for c in range(channels):
                off, n = struct.unpack_from("<iI", blob, pos)
                pos += 8
                if n < 2 or n > 2 * MAX_SUPPORT + 2:
                    raise CorruptStream(f"bad table size {n}")
                freqs = np.frombuffer(blob, dtype="<u2", count=n, offset=pos)
                pos += 2 * n
                if freqs.min() < 1:
                    raise CorruptStream("zero frequency in table")
                cum = np.concatenate([[0], np.cumsum(freqs.astype(np.uint32))])
                if cum[-1] != TOTAL_FREQ:
                    raise CorruptStream(f"table total {cum[-1]} != {TOTAL_FREQ}")
                offsets[c] = off
                cdfs.append(cum.astype(np.uint32))
        except struct.error as e:
            raise CorruptStream(f"truncated table blob: {e}") from None
        return cls(offsets=offsets, cdfs=cdfs), pos


def quantize_round(y_data):
    """Eval-time quantization: round half to even, as int32 symbols."""
    return np.rint(y_data).astype(np.int32)


def uniform_noise(rng, shape, dtype=np.float32):
    """Training surrogate for rounding: additive U(-1/2, 1/2)."""
    return rng.uniform(-0.5, 0.5, shape).astype(dtype)
