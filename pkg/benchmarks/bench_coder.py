"""Benchmark the compiled range coder against the pure-Python port.

Run:  python benchmarks/bench_coder.py [--symbols N] [--repeats R]

Both backends produce byte-identical streams; this script measures the
throughput gap on a representative code-tensor workload and verifies
equality on the way.
"""

import argparse
import time

import numpy as np

from flowcodec import rangecoder
from flowcodec.entropy import quantize_pmf


def build_workload(n_symbols, channels, rng):
    probs, offs, cdfs = [], [], []
    segs = []
    per = n_symbols // channels
    for c in range(channels):
        width = int(rng.integers(4, 24))
        p = np.exp(-np.abs(np.arange(-width, width + 1)) / rng.uniform(2, 6))
        p = np.concatenate([p / p.sum() * 0.999, [0.001]])
        cdfs.append(np.concatenate([[0], np.cumsum(quantize_pmf(p))]).astype(np.uint32))
        offs.append(-width)
        segs.append(np.clip(np.round(rng.laplace(0, 3, per)), -width, width).astype(np.int32))
    symbols = np.concatenate(segs)
    starts = np.concatenate([[0], np.cumsum([len(s) for s in segs])]).astype(np.int64)
    cdf_flat = np.concatenate(cdfs).astype(np.uint32)
    cdf_starts = np.concatenate([[0], np.cumsum([len(c) for c in cdfs])]).astype(np.int64)
    offsets = np.asarray(offs, dtype=np.int32)
    return symbols, starts, cdf_flat, cdf_starts, offsets


def bench(fn, repeats):
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t0)
    return out, best


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--symbols", type=int, default=262144)
    ap.add_argument("--channels", type=int, default=16)
    ap.add_argument("--repeats", type=int, default=3)
    args = ap.parse_args()

    rng = np.random.default_rng(0)
    symbols, starts, cdf_flat, cdf_starts, offsets = build_workload(
        args.symbols, args.channels, rng)
    counts = np.diff(starts)

    print(f"workload: {symbols.size} symbols, {args.channels} channels")
    print(f"available backends: {sorted(rangecoder.BACKENDS)}")
    results = {}
    streams = {}
    for name in sorted(rangecoder.BACKENDS):
        enc, dec = rangecoder.get_backend(name)
        stream, t_enc = bench(lambda: enc(symbols, starts, cdf_flat, cdf_starts, offsets),
                              args.repeats)
        decoded, t_dec = bench(lambda: dec(stream, counts, cdf_flat, cdf_starts, offsets),
                               args.repeats)
        assert np.array_equal(decoded, symbols), f"{name}: roundtrip failed"
        streams[name] = stream
        results[name] = (t_enc, t_dec)
        print(f"{name:>8}: encode {symbols.size / t_enc / 1e6:7.2f} Msym/s "
              f"({t_enc * 1e3:8.2f} ms)   decode {symbols.size / t_dec / 1e6:7.2f} Msym/s "
              f"({t_dec * 1e3:8.2f} ms)")

    if len(streams) == 2:
        a, b = streams.values()
        print(f"streams byte-identical: {a == b} ({len(a)} bytes)")
        (ec, dc), (ep, dp) = results["cython"], results["pure"]
        print(f"speedup: encode {ep / ec:.1f}x, decode {dp / dc:.1f}x")


if __name__ == "__main__":
    main()
