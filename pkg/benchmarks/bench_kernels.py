#!/usr/bin/env python3
"""Compare the numba and numpy kernel backends.

Times each hot kernel on inputs sized like the cnn_small model and checks
that both backends return identical arrays. The first numba call includes
JIT compilation (or a cache load) and is reported separately.

    python3 benchmarks/bench_kernels.py [--repeat 20] [--json out.json]
"""

import argparse
import json
import time

import numpy as np

from ptqat import _kernels
from ptqat.quant import qrange
from ptqat.tensor import conv_output_size


def _cases(rng):
    w = rng.normal(scale=0.05, size=64 * 32 * 9)
    s = np.abs(w).max() / 7
    lo, hi = qrange(4)
    # conv2 of cnn_small on a batch of 32: 16 -> 32 channels, 16x16, stride 2
    n, c, h, k, stride, pad = 32, 16, 16, 3, 2, 1
    oh = conv_output_size(h, k, stride, pad)
    xp = np.pad(rng.normal(size=(n, c, h, h)), ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = _kernels.numpy_kernels.im2col(xp, k, k, stride, oh, oh)
    codes = _kernels.numpy_kernels.quantize_codes(w, s, float(lo), float(hi)).astype(np.int64)
    packed = _kernels.numpy_kernels.pack_bits(codes, 4)
    hp = h + 2 * pad
    return {
        "quantize_codes": (w, s, float(lo), float(hi)),
        "fake_quant_grads": (w, s, float(lo), float(hi)),
        "im2col": (xp, k, k, stride, oh, oh),
        "col2im": (cols, c, hp, hp, k, k, stride, oh, oh),
        "pack_bits": (codes, 4),
        "unpack_bits": (packed, 4, codes.size),
    }


def _time(fn, args, repeat):
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def _same(a, b):
    if isinstance(a, tuple):
        return all(_same(x, y) for x, y in zip(a, b))
    return np.array_equal(a, b)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--json", default=None, help="write results here as well")
    args = ap.parse_args(argv)
    if not _kernels.NUMBA_AVAILABLE:
        raise SystemExit("numba is not installed; nothing to compare")

    cases = _cases(np.random.default_rng(args.seed))
    rows = []
    print(f"{'kernel':18s} {'first call':>11s} {'numba':>10s} {'numpy':>10s} {'speedup':>8s}  identical")
    for name, call_args in cases.items():
        nb = getattr(_kernels.numba_kernels, name)
        npf = getattr(_kernels.numpy_kernels, name)
        t0 = time.perf_counter()
        out_nb = nb(*call_args)
        first = time.perf_counter() - t0
        same = _same(out_nb, npf(*call_args))
        t_nb = _time(nb, call_args, args.repeat)
        t_np = _time(npf, call_args, args.repeat)
        rows.append({"kernel": name, "first_call_s": first, "numba_s": t_nb, "numpy_s": t_np, "identical": bool(same)})
        print(f"{name:18s} {first * 1e3:9.2f}ms {t_nb * 1e3:8.3f}ms {t_np * 1e3:8.3f}ms {t_np / t_nb:7.2f}x  {same}")
    if args.json:
        with open(args.json, "w") as f:
            json.dump(rows, f, indent=2)
    return 0 if all(r["identical"] for r in rows) else 1


if __name__ == "__main__":
    raise SystemExit(main())
