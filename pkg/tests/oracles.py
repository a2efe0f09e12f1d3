"""Independent reference implementations used by the tests.

Everything here is written with plain Python scalars and loops so that it
shares no code path with the package under test.
"""

import math


def scalar_scale(values, bits):
    peak = max(abs(max(values)), abs(min(values)))
    if peak == 0.0:
        return 1.0
    return peak / (2 ** (bits - 1) - 1)


def scalar_codes(values, scale, bits):
    lo, hi = -(2 ** (bits - 1)), 2 ** (bits - 1) - 1
    # Python's round() on floats is round-half-to-even
    return [min(max(round(v / scale), lo), hi) for v in values]


def scalar_ste_mask(values, scale, bits):
    lo, hi = -(2 ** (bits - 1)), 2 ** (bits - 1) - 1
    return [1.0 if lo < v / scale < hi else 0.0 for v in values]


def scalar_lsq_grad(values, upstream, scale, bits):
    """d(sum(g * fake_quant(x, s)))/ds with the LSQ step-size rule and normalizer."""
    qn, qp = 2 ** (bits - 1), 2 ** (bits - 1) - 1
    total = 0.0
    for v, g in zip(values, upstream):
        r = v / scale
        if r <= -qn:
            d = -qn
        elif r >= qp:
            d = qp
        else:
            d = round(r) - r
        total += g * d
    return total / math.sqrt(len(values) * qp)


def scalar_linear(a_rows, w_rows, bias):
    """out[n][o] = sum_i a[n][i] * w[o][i] + b[o]."""
    out = []
    for a in a_rows:
        row = []
        for o, w in enumerate(w_rows):
            acc = 0.0
            for i in range(len(a)):
                acc += a[i] * w[i]
            row.append(acc + (bias[o] if bias is not None else 0.0))
        out.append(row)
    return out


def scalar_mse(x_rows, y_rows):
    total, n = 0.0, 0
    for xr, yr in zip(x_rows, y_rows):
        for a, b in zip(xr, yr):
            total += (a - b) ** 2
            n += 1
    return total / n


def conv2d_sliding(x, w, stride, pad):
    """Direct sliding-window cross-correlation on nested lists / arrays."""
    n, c, h, wd = x.shape
    k, _, kh, kw = w.shape
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (wd + 2 * pad - kw) // stride + 1
    out = [[[[0.0] * ow for _ in range(oh)] for _ in range(k)] for _ in range(n)]
    for b in range(n):
        for f in range(k):
            for i in range(oh):
                for j in range(ow):
                    acc = 0.0
                    for ch in range(c):
                        for di in range(kh):
                            for dj in range(kw):
                                r, q = i * stride + di - pad, j * stride + dj - pad
                                if 0 <= r < h and 0 <= q < wd:
                                    acc += float(x[b, ch, r, q]) * float(w[f, ch, di, dj])
                    out[b][f][i][j] = acc
    return out


def pack_oracle(codes, bits):
    """Two's complement, low bits first, little-endian bytes, zero padded."""
    stream = []
    for c in codes:
        u = c & ((1 << bits) - 1)
        stream.extend((u >> i) & 1 for i in range(bits))
    while len(stream) % 8:
        stream.append(0)
    return bytes(sum(bit << i for i, bit in enumerate(stream[k : k + 8])) for k in range(0, len(stream), 8))


def central_diff(f, x, h=1e-5):
    """Numerical gradient of scalar ``f`` at numpy array ``x`` (modified in place, restored)."""
    import numpy as np

    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = x[idx]
        x[idx] = old + h
        fp = f(x)
        x[idx] = old - h
        fm = f(x)
        x[idx] = old
        g[idx] = (fp - fm) / (2 * h)
    return g
