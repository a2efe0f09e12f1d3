"""
Hot numeric kernels with two interchangeable backends.

Each kernel exists as a numba ``@njit`` loop and as a vectorised numpy
function. Both produce bit-identical results: the loops do no fast-math and
accumulate in the same per-element order as the numpy versions.

The backend is chosen once at import time:

    PTQAT_NUMBA=0   force the pure-numpy path
    PTQAT_NUMBA=1   require numba (ImportError if unavailable)
    unset           use numba when importable

``BACKEND`` records the choice; ``numba_kernels`` / ``numpy_kernels`` expose
both sets explicitly for benchmarks and equivalence tests.
"""

import os
from types import SimpleNamespace

import numpy as np

try:
    from numba import njit

    NUMBA_AVAILABLE = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    NUMBA_AVAILABLE = False

    def njit(*args, **kwargs):
        if len(args) == 1 and callable(args[0]) and not kwargs:
            return args[0]

        def decorator(func):
            return func

        return decorator


_flag = os.environ.get("PTQAT_NUMBA", "").strip().lower()
if _flag in ("0", "false", "no", "off"):
    USE_NUMBA = False
elif _flag in ("1", "true", "yes", "on"):
    if not NUMBA_AVAILABLE:
        raise ImportError("PTQAT_NUMBA=1 but numba is not installed")
    USE_NUMBA = True
else:
    USE_NUMBA = NUMBA_AVAILABLE

BACKEND = "numba" if USE_NUMBA else "numpy"


# ---------------------------------------------------------------------------
# quantization: round-half-even then clip
# ---------------------------------------------------------------------------


@njit(cache=True)
def _quantize_codes_nb(x, scale, lo, hi):
    out = np.empty_like(x)
    for i in range(x.size):
        v = np.rint(x[i] / scale)
        if v < lo:
            v = lo
        elif v > hi:
            v = hi
        out[i] = v
    return out


def _quantize_codes_np(x, scale, lo, hi):
    return np.clip(np.rint(x / scale), lo, hi)


@njit(cache=True)
def _fake_quant_grads_nb(x, scale, lo, hi):
    # mask: STE pass-through indicator; dyds: LSQ step-size derivative
    mask = np.empty_like(x)
    dyds = np.empty_like(x)
    for i in range(x.size):
        v = x[i] / scale
        if v <= lo:
            mask[i] = 0.0
            dyds[i] = lo
        elif v >= hi:
            mask[i] = 0.0
            dyds[i] = hi
        else:
            mask[i] = 1.0
            dyds[i] = np.rint(v) - v
    return mask, dyds


def _fake_quant_grads_np(x, scale, lo, hi):
    v = x / scale
    below = v <= lo
    above = v >= hi
    inside = ~(below | above)
    mask = inside.astype(np.float64)
    dyds = np.where(below, float(lo), np.where(above, float(hi), np.rint(v) - v))
    return mask, dyds


# ---------------------------------------------------------------------------
# conv2d lowering
# ---------------------------------------------------------------------------


@njit(cache=True)
def _im2col_nb(xp, kh, kw, stride, oh, ow):
    n, c = xp.shape[0], xp.shape[1]
    cols = np.empty((n, c * kh * kw, oh * ow))
    for b in range(n):
        for ch in range(c):
            for i in range(kh):
                for j in range(kw):
                    row = (ch * kh + i) * kw + j
                    for y in range(oh):
                        for x in range(ow):
                            cols[b, row, y * ow + x] = xp[b, ch, y * stride + i, x * stride + j]
    return cols


def _im2col_np(xp, kh, kw, stride, oh, ow):
    n, c = xp.shape[0], xp.shape[1]
    cols = np.empty((n, c, kh, kw, oh, ow))
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride]
    return cols.reshape(n, c * kh * kw, oh * ow)


@njit(cache=True)
def _col2im_nb(cols, c, hp, wp, kh, kw, stride, oh, ow):
    n = cols.shape[0]
    out = np.zeros((n, c, hp, wp))
    for b in range(n):
        for ch in range(c):
            for i in range(kh):
                for j in range(kw):
                    row = (ch * kh + i) * kw + j
                    for y in range(oh):
                        for x in range(ow):
                            out[b, ch, y * stride + i, x * stride + j] += cols[b, row, y * ow + x]
    return out


def _col2im_np(cols, c, hp, wp, kh, kw, stride, oh, ow):
    n = cols.shape[0]
    cols6 = cols.reshape(n, c, kh, kw, oh, ow)
    out = np.zeros((n, c, hp, wp))
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += cols6[:, :, i, j]
    return out


# ---------------------------------------------------------------------------
# two's-complement bit packing, low bits first
# ---------------------------------------------------------------------------


@njit(cache=True)
def _pack_bits_nb(codes, bits):
    nbytes = (codes.size * bits + 7) // 8
    out = np.zeros(nbytes, dtype=np.uint8)
    mask = (1 << bits) - 1
    pos = 0
    for i in range(codes.size):
        u = codes[i] & mask
        for k in range(bits):
            if (u >> k) & 1:
                out[pos >> 3] |= np.uint8(1 << (pos & 7))
            pos += 1
    return out


def _pack_bits_np(codes, bits):
    u = (codes & ((1 << bits) - 1)).astype(np.uint8)
    bitmat = np.unpackbits(u[:, None], axis=1, bitorder="little")[:, :bits]
    return np.packbits(bitmat.ravel(), bitorder="little")


@njit(cache=True)
def _unpack_bits_nb(buf, bits, count):
    out = np.empty(count, dtype=np.int64)
    sign = 1 << (bits - 1)
    pos = 0
    for i in range(count):
        u = 0
        for k in range(bits):
            if (buf[pos >> 3] >> (pos & 7)) & 1:
                u |= 1 << k
            pos += 1
        out[i] = u - (u & sign) * 2
    return out


def _unpack_bits_np(buf, bits, count):
    stream = np.unpackbits(buf, bitorder="little")[: count * bits].reshape(count, bits)
    u = (stream.astype(np.int64) << np.arange(bits, dtype=np.int64)).sum(axis=1)
    sign = 1 << (bits - 1)
    return u - (u & sign) * 2


numba_kernels = SimpleNamespace(
    quantize_codes=_quantize_codes_nb,
    fake_quant_grads=_fake_quant_grads_nb,
    im2col=_im2col_nb,
    col2im=_col2im_nb,
    pack_bits=_pack_bits_nb,
    unpack_bits=_unpack_bits_nb,
)
numpy_kernels = SimpleNamespace(
    quantize_codes=_quantize_codes_np,
    fake_quant_grads=_fake_quant_grads_np,
    im2col=_im2col_np,
    col2im=_col2im_np,
    pack_bits=_pack_bits_np,
    unpack_bits=_unpack_bits_np,
)
_active = numba_kernels if USE_NUMBA else numpy_kernels


# Public wrappers: accept any shape / dtype, hand the kernels flat contiguous
# float64 (or int64) buffers and restore the shape afterwards.


def quantize_codes(x, scale, lo, hi):
    """Float-valued integer codes ``clip(rint(x / scale), lo, hi)``."""
    x = np.asarray(x, dtype=np.float64)
    flat = np.ascontiguousarray(x).ravel()
    return _active.quantize_codes(flat, float(scale), float(lo), float(hi)).reshape(x.shape)


def fake_quant_grads(x, scale, lo, hi):
    x = np.asarray(x, dtype=np.float64)
    flat = np.ascontiguousarray(x).ravel()
    mask, dyds = _active.fake_quant_grads(flat, float(scale), float(lo), float(hi))
    return mask.reshape(x.shape), dyds.reshape(x.shape)


def im2col(xp, kh, kw, stride, oh, ow):
    return _active.im2col(np.ascontiguousarray(xp, dtype=np.float64), kh, kw, stride, oh, ow)


def col2im(cols, c, hp, wp, kh, kw, stride, oh, ow):
    return _active.col2im(np.ascontiguousarray(cols, dtype=np.float64), c, hp, wp, kh, kw, stride, oh, ow)


def pack_bits(codes, bits):
    codes = np.ascontiguousarray(codes, dtype=np.int64).ravel()
    return _active.pack_bits(codes, int(bits))


def unpack_bits(buf, bits, count):
    buf = np.frombuffer(bytes(buf), dtype=np.uint8) if not isinstance(buf, np.ndarray) else buf
    return _active.unpack_bits(np.ascontiguousarray(buf, dtype=np.uint8), int(bits), int(count))
