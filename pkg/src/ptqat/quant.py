"""
Uniform symmetric per-tensor quantization.

    codes = clip(round(x / s), -2^(b-1), 2^(b-1) - 1)      round = half-to-even
    s     = max(|max(x)|, |min(x)|) / (2^(b-1) - 1)

``fake_quant`` returns ``s * codes`` in float64. Its backward pass uses the
straight-through estimator for ``x`` (identity where ``x / s`` lies strictly
inside the clip range, zero elsewhere) and the learned-step-size rule for a
trainable ``s``:

    d out / d s = round(v) - v     -Qn < v < Qp
                = -Qn              v <= -Qn
                = Qp               v >= Qp

scaled by ``1 / sqrt(n * Qp)`` where ``n`` is the element count.
"""

import math
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .data import CALIB_BATCHES, iter_batches
from .errors import ContractError
from .tensor import Tensor, as_tensor, make_node

WEIGHT = "weight"
ACTIVATION = "activation"


def qrange(bits):
    """(lo, hi) integer code range for a signed ``bits``-wide code."""
    return -(1 << (bits - 1)), (1 << (bits - 1)) - 1


def _check_bits(bits):
    if not isinstance(bits, (int, np.integer)) or not 2 <= bits <= 8:
        raise ContractError(f"bit width must be an integer in [2, 8], got {bits!r}")


@dataclass
class QuantParams:
    bits: int
    scale: float
    trainable: bool = False
    target: str = WEIGHT

    def __post_init__(self):
        _check_bits(self.bits)
        if not self.scale > 0:
            raise ContractError(f"scale must be positive, got {self.scale!r}")
        if self.target not in (WEIGHT, ACTIVATION):
            raise ContractError(f"unknown quantization target {self.target!r}")


class FakeQuantState:
    """Live quantizer attached to one tensor of one layer.

    The scale is held as a 0-d ``Tensor`` so a trainable, unfrozen state can
    receive gradients; ``params`` snapshots it as a ``QuantParams``.
    """

    def __init__(self, params, frozen=True):
        self.bits = int(params.bits)
        self.trainable = bool(params.trainable)
        self.target = params.target
        self.scale = Tensor(params.scale, requires_grad=self.trainable and not frozen)
        self._frozen = bool(frozen)

    @property
    def frozen(self):
        return self._frozen

    @frozen.setter
    def frozen(self, value):
        self._frozen = bool(value)
        self.scale.requires_grad = self.trainable and not self._frozen

    @property
    def params(self):
        return QuantParams(self.bits, float(self.scale.data), self.trainable, self.target)

    def clamp_scale(self, floor=1e-12):
        # SGD may drive the step size through zero
        if self.scale.data < floor:
            self.scale.data = np.array(floor)

    def __repr__(self):
        return (
            f"FakeQuantState(bits={self.bits}, scale={float(self.scale.data)!r}, "
            f"target={self.target}, frozen={self.frozen})"
        )


def compute_scale(x, bits):
    """Per-tensor symmetric scale; 1.0 for an all-zero tensor."""
    _check_bits(bits)
    data = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    if data.size == 0:
        raise ContractError("compute_scale: empty tensor")
    peak = max(abs(float(data.max())), abs(float(data.min())))
    if peak == 0.0:
        return 1.0
    return peak / ((1 << (bits - 1)) - 1)


def quantize_int(x, p):
    """Integer codes of ``x`` under ``p`` as an int64 array."""
    if not p.scale > 0:
        raise ContractError(f"quantize_int: scale must be positive, got {p.scale!r}")
    data = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    lo, hi = qrange(p.bits)
    return _kernels.quantize_codes(data, p.scale, lo, hi).astype(np.int64)


def dequantize(codes, scale):
    return float(scale) * np.asarray(codes, dtype=np.float64)


def lsq_grad_scale(n, bits):
    return 1.0 / math.sqrt(n * qrange(bits)[1])


def fake_quant(x, q):
    """Quantize-dequantize ``x``; differentiable w.r.t. ``x`` and a trainable scale.

    ``q`` is either a ``QuantParams`` (constant scale) or a ``FakeQuantState``
    whose scale tensor participates in the graph.
    """
    x = as_tensor(x)
    if isinstance(q, FakeQuantState):
        s_t, bits = q.scale, q.bits
    else:
        s_t, bits = Tensor(q.scale), q.bits
    s = float(s_t.data)
    if not s > 0:
        raise ContractError(f"fake_quant: scale must be positive, got {s!r}")
    lo, hi = qrange(bits)
    out = s * _kernels.quantize_codes(x.data, s, lo, hi)

    def backward(g):
        mask, dyds = _kernels.fake_quant_grads(x.data, s, lo, hi)
        gx = g * mask if x.requires_grad else None
        gs = None
        if s_t.requires_grad:
            gs = np.asarray((g * dyds).sum() * lsq_grad_scale(x.size, bits))
        return gx, gs

    return make_node(out, (x, s_t), "fake_quant", backward)


def fake_quant_array(x, p):
    """Non-differentiable ``s * quantize_int(x, p)`` on a plain array."""
    return p.scale * quantize_int(x, p).astype(np.float64)


def calibrate_activation(model, layer, calib, bits, batches=None):
    """Scale for the input activation of ``layer`` from a float forward pass.

    Tracks the running max-abs over every batch of the calibration split.
    """
    _check_bits(bits)
    target = model.layer(layer)
    if len(calib) == 0:
        raise ContractError("calibrate_activation: empty calibration split")
    peak = 0.0
    for xb, _ in iter_batches(calib, batches=batches or CALIB_BATCHES):
        captured = model.capture(xb, names=[target.name], float_only=True)
        a = captured[target.name][0]
        peak = max(peak, abs(float(a.max())), abs(float(a.min())))
    scale = 1.0 if peak == 0.0 else peak / ((1 << (bits - 1)) - 1)
    return QuantParams(bits, scale, trainable=False, target=ACTIVATION)
