"""
Integer export container.

Layout (all integers little-endian)::

    magic      b"PTQATQ1"
    u8         bits_w
    u8         bits_a (0 when weights only)
    u32        layer count
    text       model name, model attrs (JSON)
    per layer:
      text/u8/u8/text   name, kind, quantizable, attrs (as in the float container)
      quantizable layers:
        u32 rank, u32 extents     weight shape
        u8  frozen
        f64 weight scale
        u8  has activation scale, [f64 activation scale]
        u32 packed byte count, packed codes
      u8 flags (bit0 float weight, bit1 bias), float64 arrays

Codes are two's complement at ``bits_w`` bits, packed low bits first into
little-endian bytes, each tensor padded to a byte boundary. Biases and norm
parameters stay float64.
"""

import json

import numpy as np

from . import _kernels
from .errors import ConfigError, ContractError, FormatError
from .models import Layer, ModelGraph, Reader, Writer, read_layer_header, write_layer_header
from .quant import ACTIVATION, FakeQuantState, QuantParams, qrange, quantize_int
from .tensor import Tensor

QUANT_MAGIC = b"PTQATQ1"


def pack_codes(codes, bits):
    lo, hi = qrange(bits)
    codes = np.asarray(codes, dtype=np.int64)
    if codes.size and (codes.min() < lo or codes.max() > hi):
        raise ContractError(f"codes outside [{lo}, {hi}] for {bits}-bit packing")
    return _kernels.pack_bits(codes, bits).tobytes()


def unpack_codes(buf, bits, count):
    return _kernels.unpack_bits(buf, bits, count)


def packed_size(count, bits):
    return (count * bits + 7) // 8


def _model_bits(model):
    qlayers = model.quantizable_layers()
    if not qlayers:
        raise ContractError("export: model has no quantizable layer")
    missing = [l.name for l in qlayers if l.wq is None]
    if missing:
        raise ContractError(f"export: layers without a weight quantizer: {missing}")
    bw = {l.wq.bits for l in qlayers}
    ba = {None if l.aq is None else l.aq.bits for l in qlayers}
    if len(bw) != 1 or len(ba) != 1:
        raise ContractError(f"export: mixed bit widths are not supported (weights {sorted(bw)}, activations {ba})")
    return bw.pop(), ba.pop()


def export(model):
    """Serialize a quantized model to container bytes."""
    bits_w, bits_a = _model_bits(model)
    w = Writer()
    w.raw(QUANT_MAGIC)
    w.u8(bits_w)
    w.u8(bits_a or 0)
    w.u32(len(model.layers))
    w.text(model.name)
    w.text(json.dumps(model.attrs, sort_keys=True))
    for layer in model.layers:
        write_layer_header(w, layer)
        if layer.quantizable:
            p = layer.wq.params
            codes = quantize_int(layer.weight, p)
            w.u32(codes.ndim)
            for n in codes.shape:
                w.u32(n)
            w.u8(1 if layer.wq.frozen else 0)
            w.f64(p.scale)
            if layer.aq is not None:
                w.u8(1)
                w.f64(float(layer.aq.scale.data))
            else:
                w.u8(0)
            packed = pack_codes(codes, bits_w)
            w.u32(len(packed))
            w.raw(packed)
            floats = (None, layer.bias)
        else:
            floats = (layer.weight, layer.bias)
        w.u8((floats[0] is not None) | ((floats[1] is not None) << 1))
        for t in floats:
            if t is not None:
                w.array(t.data)
    return bytes(w.buf)


def _read_quant_layer(r, name, bits_w, bits_a):
    shape = r.shape(f"{name} weight shape")
    count = int(np.prod(shape)) if shape else 1
    at = r.pos
    frozen = r.u8(f"{name} frozen flag")
    if frozen > 1:
        raise FormatError(f"bad frozen flag {frozen} for {name}", at)
    at = r.pos
    scale = r.f64(f"{name} weight scale")
    if not scale > 0:
        raise FormatError(f"non-positive weight scale {scale!r} for {name}", at)
    at = r.pos
    has_act = r.u8(f"{name} activation flag")
    if has_act > 1 or bool(has_act) != bool(bits_a):
        raise FormatError(f"activation flag {has_act} for {name} disagrees with bits_a={bits_a}", at)
    act_scale = None
    if has_act:
        at = r.pos
        act_scale = r.f64(f"{name} activation scale")
        if not act_scale > 0:
            raise FormatError(f"non-positive activation scale {act_scale!r} for {name}", at)
    at = r.pos
    nbytes = r.u32(f"{name} packed size")
    if nbytes != packed_size(count, bits_w):
        raise FormatError(f"{name}: {nbytes} packed bytes for {count} codes at {bits_w} bits", at)
    buf = r.take(nbytes, f"{name} codes")
    codes = unpack_codes(buf, bits_w, count).reshape(shape)
    return codes, scale, bool(frozen), act_scale


def load(data):
    """Rebuild a quantized ``ModelGraph`` from container bytes.

    Weights are the dequantized values ``scale * code``; every quantizable
    layer gets a frozen weight quantizer (and activation quantizer when the
    container has one), so the forward pass matches the exported model.
    """
    r = Reader(data)
    if r.take(len(QUANT_MAGIC), "magic") != QUANT_MAGIC:
        raise FormatError("not a quantized model container (bad magic)", 0)
    at = r.pos
    bits_w = r.u8("bits_w")
    bits_a = r.u8("bits_a") or None
    for b in (bits_w, bits_a):
        if b is not None and not 2 <= b <= 8:
            raise FormatError(f"bit width {b} outside [2, 8]", at)
    count = r.u32("layer count")
    name = r.text("model name")
    at = r.pos
    try:
        attrs = json.loads(r.text("model attributes"))
    except json.JSONDecodeError:
        raise FormatError("model attributes are not valid JSON", at) from None
    layers = []
    for _ in range(count):
        lname, kind, quantizable, lattrs = read_layer_header(r)
        start = r.pos
        weight = wq = aq = None
        if quantizable:
            codes, scale, frozen, act_scale = _read_quant_layer(r, lname, bits_w, bits_a)
            weight = Tensor(scale * codes.astype(np.float64))
            wq = FakeQuantState(QuantParams(bits_w, scale, trainable=True), frozen=True)
            if act_scale is not None:
                aq = FakeQuantState(QuantParams(bits_a, act_scale, target=ACTIVATION), frozen=True)
        at = r.pos
        flags = r.u8("tensor flags")
        if flags > 3 or (quantizable and flags & 1):
            raise FormatError(f"bad tensor flags {flags} for {lname}", at)
        if flags & 1:
            weight = Tensor(r.array(f"{lname} weight"))
        bias = Tensor(r.array(f"{lname} bias")) if flags & 2 else None
        try:
            layers.append(Layer(lname, kind, weight, bias, quantizable, lattrs, wq, aq))
        except (ConfigError, ContractError) as e:
            raise FormatError(f"inconsistent layer record: {e}", start) from None
    r.done()
    return ModelGraph(name, layers, attrs)


def load_and_infer(data, x):
    """Logits of the exported model on input ``x`` (numpy array or Tensor)."""
    model = load(data)
    x = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    return model.forward(x).data


def payload_stats(data):
    """Byte counts of the packed code payloads versus their float64 equivalent."""
    model_bytes = bytes(data)
    m = load(model_bytes)
    bits = model_bytes[len(QUANT_MAGIC)]
    packed = floats = 0
    for layer in m.quantizable_layers():
        n = layer.weight.size
        packed += packed_size(n, bits)
        floats += 8 * n
    return {"bits_w": bits, "packed_bytes": packed, "float64_bytes": floats, "container_bytes": len(model_bytes)}
