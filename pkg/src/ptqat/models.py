"""
Model zoo: layer records, graph wiring and the float model container.

A ``ModelGraph`` is a flat, ordered list of named layers. Sequential graphs
(``mlp``, ``cnn_small``, ``sequential``) apply the list in order;
``tiny_transformer`` adds residual connections and the attention product as
fixed wiring around the same list, still visiting layers in list order.
"""

import json
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .data import BLOBS_CLASSES, BLOBS_DIM, TEXTURE_CLASSES, TEXTURE_SHAPE
from .errors import ConfigError, ContractError, DimensionError, FormatError
from .quant import fake_quant
from .tensor import Tensor

KINDS = ("conv2d", "linear", "attention_proj", "norm", "activation")
WEIGHTED_KINDS = ("conv2d", "linear", "attention_proj")
ARCHS = ("mlp", "cnn_small", "tiny_transformer")

# default task for each architecture
ARCH_TASK = {"mlp": "cls_blobs", "cnn_small": "cls_textures", "tiny_transformer": "cls_textures"}


@dataclass(eq=False)
class Layer:
    name: str
    kind: str
    weight: Tensor = None
    bias: Tensor = None
    quantizable: bool = False
    attrs: dict = field(default_factory=dict)
    wq: object = None  # FakeQuantState for the weight
    aq: object = None  # FakeQuantState for the input activation

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"layer {self.name!r}: unknown kind {self.kind!r}")
        if self.quantizable and (self.weight is None or self.kind not in WEIGHTED_KINDS):
            raise ContractError(f"layer {self.name!r}: only weighted conv/linear/projection layers can be quantizable")

    def params(self):
        return [t for t in (self.weight, self.bias) if t is not None]

    @property
    def n_params(self):
        return sum(t.size for t in self.params())

    def forward(self, a, weight=None, quantize=True):
        """Apply the layer to ``a``.

        ``weight`` overrides the stored weight (used by the pre-check to
        evaluate F(Q(W), A)). With ``quantize`` the attached activation and
        weight quantizers are applied; otherwise the layer runs in float.
        """
        kind = self.kind
        if kind == "activation":
            return T.gelu(a) if self.attrs.get("fn") == "gelu" else T.relu(a)
        if kind == "norm":
            h = T.layernorm(a, axis=-1, eps=self.attrs.get("eps", 1e-5))
            return h * self.weight + self.bias
        if quantize and self.aq is not None:
            a = fake_quant(a, self.aq)
        w = self.weight if weight is None else weight
        if weight is None and quantize and self.wq is not None:
            w = fake_quant(w, self.wq)
        if kind == "conv2d":
            return T.conv2d(a, w, self.attrs.get("stride", 1), self.attrs.get("pad", 0), bias=self.bias)
        if self.attrs.get("flatten") and a.ndim > 2:
            a = a.reshape(a.shape[0], -1)
        return T.linear(a, w, self.bias)


class ModelGraph:
    def __init__(self, name, layers, attrs=None):
        self.name = name
        self.layers = list(layers)
        self.attrs = dict(attrs or {})
        names = [l.name for l in self.layers]
        if len(set(names)) != len(names):
            dup = sorted({n for n in names if names.count(n) > 1})
            raise ConfigError(f"duplicate layer names: {dup}")
        self._index = {l.name: l for l in self.layers}

    def __repr__(self):
        return f"ModelGraph({self.name!r}, {len(self.layers)} layers)"

    def layer(self, name):
        try:
            return self._index[name]
        except KeyError:
            raise KeyError(f"no layer named {name!r} in model {self.name!r}") from None

    def quantizable_layers(self):
        return [l for l in self.layers if l.quantizable]

    def parameters(self):
        return [t for l in self.layers for t in l.params()]

    def hosts(self):
        """Map every non-quantizable weighted layer to the quantizable layer it trains with.

        A norm layer is hosted by the first quantizable layer after it (the
        one that consumes its output).
        """
        out = {}
        pending = []
        for l in self.layers:
            if l.quantizable:
                for p in pending:
                    out[p] = l.name
                pending = []
            elif l.params():
                pending.append(l.name)
        q = self.quantizable_layers()
        for p in pending:
            out[p] = q[-1].name if q else None
        return out

    def param_count(self, name):
        """Parameters owned by quantizable layer ``name`` incl. the norms it hosts."""
        hosted = [k for k, v in self.hosts().items() if v == name]
        return self.layer(name).n_params + sum(self.layer(h).n_params for h in hosted)

    # -- evaluation ---------------------------------------------------------

    def forward(self, x, quantize=True):
        x = x if isinstance(x, Tensor) else Tensor(x)
        return self._run(x, lambda layer, a: layer.forward(a, quantize=quantize))

    def predict(self, x, batch_size=256):
        """Logits for a numpy batch, evaluated in chunks."""
        x = np.asarray(x, dtype=np.float64)
        outs = [self.forward(x[i : i + batch_size]).data for i in range(0, len(x), batch_size)]
        return np.concatenate(outs, axis=0)

    def capture(self, x, names=None, float_only=True):
        """Run forward once, recording (input, output) arrays per quantizable layer."""
        wanted = set(names) if names is not None else {l.name for l in self.quantizable_layers()}
        seen = {}

        def visit(layer, a):
            out = layer.forward(a, quantize=not float_only)
            if layer.name in wanted:
                seen[layer.name] = (a.data, out.data)
            return out

        x = x if isinstance(x, Tensor) else Tensor(x)
        self._run(x, visit)
        return seen

    def _run(self, x, visit):
        if self.name == "tiny_transformer":
            return _transformer_program(self, x, visit)
        h = x
        for layer in self.layers:
            h = visit(layer, h)
        return h


# ---------------------------------------------------------------------------
# builders
# ---------------------------------------------------------------------------


def _uniform_tensor(rng, shape, fan_in):
    a = math.sqrt(1.0 / fan_in)
    return Tensor(rng.uniform(-a, a, size=shape))


def _dense(rng, name, n_in, n_out, kind="linear", **attrs):
    w = _uniform_tensor(rng, (n_out, n_in), n_in)
    b = _uniform_tensor(rng, (n_out,), n_in)
    return Layer(name, kind, w, b, quantizable=True, attrs=attrs)


def _conv(rng, name, c_in, c_out, k, stride, pad):
    fan_in = c_in * k * k
    w = _uniform_tensor(rng, (c_out, c_in, k, k), fan_in)
    b = _uniform_tensor(rng, (c_out,), fan_in)
    return Layer(name, "conv2d", w, b, quantizable=True, attrs={"stride": stride, "pad": pad})


def _norm(name, dim):
    return Layer(name, "norm", Tensor(np.ones(dim)), Tensor(np.zeros(dim)), attrs={"eps": 1e-5})


def _act(name, fn="relu"):
    return Layer(name, "activation", attrs={"fn": fn})


def build_model(arch, seed, n_in=None, n_classes=None):
    """Seeded model of architecture ``arch``.

    mlp               4 linear layers in->64->64->64->out with ReLU
    cnn_small         conv 3->16->32->32->64 (3x3, strides 1,2,1,2) + 2 linear
    tiny_transformer  patch embedding, 2 pre-norm blocks (q,k,v,o + 2-layer FFN), head
    """
    rng = np.random.default_rng(int(seed))
    if arch == "mlp":
        n_in = n_in or BLOBS_DIM
        n_out = n_classes or BLOBS_CLASSES
        dims = [n_in, 64, 64, 64, n_out]
        layers = []
        for i in range(4):
            layers.append(_dense(rng, f"fc{i + 1}", dims[i], dims[i + 1]))
            if i < 3:
                layers.append(_act(f"relu{i + 1}"))
        return ModelGraph("mlp", layers)
    if arch == "cnn_small":
        c_in = n_in or TEXTURE_SHAPE[0]
        n_out = n_classes or TEXTURE_CLASSES
        h = TEXTURE_SHAPE[1]
        chans = [c_in, 16, 32, 32, 64]
        layers = []
        for i, stride in enumerate((1, 2, 1, 2)):
            layers.append(_conv(rng, f"conv{i + 1}", chans[i], chans[i + 1], 3, stride, 1))
            layers.append(_act(f"relu{i + 1}"))
            h = T.conv_output_size(h, 3, stride, 1)
        layers.append(_dense(rng, "fc1", chans[-1] * h * h, 64, flatten=True))
        layers.append(_act("relu5"))
        layers.append(_dense(rng, "fc2", 64, n_out))
        return ModelGraph("cnn_small", layers)
    if arch == "tiny_transformer":
        c, hh, ww = TEXTURE_SHAPE
        patch, dim, heads, hidden = 4, 32, 2, 64
        n_out = n_classes or TEXTURE_CLASSES
        layers = [_dense(rng, "embed", c * patch * patch, dim)]
        for b in range(2):
            p = f"block{b}."
            layers.append(_norm(p + "norm1", dim))
            for proj in ("q", "k", "v", "o"):
                layers.append(_dense(rng, p + proj, dim, dim, kind="attention_proj"))
            layers.append(_norm(p + "norm2", dim))
            layers.append(_dense(rng, p + "ff1", dim, hidden))
            layers.append(_act(p + "gelu", "gelu"))
            layers.append(_dense(rng, p + "ff2", hidden, dim))
        layers.append(_norm("norm_f", dim))
        layers.append(_dense(rng, "head", dim, n_out))
        return ModelGraph("tiny_transformer", layers, attrs={"patch": patch, "heads": heads, "blocks": 2})
    raise ConfigError(f"unknown architecture {arch!r}; expected one of {ARCHS}")


def _patchify(x, patch):
    n, c, h, w = x.shape
    p = x.data.reshape(n, c, h // patch, patch, w // patch, patch)
    p = p.transpose(0, 2, 4, 1, 3, 5).reshape(n, (h // patch) * (w // patch), c * patch * patch)
    return Tensor(p)


def _transformer_program(model, x, visit):
    if x.ndim != 4:
        raise DimensionError(f"tiny_transformer expects [N,C,H,W] input, got {x.shape}")
    heads = model.attrs.get("heads", 2)
    L = model.layer
    h = visit(L("embed"), _patchify(x, model.attrs.get("patch", 4)))
    n, t, d = h.shape
    dh = d // heads
    for b in range(model.attrs.get("blocks", 2)):
        p = f"block{b}."
        a = visit(L(p + "norm1"), h)
        q, k, v = (visit(L(p + name), a) for name in ("q", "k", "v"))

        def split(z):
            return z.reshape(n, t, heads, dh).transpose((0, 2, 1, 3))

        att = T.softmax(T.matmul(split(q), split(k).transpose()) * (1.0 / math.sqrt(dh)), axis=-1)
        ctx = T.matmul(att, split(v)).transpose((0, 2, 1, 3)).reshape(n, t, d)
        h = h + visit(L(p + "o"), ctx)
        a = visit(L(p + "norm2"), h)
        h = h + visit(L(p + "ff2"), visit(L(p + "gelu"), visit(L(p + "ff1"), a)))
    h = visit(L("norm_f"), h).mean(axis=1)
    return visit(L("head"), h)


def sequential(layers, name="sequential"):
    """A plain sequential graph over hand-built layers (tests, experiments)."""
    return ModelGraph(name, layers)


def clone(model):
    """Deep copy of weights and quantizer state."""
    from .quant import FakeQuantState

    def copy_state(s):
        if s is None:
            return None
        c = FakeQuantState(s.params, frozen=s.frozen)
        return c

    layers = []
    for l in model.layers:
        layers.append(
            Layer(
                l.name,
                l.kind,
                None if l.weight is None else Tensor(l.weight.data.copy(), l.weight.requires_grad),
                None if l.bias is None else Tensor(l.bias.data.copy(), l.bias.requires_grad),
                l.quantizable,
                dict(l.attrs),
                copy_state(l.wq),
                copy_state(l.aq),
            )
        )
    return ModelGraph(model.name, layers, model.attrs)


# ---------------------------------------------------------------------------
# float model container
# ---------------------------------------------------------------------------

FLOAT_MAGIC = b"PTQATFM1"


class Writer:
    def __init__(self):
        self.buf = bytearray()

    def raw(self, b):
        self.buf += b

    def u8(self, v):
        self.buf += struct.pack("<B", v)

    def u16(self, v):
        self.buf += struct.pack("<H", v)

    def u32(self, v):
        self.buf += struct.pack("<I", v)

    def f64(self, v):
        self.buf += struct.pack("<d", v)

    def text(self, s):
        b = s.encode("utf-8")
        self.u16(len(b))
        self.buf += b

    def array(self, a):
        a = np.ascontiguousarray(a, dtype="<f8")
        self.u32(a.ndim)
        for n in a.shape:
            self.u32(n)
        self.buf += a.tobytes()


class Reader:
    def __init__(self, data):
        self.data = bytes(data)
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.data):
            raise FormatError(f"truncated container while reading {what}", self.pos)
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u8(self, what="u8"):
        return self.take(1, what)[0]

    def u16(self, what="u16"):
        return struct.unpack("<H", self.take(2, what))[0]

    def u32(self, what="u32"):
        return struct.unpack("<I", self.take(4, what))[0]

    def f64(self, what="f64"):
        return struct.unpack("<d", self.take(8, what))[0]

    def text(self, what="string"):
        n = self.u16(what + " length")
        start = self.pos
        try:
            return self.take(n, what).decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError(f"invalid UTF-8 in {what}", start) from None

    def shape(self, what="shape"):
        rank = self.u32(what + " rank")
        if rank > 8:
            raise FormatError(f"implausible tensor rank {rank} in {what}", self.pos - 4)
        return tuple(self.u32(what + " extent") for _ in range(rank))

    def array(self, what="tensor"):
        shape = self.shape(what)
        count = int(np.prod(shape)) if shape else 1
        raw = self.take(8 * count, what + " payload")
        return np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape)

    def done(self):
        if self.pos != len(self.data):
            raise FormatError(f"{len(self.data) - self.pos} trailing bytes after container", self.pos)


def write_layer_header(w, layer):
    w.text(layer.name)
    w.u8(KINDS.index(layer.kind))
    w.u8(1 if layer.quantizable else 0)
    w.text(json.dumps(layer.attrs, sort_keys=True))


def read_layer_header(r):
    name = r.text("layer name")
    at = r.pos
    kind = r.u8("kind byte")
    if kind >= len(KINDS):
        raise FormatError(f"unknown layer kind byte {kind}", at)
    quantizable = r.u8("quantizable byte")
    if quantizable > 1:
        raise FormatError(f"bad quantizable flag {quantizable}", r.pos - 1)
    at = r.pos
    try:
        attrs = json.loads(r.text("layer attributes"))
    except json.JSONDecodeError:
        raise FormatError("layer attributes are not valid JSON", at) from None
    return name, KINDS[kind], bool(quantizable), attrs


def save_model(model):
    """Serialize the float weights of ``model``."""
    w = Writer()
    w.raw(FLOAT_MAGIC)
    w.u32(len(model.layers))
    w.text(model.name)
    w.text(json.dumps(model.attrs, sort_keys=True))
    for layer in model.layers:
        write_layer_header(w, layer)
        w.u8((layer.weight is not None) | ((layer.bias is not None) << 1))
        for t in (layer.weight, layer.bias):
            if t is not None:
                w.array(t.data)
    return bytes(w.buf)


def load_model(data):
    r = Reader(data)
    if r.take(len(FLOAT_MAGIC), "magic") != FLOAT_MAGIC:
        raise FormatError("not a float model container (bad magic)", 0)
    count = r.u32("layer count")
    name = r.text("model name")
    try:
        attrs = json.loads(r.text("model attributes"))
    except json.JSONDecodeError:
        raise FormatError("model attributes are not valid JSON", r.pos) from None
    layers = []
    for _ in range(count):
        lname, kind, quantizable, lattrs = read_layer_header(r)
        at = r.pos
        flags = r.u8("tensor flags")
        if flags > 3:
            raise FormatError(f"bad tensor flags {flags}", at)
        weight = Tensor(r.array(f"{lname} weight")) if flags & 1 else None
        bias = Tensor(r.array(f"{lname} bias")) if flags & 2 else None
        try:
            layers.append(Layer(lname, kind, weight, bias, quantizable, lattrs))
        except (ConfigError, ContractError) as e:
            raise FormatError(f"inconsistent layer record: {e}", at) from None
    r.done()
    return ModelGraph(name, layers, attrs)
