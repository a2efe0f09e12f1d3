"""
Layer pre-check and fine-tune selection.

Each quantizable layer is scored in isolation: a single float forward pass
captures the layer's input ``A`` and output ``X = F(W, A)``, then
``X_Q = F(Q(W), A)`` is recomputed from the *same* captured input, so errors
from upstream layers never enter a layer's score. Layers whose score is
below the threshold are the ones that get fine-tuned.
"""

import json
import logging
import warnings
import zlib
from dataclasses import asdict, dataclass

import numpy as np

from .data import CALIB_BATCHES, iter_batches
from .errors import ConfigError, ContractError, DimensionError
from .quant import QuantParams, compute_scale, fake_quant_array
from .tensor import Tensor

logger = logging.getLogger(__name__)

MSE = "mse"
MSE_OPPOSITE = "mse-opposite"
COSINE = "cosine"
HUBER = "huber"
RANDOM = "random"
CRITERIA = (MSE, MSE_OPPOSITE, COSINE, HUBER, RANDOM)


class SelectionWarning(UserWarning):
    """The selection flagged no layer or every layer."""


@dataclass(frozen=True)
class Criterion:
    kind: str = MSE
    delta: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in CRITERIA:
            raise ConfigError(f"unknown criterion {self.kind!r}; expected one of {CRITERIA}")
        if self.kind == HUBER and not self.delta > 0:
            raise ConfigError(f"huber delta must be > 0, got {self.delta}")

    @classmethod
    def parse(cls, text, seed=0):
        """``mse``, ``mse-opposite``, ``cosine``, ``huber[:delta]``, ``random[:seed]``."""
        name, _, arg = text.strip().lower().replace("_", "-").partition(":")
        try:
            if name == HUBER:
                return cls(HUBER, delta=float(arg) if arg else 1.0)
            if name == RANDOM:
                return cls(RANDOM, seed=int(arg) if arg else int(seed))
        except ValueError:
            raise ConfigError(f"bad criterion argument in {text!r}") from None
        if arg:
            raise ConfigError(f"criterion {name!r} takes no argument")
        return cls(name)

    @property
    def label(self):
        if self.kind == HUBER:
            return f"huber:{self.delta!r}"
        if self.kind == RANDOM:
            return f"random:{self.seed}"
        return self.kind

    @property
    def selects_small(self):
        return self.kind != MSE_OPPOSITE


@dataclass
class LayerReport:
    layer: str
    dis: float
    fine_tune: bool
    param_count: int
    criterion: str

    def to_dict(self):
        return asdict(self)


def capture_pairs(model, calib, bits, batches=CALIB_BATCHES):
    """``[(layer, X, X_Q)]`` for every quantizable layer, pooled over the calibration batches."""
    if len(calib) == 0:
        raise ContractError("capture_pairs: empty calibration split")
    qlayers = model.quantizable_layers()
    if not qlayers:
        raise ContractError("capture_pairs: model has no quantizable layer")
    qweights = {}
    for layer in qlayers:
        p = QuantParams(bits, compute_scale(layer.weight, bits))
        qweights[layer.name] = Tensor(fake_quant_array(layer.weight.data, p))
    xs = {l.name: [] for l in qlayers}
    xqs = {l.name: [] for l in qlayers}
    for xb, _ in iter_batches(calib, batches=batches):
        captured = model.capture(xb, float_only=True)
        for layer in qlayers:
            a, x = captured[layer.name]
            xq = layer.forward(Tensor(a), weight=qweights[layer.name], quantize=False).data
            xs[layer.name].append(x)
            xqs[layer.name].append(xq)
    return [(l.name, np.concatenate(xs[l.name]), np.concatenate(xqs[l.name])) for l in qlayers]


def _random_draw(seed, layer):
    rng = np.random.default_rng([int(seed) & 0xFFFFFFFF, zlib.crc32(layer.encode("utf-8"))])
    return float(rng.random())


def distance(xq, x, criterion=Criterion(), layer=None):
    """Distortion between quantized and float outputs of one layer."""
    xq = np.asarray(xq.data if isinstance(xq, Tensor) else xq, dtype=np.float64)
    x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    if xq.shape != x.shape:
        raise DimensionError(f"distance: shapes differ, {xq.shape} vs {x.shape}")
    kind = criterion.kind
    if kind in (MSE, MSE_OPPOSITE):
        d = x - xq
        return float(np.mean(d * d))
    if kind == COSINE:
        a, b = xq.ravel(), x.ravel()
        na, nb = np.linalg.norm(a), np.linalg.norm(b)
        if na == 0.0 or nb == 0.0:
            return 0.0 if na == nb else 1.0
        return float(1.0 - np.dot(a, b) / (na * nb))
    if kind == HUBER:
        r = np.abs(x - xq)
        dl = criterion.delta
        return float(np.mean(np.where(r <= dl, 0.5 * r * r, dl * r - 0.5 * dl * dl)))
    if layer is None:
        raise ContractError("distance: the random criterion needs a layer name")
    return _random_draw(criterion.seed, layer)


def score(model, calib, bits, criterion=Criterion(), batches=CALIB_BATCHES, pairs=None):
    """Unflagged reports (``fine_tune`` False) for every quantizable layer."""
    if pairs is None:
        pairs = capture_pairs(model, calib, bits, batches)
    return [
        LayerReport(name, distance(xq, x, criterion, layer=name), False, model.param_count(name), criterion.label)
        for name, x, xq in pairs
    ]


def _flag(dis, theta, criterion):
    return dis < theta if criterion.selects_small else dis >= theta


def select(reports, criterion, theta):
    """Flag layers for fine-tuning: ``dis < theta`` (``dis >= theta`` for mse-opposite)."""
    if not theta > 0:
        raise ContractError(f"select: theta must be > 0, got {theta}")
    out = [LayerReport(r.layer, r.dis, bool(_flag(r.dis, theta, criterion)), r.param_count, criterion.label) for r in reports]
    _warn_degenerate(out)
    return out


def select_count(reports, criterion, count):
    """Flag exactly ``count`` layers by rank; equal scores go to the earlier layer."""
    n = len(reports)
    if not 0 <= count <= n:
        raise ContractError(f"select_count: count must be in [0, {n}], got {count}")
    if criterion.selects_small:
        order = sorted(range(n), key=lambda i: (reports[i].dis, i))
    else:
        order = sorted(range(n), key=lambda i: (-reports[i].dis, i))
    chosen = set(order[:count])
    out = [LayerReport(r.layer, r.dis, i in chosen, r.param_count, criterion.label) for i, r in enumerate(reports)]
    _warn_degenerate(out)
    return out


def _warn_degenerate(out):
    k = sum(r.fine_tune for r in out)
    if out and k == 0:
        warnings.warn("pre-check selected no layer for fine-tuning", SelectionWarning, stacklevel=3)
    elif out and k == len(out):
        warnings.warn("pre-check selected every layer for fine-tuning", SelectionWarning, stacklevel=3)


def match_count(reports, criterion, target_count):
    """Threshold at which ``select`` flags exactly ``target_count`` layers.

    The threshold sits midway between the neighbouring order statistics. When
    equal scores straddle that boundary (or a zero score has to stay
    unflagged, which no positive threshold allows) a warning is logged and
    ``select_count`` must be used for an exact count.
    """
    n = len(reports)
    if not 0 <= target_count <= n:
        raise ContractError(f"match_count: target_count must be in [0, {n}], got {target_count}")
    if n == 0:
        return 1.0
    d = sorted(r.dis for r in reports)
    # number of layers that must fall strictly below the threshold
    below = target_count if criterion.selects_small else n - target_count
    if below == 0:
        theta = d[0] / 2 if d[0] > 0 else 0.0
    elif below == n:
        theta = 2 * d[-1] + 1.0
    else:
        theta = 0.5 * (d[below - 1] + d[below])
    if not theta > 0:
        theta = float(np.nextafter(0.0, 1.0))
    got = sum(_flag(r.dis, theta, criterion) for r in reports)
    if got != target_count:
        logger.warning(
            "match_count: no threshold flags exactly %d layers (tied or zero scores, got %d); "
            "ties are broken by layer order",
            target_count,
            got,
        )
    return float(theta)


def precheck(model, calib, bits, criterion=Criterion(), theta=0.01, target_count=None, batches=CALIB_BATCHES):
    """Score and flag every quantizable layer.

    Returns ``(reports, theta, tie_broken)``. With ``target_count`` the
    threshold is derived by ``match_count``; if ties make that count
    unreachable, the selection falls back to ``select_count``.
    """
    raw = score(model, calib, bits, criterion, batches)
    if target_count is None:
        return select(raw, criterion, theta), theta, False
    theta = match_count(raw, criterion, target_count)
    out = select(raw, criterion, theta)
    if sum(r.fine_tune for r in out) != target_count:
        return select_count(raw, criterion, target_count), theta, True
    return out, theta, False


def reports_to_json(reports):
    return json.dumps([r.to_dict() for r in reports], indent=2)


def reports_from_json(text):
    rows = json.loads(text)
    if isinstance(rows, dict):
        rows = rows["layer_reports"]
    fields = ("layer", "dis", "fine_tune", "param_count", "criterion")
    out = []
    for row in rows:
        missing = [f for f in fields if f not in row]
        if missing:
            raise ContractError(f"layer report is missing fields {missing}")
        out.append(LayerReport(row["layer"], float(row["dis"]), bool(row["fine_tune"]), int(row["param_count"]), row["criterion"]))
    return out


def error_propagation(reference, quantized, calib, batches=CALIB_BATCHES):
    """Per-layer output MSE between two models run end to end.

    Unlike the pre-check, every layer here sees its own model's upstream
    activations, so the numbers show how quantization error accumulates
    along the network.
    """
    names = [l.name for l in reference.quantizable_layers()]
    sums = dict.fromkeys(names, 0.0)
    counts = dict.fromkeys(names, 0)
    for xb, _ in iter_batches(calib, batches=batches):
        ref = reference.capture(xb, float_only=True)
        got = quantized.capture(xb, float_only=False)
        for n in names:
            d = ref[n][1] - got[n][1]
            sums[n] += float((d * d).sum())
            counts[n] += d.size
    return [{"layer": n, "propagated_mse": sums[n] / counts[n]} for n in names]
