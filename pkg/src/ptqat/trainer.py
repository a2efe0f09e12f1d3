"""
PTQ-only, QAT-only and hybrid fine-tuning runs.

In the hybrid mode every quantizable layer is first scored by the pre-check.
Layers that are *not* flagged are quantized once and frozen: their weights
are replaced by the dequantized codes and their scale is fixed. Flagged
layers keep a float shadow weight that is fake-quantized on every forward
pass and trained together with its scale.
"""

import time
import warnings
from dataclasses import asdict, dataclass, field

from .data import CALIB_BATCHES
from .errors import ConfigError, ContractError
from .precheck import Criterion, LayerReport, precheck
from .quant import ACTIVATION, FakeQuantState, QuantParams, compute_scale, fake_quant_array
from .quant import calibrate_activation
from .training import BATCH_SIZE, RunReport, evaluate, train_epochs

MODES = ("ptq_only", "qat_only", "ptqat")

# where activation fake-quant nodes sit in W8A8 runs
ACT_QUANT_SITE = "layer_input"


@dataclass
class TrainingConfig:
    mode: str = "ptqat"
    bits_w: int = 4
    bits_a: int = None
    epochs: int = 1
    lr: float = 0.005
    theta: float = 0.01
    criterion: Criterion = field(default_factory=Criterion)
    seed: int = 0
    batch_size: int = BATCH_SIZE
    calib_batches: int = CALIB_BATCHES

    def __post_init__(self):
        if isinstance(self.criterion, str):
            self.criterion = Criterion.parse(self.criterion, seed=self.seed)
        self.validate()

    def validate(self):
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        for name, bits in (("bits_w", self.bits_w), ("bits_a", self.bits_a)):
            if bits is not None and not (isinstance(bits, int) and 2 <= bits <= 8):
                raise ConfigError(f"{name} must be an integer in [2, 8], got {bits!r}")
        if not self.lr > 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")
        if not self.theta > 0:
            raise ConfigError(f"theta must be > 0, got {self.theta}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")

    def to_dict(self):
        d = asdict(self)
        d["criterion"] = self.criterion.label
        d["act_quant_site"] = ACT_QUANT_SITE if self.bits_a else None
        return d


def apply_ptq(model, bits_w, layers=None):
    """Quantize the weights of ``layers`` (default: every quantizable layer) in place.

    Each weight is replaced by its dequantized codes and gets a frozen
    quantizer. A layer that already carries a weight quantizer of the same
    width keeps its scale, which makes a second application a no-op.
    """
    qlayers = model.quantizable_layers()
    if not qlayers:
        raise ContractError("apply_ptq: model has no quantizable layer")
    names = None if layers is None else set(layers)
    for layer in qlayers:
        if names is not None and layer.name not in names:
            continue
        if layer.wq is not None and layer.wq.bits == bits_w:
            scale = float(layer.wq.scale.data)
        else:
            scale = compute_scale(layer.weight, bits_w)
        p = QuantParams(bits_w, scale, trainable=True)
        layer.weight.data = fake_quant_array(layer.weight.data, p)
        layer.wq = FakeQuantState(p, frozen=True)
    return model


def calibrate_activations(model, calib, bits, batches=CALIB_BATCHES):
    """Attach frozen input-activation quantizers to every quantizable layer."""
    for layer in model.quantizable_layers():
        p = calibrate_activation(model, layer.name, calib, bits, batches=batches)
        layer.aq = FakeQuantState(p, frozen=True)
    return model


def _unfreeze(model, layer, bits_w):
    p = QuantParams(bits_w, compute_scale(layer.weight, bits_w), trainable=True)
    layer.wq = FakeQuantState(p, frozen=False)


def _set_trainable(model, unfrozen):
    hosts = model.hosts()
    for layer in model.layers:
        if layer.quantizable:
            on = layer.name in unfrozen
        else:
            on = hosts.get(layer.name) in unfrozen
        for t in layer.params():
            t.requires_grad = on


def trainable_param_count(model):
    """Unfrozen weights/biases (with hosted norms) plus one scale per unfrozen layer."""
    n = 0
    for layer in model.quantizable_layers():
        if layer.wq is not None and not layer.wq.frozen:
            n += model.param_count(layer.name) + 1
    return n


def run(model, splits, cfg, reports=None):
    """Run ``cfg.mode`` on a float-trained ``model`` in place and evaluate it.

    ``splits`` maps ``calib`` / ``train`` / ``val`` to datasets. ``reports``
    may carry a precomputed flagged pre-check (hybrid mode only).
    """
    cfg.validate()
    calib, train, val = splits["calib"], splits["train"], splits["val"]
    notes = []
    config = cfg.to_dict()
    config.update(arch=model.name, task=train.task)
    layer_reports = []
    t0 = time.perf_counter()
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        if cfg.bits_a:
            calibrate_activations(model, calib, cfg.bits_a, cfg.calib_batches)
        qnames = [l.name for l in model.quantizable_layers()]
        if cfg.mode == "ptq_only":
            unfrozen = set()
        elif cfg.mode == "qat_only":
            unfrozen = set(qnames)
        else:
            if reports is None:
                reports, theta, tie = precheck(model, calib, cfg.bits_w, cfg.criterion, cfg.theta, batches=cfg.calib_batches)
                if tie:
                    notes.append("selection count reached by rank: tied scores")
            layer_reports = [r if isinstance(r, LayerReport) else LayerReport(**r) for r in reports]
            unfrozen = {r.layer for r in layer_reports if r.fine_tune}
            if not unfrozen:
                notes.append("ptqat selected zero layers; run degenerates to ptq_only")
        apply_ptq(model, cfg.bits_w, layers=[n for n in qnames if n not in unfrozen])
        for name in qnames:
            if name in unfrozen:
                _unfreeze(model, model.layer(name), cfg.bits_w)
        _set_trainable(model, unfrozen)
        if unfrozen and cfg.epochs:
            train_epochs(model, train, cfg.epochs, cfg.lr, cfg.seed, cfg.batch_size)
        _set_trainable(model, set())
        for layer in model.quantizable_layers():
            layer.wq.frozen = True
    wall = time.perf_counter() - t0
    notes.extend(str(w.message) for w in caught if issubclass(w.category, UserWarning))
    return RunReport(
        mode=cfg.mode,
        metric=evaluate(model, val),
        trainable_params=_count(model, unfrozen),
        wall_clock_s=wall,
        config=config,
        layer_reports=[r.to_dict() for r in layer_reports],
        warnings=notes,
    )


def _count(model, unfrozen):
    return sum(model.param_count(n) + 1 for n in unfrozen)


def quant_state(model):
    """JSON-friendly snapshot of every quantizer attached to ``model``."""
    out = {}
    for layer in model.quantizable_layers():
        if layer.wq is None:
            continue
        out[layer.name] = {
            "bits_w": layer.wq.bits,
            "weight_scale": float(layer.wq.scale.data),
            "frozen": layer.wq.frozen,
            "bits_a": None if layer.aq is None else layer.aq.bits,
            "act_scale": None if layer.aq is None else float(layer.aq.scale.data),
        }
    return out


def restore_quant_state(model, state):
    for name, s in state.items():
        layer = model.layer(name)
        layer.wq = FakeQuantState(QuantParams(s["bits_w"], s["weight_scale"], trainable=True), frozen=s.get("frozen", True))
        if s.get("bits_a"):
            layer.aq = FakeQuantState(QuantParams(s["bits_a"], s["act_scale"], target=ACTIVATION), frozen=True)
    return model
