"""SGD training loop, evaluation and the run report record."""

import json
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import iter_batches
from .errors import DimensionError
from .tensor import cross_entropy

BATCH_SIZE = 32


@dataclass
class RunReport:
    mode: str
    metric: float
    trainable_params: int
    wall_clock_s: float
    config: dict = field(default_factory=dict)
    layer_reports: list = field(default_factory=list)
    warnings: list = field(default_factory=list)

    def to_dict(self):
        return asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})


def evaluate(model, data, batch_size=256):
    """Classification accuracy of ``model`` on ``data`` in [0, 1]."""
    if len(data) == 0:
        raise ValueError("evaluate: empty dataset")
    logits = model.predict(data.inputs, batch_size=batch_size)
    return float(np.mean(np.argmax(logits, axis=1) == data.targets))


def trainable_tensors(model):
    out = [t for t in model.parameters() if t.requires_grad]
    for layer in model.layers:
        for st in (layer.wq, layer.aq):
            if st is not None and st.scale.requires_grad:
                out.append(st.scale)
    return out


def train_step(model, xb, yb, lr):
    """One plain-SGD step on every tensor that requires grad; returns the loss."""
    logits = model.forward(xb)
    if logits.shape[0] != len(yb):
        raise DimensionError(f"model produced {logits.shape[0]} rows for {len(yb)} labels")
    loss = cross_entropy(logits, yb)
    if not loss.requires_grad:
        return float(loss.data)
    loss.backward()
    for t in trainable_tensors(model):
        if t.grad is not None:
            t.data -= lr * t.grad
            t.grad = None
    for layer in model.layers:
        if layer.wq is not None and not layer.wq.frozen:
            layer.wq.clamp_scale()
    return float(loss.data)


def train_epochs(model, data, epochs, lr, seed, batch_size=BATCH_SIZE):
    losses = []
    for epoch in range(epochs):
        for xb, yb in iter_batches(data, batch_size=batch_size, shuffle_seed=(seed, epoch)):
            losses.append(train_step(model, xb, yb, lr))
    return losses


def train_float(model, train, val, epochs, lr, seed=0, batch_size=BATCH_SIZE):
    """Float SGD training in place; the report's metric is final val accuracy."""
    for t in model.parameters():
        t.requires_grad = True
    t0 = time.perf_counter()
    losses = train_epochs(model, train, epochs, lr, seed, batch_size)
    wall = time.perf_counter() - t0
    for t in model.parameters():
        t.requires_grad = False
    return RunReport(
        mode="float",
        metric=evaluate(model, val),
        trainable_params=sum(t.size for t in model.parameters()),
        wall_clock_s=wall,
        config={
            "arch": model.name,
            "task": train.task,
            "epochs": epochs,
            "lr": lr,
            "seed": seed,
            "batch_size": batch_size,
            "final_loss": losses[-1] if losses else None,
        },
    )
