"""Deterministic synthetic classification tasks."""

import zlib
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContractError

TASKS = ("cls_blobs", "cls_textures")
SPLITS = ("calib", "train", "val")

BLOBS_DIM = 16
BLOBS_CLASSES = 4
TEXTURE_SHAPE = (3, 16, 16)
TEXTURE_CLASSES = 8

# calibration pass: fixed number of equal batches
CALIB_BATCHES = 8
CALIB_BATCH_SIZE = 32

# default split sizes used by the CLI and the experiment helpers
SPLIT_SIZES = {
    "cls_blobs": {"train": 2000, "val": 1000, "calib": CALIB_BATCHES * CALIB_BATCH_SIZE},
    "cls_textures": {"train": 2400, "val": 1200, "calib": CALIB_BATCHES * CALIB_BATCH_SIZE},
}


@dataclass(eq=False)
class Dataset:
    task: str
    split: str
    seed: int
    inputs: np.ndarray
    targets: np.ndarray

    def __len__(self):
        return len(self.targets)

    @property
    def n_classes(self):
        return BLOBS_CLASSES if self.task == "cls_blobs" else TEXTURE_CLASSES

    def tobytes(self):
        return self.inputs.tobytes() + self.targets.tobytes()


def _rng(*keys):
    return np.random.default_rng([int(k) & 0xFFFFFFFF for k in keys])


def _key(name):
    return zlib.crc32(name.encode("utf-8"))


def _balanced_labels(n, k, rng):
    return rng.permutation(np.arange(n) % k)


def _task_rng(task):
    # class definitions are fixed per task, independent of the sample seed
    return _rng(_key(task), 0x5EED)


def _blob_centers():
    return 1.25 * _task_rng("cls_blobs").normal(size=(BLOBS_CLASSES, BLOBS_DIM))


# texture generator knobs: class c is a near-horizontal grating of
# TEXTURE_F0 + c * TEXTURE_DF cycles per image width
TEXTURE_F0 = 1.0
TEXTURE_DF = 0.3
TEXTURE_FREQ_JITTER = 0.03
TEXTURE_ANGLE_JITTER = 0.05
TEXTURE_NOISE = 1.0


def _texture_classes():
    """Per-class grating frequency in cycles per image width."""
    return TEXTURE_F0 + TEXTURE_DF * np.arange(TEXTURE_CLASSES)


def make_dataset(task, n, seed, split="train"):
    """Generate ``n`` samples of ``task`` for ``split``; a pure function of its arguments."""
    if task not in TASKS:
        raise ConfigError(f"unknown task {task!r}; expected one of {TASKS}")
    if split not in SPLITS:
        raise ConfigError(f"unknown split {split!r}; expected one of {SPLITS}")
    if n < 1:
        raise ContractError(f"dataset size must be >= 1, got {n}")
    rng = _rng(seed, _key(task), SPLITS.index(split) + 1)
    if task == "cls_blobs":
        y = _balanced_labels(n, BLOBS_CLASSES, rng)
        x = _blob_centers()[y] + rng.normal(size=(n, BLOBS_DIM))
    else:
        y = _balanced_labels(n, TEXTURE_CLASSES, rng)
        x = _textures(y, rng)
    return Dataset(task, split, int(seed), np.ascontiguousarray(x, dtype=np.float64), y.astype(np.int64))


def _textures(y, rng):
    c, h, w = TEXTURE_SHAPE
    n = len(y)
    yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    angle = rng.normal(scale=TEXTURE_ANGLE_JITTER, size=n)
    freq = _texture_classes()[y] * (1.0 + rng.normal(scale=TEXTURE_FREQ_JITTER, size=n))
    phase = rng.uniform(0, 2 * np.pi, size=n)
    amp = rng.uniform(0.6, 1.4, size=n)
    u = np.cos(angle)[:, None, None] * xx + np.sin(angle)[:, None, None] * yy
    wave = amp[:, None, None] * np.sin(2 * np.pi * freq[:, None, None] * u / w + phase[:, None, None])
    # per-sample colour: the pattern shows up in every channel with its own gain
    colour = rng.uniform(0.2, 1.0, size=(n, c))
    img = colour[:, :, None, None] * wave[:, None]
    return img + rng.normal(scale=TEXTURE_NOISE, size=(n, c, h, w))


def make_splits(task, seed, sizes=None):
    """calib / train / val datasets for ``task`` under one seed."""
    sizes = dict(SPLIT_SIZES[task], **(sizes or {}))
    return {s: make_dataset(task, sizes[s], seed, s) for s in SPLITS}


def iter_batches(data, batch_size=None, batches=None, shuffle_seed=None):
    """Yield ``(inputs, targets)`` minibatches.

    Pass ``batches`` to split into that many near-equal consecutive chunks
    (the calibration convention), or ``batch_size`` for fixed-size batches;
    ``shuffle_seed`` permutes the sample order first.
    """
    n = len(data)
    if shuffle_seed is None:
        order = np.arange(n)
    else:
        order = _rng(*np.atleast_1d(shuffle_seed), 0xBA7C).permutation(n)
    if batches is not None:
        chunks = np.array_split(order, min(batches, n))
    else:
        bs = batch_size or n
        chunks = [order[i : i + bs] for i in range(0, n, bs)]
    for idx in chunks:
        yield data.inputs[idx], data.targets[idx]
