import numpy as np
import pytest

from ptqat import data, models
from ptqat.errors import ConfigError, ContractError, FormatError
from ptqat.tensor import Tensor
from ptqat.training import evaluate, train_float


@pytest.mark.parametrize("task", data.TASKS)
def test_dataset_determinism_and_balance(task):
    a = data.make_dataset(task, 100, 3)
    b = data.make_dataset(task, 100, 3)
    assert a.tobytes() == b.tobytes()
    counts = np.bincount(a.targets, minlength=a.n_classes)
    assert counts.max() - counts.min() <= 1
    assert abs(counts - 100 / a.n_classes).max() <= 1


def test_splits_are_distinct():
    sp = data.make_splits("cls_textures", 0, {"train": 64, "val": 64, "calib": 64})
    assert len({sp[s].tobytes() for s in data.SPLITS}) == 3
    assert data.make_dataset("cls_blobs", 10, 1).tobytes() != data.make_dataset("cls_blobs", 10, 2).tobytes()


def test_dataset_errors():
    with pytest.raises(ConfigError):
        data.make_dataset("nope", 10, 0)
    with pytest.raises(ContractError):
        data.make_dataset("cls_blobs", 0, 0)


def test_shapes():
    assert data.make_dataset("cls_blobs", 5, 0).inputs.shape == (5, data.BLOBS_DIM)
    assert data.make_dataset("cls_textures", 5, 0).inputs.shape == (5,) + data.TEXTURE_SHAPE


def test_iter_batches():
    d = data.make_dataset("cls_blobs", 20, 0)
    chunks = list(data.iter_batches(d, batches=8))
    assert len(chunks) == 8 and sum(len(y) for _, y in chunks) == 20
    a = [y.tolist() for _, y in data.iter_batches(d, batch_size=6, shuffle_seed=(1, 2))]
    b = [y.tolist() for _, y in data.iter_batches(d, batch_size=6, shuffle_seed=(1, 2))]
    assert a == b and [len(x) for x in a] == [6, 6, 6, 2]


def test_build_model_determinism_and_counts():
    m1, m2 = models.build_model("mlp", 7), models.build_model("mlp", 7)
    assert all(np.array_equal(a.data, b.data) for a, b in zip(m1.parameters(), m2.parameters()))
    assert [l.name for l in m1.quantizable_layers()] == ["fc1", "fc2", "fc3", "fc4"]
    assert m1.layer("fc2").weight.shape == (64, 64)
    cnn = models.build_model("cnn_small", 0)
    assert len(cnn.quantizable_layers()) == 6
    assert [l.weight.shape[:2] for l in cnn.quantizable_layers()[:4]] == [(16, 3), (32, 16), (32, 32), (64, 32)]
    assert [l.attrs["stride"] for l in cnn.quantizable_layers()[:4]] == [1, 2, 1, 2]
    tr = models.build_model("tiny_transformer", 0)
    # 1 embedding + 2 blocks x (4 projections + 2 feed-forward) + 1 head
    assert len(tr.quantizable_layers()) == 1 + 2 * (4 + 2) + 1
    assert sum(l.kind == "attention_proj" for l in tr.layers) == 8
    with pytest.raises(ConfigError):
        models.build_model("resnet", 0)


def test_init_bounds():
    m = models.build_model("cnn_small", 1)
    for layer in m.quantizable_layers():
        fan_in = int(np.prod(layer.weight.shape[1:]))
        assert np.abs(layer.weight.data).max() <= np.sqrt(1 / fan_in)


@pytest.mark.parametrize("arch", models.ARCHS)
def test_forward_shapes(arch):
    m = models.build_model(arch, 0)
    x = data.make_dataset(models.ARCH_TASK[arch], 3, 0).inputs
    out = m.forward(x).data
    assert out.shape == (3, data.BLOBS_CLASSES if arch == "mlp" else data.TEXTURE_CLASSES)


def test_layer_invariants():
    with pytest.raises(ConfigError):
        models.sequential([models.Layer("a", "linear", Tensor(np.ones((2, 2)))), models.Layer("a", "activation")])
    with pytest.raises(ContractError):
        models.Layer("n", "norm", Tensor(np.ones(2)), Tensor(np.zeros(2)), quantizable=True)


def test_hosts_and_param_count():
    m = models.build_model("tiny_transformer", 0)
    hosts = m.hosts()
    assert hosts["block0.norm1"] == "block0.q"
    assert hosts["block0.norm2"] == "block0.ff1"
    assert hosts["norm_f"] == "head"
    assert m.param_count("head") == m.layer("head").n_params + m.layer("norm_f").n_params


@pytest.mark.parametrize("arch", models.ARCHS)
def test_save_load_roundtrip(arch):
    m = models.build_model(arch, 2)
    blob = models.save_model(m)
    assert blob[:8] == models.FLOAT_MAGIC
    m2 = models.load_model(blob)
    x = np.random.default_rng(0).normal(size=(10,) + data.make_dataset(models.ARCH_TASK[arch], 1, 0).inputs.shape[1:])
    assert np.array_equal(m.forward(x).data, m2.forward(x).data)
    assert models.save_model(m2) == blob


def test_load_errors_carry_offsets():
    blob = models.save_model(models.build_model("mlp", 0))
    with pytest.raises(FormatError) as e:
        models.load_model(b"XXXXXXXX" + blob[8:])
    assert e.value.offset == 0
    with pytest.raises(FormatError) as e:
        models.load_model(blob[:100])
    assert "offset" in str(e.value)
    with pytest.raises(FormatError):
        models.load_model(blob + b"\0")


def test_training_is_deterministic_and_learns():
    sp = data.make_splits("cls_blobs", 0)
    reports = []
    weights = []
    for _ in range(2):
        m = models.build_model("mlp", 0)
        reports.append(train_float(m, sp["train"], sp["val"], 20, 0.05, seed=0))
        weights.append(models.save_model(m))
    assert weights[0] == weights[1]
    assert reports[0].metric == reports[1].metric
    assert reports[0].metric > 0.9
    assert evaluate(models.load_model(weights[0]), sp["val"]) == reports[0].metric
