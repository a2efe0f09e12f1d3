import warnings

import numpy as np
import pytest

from ptqat import data, models
from ptqat.errors import ConfigError, ContractError
from ptqat.precheck import Criterion, precheck
from ptqat.quant import compute_scale
from ptqat.tensor import Tensor
from ptqat.trainer import (
    TrainingConfig,
    apply_ptq,
    quant_state,
    restore_quant_state,
    run,
    trainable_param_count,
)
from ptqat.training import RunReport, train_float, train_step

from oracles import scalar_codes, scalar_linear, scalar_scale


@pytest.fixture(scope="module")
def blobs():
    sp = data.make_splits("cls_blobs", 0, {"train": 512, "val": 256})
    m = models.build_model("mlp", 0)
    train_float(m, sp["train"], sp["val"], 4, 0.05, seed=0)
    return sp, models.save_model(m)


def fresh(blob):
    return models.load_model(blob)


def quiet_run(model, sp, cfg, **kw):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return run(model, sp, cfg, **kw)


def test_config_validation():
    with pytest.raises(ConfigError):
        TrainingConfig(mode="int8")
    with pytest.raises(ConfigError):
        TrainingConfig(bits_w=9)
    with pytest.raises(ConfigError):
        TrainingConfig(lr=0)
    with pytest.raises(ConfigError):
        TrainingConfig(theta=-1)
    assert TrainingConfig(criterion="huber:0.5").criterion == Criterion("huber", delta=0.5)
    assert TrainingConfig(bits_a=8).to_dict()["act_quant_site"] == "layer_input"


def test_apply_ptq_matches_oracle_and_is_idempotent():
    w = [[0.31, -0.77, 0.2], [0.93, 0.11, -0.4]]
    layer = models.Layer("fc", "linear", Tensor(np.array(w)), Tensor(np.array([0.1, -0.1])), True)
    m = models.sequential([layer])
    apply_ptq(m, 4)
    flat = [v for row in w for v in row]
    s = scalar_scale(flat, 4)
    wq = [[s * c for c in scalar_codes(row, s, 4)] for row in w]
    x = [[1.0, -2.0, 0.5]]
    assert np.allclose(m.forward(np.array(x)).data, scalar_linear(x, wq, [0.1, -0.1]), atol=1e-12)
    before = m.layer("fc").weight.data.copy()
    scale = float(m.layer("fc").wq.scale.data)
    apply_ptq(m, 4)
    assert np.array_equal(m.layer("fc").weight.data, before)
    assert float(m.layer("fc").wq.scale.data) == scale
    with pytest.raises(ContractError):
        apply_ptq(models.sequential([models.Layer("a", "activation")]), 4)


def test_apply_ptq_keeps_grid_weights_bitwise():
    w = np.array([[3.0, -7.0], [1.0, 0.0]]) / 7.0 * 0.5
    m = models.sequential([models.Layer("fc", "linear", Tensor(w.copy()), None, True)])
    x = np.random.default_rng(0).normal(size=(4, 2))
    ref = m.forward(x).data
    apply_ptq(m, 4)
    assert np.array_equal(m.forward(x).data, ref)


def test_modes_and_param_counts(blobs):
    sp, blob = blobs
    ptq = quiet_run(fresh(blob), sp, TrainingConfig(mode="ptq_only"))
    qat = quiet_run(fresh(blob), sp, TrainingConfig(mode="qat_only"))
    m = fresh(blob)
    hyb = quiet_run(m, sp, TrainingConfig(mode="ptqat", theta=0.01))
    assert ptq.trainable_params == 0
    assert qat.trainable_params == sum(t.size for t in fresh(blob).parameters()) + 4
    flagged = [r for r in hyb.layer_reports if r["fine_tune"]]
    assert hyb.trainable_params == sum(r["param_count"] + 1 for r in flagged)
    assert hyb.trainable_params <= qat.trainable_params
    assert all(l.wq.frozen for l in m.quantizable_layers())
    assert trainable_param_count(m) == 0


def test_theta_limits(blobs):
    sp, blob = blobs
    ptq = quiet_run(fresh(blob), sp, TrainingConfig(mode="ptq_only"))
    none = quiet_run(fresh(blob), sp, TrainingConfig(mode="ptqat", theta=1e-300))
    assert none.metric == ptq.metric and none.trainable_params == 0
    assert any("zero layers" in w for w in none.warnings)
    qat = quiet_run(fresh(blob), sp, TrainingConfig(mode="qat_only"))
    everything = quiet_run(fresh(blob), sp, TrainingConfig(mode="ptqat", theta=1e300))
    assert everything.trainable_params == qat.trainable_params
    assert everything.metric == qat.metric


def test_frozen_layers_stay_bitwise_at_ptq(blobs):
    sp, blob = blobs
    ref = fresh(blob)
    apply_ptq(ref, 4)
    m = fresh(blob)
    reports, _, _ = precheck(m, sp["calib"], 4, target_count=2)
    report = quiet_run(m, sp, TrainingConfig(mode="ptqat", epochs=2), reports=reports)
    frozen = [r["layer"] for r in report.layer_reports if not r["fine_tune"]]
    assert len(frozen) == 2
    for name in frozen:
        a, b = m.layer(name), ref.layer(name)
        assert np.array_equal(a.weight.data, b.weight.data)
        assert np.array_equal(a.bias.data, b.bias.data)
        assert a.wq.scale.data.tobytes() == b.wq.scale.data.tobytes()


def test_all_frozen_step_changes_nothing(blobs):
    sp, blob = blobs
    m = fresh(blob)
    apply_ptq(m, 4)
    before = [t.data.copy() for t in m.parameters()]
    xb, yb = next(data.iter_batches(sp["train"], batch_size=32))
    train_step(m, xb, yb, 0.1)
    assert all(np.array_equal(a, t.data) for a, t in zip(before, m.parameters()))


def test_unfrozen_scale_trains(blobs):
    sp, blob = blobs
    m = fresh(blob)
    quiet_run(m, sp, TrainingConfig(mode="qat_only", lr=0.05))
    moved = [float(l.wq.scale.data) != compute_scale(fresh(blob).layer(l.name).weight, 4) for l in m.quantizable_layers()]
    assert any(moved)


def test_hosted_norms_follow_host():
    sp = data.make_splits("cls_textures", 0, {"train": 32, "val": 16, "calib": 32})
    m = models.build_model("tiny_transformer", 0)
    reports, _, _ = precheck(m, sp["calib"], 4, target_count=1)
    host = next(r.layer for r in reports if r.fine_tune)
    hosted = [k for k, v in m.hosts().items() if v == host]
    frozen_norms = [k for k, v in m.hosts().items() if v != host]
    before = {n: models.clone(m).layer(n).weight.data.copy() for n in hosted + frozen_norms}
    report = quiet_run(m, sp, TrainingConfig(mode="ptqat", lr=0.5), reports=reports)
    assert report.trainable_params == m.param_count(host) + 1
    for n in frozen_norms:
        assert np.array_equal(m.layer(n).weight.data, before[n])


def test_w8a8_inserts_activation_quantizers(blobs):
    sp, blob = blobs
    m = fresh(blob)
    report = quiet_run(m, sp, TrainingConfig(mode="ptqat", bits_w=8, bits_a=8))
    assert all(l.aq is not None and l.aq.bits == 8 and l.aq.frozen for l in m.quantizable_layers())
    assert report.config["act_quant_site"] == "layer_input"


def test_determinism(blobs):
    sp, blob = blobs
    a = quiet_run(fresh(blob), sp, TrainingConfig(mode="ptqat", theta=0.05))
    b = quiet_run(fresh(blob), sp, TrainingConfig(mode="ptqat", theta=0.05))
    assert a.metric == b.metric and a.layer_reports == b.layer_reports


def test_quant_state_roundtrip(blobs):
    sp, blob = blobs
    m = fresh(blob)
    quiet_run(m, sp, TrainingConfig(mode="ptqat", bits_w=8, bits_a=8))
    state = quant_state(m)
    m2 = restore_quant_state(models.load_model(models.save_model(m)), state)
    assert np.array_equal(m.forward(sp["val"].inputs).data, m2.forward(sp["val"].inputs).data)


def test_report_roundtrip(blobs):
    sp, blob = blobs
    r = quiet_run(fresh(blob), sp, TrainingConfig(mode="ptq_only"))
    assert RunReport.from_dict(r.to_dict()) == r


def test_hybrid_cost_not_above_full_qat():
    # ptqat trains a subset, so its backward work and wall clock should not exceed full QAT
    sp = data.make_splits("cls_textures", 0, {"train": 256, "val": 32, "calib": 64})
    m0 = models.build_model("cnn_small", 0)
    reports, _, _ = precheck(m0, sp["calib"], 4, target_count=2)
    best = {}
    for _ in range(3):
        for mode in ("qat_only", "ptqat"):
            r = quiet_run(models.clone(m0), sp, TrainingConfig(mode=mode), reports=reports if mode == "ptqat" else None)
            best[mode] = min(best.get(mode, np.inf), r.wall_clock_s)
    assert best["ptqat"] <= best["qat_only"] * 1.1
