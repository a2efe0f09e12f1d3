import csv
import json
import os

import numpy as np
import pytest

from ptqat import cli, models

GOLDEN = json.load(open(os.path.join(os.path.dirname(__file__), "golden", "schemas.json")))
SMALL = ["--n-train", "256", "--n-val", "128"]

TYPES = {
    "object": dict,
    "array": list,
    "string": str,
    "boolean": bool,
    "null": type(None),
}


def type_ok(value, spec):
    for t in spec.split("|"):
        if t == "integer" and isinstance(value, int) and not isinstance(value, bool):
            return True
        if t == "number" and isinstance(value, (int, float)) and not isinstance(value, bool):
            return True
        if t in TYPES and isinstance(value, TYPES[t]):
            return True
    return False


def check_schema(doc, schema):
    assert sorted(doc) == sorted(schema)
    for k, spec in schema.items():
        assert type_ok(doc[k], spec), (k, doc[k], spec)


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    path = str(d / "mlp.ptqfm")
    assert cli.main(["train", "--arch", "mlp", "--seed", "1", "--epochs", "3", "--out", path] + SMALL) == 0
    return d, path


def test_train_writes_model_and_report(trained):
    d, path = trained
    assert models.load_model(open(path, "rb").read()).name == "mlp"
    rep = json.load(open(str(d / "mlp.report.json")))
    check_schema(rep, GOLDEN["run_report"])
    assert rep["mode"] == "float"


def test_precheck_theta_and_match_count(trained, tmp_path, capsys):
    _, path = trained
    out = str(tmp_path / "pc.json")
    assert cli.main(["precheck", "--model", path, "--bits", "4", "--criterion", "mse", "--theta", "0.01", "--out", out]) == 0
    doc = json.load(open(out))
    check_schema(doc, GOLDEN["precheck_report"])
    for r in doc["layer_reports"]:
        check_schema(r, GOLDEN["layer_report"])
        assert r["fine_tune"] == (r["dis"] < 0.01)
    assert cli.main(["precheck", "--model", path, "--match-count", "0", "--out", out]) == 0
    assert not any(r["fine_tune"] for r in json.load(open(out))["layer_reports"])
    runs = []
    for _ in range(2):
        assert cli.main(["precheck", "--model", path, "--criterion", "random", "--seed", "1", "--out", out]) == 0
        runs.append(open(out).read())
    assert runs[0] == runs[1]


def test_run_outputs_and_schema(trained, tmp_path, capsys):
    _, path = trained
    out = str(tmp_path / "runs")
    assert cli.main(["run", "--model", path, "--mode", "ptqat", "--seed", "1", "--out", out] + SMALL) == 0
    line = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert set(line) == {"mode", "metric", "trainable_params"}
    rep = json.load(open(os.path.join(out, "run_ptqat_seed1.json")))
    check_schema(rep, GOLDEN["run_report"])
    assert set(GOLDEN["run_config_keys"]) <= set(rep["config"])
    for r in rep["layer_reports"]:
        check_schema(r, GOLDEN["layer_report"])
    for e in json.load(open(os.path.join(out, "run_ptqat_seed1.propagation.json"))):
        check_schema(e, GOLDEN["propagation_entry"])
    for e in json.load(open(os.path.join(out, "run_ptqat_seed1.qstate.json"))).values():
        check_schema(e, GOLDEN["quant_state_entry"])


def test_export_and_infer(trained, tmp_path, capsys):
    _, path = trained
    out = str(tmp_path / "runs")
    assert cli.main(["run", "--model", path, "--mode", "ptqat", "--bits-w", "8", "--bits-a", "8", "--out", out] + SMALL) == 0
    model_path = os.path.join(out, "run_ptqat_seed0.ptqfm")
    container = str(tmp_path / "m.ptqq")
    assert cli.main(["export", "--model", model_path, "--out", container]) == 0
    x = np.random.default_rng(0).normal(size=(3, 16))
    np.save(str(tmp_path / "x.npy"), x)
    capsys.readouterr()
    assert cli.main(["infer", "--container", container, "--input", str(tmp_path / "x.npy")]) == 0
    doc = json.loads(capsys.readouterr().out)
    assert len(doc["predicted"]) == 3 and np.array(doc["logits"]).shape == (3, 4)
    np.save(str(tmp_path / "one.npy"), x[0])
    assert cli.main(["infer", "--container", container, "--input", str(tmp_path / "one.npy")]) == 0
    assert isinstance(json.loads(capsys.readouterr().out)["predicted"], int)


def test_ablate_csv(trained, tmp_path):
    d, path = trained
    out = str(tmp_path / "ab.csv")
    template = str(d / "mlp{seed}.ptqfm")
    if not os.path.exists(template.format(seed=1)):
        os.link(path, template.format(seed=1))
    assert cli.main(["ablate", "--model", template, "--seeds", "1", "--out", out, "--report-dir", str(tmp_path / "r")] + SMALL) == 0
    text = open(out).read()
    assert text.splitlines()[0] == GOLDEN["ablation_header"]
    rows = list(csv.DictReader(open(out)))
    assert [r["criterion"] for r in rows] == ["mse", "mse-opposite", "cosine", "huber:1.0", "random:1"]
    assert len({len(r["selected_layers"].split(";")) for r in rows}) == 1
    assert len(os.listdir(str(tmp_path / "r"))) == 5


def test_config_file_and_override(trained, tmp_path, capsys):
    _, path = trained
    cfg = tmp_path / "run.cfg"
    cfg.write_text(f"# flat config\nmodel = {path}\nmode = qat_only\nbits_w = 8\nout = {tmp_path / 'o'}\nn-train = 256\n")
    assert cli.main(["--config", str(cfg), "run", "--mode", "ptq_only"]) == 0
    rep = json.load(open(str(tmp_path / "o" / "run_ptq_only_seed0.json")))
    assert rep["mode"] == "ptq_only" and rep["config"]["bits_w"] == 8
    cfg.write_text("this line has no equals sign\n")
    assert cli.main(["--config", str(cfg), "run"]) == 2
    cfg.write_text("unknown_flag = 3\n")
    assert cli.main(["--config", str(cfg), "run", "--model", path, "--mode", "ptqat", "--out", str(tmp_path)]) == 2


def test_exit_codes(trained, tmp_path):
    _, path = trained
    bogus = tmp_path / "bogus.ptqfm"
    bogus.write_bytes(b"not a model")
    assert cli.main(["run", "--model", str(bogus), "--mode", "ptqat", "--out", str(tmp_path)]) == 3
    assert cli.main(["run", "--model", str(tmp_path / "missing"), "--mode", "ptqat", "--out", str(tmp_path)]) == 3
    assert cli.main(["run", "--model", path, "--mode", "bogus", "--out", str(tmp_path)]) == 2
    assert cli.main(["run", "--model", path, "--mode", "ptqat", "--theta", "0", "--out", str(tmp_path)]) == 2
    assert cli.main(["run", "--model", path, "--mode", "qat_only", "--reports", "x.json", "--out", str(tmp_path)]) == 2
    assert cli.main(["ablate", "--model", path, "--criteria", "mse", "--out", str(tmp_path / "a.csv")]) == 2
    assert cli.main(["precheck", "--model", path, "--criterion", "l1"]) == 2
    assert cli.main(["infer", "--container", path, "--input", str(tmp_path / "nope.npy")]) == 3


def test_invariant_violation_maps_to_4():
    from ptqat.errors import InvariantError

    assert cli._code_for(InvariantError("x")) == 4
