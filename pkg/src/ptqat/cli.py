"""
Command line front end.

Subcommands: train, precheck, run, ablate, export, infer. Any flag can also
come from a flat ``key = value`` file passed with ``--config``; flags given on
the command line win. Exit codes: 0 success, 2 configuration error, 3 input
format error, 4 internal invariant violation.
"""

import argparse
import csv
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from . import __version__
from .data import TASKS, make_splits
from .errors import ConfigError, ContractError, FormatError, InvariantError
from .export import export, load_and_infer
from .models import ARCH_TASK, ARCHS, build_model, clone, load_model, save_model
from .precheck import CRITERIA, MSE, Criterion, error_propagation, precheck, reports_from_json
from .trainer import MODES, TrainingConfig, quant_state, restore_quant_state, run
from .training import train_float

logger = logging.getLogger("ptqat")

EXIT_OK, EXIT_CONFIG, EXIT_FORMAT, EXIT_INTERNAL = 0, 2, 3, 4

ABLATION_FIELDS = ("criterion", "seed", "metric", "trainable_params", "selected_layers")
DEFAULT_ABLATION = ("mse", "mse-opposite", "cosine", "huber", "random")

# defaults for float pretraining and fine-tuning (fine-tune lr = pretrain lr / 10)
PRETRAIN_EPOCHS = 20
PRETRAIN_LR = 0.05
PRETRAIN_BATCH_SIZE = 16
FINETUNE_LR = PRETRAIN_LR / 10


class CLIError(Exception):
    def __init__(self, message, code):
        super().__init__(message)
        self.code = code


# -- config file ---------------------------------------------------------------

def read_config(path):
    """Parse ``key = value`` lines into a dict; ``#`` starts a comment."""
    try:
        lines = open(path, encoding="utf-8").read().splitlines()
    except OSError as e:
        raise CLIError(f"cannot read config {path}: {e.strerror}", EXIT_CONFIG) from None
    out = {}
    for n, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise CLIError(f"{path}:{n}: expected key = value, got {line!r}", EXIT_CONFIG)
        out[key.strip().replace("_", "-")] = value.strip()
    return out


def config_argv(cfg):
    """Turn config entries into flags; ``true``/``false`` toggle store-true flags."""
    argv = []
    for key, value in cfg.items():
        low = value.lower()
        if low in ("true", "yes", "on"):
            argv.append(f"--{key}")
        elif low in ("false", "no", "off"):
            continue
        else:
            argv += [f"--{key}", value]
    return argv


def _int_list(text):
    try:
        out = []
        for part in str(text).split(","):
            part = part.strip()
            if "-" in part[1:]:
                a, b = part.split("-", 1)
                out.extend(range(int(a), int(b) + 1))
            elif part:
                out.append(int(part))
        return out
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected integers like 0,1,2 or 0-4, got {text!r}") from None


def _str_list(text):
    return [p.strip() for p in str(text).split(",") if p.strip()]


# -- helpers -------------------------------------------------------------------

def _read_bytes(path):
    try:
        with open(path, "rb") as f:
            return f.read()
    except OSError as e:
        raise CLIError(f"cannot read {path}: {e.strerror}", EXIT_FORMAT) from None


def _write(path, data):
    d = os.path.dirname(path)
    if d:
        os.makedirs(d, exist_ok=True)
    mode = "wb" if isinstance(data, bytes) else "w"
    with open(path, mode) as f:
        f.write(data)


def _load_float(path):
    return load_model(_read_bytes(path))


def _task_for(model, task):
    if task:
        return task
    if model.name in ARCH_TASK:
        return ARCH_TASK[model.name]
    raise ConfigError(f"--task is required for model {model.name!r}")


def _splits(task, seed, args):
    sizes = {}
    for split in ("train", "val", "calib"):
        n = getattr(args, f"n_{split}", None)
        if n:
            sizes[split] = n
    return make_splits(task, seed, sizes)


def _criterion(text, seed):
    return Criterion.parse(text, seed=seed)


def state_path(model_path):
    return os.path.splitext(model_path)[0] + ".qstate.json"


# -- subcommands ---------------------------------------------------------------

def cmd_train(args):
    task = args.task or ARCH_TASK[args.arch]
    splits = _splits(task, args.seed, args)
    model = build_model(args.arch, args.seed)
    report = train_float(model, splits["train"], splits["val"], args.epochs, args.lr, seed=args.seed, batch_size=args.batch_size)
    report.config.update(vars_config(args))
    _write(args.out, save_model(model))
    _write(args.report or os.path.splitext(args.out)[0] + ".report.json", report.to_json())
    print(json.dumps({"mode": report.mode, "metric": report.metric, "trainable_params": report.trainable_params}))


def cmd_precheck(args):
    model = _load_float(args.model)
    task = _task_for(model, args.task)
    calib = _splits(task, args.seed, args)["calib"]
    crit = _criterion(args.criterion, args.seed)
    reports, theta, tie = precheck(model, calib, args.bits, crit, args.theta, target_count=args.match_count)
    doc = {
        "theta": theta,
        "tie_broken": tie,
        "config": vars_config(args, task=task, theta=theta),
        "layer_reports": [r.to_dict() for r in reports],
    }
    text = json.dumps(doc, indent=2, sort_keys=True)
    if args.out:
        _write(args.out, text)
    else:
        print(text)
    flagged = [r.layer for r in reports if r.fine_tune]
    logger.info("pre-check at theta=%g flags %d/%d layers: %s", theta, len(flagged), len(reports), ",".join(flagged))


def _config_from(args):
    return TrainingConfig(
        mode=args.mode,
        bits_w=args.bits_w,
        bits_a=args.bits_a,
        epochs=args.epochs,
        lr=args.lr,
        theta=args.theta,
        criterion=_criterion(args.criterion, args.seed),
        seed=args.seed,
        batch_size=args.batch_size,
    )


def cmd_run(args):
    if args.mode == "ptq_only" and args.epochs_given:
        logger.warning("ptq_only ignores --epochs")
    if args.reports and args.mode != "ptqat":
        raise ConfigError("--reports only applies to --mode ptqat")
    model = _load_float(args.model)
    task = _task_for(model, args.task)
    splits = _splits(task, args.seed, args)
    cfg = _config_from(args)
    reports = None
    if args.reports:
        try:
            reports = reports_from_json(_read_bytes(args.reports).decode("utf-8"))
        except (ValueError, UnicodeDecodeError) as e:
            raise CLIError(f"bad pre-check report {args.reports}: {e}", EXIT_FORMAT) from None
    reference = clone(model)
    report = run(model, splits, cfg, reports=reports)
    report.config.update(vars_config(args, task=task))
    os.makedirs(args.out, exist_ok=True)
    stem = os.path.join(args.out, f"run_{cfg.mode}_seed{cfg.seed}")
    _write(stem + ".json", report.to_json())
    _write(stem + ".ptqfm", save_model(model))
    _write(stem + ".qstate.json", json.dumps(quant_state(model), indent=2, sort_keys=True))
    prop = error_propagation(reference, model, splits["calib"])
    _write(stem + ".propagation.json", json.dumps(prop, indent=2))
    print(json.dumps({"mode": report.mode, "metric": report.metric, "trainable_params": report.trainable_params}))


def _ablate_job(job):
    model_path, task, criterion, seed, opts = job
    try:
        model = _load_float(model_path)
        task = _task_for(model, task)
        splits = make_splits(task, seed, opts["sizes"])
        bits = opts["bits_w"]
        mse_reports, _, _ = precheck(model, splits["calib"], bits, Criterion(MSE), opts["theta"])
        count = sum(r.fine_tune for r in mse_reports)
        crit = _criterion(criterion, seed)
        reports, theta, tie = precheck(model, splits["calib"], bits, crit, target_count=count)
        cfg = TrainingConfig(
            mode="ptqat", bits_w=bits, epochs=opts["epochs"], lr=opts["lr"], theta=theta,
            criterion=crit, seed=seed, batch_size=opts["batch_size"],
        )
        report = run(model, splits, cfg, reports=reports)
    except CLIError:
        raise
    except Exception as e:
        raise CLIError(f"ablation run failed for criterion={criterion} seed={seed} model={model_path}: {e}", _code_for(e)) from None
    selected = [r.layer for r in reports if r.fine_tune]
    report.config.update(model=model_path, matched_count=count, tie_broken=tie)
    row = {
        "criterion": crit.label,
        "seed": seed,
        "metric": repr(report.metric),
        "trainable_params": report.trainable_params,
        "selected_layers": ";".join(selected),
    }
    return row, report


def cmd_ablate(args):
    criteria = args.criteria
    if len(criteria) < 2:
        raise ConfigError("ablate needs at least two criteria")
    for c in criteria:
        Criterion.parse(c)
    opts = {
        "bits_w": args.bits_w, "theta": args.theta, "epochs": args.epochs, "lr": args.lr,
        "batch_size": args.batch_size, "sizes": {k: v for k, v in (("train", args.n_train), ("val", args.n_val), ("calib", args.n_calib)) if v},
    }
    jobs = [(args.model.format(seed=s), args.task, c, s, opts) for s in args.seeds for c in criteria]
    if args.workers > 1:
        with ProcessPoolExecutor(max_workers=args.workers) as pool:
            results = list(pool.map(_ablate_job, jobs))
    else:
        results = [_ablate_job(j) for j in jobs]
    counts = {}
    for row, _ in results:
        counts.setdefault(row["seed"], set()).add(len(row["selected_layers"].split(";")) if row["selected_layers"] else 0)
    bad = {s: sorted(c) for s, c in counts.items() if len(c) != 1}
    if bad:
        raise InvariantError(f"selection counts differ across criteria: {bad}")
    d = os.path.dirname(args.out)
    if d:
        os.makedirs(d, exist_ok=True)
    with open(args.out, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=ABLATION_FIELDS, lineterminator="\n")
        w.writeheader()
        for row, _ in results:
            w.writerow(row)
    if args.report_dir:
        for row, report in results:
            name = f"ablate_{row['criterion'].replace(':', '_')}_seed{row['seed']}.json"
            _write(os.path.join(args.report_dir, name), report.to_json())
    for c in dict.fromkeys(r["criterion"] for r, _ in results):
        vals = [float(r["metric"]) for r, _ in results if r["criterion"] == c]
        print(f"{c:14s} mean metric {np.mean(vals):.4f} over {len(vals)} seeds")


def cmd_export(args):
    model = _load_float(args.model)
    sidecar = args.state or state_path(args.model)
    try:
        state = json.loads(_read_bytes(sidecar).decode("utf-8"))
        restore_quant_state(model, state)
    except (ValueError, KeyError, TypeError, UnicodeDecodeError) as e:
        raise CLIError(f"bad quantizer state {sidecar}: {e}", EXIT_FORMAT) from None
    blob = export(model)
    _write(args.out, blob)
    print(json.dumps({"container": args.out, "bytes": len(blob)}))


def cmd_infer(args):
    blob = _read_bytes(args.container)
    try:
        x = np.load(args.input, allow_pickle=False)
    except (OSError, ValueError) as e:
        raise CLIError(f"cannot read input {args.input}: {e}", EXIT_FORMAT) from None
    single = False
    logits = load_and_infer(blob, x)
    if logits.ndim == 1:
        single = True
    pred = np.argmax(logits, axis=-1)
    doc = {"predicted": pred.tolist(), "logits": logits.tolist()}
    if single:
        doc["predicted"] = int(pred)
    print(json.dumps(doc))


def vars_config(args, **extra):
    """Effective flag values echoed into reports."""
    skip = {"func", "config", "verbose", "epochs_given"}
    out = {k: v for k, v in vars(args).items() if k not in skip}
    out.update(extra)
    return out


# -- parser --------------------------------------------------------------------

def _add_sizes(p):
    p.add_argument("--n-train", type=int, default=None, help="training split size")
    p.add_argument("--n-val", type=int, default=None, help="validation split size")
    p.add_argument("--n-calib", type=int, default=None, help="calibration split size")


def build_parser():
    parser = argparse.ArgumentParser(prog="ptqat", description="Hybrid PTQ / QAT experiments at desk scale.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--config", default=None, help="flat key = value file; flags override it")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", parents=[common], help="train a float model")
    p.add_argument("--arch", required=True, choices=ARCHS)
    p.add_argument("--task", choices=TASKS, default=None, help="default: the architecture's task")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epochs", type=int, default=PRETRAIN_EPOCHS)
    p.add_argument("--lr", type=float, default=PRETRAIN_LR)
    p.add_argument("--batch-size", type=int, default=PRETRAIN_BATCH_SIZE)
    p.add_argument("--out", required=True, help="float model file to write")
    p.add_argument("--report", default=None, help="RunReport path (default: next to --out)")
    _add_sizes(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("precheck", parents=[common], help="score and flag layers")
    p.add_argument("--model", required=True)
    p.add_argument("--task", choices=TASKS, default=None)
    p.add_argument("--bits", type=int, default=4)
    p.add_argument("--criterion", default=MSE, help=f"one of {', '.join(CRITERIA)}; huber:DELTA, random:SEED")
    g = p.add_mutually_exclusive_group()
    g.add_argument("--theta", type=float, default=0.01)
    g.add_argument("--match-count", type=int, default=None, help="pick theta so exactly N layers are flagged")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None, help="report path (default: stdout)")
    _add_sizes(p)
    p.set_defaults(func=cmd_precheck)

    p = sub.add_parser("run", parents=[common], help="ptq_only / qat_only / ptqat on a float model")
    p.add_argument("--model", required=True)
    p.add_argument("--task", choices=TASKS, default=None)
    p.add_argument("--mode", required=True, choices=MODES)
    p.add_argument("--bits-w", type=int, default=4)
    p.add_argument("--bits-a", type=int, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--lr", type=float, default=FINETUNE_LR)
    p.add_argument("--theta", type=float, default=0.01)
    p.add_argument("--criterion", default=MSE)
    p.add_argument("--reports", default=None, help="precomputed pre-check report (ptqat)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--out", required=True, help="output directory")
    _add_sizes(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("ablate", parents=[common], help="compare selection criteria at equal selection size")
    p.add_argument("--model", required=True, help="float model file; may contain {seed}")
    p.add_argument("--task", choices=TASKS, default=None)
    p.add_argument("--bits-w", type=int, default=4)
    p.add_argument("--criteria", type=_str_list, default=list(DEFAULT_ABLATION))
    p.add_argument("--seeds", type=_int_list, default=[0, 1, 2, 3, 4])
    p.add_argument("--theta", type=float, default=0.01)
    p.add_argument("--epochs", type=int, default=1)
    p.add_argument("--lr", type=float, default=FINETUNE_LR)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", required=True, help="CSV path")
    p.add_argument("--report-dir", default=None, help="also write one RunReport per row")
    _add_sizes(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("export", parents=[common], help="pack a run's model into the integer container")
    p.add_argument("--model", required=True, help="model file written by run")
    p.add_argument("--state", default=None, help="quantizer sidecar (default: <model>.qstate.json)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export)

    p = sub.add_parser("infer", parents=[common], help="run an exported container on a .npy input")
    p.add_argument("--container", required=True)
    p.add_argument("--input", required=True, help=".npy array, one sample or a batch")
    p.set_defaults(func=cmd_infer)
    return parser


def _expand_config(argv):
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config", default=None)
    known, rest = pre.parse_known_args(argv)
    if not known.config:
        return list(argv)
    cfg = config_argv(read_config(known.config))
    # subcommand first, then file values, then explicit flags (last one wins)
    for i, tok in enumerate(rest):
        if not tok.startswith("-"):
            return rest[: i + 1] + cfg + rest[i + 1 :]
    return rest + cfg


def _code_for(exc):
    if isinstance(exc, CLIError):
        return exc.code
    if isinstance(exc, InvariantError):
        return EXIT_INTERNAL
    if isinstance(exc, FormatError):
        return EXIT_FORMAT
    if isinstance(exc, (ConfigError, ContractError)):
        return EXIT_CONFIG
    return EXIT_INTERNAL


def main(argv=None):
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        argv = _expand_config(argv)
    except CLIError as e:
        print(f"ptqat: error: {e}", file=sys.stderr)
        return e.code
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code in (0, None) else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    if args.command == "run":
        args.epochs_given = args.epochs is not None
        if args.epochs is None:
            args.epochs = 1
    try:
        args.func(args)
    except (CLIError, ConfigError, ContractError, FormatError, InvariantError) as e:
        print(f"ptqat: error: {e}", file=sys.stderr)
        return _code_for(e)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
