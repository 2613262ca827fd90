"""Command-line entry point.

Subcommands: gen-data, train, evaluate, tas, avar, sweep.  Every run is
driven by a YAML config (unknown keys are hard errors), owns its output
directory via a lock file, writes artifacts atomically, and records a
manifest (config hash + seed + version) so reruns are reproducible
byte-for-byte.

Exit codes: 0 ok, 2 usage, 3 config error, 4 runtime error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import os
import sys
from dataclasses import replace

import numpy as np
import yaml

from . import __version__, attacks, data, diagnostics, models, training, variance
from .attacks import AttackConfig
from .errors import AdlabError, ConfigError, RunError
from .losses import DistillSpec
from .models import TeacherEmulation, atomic_write_bytes
from .training import METRICS_FIELDS, EmulatedTeacher, MetricsRecord, TrainConfig

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_RUNTIME = 4

_ATTACK_KEYS = {"epsilon", "epsilon_frac_of_margin", "step_size",
                "step_frac_of_epsilon", "steps", "init_scale"}

# Allowed keys per config section; a set means a leaf table.
SCHEMA = {
    "dataset": {"kind", "dims", "classes", "samples_per_class", "class_margin",
                "images", "labels", "normalize_to", "seed", "split"},
    "teacher": {
        "hidden_layers": None,
        "checkpoint": None,
        "method": None,
        "epochs": None,
        "trades_lambda": None,
        "use_swa": None,
        "emulation": {"mode", "temperature", "alpha"},
    },
    "student": {"hidden_layers"},
    "train": {"epochs", "batch_size", "lr", "momentum", "weight_decay",
              "lr_decay_epochs", "lr_decay_factor", "swa_start_epoch", "seed",
              "method", "alpha_igdm", "beta", "trades_lambda", "lambda_in",
              "weighting", "tas_every", "use_swa"},
    "attack": _ATTACK_KEYS,
    "eval_attack": _ATTACK_KEYS,
    "evaluate": {"checkpoint"},
    "tas": {"student_checkpoint", "sample_cap"},
    "avar": {"splits", "repetitions", "test_points", "seed"},
    "sweep": {"parameter", "values"},
    "outputs": None,
}


def _check_keys(cfg, schema, path=""):
    if not isinstance(cfg, dict):
        raise ConfigError(f"section {path or '<root>'} must be a mapping")
    for key, value in cfg.items():
        if key not in schema:
            raise ConfigError(f"unknown config key {path}{key!r}")
        sub = schema[key]
        if isinstance(sub, dict):
            _check_keys(value, sub, path=f"{path}{key}.")
        elif isinstance(sub, set):
            if not isinstance(value, dict):
                raise ConfigError(f"section {path}{key} must be a mapping")
            for k in value:
                if k not in sub:
                    raise ConfigError(f"unknown config key {path}{key}.{k!r}")


def load_config(path) -> dict:
    try:
        with open(path) as f:
            cfg = yaml.safe_load(f) or {}
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except yaml.YAMLError as e:
        raise ConfigError(f"malformed config: {e}")
    _check_keys(cfg, SCHEMA)
    return cfg


def config_hash(cfg) -> str:
    canon = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()


# -- config -> domain objects ----------------------------------------------


def build_dataset(cfg) -> data.Dataset:
    d = cfg.get("dataset")
    if not d:
        raise ConfigError("config needs a dataset section")
    kind = d.get("kind", "gaussian-mixture")
    box = tuple(d.get("normalize_to", (0.0, 1.0)))
    spec = data.DatasetSpec(
        kind=kind,
        dims=int(d.get("dims", 2)),
        classes=int(d.get("classes", 2)),
        samples_per_class=int(d.get("samples_per_class", 100)),
        class_margin=float(d.get("class_margin", 0.1)),
        images_path=d.get("images"),
        labels_path=d.get("labels"),
        normalize_to=box,
        seed=int(d.get("seed", 0)),
        split=float(d.get("split", 0.8)),
    )
    return data.gen_dataset(spec)


def resolve_attack(section, margin, box, defaults) -> AttackConfig:
    """Build an AttackConfig; epsilon may be absolute or a fraction of the
    synthetic class margin (always reported in absolute units)."""
    section = section or {}
    if "epsilon" in section:
        eps = float(section["epsilon"])
    elif "epsilon_frac_of_margin" in section:
        if margin is None:
            raise ConfigError("epsilon_frac_of_margin needs a synthetic dataset")
        eps = float(section["epsilon_frac_of_margin"]) * margin
    elif margin is not None:
        eps = 0.25 * margin
    else:
        raise ConfigError("attack epsilon must be given for loaded datasets")
    if "step_size" in section:
        step = float(section["step_size"])
    else:
        step = float(section.get("step_frac_of_epsilon", 0.25)) * eps
    if eps > 0 and step == 0.0:
        step = eps / 4.0
    return AttackConfig(
        epsilon=eps,
        step_size=step if eps > 0 else 1.0,
        steps=int(section.get("steps", defaults["steps"])),
        init_scale=float(section.get("init_scale", defaults["init_scale"])),
        input_box=box,
    )


def build_train_config(cfg, dataset, overrides=None) -> TrainConfig:
    t = dict(cfg.get("train") or {})
    if overrides:
        t.update(overrides)
    student = cfg.get("student") or {}
    box = dataset.feature_box
    train_atk = resolve_attack(cfg.get("attack"), dataset.margin, box,
                               {"steps": 10, "init_scale": 0.001})
    eval_atk = resolve_attack(cfg.get("eval_attack", cfg.get("attack")),
                              dataset.margin, box,
                              {"steps": 20, "init_scale": 0.0})
    eval_atk = replace(eval_atk, init_scale=0.0)
    spec = DistillSpec(
        method=t.get("method", "saad"),
        alpha_igdm=float(t.get("alpha_igdm", 1.0)),
        beta=float(t.get("beta", 0.0)),
        trades_lambda=float(t.get("trades_lambda", 6.0)),
        lambda_in=float(t.get("lambda_in", 1.0)),
        weighting=t.get("weighting", "entropy"),
    )
    epochs = int(t.get("epochs", 60))
    decay = t.get("lr_decay_epochs")
    if decay is None:
        decay = sorted({e for e in (epochs // 2, (3 * epochs) // 4)
                        if 0 < e < epochs})
    return TrainConfig(
        student_layers=tuple(student.get("hidden_layers", (32,))),
        epochs=epochs,
        train_attack=train_atk,
        eval_attack=eval_atk,
        distill=spec,
        batch_size=int(t.get("batch_size", 64)),
        lr=float(t.get("lr", 0.1)),
        momentum=float(t.get("momentum", 0.9)),
        weight_decay=float(t.get("weight_decay", 5e-4)),
        lr_decay_epochs=tuple(decay),
        lr_decay_factor=float(t.get("lr_decay_factor", 10.0)),
        swa_start_epoch=t.get("swa_start_epoch"),
        seed=int(t.get("seed", 0)),
        tas_every=int(t.get("tas_every", 0)),
    )


def build_emulation(cfg) -> TeacherEmulation:
    e = (cfg.get("teacher") or {}).get("emulation") or {}
    return TeacherEmulation(mode=e.get("mode", "as-trained"),
                            temperature=float(e.get("temperature", 1.0)),
                            alpha=float(e.get("alpha", 0.0)))


def get_teacher(cfg, dataset, out_dir) -> EmulatedTeacher:
    t = cfg.get("teacher") or {}
    emu = build_emulation(cfg)
    if t.get("checkpoint"):
        return EmulatedTeacher(models.load_checkpoint(t["checkpoint"]), emu)
    tc = build_train_config(cfg, dataset, overrides={
        "method": t.get("method", "pgd-at"),
        "epochs": int(t.get("epochs", 30)),
        "trades_lambda": float(t.get("trades_lambda", 6.0)),
        "beta": 0.0,
    })
    tc = replace(tc, student_layers=tuple(t.get("hidden_layers", (64, 64))),
                 tas_every=0, eval_train_robust=False)
    final, swa, _ = training.train(None, dataset, tc)
    params = swa if t.get("use_swa", False) else final
    if out_dir is not None:
        models.save_checkpoint(params, os.path.join(out_dir, "teacher.ckpt"))
    return EmulatedTeacher(params, emu)


# -- artifact export --------------------------------------------------------


def _fmt(v):
    if isinstance(v, float) and np.isnan(v):
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def export_metrics(record: MetricsRecord, fmt, path):
    """CSV with the fixed MetricsRecord column order, or JSON with the same
    keys ('structured' format)."""
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(METRICS_FIELDS)
        for row in record.rows:
            w.writerow([_fmt(row[k]) for k in METRICS_FIELDS])
        atomic_write_bytes(path, buf.getvalue().encode())
    elif fmt == "structured":
        payload = {"fields": list(METRICS_FIELDS),
                   "rows": _sanitize_nan(record.rows)}
        write_json(path, payload)
    else:
        raise ConfigError(f"unknown metrics format {fmt!r}")


def export_plot_data(record: MetricsRecord, path):
    """(x, y) series per training curve, for external plotting."""
    epochs = record.column("epoch")
    series = {}
    for name in METRICS_FIELDS[2:]:
        ys = record.column(name)
        pts = [(e, y) for e, y in zip(epochs, ys)
               if not (isinstance(y, float) and np.isnan(y))]
        series[name] = {"x": [p[0] for p in pts], "y": [p[1] for p in pts]}
    write_json(path, series)


def write_json(path, payload):
    text = json.dumps(payload, indent=2, sort_keys=True, allow_nan=False,
                      default=_json_default)
    atomic_write_bytes(path, (text + "\n").encode())


def _json_default(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    raise TypeError(f"not JSON serializable: {type(obj)}")


def _sanitize_nan(obj):
    if isinstance(obj, float) and np.isnan(obj):
        return None
    if isinstance(obj, dict):
        return {k: _sanitize_nan(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_sanitize_nan(v) for v in obj]
    return obj


class OutputDir:
    """Exclusive ownership of an output directory via a lock file."""

    def __init__(self, path):
        self.path = path

    def __enter__(self):
        os.makedirs(self.path, exist_ok=True)
        self._lock = os.path.join(self.path, ".lock")
        try:
            fd = os.open(self._lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
            os.close(fd)
        except FileExistsError:
            raise RunError(f"output directory {self.path} is locked "
                           f"(another run in progress? remove {self._lock})")
        return self

    def __exit__(self, *exc):
        if os.path.exists(self._lock):
            os.unlink(self._lock)
        return False

    def file(self, name):
        return os.path.join(self.path, name)


def write_manifest(out: OutputDir, command, cfg, seed):
    write_json(out.file("manifest.json"), {
        "command": command,
        "config_sha256": config_hash(cfg),
        "seed": seed,
        "adlab_version": __version__,
    })


def _apply_seed_override(cfg, seed):
    if seed is None:
        return cfg
    cfg = dict(cfg)
    cfg.setdefault("dataset", {})
    cfg["dataset"] = dict(cfg["dataset"], seed=seed)
    cfg.setdefault("train", {})
    cfg["train"] = dict(cfg["train"], seed=seed)
    return cfg


# -- subcommands ------------------------------------------------------------


def cmd_gen_data(cfg, out: OutputDir, fmt):
    ds = build_dataset(cfg)
    for name, arr in (("x_train", ds.x_train), ("y_train", ds.y_train),
                      ("x_test", ds.x_test), ("y_test", ds.y_test)):
        buf = io.BytesIO()
        np.save(buf, arr)
        atomic_write_bytes(out.file(f"{name}.npy"), buf.getvalue())
    write_json(out.file("dataset.json"), {
        "n_classes": ds.n_classes,
        "n_features": ds.n_features,
        "n_train": int(ds.x_train.shape[0]),
        "n_test": int(ds.x_test.shape[0]),
        "feature_box": list(ds.feature_box),
        "class_margin": ds.margin,
        "min_cross_class_distance": data.min_cross_class_distance(
            np.concatenate([ds.x_train, ds.x_test]),
            np.concatenate([ds.y_train, ds.y_test])),
    })


def cmd_train(cfg, out: OutputDir, fmt):
    ds = build_dataset(cfg)
    teacher = None
    tc = build_train_config(cfg, ds)
    if tc.distill.method not in ("pgd-at", "trades"):
        teacher = get_teacher(cfg, ds, out.path)
    final, swa, metrics = training.train(teacher, ds, tc)
    models.save_checkpoint(final, out.file("student.ckpt"))
    models.save_checkpoint(swa, out.file("student_swa.ckpt"))
    ext = "csv" if fmt == "csv" else "json"
    export_metrics(metrics, fmt, out.file(f"metrics.{ext}"))
    export_plot_data(metrics, out.file("plot_data.json"))
    use_swa = (cfg.get("train") or {}).get("use_swa", False)
    student = swa if use_swa else final
    final_eval = training.evaluate(student, ds.x_test, ds.y_test, tc.eval_attack)
    write_json(out.file("final_eval.json"), {
        **final_eval,
        "robust_overfitting": diagnostics.robust_overfitting(
            metrics.column("robust_test_acc")),
        "epsilon_absolute": tc.eval_attack.epsilon,
    })


def cmd_evaluate(cfg, out: OutputDir, fmt):
    ds = build_dataset(cfg)
    ev = cfg.get("evaluate") or {}
    ckpt = ev.get("checkpoint")
    if not ckpt:
        raise ConfigError("evaluate needs evaluate.checkpoint")
    model = models.load_checkpoint(ckpt)
    tc = build_train_config(cfg, ds)
    res = training.evaluate(model, ds.x_test, ds.y_test, tc.eval_attack)
    res["epsilon_absolute"] = tc.eval_attack.epsilon
    write_json(out.file("evaluation.json"), res)


def cmd_tas(cfg, out: OutputDir, fmt):
    ds = build_dataset(cfg)
    section = cfg.get("tas") or {}
    ckpt = section.get("student_checkpoint")
    if not ckpt:
        raise ConfigError("tas needs tas.student_checkpoint")
    student = models.load_checkpoint(ckpt)
    teacher = get_teacher(cfg, ds, out.path)
    tc = build_train_config(cfg, ds)
    cap = int(section.get("sample_cap", 512))
    x, y = ds.x_train[:cap], ds.y_train[:cap]
    cfg_attack = replace(tc.eval_attack, inner_loss="ce-student")
    report = diagnostics.tas_ratio(student, teacher.params, x, y, cfg_attack,
                                   cfg_attack, emulation=teacher.emulation)
    write_json(out.file("tas.json"), report.to_dict())
    hist = diagnostics.entropy_histogram(report.entropies,
                                         n_classes=ds.n_classes)
    write_json(out.file("entropy_histogram.json"), hist.to_dict())


def cmd_avar(cfg, out: OutputDir, fmt):
    ds = build_dataset(cfg)
    section = cfg.get("avar") or {}
    plan = variance.SplitPlan(n_splits=int(section.get("splits", 2)),
                              repetitions=int(section.get("repetitions", 2)),
                              seed=int(section.get("seed", 0)))
    n_points = int(section.get("test_points", ds.x_test.shape[0]))
    teacher = get_teacher(cfg, ds, out.path)
    tc = build_train_config(cfg, ds)
    report = variance.estimate_avar(ds, ds.x_test[:n_points],
                                    ds.y_test[:n_points], teacher, tc,
                                    tc.eval_attack, plan)
    payload = report.to_dict()
    payload["identity_residuals"] = [
        row[3] - (row[0] + row[1] + row[2]) for row in report.per_point
    ]
    write_json(out.file("avar.json"), payload)


def cmd_sweep(cfg, out: OutputDir, fmt):
    section = cfg.get("sweep") or {}
    parameter = section.get("parameter")
    values = section.get("values")
    if parameter not in ("beta", "alpha") or not values:
        raise ConfigError("sweep needs parameter (beta|alpha) and values")
    ds = build_dataset(cfg)
    rows = []
    for value in values:
        value = float(value)
        if parameter == "beta":
            tc = build_train_config(cfg, ds, overrides={"beta": value})
            teacher = get_teacher(cfg, ds, None)
            final, swa, metrics = training.train(teacher, ds, tc)
            res = training.evaluate(final, ds.x_test, ds.y_test, tc.eval_attack)
            rows.append({
                "value": value,
                "clean_acc": res["clean_acc"],
                "pgd_acc": res["pgd_acc"],
                "robust_overfitting": diagnostics.robust_overfitting(
                    metrics.column("robust_test_acc")),
            })
            ext = "csv" if fmt == "csv" else "json"
            export_metrics(metrics, fmt, out.file(f"metrics_beta_{value}.{ext}"))
        else:
            emu_cfg = dict(cfg)
            teacher_sec = dict(emu_cfg.get("teacher") or {})
            teacher_sec["emulation"] = {"mode": "label-interpolated",
                                        "alpha": value}
            emu_cfg["teacher"] = teacher_sec
            teacher = get_teacher(emu_cfg, ds, None)
            tc = build_train_config(emu_cfg, ds)
            section_avar = cfg.get("avar") or {}
            plan = variance.SplitPlan(
                n_splits=int(section_avar.get("splits", 2)),
                repetitions=int(section_avar.get("repetitions", 2)),
                seed=int(section_avar.get("seed", 0)))
            n_points = int(section_avar.get("test_points", ds.x_test.shape[0]))
            report = variance.estimate_avar(ds, ds.x_test[:n_points],
                                            ds.y_test[:n_points], teacher, tc,
                                            tc.eval_attack, plan)
            final, swa, metrics = training.train(teacher, ds, tc)
            rows.append({
                "value": value,
                "avar": report.variance,
                "bias": report.bias,
                "noise": report.noise,
                "robust_overfitting": diagnostics.robust_overfitting(
                    metrics.column("robust_test_acc")),
            })
    write_json(out.file("sweep.json"), {"parameter": parameter, "rows": rows})


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "tas": cmd_tas,
    "avar": cmd_avar,
    "sweep": cmd_sweep,
}


def make_parser():
    p = argparse.ArgumentParser(
        prog="adlab",
        description="Desk-scale adversarial distillation laboratory.")
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", required=True, help="YAML experiment config")
    p.add_argument("--out", default=None, help="output directory")
    p.add_argument("--seed", type=int, default=None,
                   help="override dataset and training seeds")
    p.add_argument("--format", choices=("csv", "structured"), default="csv",
                   help="metrics file format")
    return p


def main(argv=None) -> int:
    parser = make_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code not in (0, None) else EXIT_OK
    # ADLAB_THREADS caps worker parallelism; execution is currently
    # single-threaded, so the value is validated and recorded only.
    threads = os.environ.get("ADLAB_THREADS")
    try:
        if threads is not None and int(threads) < 1:
            raise ConfigError("ADLAB_THREADS must be >= 1")
        cfg = load_config(args.config)
        cfg = _apply_seed_override(cfg, args.seed)
        out_dir = args.out or cfg.get("outputs")
        if not out_dir:
            raise ConfigError("no output directory (use --out or outputs:)")
        with OutputDir(out_dir) as out:
            write_manifest(out, args.command, cfg,
                           args.seed if args.seed is not None else
                           (cfg.get("train") or {}).get("seed", 0))
            COMMANDS[args.command](cfg, out, args.format)
        return EXIT_OK
    except ConfigError as e:
        print(f"adlab: config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except AdlabError as e:
        print(f"adlab: error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    except OSError as e:
        print(f"adlab: I/O error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
