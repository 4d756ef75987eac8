"""Command-line front end for the pretrain -> prune -> finetune pipeline.

Every command reads a YAML (or JSON) config, applies ``--set section.key=value``
overrides, and writes its artifacts under ``<run.output_dir>/<stage>/``:
a checkpoint, CSV metrics and a ``manifest.json`` that can be passed back as
``--config`` to reproduce the run.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import copy
import csv
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .budgets import all_budgets
from .datakit import (CHECKPOINT_VERSION, MASK_VERSION, CheckpointError, DataSplit, ParseError, export_mask,
                      import_mask, load_checkpoint, load_idx, save_checkpoint, split_and_batch, synth_blobs)
from .models import ConfigError, FatalPruningError, HardMask, build_model
from .projections import projection_curves
from .pruner import (EpochRecord, PruneConfig, PruningError, TrainConfig, TrainRecord, evaluate, finetune,
                     net_checkpoint, net_from_checkpoint, shape_diff, soft_prune, train_plain)

log = logging.getLogger("chipnet")

REQUIRED = "<required>"
MANIFEST_FORMAT = "chipnet-manifest"
MANIFEST_VERSION = 1
CSV_SCHEMA_VERSION = 1
CHECKPOINT_NAME = "checkpoint.ckpt"
HIST_BINS = 64


def _prune_defaults() -> dict:
    cfg = dataclasses.asdict(PruneConfig())
    cfg.pop("seed")
    return {k: list(v) if isinstance(v, tuple) else v for k, v in cfg.items()}


def _train_defaults(epochs: int, with_bn: bool) -> dict:
    cfg = dataclasses.asdict(TrainConfig(epochs=epochs))
    cfg.pop("seed")
    if not with_bn:
        cfg.pop("recalibrate_bn")
    return cfg


DEFAULTS = {
    "run": {"output_dir": REQUIRED, "seed": 0},
    "data": {
        "source": REQUIRED,
        "labels": None,
        "classes": 10,
        "samples_per_class": 60,
        "image_size": 16,
        "noise_sigma": 0.1,
        "channels": 1,
        "val_fraction": 0.2,
        "batch_size": 32,
    },
    "model": {"preset": "tiny-cnn", "widths": None},
    "pretrain": _train_defaults(5, with_bn=False),
    "prune": _prune_defaults(),
    "finetune": _train_defaults(30, with_bn=True),
    "grid": {
        "tuples": [[10.0, 30.0, 5, 2], [5.0, 30.0, 5, 2], [10.0, 15.0, 5, 2], [10.0, 30.0, 10, 4]],
        "workers": 1,
    },
}

# keys whose default is None (or may be set to null) and the type they take otherwise
NULLABLE = {
    ("data", "labels"): str,
    ("model", "widths"): list,
    ("prune", "psi_lr"): float,
    ("prune", "psi_init"): list,
    ("prune", "beta_init"): float,
    ("prune", "beta_step"): float,
    ("prune", "beta_every"): int,
    ("prune", "gamma_init"): float,
    ("prune", "gamma_double_every"): int,
}

KEY_HELP = {
    "run.output_dir": "directory receiving one subdirectory per stage",
    "run.seed": "seed for data generation, splitting, initialization and shuffling",
    "data.source": "'synthetic' or the path of an IDX image file",
    "data.labels": "IDX label file (required when source is a path)",
    "data.classes": "synthetic: number of classes",
    "data.samples_per_class": "synthetic: samples drawn per class",
    "data.image_size": "synthetic: image height and width",
    "data.noise_sigma": "synthetic: pixel noise standard deviation",
    "data.channels": "synthetic: image channels",
    "data.val_fraction": "fraction held out for validation",
    "data.batch_size": "mini-batch size",
    "model.preset": "tiny-cnn | tiny-resnet | mlp-bn",
    "model.widths": "per-layer channel counts (null: preset default)",
    "prune.budget_kind": "channel | volume | parameter | flops",
    "prune.target": "budget target as a fraction of the dense network",
    "prune.alpha1": "crispness loss weight",
    "prune.alpha2": "budget loss weight",
    "prune.psi_lr": "mask parameter learning rate (null: same as lr)",
    "prune.psi_init": "uniform [low, high] for the mask parameters (null: keep)",
    "prune.schedule": "continuation preset: default | grid",
    "prune.beta_round": "steepness of the rounding applied before budgets",
    "prune.round_tracks_beta": "use the continuation beta as rounding steepness",
    "prune.crispness": "include the crispness loss",
    "prune.logistic_round": "round masks before computing the budget",
    "prune.heaviside": "apply the Heaviside projection after the logistic",
    "prune.budget_on": "z_bar | z",
    "finetune.recalibrate_bn": "recompute batchnorm statistics after slimming",
    "grid.tuples": "list of [alpha1, alpha2, beta_every, gamma_double_every]",
    "grid.workers": "parallel processes for grid runs",
}


class CommandError(RuntimeError):
    """A command could not run; the message is shown to the user."""


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


def _coerce(section: str, key: str, value, default):
    where = f"{section}.{key}"
    if value is None:
        if (section, key) in NULLABLE or default is None:
            return None
        raise ConfigError(f"{where} may not be null")
    kind = NULLABLE.get((section, key))
    if kind is None and default is not REQUIRED:
        kind = type(default)
    if kind is None:
        return value
    if kind is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where} must be true or false, got {value!r}")
    elif kind is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where} must be an integer, got {value!r}")
    elif kind is float:
        if isinstance(value, str):
            # YAML 1.1 reads exponent forms without a dot (1e-08) as strings
            try:
                value = float(value)
            except ValueError:
                pass
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where} must be a number, got {value!r}")
        value = float(value)
    elif kind is str:
        if not isinstance(value, str):
            raise ConfigError(f"{where} must be a string, got {value!r}")
    elif kind is list:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where} must be a list, got {value!r}")
        value = list(value)
    return value


def merge_config(doc: dict | None, overrides: list[str] = ()) -> dict:
    """Defaults updated by ``doc`` and ``section.key=value`` overrides; rejects unknown keys."""
    cfg = copy.deepcopy(DEFAULTS)
    doc = doc or {}
    if not isinstance(doc, dict):
        raise ConfigError("config file must hold a mapping of sections")
    updates = []
    for section, body in doc.items():
        if section not in cfg:
            raise ConfigError(f"unknown config section {section!r}; expected one of {sorted(cfg)}")
        if not isinstance(body, dict):
            raise ConfigError(f"config section {section!r} must be a mapping")
        updates.extend((section, k, v) for k, v in body.items())
    for item in overrides:
        path, sep, raw = item.partition("=")
        section, dot, key = path.strip().partition(".")
        if not sep or not dot:
            raise ConfigError(f"override {item!r} must look like section.key=value")
        updates.append((section, key, yaml.safe_load(raw)))
    for section, key, value in updates:
        if section not in cfg:
            raise ConfigError(f"unknown config section {section!r}")
        if key not in cfg[section]:
            raise ConfigError(f"unknown config key {section}.{key}")
        cfg[section][key] = _coerce(section, key, value, DEFAULTS[section][key])
    return cfg


def require(cfg: dict, *keys: str) -> None:
    missing = [k for k in keys if cfg[k.split(".")[0]][k.split(".")[1]] == REQUIRED]
    if missing:
        raise ConfigError("missing required config keys: " + ", ".join(missing))


def load_config(path: str | None, overrides: list[str] = ()) -> dict:
    doc = None
    if path:
        try:
            text = Path(path).read_text()
            doc = json.loads(text) if Path(path).suffix == ".json" else yaml.safe_load(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
        except yaml.YAMLError as exc:
            raise ConfigError(f"config {path} is not valid YAML: {exc}") from exc
        if isinstance(doc, dict) and doc.get("format") == MANIFEST_FORMAT:
            doc = doc["config"]
    return merge_config(doc, overrides)


def prune_config(cfg: dict) -> PruneConfig:
    try:
        return PruneConfig(seed=cfg["run"]["seed"], **cfg["prune"])
    except ValueError as exc:
        raise ConfigError(f"prune section: {exc}") from exc


def train_config(cfg: dict, section: str) -> TrainConfig:
    return TrainConfig(seed=cfg["run"]["seed"], **cfg[section])


def describe_defaults() -> str:
    lines = ["config keys (section.key = default):"]
    for section, body in DEFAULTS.items():
        for key, value in body.items():
            name = f"{section}.{key}"
            shown = value if value == REQUIRED else json.dumps(value)
            note = KEY_HELP.get(name, "")
            lines.append(f"  {name} = {shown}" + (f"    # {note}" if note else ""))
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# artifacts
# ---------------------------------------------------------------------------


def stage_dir(cfg: dict, stage: str) -> Path:
    out = Path(cfg["run"]["output_dir"]) / stage
    out.mkdir(parents=True, exist_ok=True)
    return out


def write_csv(path: Path, fields, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(fields), lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _fmt(v) for k, v in row.items()})


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v


def write_manifest(out: Path, command: str, cfg: dict, inputs: dict | None = None) -> None:
    doc = {
        "format": MANIFEST_FORMAT,
        "version": MANIFEST_VERSION,
        "command": command,
        "seed": cfg["run"]["seed"],
        "config": cfg,
        "inputs": {k: str(v) for k, v in (inputs or {}).items()},
        "versions": {
            "chipnet": __version__,
            "checkpoint": CHECKPOINT_VERSION,
            "mask": MASK_VERSION,
            "csv_schema": CSV_SCHEMA_VERSION,
            "manifest": MANIFEST_VERSION,
        },
    }
    (out / "manifest.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _input_checkpoint(path: str | None, cfg: dict, stage: str, what: str):
    path = Path(path) if path else Path(cfg["run"]["output_dir"]) / stage / CHECKPOINT_NAME
    if not path.exists():
        raise CommandError(f"{what} checkpoint not found at {path}; run `{stage}` first or pass --from")
    return load_checkpoint(path), path


def build_data(cfg: dict) -> DataSplit:
    d, seed = cfg["data"], cfg["run"]["seed"]
    if d["source"] == "synthetic":
        ds = synth_blobs(d["classes"], d["samples_per_class"], d["image_size"], d["noise_sigma"], seed=seed,
                         channels=d["channels"])
    else:
        if not d["labels"]:
            raise ConfigError("data.labels is required when data.source is an IDX file")
        ds = load_idx(d["source"], d["labels"])
    return split_and_batch(ds, d["val_fraction"], d["batch_size"], seed=seed)


def _check_head(net, data: DataSplit) -> None:
    if net.num_classes != data.train.num_classes:
        raise CommandError(f"checkpoint has a {net.num_classes}-class head but the data has "
                           f"{data.train.num_classes} classes")
    if tuple(net.input_shape) != tuple(data.train.images.shape[1:]):
        raise CommandError(f"checkpoint expects inputs {tuple(net.input_shape)}, data has "
                           f"{tuple(data.train.images.shape[1:])}")


def fresh_model(cfg: dict, data: DataSplit):
    m = cfg["model"]
    return build_model(m["preset"], widths=m["widths"], input_shape=tuple(data.train.images.shape[1:]),
                       num_classes=data.train.num_classes, seed=cfg["run"]["seed"])


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_pretrain(cfg: dict, args) -> dict:
    require(cfg, "run.output_dir", "data.source")
    data = build_data(cfg)
    net = fresh_model(cfg, data)
    ckpt, records = train_plain(net, data, train_config(cfg, "pretrain"))
    ckpt.config = cfg
    ckpt.meta["stage"] = "pretrain"
    out = stage_dir(cfg, "pretrain")
    save_checkpoint(ckpt, out / CHECKPOINT_NAME)
    write_csv(out / "train_records.csv", TrainRecord.FIELDS, (r.row() for r in records))
    write_manifest(out, "pretrain", cfg)
    print(f"pretrain: best val_acc {ckpt.best.get('val_acc', float('nan')):.4f} -> {out / CHECKPOINT_NAME}")
    return {"checkpoint": out / CHECKPOINT_NAME, "best": ckpt.best}


def _run_prune(cfg: dict, source: Path, out: Path, data: DataSplit | None = None) -> dict:
    data = data or build_data(cfg)
    net = net_from_checkpoint(load_checkpoint(source))
    _check_head(net, data)
    if net.masks is None:
        raise CommandError(f"{source} holds an already-slimmed network; prune needs a dense pretrain checkpoint")
    pcfg = prune_config(cfg)
    with open(out / "epochs.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(EpochRecord.FIELDS), lineterminator="\n")
        writer.writeheader()

        def stream(rec):
            writer.writerow({k: _fmt(v) for k, v in rec.row().items()})
            fh.flush()

        ckpt, records = soft_prune(net, data, pcfg, on_epoch=stream)
    ckpt.config = cfg
    save_checkpoint(ckpt, out / CHECKPOINT_NAME)
    export_mask(ckpt, out / "mask.json")
    write_manifest(out, "prune", cfg, {"pretrain": source})
    return {"checkpoint": out / CHECKPOINT_NAME, "best": ckpt.best, "records": records}


def cmd_prune(cfg: dict, args) -> dict:
    require(cfg, "run.output_dir", "data.source")
    _, source = _input_checkpoint(args.source, cfg, "pretrain", "pretrain")
    out = stage_dir(cfg, "prune")
    result = _run_prune(cfg, source, out)
    best = result["best"]
    print(f"prune: selected epoch {best.get('epoch')} hard val_acc {best.get('val_acc', float('nan')):.4f} "
          f"budget {best.get('budget', float('nan')):.6f} -> {out / 'mask.json'}")
    return result


def cmd_finetune(cfg: dict, args) -> dict:
    require(cfg, "run.output_dir", "data.source")
    host, source = _input_checkpoint(args.source, cfg, "prune", "prune")
    if host.meta.get("stage") not in ("prune", "transfer") or "mask" not in host.arrays:
        raise CommandError(f"{source} is a {host.meta.get('stage')!r} checkpoint; finetune needs a prune or "
                           "transfer checkpoint carrying a hard mask")
    data = build_data(cfg)
    net = net_from_checkpoint(host)
    _check_head(net, data)
    mask = HardMask(host.arrays["mask"].astype(np.uint8), net.shape.mask_sizes)
    slim, ckpt, records = finetune(net, mask, data, train_config(cfg, "finetune"))
    ckpt.config = cfg
    out = stage_dir(cfg, "finetune")
    save_checkpoint(ckpt, out / CHECKPOINT_NAME)
    write_csv(out / "train_records.csv", TrainRecord.FIELDS, (r.row() for r in records))
    budgets = all_budgets(mask.bits.astype(np.float64), net.shape)
    write_csv(out / "budgets.csv", ("kind", "value"), ({"kind": k, "value": v} for k, v in budgets.items()))
    write_manifest(out, "finetune", cfg, {"source": source})
    print(f"finetune: best val_acc {ckpt.best.get('val_acc', float('nan')):.4f}; budgets "
          + ", ".join(f"{k} {v:.6f}" for k, v in budgets.items()))
    return {"checkpoint": out / CHECKPOINT_NAME, "best": ckpt.best, "records": records, "budgets": budgets}


def _latest_checkpoint(cfg: dict) -> Path:
    for stage in ("finetune", "prune", "transfer", "pretrain"):
        path = Path(cfg["run"]["output_dir"]) / stage / CHECKPOINT_NAME
        if path.exists():
            return path
    raise CommandError(f"no checkpoint found under {cfg['run']['output_dir']}; pass --from")


def cmd_evaluate(cfg: dict, args) -> dict:
    require(cfg, "run.output_dir", "data.source")
    source = Path(args.source) if args.source else _latest_checkpoint(cfg)
    if not source.exists():
        raise CommandError(f"checkpoint not found at {source}")
    ckpt = load_checkpoint(source)
    data = build_data(cfg)
    net = net_from_checkpoint(ckpt)
    _check_head(net, data)
    rows = [{"split": name, "mode": "plain", "accuracy": evaluate(net, batches)}
            for name, batches in (("train", list(data.train_batches(0))), ("val", list(data.val_batches())))]
    if net.masks is not None:
        bits = ckpt.arrays.get("mask")
        mask = HardMask.ones(net.shape.mask_sizes) if bits is None else HardMask(bits.astype(np.uint8),
                                                                                 net.shape.mask_sizes)
        layer_masks = [b.astype(np.float32) for b in mask.per_layer()]
        for name, batches in (("train", list(data.train_batches(0))), ("val", list(data.val_batches()))):
            rows.append({"split": name, "mode": "hard_mask", "accuracy": evaluate(net, batches, layer_masks)})
    out = stage_dir(cfg, "evaluate")
    write_csv(out / "metrics.csv", ("split", "mode", "accuracy"), rows)
    write_manifest(out, "evaluate", cfg, {"checkpoint": source})
    for r in rows:
        print(f"evaluate: {r['split']} {r['mode']} accuracy {r['accuracy']:.4f}")
    return {"rows": rows}


def cmd_export_mask(cfg: dict, args) -> dict:
    require(cfg, "run.output_dir")
    ckpt, source = _input_checkpoint(args.source, cfg, "prune", "prune")
    target = Path(args.out) if args.out else source.parent / "mask.json"
    doc = export_mask(ckpt, target)
    print(f"export-mask: {target} ({doc['fingerprint']}); budgets "
          + ", ".join(f"{k} {v:.6f}" for k, v in doc["budgets"].items()))
    return {"path": target, "doc": doc}


def cmd_transfer_mask(cfg: dict, args) -> dict:
    require(cfg, "run.output_dir", "data.source")
    data = build_data(cfg)
    if args.source:
        target = net_from_checkpoint(load_checkpoint(args.source))
        if target.masks is None:
            raise CommandError(f"{args.source} holds a slimmed network; transfer needs a dense target")
    else:
        target = fresh_model(cfg, data)
    _check_head(target, data)
    mask_file = import_mask(args.mask)
    diffs = shape_diff(mask_file.shape, target.shape)
    if diffs:
        raise CommandError("mask and target architectures differ: " + "; ".join(diffs))
    bits = np.concatenate(mask_file.bits).astype(np.float32)
    ckpt = net_checkpoint(target, "transfer", cfg, {}, extra_arrays={"mask": bits})
    mask = HardMask(bits.astype(np.uint8), target.shape.mask_sizes)
    budgets = all_budgets(mask.bits.astype(np.float64), target.shape)
    out = stage_dir(cfg, "transfer")
    save_checkpoint(ckpt, out / CHECKPOINT_NAME)
    write_csv(out / "budgets.csv", ("kind", "host", "target"),
              ({"kind": k, "host": mask_file.budgets[k], "target": v} for k, v in budgets.items()))
    write_manifest(out, "transfer-mask", cfg, {"mask": args.mask, "target": args.source or "fresh"})
    preserved = all(mask_file.budgets[k] == v for k, v in budgets.items())
    print(f"transfer-mask: {out / CHECKPOINT_NAME}; budget preserved: {preserved}")
    return {"checkpoint": out / CHECKPOINT_NAME, "budgets": budgets, "host_budgets": mask_file.budgets,
            "preserved": preserved}


REPORT_INPUTS = ("prune/" + CHECKPOINT_NAME, "prune/epochs.csv")


def cmd_report(cfg: dict, args) -> dict:
    run_dir = Path(args.run_dir) if args.run_dir else None
    if run_dir is None:
        require(cfg, "run.output_dir")
        run_dir = Path(cfg["run"]["output_dir"])
    missing = [name for name in REPORT_INPUTS if not (run_dir / name).exists()]
    if missing:
        raise CommandError(f"report needs prune-stage outputs in {run_dir}; missing: " + ", ".join(missing))
    return write_report(run_dir)


def write_report(run_dir: Path) -> dict:
    ckpt = load_checkpoint(run_dir / "prune" / CHECKPOINT_NAME)
    out = run_dir / "report"
    out.mkdir(exist_ok=True)
    z = ckpt.arrays["final.z"].astype(np.float64)
    counts, edges = np.histogram(z, bins=HIST_BINS, range=(0.0, 1.0))
    write_csv(out / "z_histogram.csv", ("bin", "lo", "hi", "count"),
              ({"bin": i, "lo": edges[i], "hi": edges[i + 1], "count": int(c)} for i, c in enumerate(counts)))
    shape = ckpt.shape
    mask = HardMask(ckpt.arrays["mask"].astype(np.uint8), shape.mask_sizes)
    kept = dict(zip((l.index for l in shape.prunable_layers), mask.kept_per_layer()))
    write_csv(out / "kept_per_layer.csv", ("layer", "name", "channels", "kept"),
              ({"layer": l.index, "name": l.name, "channels": l.channels, "kept": kept.get(l.index, l.channels)}
               for l in shape.layers))
    curves = projection_curves()
    write_csv(out / "projection_curves.csv", curves[0].keys(), curves)
    prune_cfg = (ckpt.config or {}).get("prune", {})
    a1 = float(prune_cfg.get("alpha1", 10.0)) if prune_cfg.get("crispness", True) else 0.0
    a2 = float(prune_cfg.get("alpha2", 30.0))
    with open(run_dir / "prune" / "epochs.csv", newline="") as fh:
        epochs = list(csv.DictReader(fh))
    write_csv(out / "loss_curves.csv", ("epoch", "loss", "loss_ce", "loss_c", "loss_b", "crisp_term", "budget_term"),
              ({"epoch": int(r["epoch"]), "loss": float(r["loss"]), "loss_ce": float(r["loss_ce"]),
                "loss_c": float(r["loss_c"]), "loss_b": float(r["loss_b"]),
                "crisp_term": a1 * float(r["loss_c"]), "budget_term": a2 * float(r["loss_b"])} for r in epochs))
    print(f"report: wrote {out}")
    return {"dir": out, "histogram": counts, "kept": mask.kept_per_layer()}


def _grid_one(job) -> dict:
    cfg, source, index = job
    out = Path(cfg["run"]["output_dir"]) / "grid" / f"run_{index:03d}"
    out.mkdir(parents=True, exist_ok=True)
    result = _run_prune(cfg, source, out)
    best = result["best"]
    p = cfg["prune"]
    return {"index": index, "alpha1": p["alpha1"], "alpha2": p["alpha2"], "beta_every": p["beta_every"],
            "gamma_double_every": p["gamma_double_every"], "best_epoch": best.get("epoch", -1),
            "hard_val_acc": best.get("val_acc", float("nan")), "budget": best.get("budget", float("nan"))}


def cmd_grid(cfg: dict, args) -> dict:
    require(cfg, "run.output_dir", "data.source")
    _, source = _input_checkpoint(args.source, cfg, "pretrain", "pretrain")
    jobs = []
    for i, entry in enumerate(cfg["grid"]["tuples"]):
        if not isinstance(entry, (list, tuple)) or len(entry) != 4:
            raise ConfigError(f"grid.tuples[{i}] must be [alpha1, alpha2, beta_every, gamma_double_every]")
        run = copy.deepcopy(cfg)
        a1, a2, b_every, g_every = entry
        run["prune"].update(schedule="grid", alpha1=float(a1), alpha2=float(a2), beta_every=int(b_every),
                            gamma_double_every=int(g_every))
        jobs.append((run, source, i))
    workers = max(1, int(cfg["grid"]["workers"]))
    if workers == 1:
        rows = [_grid_one(job) for job in jobs]
    else:
        with concurrent.futures.ProcessPoolExecutor(workers) as pool:
            rows = list(pool.map(_grid_one, jobs))
    out = stage_dir(cfg, "grid")
    write_csv(out / "summary.csv", ("index", "alpha1", "alpha2", "beta_every", "gamma_double_every", "best_epoch",
                                    "hard_val_acc", "budget"), rows)
    write_manifest(out, "grid", cfg, {"pretrain": source})
    for r in rows:
        print(f"grid {r['index']}: alpha1 {r['alpha1']} alpha2 {r['alpha2']} beta_every {r['beta_every']} "
              f"gamma_double_every {r['gamma_double_every']} -> hard val_acc {r['hard_val_acc']:.4f}")
    return {"rows": rows}


COMMANDS = {
    "pretrain": (cmd_pretrain, "train the dense network"),
    "prune": (cmd_prune, "soft-prune a pretrained network and select a hard mask"),
    "finetune": (cmd_finetune, "materialize the selected mask and train the slim network"),
    "evaluate": (cmd_evaluate, "report accuracy of a checkpoint"),
    "export-mask": (cmd_export_mask, "write the selected hard mask of a prune checkpoint"),
    "transfer-mask": (cmd_transfer_mask, "install an exported mask on another network"),
    "report": (cmd_report, "histogram, per-layer and curve data for a prune run"),
    "grid": (cmd_grid, "sweep loss weights and continuation periods"),
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-c", "--config", help="YAML/JSON config file or a stage manifest.json")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one config key (repeatable)")
    common.add_argument("--no-crispness", action="store_true",
                        help="ablation: logistic projection only (no crispness loss, no Heaviside)")
    common.add_argument("--no-logistic-round", action="store_true",
                        help="ablation: compute the budget on unrounded masks")
    common.add_argument("-v", "--verbose", action="store_true")
    parser = argparse.ArgumentParser(
        prog="chipnet", description="Budget-constrained structured channel pruning.",
        epilog=describe_defaults(), formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--version", action="version", version=f"chipnet {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    for name, (_, text) in COMMANDS.items():
        p = sub.add_parser(name, parents=[common], help=text, description=text, epilog=describe_defaults(),
                           formatter_class=argparse.RawDescriptionHelpFormatter)
        if name in ("prune", "finetune", "evaluate", "export-mask", "transfer-mask", "grid"):
            p.add_argument("--from", dest="source", help="input checkpoint (default: previous stage in output_dir)")
        if name == "export-mask":
            p.add_argument("--out", help="mask file path (default: next to the checkpoint)")
        if name == "transfer-mask":
            p.add_argument("--mask", required=True, help="mask file written by prune or export-mask")
        if name == "report":
            p.add_argument("run_dir", nargs="?", help="run directory (default: run.output_dir)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    fn, _ = COMMANDS[args.command]
    try:
        overrides = list(args.overrides)
        if args.no_crispness:
            overrides += ["prune.crispness=false", "prune.heaviside=false"]
        if args.no_logistic_round:
            overrides += ["prune.logistic_round=false"]
        cfg = load_config(args.config, overrides)
        fn(cfg, args)
    except ConfigError as exc:
        print(f"chipnet {args.command}: config error: {exc}", file=sys.stderr)
        return 2
    except FatalPruningError as exc:
        print(f"chipnet {args.command}: fatal pruning: {exc}", file=sys.stderr)
        return 3
    except (CommandError, PruningError, CheckpointError, ParseError, ValueError, OSError) as exc:
        print(f"chipnet {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
