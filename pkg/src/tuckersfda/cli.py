"""Command-line pipeline: pretrain -> decompose -> adapt -> evaluate -> report.

Every command reads an INI file (``--config``), applies ``--set section.key=value``
overrides and its own flags on top, and writes the fully resolved settings to
``resolved.ini`` in its run directory. Passing that file back through
``--config`` replays the run. Run directories live under ``$TUCKERSFDA_OUT``
(default ``./runs``) unless ``--out`` is absolute.
"""
from __future__ import annotations

import argparse
import configparser
import csv
import json
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import configs
from .archive import ArchiveError, load_model, read_extra, save_model
from .data import DomainPair, load_dataset, make_synthetic, stratified_subsample
from .diagnostics import layer_distances, lemma_audit, mean_weight_distance, weight_layer_names
from .factorize import (
    RankPolicy, count_macs, count_params, decompose_model, display, recovery_finetune, reduction_pct,
)
from .model import MASK_PRESETS, build_model
from .peft import AdapterSpec, attach_adapters
from .training import LR_GRID, METHODS, AdaptationConfig, PretrainConfig, adapt, evaluate, pretrain

ENV_OUT = "TUCKERSFDA_OUT"
SUBSPACES = ("core", "factors", "both", "bn", "full", "adapter")
RATIOS = (0.005, 0.05, 1.0)
DEFAULT_SEEDS = (0, 1, 2)

DEFAULTS = {
    "data": {"task": "toy-negation", "seed": "0", "source": "", "source_test": "", "target": "",
             "target_test": ""},
    "model": {"backbone": "", "seed": "0", "imputer": "false"},
    "pretrain": {"epochs": "20", "lr": "0.001", "batch_size": "32", "alpha": "0.1",
                 "mask_ratio": "0.125", "optimizer": "adam"},
    "decompose": {"archive": "", "rf": "8", "skip_recovery": "false", "recovery_epochs": "2",
                  "recovery_lr": "0.001", "batch_size": "32", "input_layer_full_rank": "false",
                  "materialize_input": "false"},
    "adapt": {"archive": "", "method": "shot", "subspace": "core", "ratio": "1.0", "lr": "0.0001",
              "epochs": "10", "batch_size": "32", "seeds": "0,1,2", "lr_sweep": "false",
              "sweep_lrs": ",".join(repr(v) for v in LR_GRID), "off_grid_lr": "false",
              "k_nn": "", "mask_ratio": "0.125", "adapter": "lora", "adapter_rank": "2",
              "adapter_target": "auto"},
    "evaluate": {"archive": "", "split": "target_test"},
}
DATA_KEYS = tuple(DEFAULTS["data"])


class CLIError(Exception):
    """User-facing failure; printed without a traceback."""


# -- configuration -----------------------------------------------------------------

def load_config(path, sets, flags: dict) -> tuple[configparser.ConfigParser, set]:
    """Defaults < config file < ``--set`` < explicit flags. Returns the parser and the
    ``section.key`` names the user set explicitly."""
    cp = configparser.ConfigParser(interpolation=None)
    cp.read_dict(DEFAULTS)
    explicit = set()
    if path:
        user = configparser.ConfigParser(interpolation=None)
        if not user.read(path):
            raise CLIError(f"config file {path} not found")
        for sec in user.sections():
            if sec not in DEFAULTS:
                raise CLIError(f"unknown config section [{sec}]")
            for k, v in user[sec].items():
                _put(cp, sec, k, v)
                explicit.add(f"{sec}.{k}")
    for item in sets or []:
        key, sep, value = item.partition("=")
        sec, dot, k = key.strip().partition(".")
        if not sep or not dot:
            raise CLIError(f"--set expects section.key=value, got {item!r}")
        _put(cp, sec, k, value.strip())
        explicit.add(f"{sec}.{k}")
    for key, value in flags.items():
        if value is None:
            continue
        sec, _, k = key.partition(".")
        _put(cp, sec, k, _fmt(value))
        explicit.add(key)
    return cp, explicit


def _put(cp, sec, key, value):
    if sec not in DEFAULTS or key not in DEFAULTS[sec]:
        raise CLIError(f"unknown config key {sec}.{key}")
    cp[sec][key] = str(value)


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (list, tuple)):
        return ",".join(_fmt(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _floats(s: str) -> list[float]:
    return [float(x) for x in s.split(",") if x.strip()]


def _ints(s: str) -> list[int]:
    return [int(x) for x in s.split(",") if x.strip()]


def write_snapshot(cp, command: str, run_dir: Path) -> None:
    out = configparser.ConfigParser(interpolation=None)
    out.read_dict({s: dict(cp[s]) for s in cp.sections()})
    with open(run_dir / "resolved.ini", "w") as fh:
        fh.write(f"# tuckersfda {command}\n")
        out.write(fh)


def output_root() -> Path:
    return Path(os.environ.get(ENV_OUT, "runs"))


def run_dir(out: str | None, default: str) -> Path:
    p = Path(out or default)
    if not p.is_absolute():
        p = output_root() / p
    p.mkdir(parents=True, exist_ok=True)
    return p


def _archive_path(s: str) -> Path:
    if not s:
        raise CLIError("no input archive given (--archive)")
    p = Path(s)
    if not p.is_absolute() and not p.exists():
        p = output_root() / p
    if not (p / "manifest.json").exists():
        raise CLIError(f"archive {s} not found")
    return p


# -- data -----------------------------------------------------------------------------

def data_spec(cp, explicit: set, inherited: dict | None = None) -> dict:
    """Data settings: inherited from the archive unless set explicitly for this run."""
    spec = dict(cp["data"])
    if inherited:
        for k in DATA_KEYS:
            if f"data.{k}" not in explicit and k in inherited:
                spec[k] = str(inherited[k])
                cp["data"][k] = str(inherited[k])
    return spec


def load_pair(spec: dict) -> DomainPair:
    paths = {k: spec.get(k, "") for k in ("source", "source_test", "target", "target_test")}
    if any(paths.values()):
        missing = [k for k, v in paths.items() if not v]
        if missing:
            raise CLIError(f"CSV data needs every split; missing {missing}")
        try:
            ds = {k: load_dataset(v) for k, v in paths.items()}
        except FileNotFoundError as e:
            raise CLIError(str(e)) from None
        return DomainPair(ds["source"], ds["source_test"], ds["target"], ds["target_test"], ds["target"])
    try:
        task = configs.task(spec["task"])
    except KeyError as e:
        raise CLIError(e.args[0]) from None
    return make_synthetic(task, int(spec["seed"]))


def _backbone(cp, spec):
    name = cp["model"]["backbone"] or spec["task"]
    try:
        cfg = configs.backbone(name)
    except KeyError as e:
        raise CLIError(e.args[0]) from None
    cp["model"]["backbone"] = name
    return cfg


# -- commands -----------------------------------------------------------------------

def cmd_pretrain(args) -> Path:
    cp, explicit = load_config(args.config, args.set, {
        "pretrain.epochs": args.epochs, "pretrain.lr": args.lr, "model.seed": args.seed,
        "data.task": args.task, "model.backbone": args.backbone,
        "model.imputer": True if args.method == "mapu" else None,
    })
    spec = data_spec(cp, explicit)
    pair = load_pair(spec)
    cfg = _backbone(cp, spec)
    if pair.source.x.shape[1:] != (cfg.input_channels, cfg.seq_len):
        raise CLIError(f"data shape {pair.source.x.shape[1:]} does not fit backbone {cfg.name}")
    p = cp["pretrain"]
    seed = cp["model"].getint("seed")
    imputer = cp["model"].getboolean("imputer")
    model = build_model(cfg, seed, imputer=imputer)
    pc = PretrainConfig(epochs=p.getint("epochs"), lr=p.getfloat("lr"), batch_size=p.getint("batch_size"),
                        seed=seed, alpha=p.getfloat("alpha"), mapu=imputer,
                        mask_ratio=p.getfloat("mask_ratio"), optimizer=p["optimizer"])
    model, log = pretrain(model, pair.source, pc)
    out = run_dir(args.out, f"pretrain-{cfg.name}-s{seed}")
    metrics = {"source_test": evaluate(model, pair.source_test), "target_test": evaluate(model, pair.target_test)}
    save_model(model, out / "model", extra={"data": spec, "stage": "pretrain", "metrics": metrics})
    _write_rows(out / "log.csv", log)
    (out / "metrics.json").write_text(json.dumps(metrics, indent=2))
    write_snapshot(cp, "pretrain", out)
    _say(args, f"pretrained {cfg.name}: source F1 {metrics['source_test']['f1']:.4f} -> {out}")
    return out


def cmd_decompose(args) -> Path:
    cp, explicit = load_config(args.config, args.set, {
        "decompose.archive": args.archive, "decompose.rf": args.rf,
        "decompose.skip_recovery": True if args.skip_recovery else None,
        "decompose.recovery_epochs": args.recovery_epochs,
    })
    d = cp["decompose"]
    src_path = _archive_path(d["archive"])
    dense = load_model(src_path)
    extra = read_extra(src_path)
    spec = data_spec(cp, explicit, extra.get("data"))
    pair = load_pair(spec)
    rf = d.getint("rf")
    if rf < 1:
        raise CLIError("--rf must be a positive integer")
    policy = RankPolicy(rf, input_layer_full_rank=d.getboolean("input_layer_full_rank"),
                        materialize_input=d.getboolean("materialize_input"))
    fact = decompose_model(dense, policy)
    seed = int(dense.meta.get("seed", 0))
    report = {"rank_factor": rf, "source_f1_dense": evaluate(dense, pair.source_test)["f1"],
              "source_f1_decomposed": evaluate(fact, pair.source_test)["f1"],
              "logit_max_abs_change": float(np.abs(dense.embed(pair.source_test.x)[0]
                                                   - fact.embed(pair.source_test.x)[0]).max())}
    if d.getboolean("skip_recovery"):
        report["recovery"] = "skipped"
    else:
        fact, rec_log = recovery_finetune(fact, pair.source, epochs=d.getint("recovery_epochs"),
                                          lr=d.getfloat("recovery_lr"), batch_size=d.getint("batch_size"),
                                          seed=seed)
        report["recovery"] = "done"
        report["source_f1_recovered"] = evaluate(fact, pair.source_test)["f1"]
    eff = _efficiency(dense, fact, MASK_PRESETS["core"])
    report.update(eff)
    out = run_dir(args.out, f"decompose-rf{rf}-s{seed}")
    save_model(fact, out / "model", extra={"data": spec, "stage": "decompose", "dense": _dense_totals(dense),
                                           "report": report})
    (out / "report.json").write_text(json.dumps(report, indent=2))
    with open(out / "report.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["key", "value"])
        for k, v in report.items():
            w.writerow([k, v])
    write_snapshot(cp, "decompose", out)
    _say(args, f"decomposed at RF={rf}: core params {eff['finetuned_params']} -> {out}")
    return out


def _dense_totals(model) -> dict:
    return {"params": int(sum(count_params(model).values())), "macs": int(sum(count_macs(model).values()))}


def _efficiency(dense_totals_or_model, model, mask) -> dict:
    if isinstance(dense_totals_or_model, dict):
        base = dense_totals_or_model
    else:
        base = _dense_totals(dense_totals_or_model)
    tuned = int(sum(count_params(model, mask, sections=("backbone",)).values()))
    macs = int(sum(count_macs(model).values()))
    return {"macs": macs, "macs_M": display(macs, 1e6), "finetuned_params": tuned,
            "finetuned_params_K": display(tuned, 1e3),
            "param_reduction_pct": reduction_pct(tuned, base["params"], 1e3),
            "mac_reduction_pct": reduction_pct(macs, base["macs"], 1e6)}


def _mask_for(subspace: str):
    try:
        return MASK_PRESETS[subspace]
    except KeyError:
        raise CLIError(f"unknown subspace {subspace!r}; choose from {SUBSPACES}") from None


def cmd_adapt(args) -> Path:
    cp, explicit = load_config(args.config, args.set, {
        "adapt.archive": args.archive, "adapt.method": args.method, "adapt.subspace": args.subspace,
        "adapt.ratio": args.ratio, "adapt.lr": args.lr, "adapt.epochs": args.epochs,
        "adapt.seeds": args.seeds, "adapt.lr_sweep": True if args.lr_sweep else None,
        "adapt.off_grid_lr": True if args.off_grid_lr else None,
    })
    a = cp["adapt"]
    method, subspace = a["method"].lower(), a["subspace"].lower()
    if method not in METHODS:
        raise CLIError(f"unknown method {method!r}; choose from {METHODS}")
    if subspace not in SUBSPACES:
        raise CLIError(f"unknown subspace {subspace!r}; choose from {SUBSPACES}")
    ratio = a.getfloat("ratio")
    if not 0.0 < ratio <= 1.0:
        raise CLIError("--ratio must lie in (0, 1]")
    src_path = _archive_path(a["archive"])
    base = load_model(src_path)
    extra = read_extra(src_path)
    spec = data_spec(cp, explicit, extra.get("data"))
    pair = load_pair(spec)
    mask = _mask_for(subspace)
    if subspace == "adapter":
        base = attach_adapters(base, AdapterSpec(a["adapter"], a.getint("adapter_rank"),
                                                 target=a["adapter_target"]))
    if subspace == "core" and "CORE" not in set(base.tags().values()):
        raise CLIError("--subspace core needs a decomposed archive; run `tuckersfda decompose "
                       f"--archive {a['archive']} --rf 8` first and adapt the result")
    if method == "mapu" and not base.imputer:
        raise CLIError("--method mapu needs an archive pretrained with --method mapu (imputer missing)")
    seeds = _ints(a["seeds"])
    lrs = _floats(a["sweep_lrs"]) if a.getboolean("lr_sweep") else [a.getfloat("lr")]
    dense = extra.get("dense") or _dense_totals(base)
    rf = base.meta.get("rank_factor")
    out = run_dir(args.out, f"adapt-{method}-{subspace}-rf{rf or 'none'}-r{ratio:g}")
    write_snapshot(cp, "adapt", out)
    rows = []
    for lr in lrs:
        for seed in seeds:
            leaf = out / (f"lr{lr:g}" if len(lrs) > 1 else "") / f"seed{seed}"
            leaf.mkdir(parents=True, exist_ok=True)
            target = stratified_subsample(pair.target, ratio, seed) if ratio < 1.0 else pair.target
            cfg = AdaptationConfig(method, lr=lr, epochs=a.getint("epochs"), batch_size=a.getint("batch_size"),
                                   seed=seed, ratio=ratio, mask_ratio=a.getfloat("mask_ratio"),
                                   k_nn=a.getint("k_nn") if a["k_nn"] else None,
                                   off_grid_lr=a.getboolean("off_grid_lr"))
            try:
                model, log = adapt(base, target.unlabeled(), cfg, mask, pair.target_test)
            except ValueError as e:
                raise CLIError(str(e)) from None
            checks = lemma_audit(log.audit)
            dist = layer_distances(base, model)
            f1 = log.column("f1")
            summary = {"method": method, "rf": rf, "subspace": subspace, "ratio": ratio, "lr": lr,
                       "seed": seed, "n_target": len(target), "epochs": cfg.epochs,
                       "f1_initial": f1[0], "f1_final": f1[-1], "f1_best": max(f1),
                       "acc_final": log.records[-1]["acc"],
                       "mean_distance": mean_weight_distance(dist, weight_layer_names(base)),
                       "audit_checks": len(checks), "audit_violations": sum(not c.passed for c in checks)}
            summary.update(_efficiency(dense, model, mask))
            log.to_csv(leaf / "log.csv")
            log.trace.to_csv(leaf / "distances.csv")
            (leaf / "audit.json").write_text(json.dumps(
                [dict(layer=c.layer, epoch=c.epoch, mode=c.mode, distance=c.distance, bound=c.bound,
                      passed=c.passed) for c in checks], indent=1))
            (leaf / "summary.json").write_text(json.dumps(summary, indent=2))
            save_model(model, leaf / "model", extra={"data": spec, "stage": "adapt", "summary": summary})
            rows.append(summary)
            _say(args, f"{method}/{subspace} lr={lr:g} seed={seed}: F1 {f1[0]:.4f} -> {f1[-1]:.4f}")
    if len(lrs) > 1:
        _write_dicts(out / "sweep.csv", rows)
    return out


def cmd_evaluate(args) -> dict:
    cp, explicit = load_config(args.config, args.set, {"evaluate.archive": args.archive,
                                                       "evaluate.split": args.split})
    e = cp["evaluate"]
    path = _archive_path(e["archive"])
    model = load_model(path)
    spec = data_spec(cp, explicit, read_extra(path).get("data"))
    pair = load_pair(spec)
    split = e["split"]
    if split not in ("source", "source_test", "target", "target_test"):
        raise CLIError(f"unknown split {split!r}")
    metrics = evaluate(model, getattr(pair, split))
    result = {"archive": str(path), "split": split, **metrics}
    if args.out:
        out = run_dir(args.out, "evaluate")
        (out / "evaluate.json").write_text(json.dumps(result, indent=2))
        write_snapshot(cp, "evaluate", out)
    print(json.dumps(result))
    return result


# -- report -------------------------------------------------------------------------

GROUP_KEYS = ("method", "rf", "subspace", "ratio")
CONSTANT_KEYS = ("macs", "finetuned_params", "param_reduction_pct", "mac_reduction_pct")


def collect_summaries(dirs) -> list[dict]:
    rows = []
    for d in dirs:
        d = Path(d)
        if not d.exists():
            raise CLIError(f"run directory {d} not found")
        for f in sorted(d.rglob("summary.json")):
            rows.append(json.loads(f.read_text()))
    if not rows:
        raise CLIError("no completed runs (summary.json) found")
    return rows


def _mean_std(values) -> tuple[float, float]:
    v = np.asarray(values, dtype=np.float64)
    return float(v.mean()), float(v.std(ddof=1)) if len(v) > 1 else 0.0


def aggregate(rows: list[dict]) -> tuple[list[dict], list[dict]]:
    """Group runs, pick the best learning rate per group by mean final F1.

    Returns (best rows, all rows); logged values are only averaged, never recomputed.
    """
    by_lr: dict = {}
    for r in rows:
        key = tuple(r[k] for k in GROUP_KEYS) + (r["lr"],)
        by_lr.setdefault(key, []).append(r)
    table = []
    for key, runs in sorted(by_lr.items(), key=lambda kv: tuple(str(x) for x in kv[0])):
        seeds = [r["seed"] for r in runs]
        if len(set(seeds)) != len(seeds):
            raise CLIError(f"duplicate seeds {seeds} in group {key}")
        for c in CONSTANT_KEYS:
            if len({r[c] for r in runs}) > 1:
                raise CLIError(f"inconsistent {c} across seeds in group {key}")
        mean, std = _mean_std([r["f1_final"] for r in runs])
        entry = dict(zip(GROUP_KEYS + ("lr",), key))
        entry.update(f1_mean=100 * mean, f1_std=100 * std, n_seeds=len(runs),
                     seeds=" ".join(str(s) for s in sorted(seeds)),
                     **{c: runs[0][c] for c in CONSTANT_KEYS})
        entry["macs_M"] = runs[0].get("macs_M")
        entry["finetuned_params_K"] = runs[0].get("finetuned_params_K")
        table.append(entry)
    best = {}
    for e in table:
        k = tuple(e[g] for g in GROUP_KEYS)
        if k not in best or e["f1_mean"] > best[k]["f1_mean"]:
            best[k] = e
    return list(best.values()), table


TABLE1_COLUMNS = ("method", "rf", "subspace", "ratio", "lr", "f1_mean", "f1_std", "n_seeds", "seeds",
                  "macs_M", "finetuned_params_K", "param_reduction_pct", "mac_reduction_pct")


def cmd_report(args) -> Path:
    rows = collect_summaries(args.runs)
    best, table = aggregate(rows)
    out = run_dir(args.out, "report")
    _write_dicts(out / "table1.csv", best, TABLE1_COLUMNS)
    _write_dicts(out / "all_rows.csv", table, TABLE1_COLUMNS)
    ratios = sorted({e["ratio"] for e in best})
    with open(out / "table2.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "rf", "subspace"] + [f"ratio={r:g}" for r in ratios])
        groups: dict = {}
        for e in best:
            groups.setdefault((e["method"], str(e["rf"]), e["subspace"]), {})[e["ratio"]] = e
        for (m, rf, sub), cells in sorted(groups.items()):
            w.writerow([m, rf, sub] + [f"{cells[r]['f1_mean']:.2f} ± {cells[r]['f1_std']:.2f}" if r in cells
                                       else "" for r in ratios])
    _say(args, f"aggregated {len(rows)} runs into {len(best)} rows -> {out}")
    return out


# -- plumbing -----------------------------------------------------------------------

def _write_rows(path: Path, log) -> None:
    _write_dicts(path, log, list(log[0]) if log else ["epoch", "loss", "acc", "f1"])


def _write_dicts(path: Path, rows, columns=None) -> None:
    columns = list(columns or (rows[0].keys() if rows else []))
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns, extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({k: _cell(r.get(k, "")) for k in columns})


def _cell(v):
    if isinstance(v, float) and math.isfinite(v):
        return repr(v)
    return v


def _say(args, msg: str) -> None:
    if not getattr(args, "quiet", False):
        print(msg)


def _common(p):
    p.add_argument("--config", help="INI file with [data] [model] [pretrain] [decompose] [adapt] sections")
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override one config key")
    p.add_argument("--out", help=f"run directory (relative paths go under ${ENV_OUT})")
    p.add_argument("--quiet", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="tuckersfda", description=__doc__.split("\n")[0])
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="train a source model and archive it")
    _common(p)
    p.add_argument("--task", help="shipped synthetic task name")
    p.add_argument("--backbone", help="shipped backbone name (defaults to the task name)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--method", choices=METHODS, help="mapu also trains the feature imputer")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("decompose", help="Tucker-factorize an archive and run recovery fine-tuning")
    _common(p)
    p.add_argument("--archive")
    p.add_argument("--rf", type=int, help="rank factor")
    p.add_argument("--skip-recovery", action="store_true")
    p.add_argument("--recovery-epochs", type=int)
    p.set_defaults(func=cmd_decompose)

    p = sub.add_parser("adapt", help="source-free adaptation over one subspace")
    _common(p)
    p.add_argument("--archive")
    p.add_argument("--method", choices=METHODS)
    p.add_argument("--subspace", choices=SUBSPACES)
    p.add_argument("--ratio", type=float, help=f"target sample ratio, e.g. {', '.join(map(str, RATIOS))}")
    p.add_argument("--lr", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--seeds", type=int, nargs="+")
    p.add_argument("--lr-sweep", action="store_true", help="run every learning rate in adapt.sweep_lrs")
    p.add_argument("--off-grid-lr", action="store_true", help="allow a learning rate outside the grid")
    p.set_defaults(func=cmd_adapt)

    p = sub.add_parser("evaluate", help="score an archive on one split")
    _common(p)
    p.add_argument("--archive")
    p.add_argument("--split", choices=("source", "source_test", "target", "target_test"))
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("report", help="merge run summaries into table CSVs")
    p.add_argument("runs", nargs="+", help="run directories")
    p.add_argument("--out", help=f"report directory (relative paths go under ${ENV_OUT})")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_report)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except (CLIError, ArchiveError, ValueError) as e:
        # ValueError carries config validation messages
        print(f"error: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
