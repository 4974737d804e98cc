"""Command-line entry point: generate, train, evaluate, query, audit, sweep.

Exit codes: 0 success, 2 configuration error, 3 data or checkpoint error,
4 numeric failure. Relative ``--out`` paths resolve under ``$VACA_OUTPUT_ROOT``
when it is set.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path


from . import __version__
from .autodiff import NonFiniteError
from .config import ExperimentConfig, apply_overrides, format_config, load_config, save_config
from .data import DataError, Dataset, Normalization, load_dataset, normalize, read_csv_dataset, save_dataset
from .experiments import kernel_for, make_data, summarize, train_and_evaluate
from .fairness import FairnessError, audit, loan_demo_label
from .graph import CausalGraph
from .metrics import MetricReport, full_report
from .model import CheckpointError, ConfigError, TrainingError, VacaModel, load_model, save_model, train
from .queries import (
    InterventionSpec,
    QueryResult,
    counterfactual_vaca,
    sample_interventional_vaca,
    sample_observational_vaca,
)
from .scm import builtin_scm, sample_interventional, sample_observational

EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 2, 3, 4
METRIC_KEYS = MetricReport.SCALARS


def out_path(arg: str | None, default: str) -> Path:
    p = Path(arg or default)
    root = os.environ.get("VACA_OUTPUT_ROOT")
    return p if p.is_absolute() or not root else Path(root) / p


def _write_json(path: Path, data: dict) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, indent=2, sort_keys=True))
    return path


def _run_artifact(out: Path, command: str, cfg_text: str | None, files: dict, started: float, extra=None) -> None:
    """Every run directory carries the exact config and a manifest of what it produced."""
    if cfg_text is not None:
        (out / "config.ini").write_text(cfg_text)
    _write_json(out / "run.json", {
        "command": command,
        "tool_version": __version__,
        "config": "config.ini" if cfg_text is not None else None,
        "files": {k: str(v) for k, v in files.items()},
        "wall_time": time.perf_counter() - started,
        **(extra or {}),
    })


def _graph_from_file(path: str) -> CausalGraph:
    cfg = load_config(path)
    if cfg.graph is None:
        raise ConfigError(f"{path} has no [graph] section")
    return cfg.graph


def _load_data_arg(path: str, graph: CausalGraph | None = None, label: str | None = None, seed: int = 0,
                   shuffle: bool = True, fractions=(0.8, 0.1, 0.1)) -> Dataset:
    p = Path(path)
    if p.is_dir():
        return load_dataset(p)
    if graph is None:
        raise DataError("a CSV data file needs --graph")
    return read_csv_dataset(p, graph, label, tuple(fractions), seed=seed, shuffle=shuffle)


def _normalized_like(ds: Dataset, meta: dict) -> Dataset:
    """Apply the checkpoint's normalization to a raw dataset."""
    if ds.is_normalized:
        return ds
    norm = meta.get("normalization")
    if norm is None:
        raise CheckpointError("checkpoint carries no normalization statistics")
    stats = Normalization.from_dict(norm)
    return replace(ds, x=stats.apply(ds.x), normalization=stats)


# -- commands ---------------------------------------------------------------------------------


def cmd_generate(args) -> int:
    started = time.perf_counter()
    scm = builtin_scm(args.scm, args.sem)
    if args.intervene:
        node, _, value = args.intervene.partition("=")
        ds = sample_interventional(scm, (node, float(value)), args.n, args.seed)
    else:
        ds = sample_observational(scm, args.n, args.seed)
    if args.demo_label:
        if scm.name != "loan":
            raise ConfigError("--demo-label is defined for the loan SCM only")
        ds = replace(ds, y=loan_demo_label(ds.x, args.seed), meta={**ds.meta, "label": "Y"})
    out = out_path(args.out, f"data/{scm.name}_n{args.n}_s{args.seed}")
    save_dataset(ds, out)
    _run_artifact(out, "generate", None, {"dataset": out}, started,
                  {"scm": scm.name, "n": args.n, "seed": args.seed})
    print(f"wrote {ds.n} rows to {out}")
    return 0


def _experiment_config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if getattr(args, "seed", None) is not None:
        cfg.model = replace(cfg.model, seed=args.seed)
        cfg.experiment = replace(cfg.experiment, seeds=(args.seed,))
    if getattr(args, "set", None):
        cfg.model = apply_overrides(cfg.model, args.set)
    return cfg.validate()


def cmd_train(args) -> int:
    started = time.perf_counter()
    cfg = _experiment_config(args)
    data = args.data
    if not data and cfg.experiment.scm == "csv":
        # data.path is relative to the config file
        data = str(Path(args.config).parent / cfg.data.path)
    if data:
        graph = _graph_from_file(args.graph) if args.graph else cfg.graph
        ds = _load_data_arg(data, graph, cfg.data.label, cfg.experiment.data_seed, fractions=cfg.data.fractions)
    else:
        _, ds, _ = make_data(cfg.experiment.scm, cfg.experiment.sem, cfg.experiment.n_samples,
                             cfg.experiment.data_seed)
    ds = ds if ds.is_normalized else normalize(ds)
    cfg.model.validate(ds.graph)
    out = out_path(args.out, f"runs/{cfg.experiment.name}/train_s{cfg.model.seed}")
    out.mkdir(parents=True, exist_ok=True)
    log_file = open(out / "train.log", "w")

    def log(msg):
        log_file.write(msg + "\n")
        if args.verbose:
            print(msg)

    model = VacaModel(ds.graph, cfg.model)
    try:
        report = train(model, ds, cfg.model, log=log)
    finally:
        log_file.close()
    ckpt = save_model(model, out / "model.ckpt", ds.normalization,
                      {"data": data or cfg.experiment.scm})
    _write_json(out / "train_report.json", report.to_dict())
    _run_artifact(out, "train", format_config(cfg), {"checkpoint": ckpt, "train_report": out / "train_report.json"},
                  started)
    print(f"trained {report.epochs_run} epochs (best {report.best_epoch}, valid iwae {report.best_valid_iwae:.4f}); "
          f"checkpoint {ckpt}")
    return 0


def cmd_evaluate(args) -> int:
    started = time.perf_counter()
    model, meta = load_model(args.model)
    scm = builtin_scm(args.scm, args.sem)
    if scm.graph.fingerprint() != model.graph.fingerprint():
        raise CheckpointError(f"checkpoint graph does not match SCM {scm.name}")
    if args.data:
        ds = load_dataset(args.data)
    else:
        ds = sample_observational(scm, args.n_samples, args.data_seed)
    ds = _normalized_like(ds, meta)
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    m = cfg.metrics
    kernel = kernel_for(ds, m.gammas, m.median_heuristic, m.n)
    rep = full_report(model, scm, ds, m.n, args.seed, kernel, m.estimator, m.cf_mode, m.cf_max_rows)
    out = out_path(args.out, "runs/evaluate")
    rep.save(out)
    _run_artifact(out, "evaluate", format_config(cfg), {"report": out / "report.json", "cells": out / "cells.csv"},
                  started, {"model": str(args.model)})
    print(json.dumps(rep.scalars(), indent=2))
    return 0


def cmd_query(args) -> int:
    model, meta = load_model(args.model)
    norm = Normalization.from_dict(meta["normalization"]) if meta.get("normalization") else None
    g = model.graph
    out = out_path(args.out, f"runs/query_{args.kind}.csv")
    if args.kind == "obs":
        res = sample_observational_vaca(model, args.n, args.seed)
    else:
        if args.node is None or args.alpha is None:
            raise ConfigError("--node and --alpha are required for int and cf queries")
        alpha = tuple(float(a) for a in args.alpha.split(","))
        spec = InterventionSpec(args.node, alpha if len(alpha) > 1 else alpha[0], raw=args.raw)
        if args.kind == "int":
            res = sample_interventional_vaca(model, spec, args.n, args.seed, norm, clamp=not args.no_clamp)
        else:
            if not args.factuals:
                raise ConfigError("--factuals is required for cf queries")
            fact = _load_data_arg(args.factuals, g, shuffle=False)
            x_f = fact.x if fact.is_normalized or norm is None else norm.apply(fact.x)
            res = counterfactual_vaca(model, x_f, spec, args.mode, args.seed, norm, clamp=not args.no_clamp)
    if not args.normalized and norm is not None:
        res = QueryResult(norm.invert(res.samples), res.kind, {**res.provenance, "units": "raw"})
    else:
        res.provenance["units"] = "normalized"
    res.save(out, g.column_names())
    print(f"wrote {len(res.samples)} {res.kind} rows to {out}")
    return 0


def cmd_audit(args) -> int:
    started = time.perf_counter()
    model, meta = load_model(args.model)
    graph = _graph_from_file(args.graph) if args.graph else model.graph
    ds = _load_data_arg(args.data, graph, args.label, args.data_seed)
    if ds.y is None:
        raise DataError("audit needs a label column (--label, or a dataset with y.csv)")
    ds = _normalized_like(ds, meta)
    rep = audit(ds, ds.y.astype(int), model, args.sensitive, m=args.m, seed=args.seed)
    out = out_path(args.out, "runs/audit.json")
    rep.save(out)
    _run_artifact(out.parent, "audit", None, {"audit": out}, started, {"model": str(args.model)})
    for sel, r in rep.results.items():
        print(f"{sel:8s} uf={r['uf']:.4f} f1={r['f1']:.4f} acc={r['acc']:.4f}")
    return 0


def _sweep_job(job: dict) -> dict:
    cfg: ExperimentConfig = job["cfg"]
    model_cfg = job["model"]
    m = cfg.metrics
    _, _, ds = make_data(cfg.experiment.scm, cfg.experiment.sem, cfg.experiment.n_samples, cfg.experiment.data_seed)
    kernel = kernel_for(ds, m.gammas, m.median_heuristic, m.n)
    res, model = train_and_evaluate(cfg.experiment.scm, cfg.experiment.sem, model_cfg, cfg.experiment.n_samples,
                                    cfg.experiment.data_seed, m.n, model_cfg.seed, kernel, m.estimator,
                                    m.cf_mode, m.cf_max_rows)
    out = Path(job["out"])
    out.mkdir(parents=True, exist_ok=True)
    save_model(model, out / "model.ckpt", ds.normalization)
    res.metrics.save(out)
    _write_json(out / "train_report.json", res.train.to_dict())
    row = {**{k: job["point"][k] for k in job["point"]}, **res.row()}
    _write_json(out / "row.json", row)
    return row


def _fmt_key(v) -> str:
    return "|".join(str(x) for x in v) if isinstance(v, (tuple, list)) else str(v)


def aggregate_rows(rows: list[dict], keys: list[str]) -> list[dict]:
    """Mean and standard deviation of each metric per configuration (seeds pooled)."""
    groups: dict[tuple, list[dict]] = {}
    for r in rows:
        groups.setdefault(tuple(_fmt_key(r[k]) for k in keys), []).append(r)
    out = []
    for key, members in groups.items():
        row = dict(zip(keys, key))
        row["n_runs"] = len(members)
        for metric in METRIC_KEYS:
            mean, std = summarize([m[metric] for m in members])
            row[f"{metric}_mean"], row[f"{metric}_std"] = mean, std
        out.append(row)
    return out


def human_table(agg: list[dict], keys: list[str]) -> str:
    """Metrics x100 as mean±std, one line per configuration."""
    head = keys + list(METRIC_KEYS)
    lines = ["  ".join(f"{h:>16s}" for h in head)]
    for row in agg:
        cells = [f"{row[k]:>16s}" for k in keys]
        cells += [f"{100 * row[m + '_mean']:>8.2f}±{100 * row[m + '_std']:<7.2f}" for m in METRIC_KEYS]
        lines.append("  ".join(cells))
    return "\n".join(lines)


def cmd_sweep(args) -> int:
    started = time.perf_counter()
    cfg = _experiment_config(args)
    keys = sorted(cfg.sweep)
    out = out_path(args.out or cfg.experiment.output or None, f"runs/{cfg.experiment.name}/sweep")
    out.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out / "config.ini")
    jobs = []
    for point_cfg in cfg.grid():
        point = {k: getattr(point_cfg, k) for k in keys}
        tag = "_".join(f"{k}-{_fmt_key(v)}" for k, v in point.items()) or "base"
        for seed in cfg.experiment.seeds:
            jobs.append({"cfg": cfg, "model": replace(point_cfg, seed=seed), "point": point,
                         "out": str(out / tag / f"seed{seed}")})
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            rows = list(pool.map(_sweep_job, jobs))
    else:
        rows = [_sweep_job(j) for j in jobs]
    with open(out / "runs.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        for r in rows:
            w.writerow({k: _fmt_key(v) for k, v in r.items()})
    agg = aggregate_rows(rows, keys)
    with open(out / "aggregate.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(agg[0]))
        w.writeheader()
        w.writerows(agg)
    table = human_table(agg, keys)
    (out / "table.txt").write_text(table + "\n")
    _run_artifact(out, "sweep", format_config(cfg), {"runs": out / "runs.csv", "aggregate": out / "aggregate.csv",
                                                     "table": out / "table.txt"}, started, {"jobs": len(jobs)})
    print(table)
    return 0


# -- parser ------------------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="vaca", description="Causal graph VAE experiments")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="sample a dataset from a built-in SCM")
    g.add_argument("--scm", required=True)
    g.add_argument("--sem", default=None)
    g.add_argument("--n", type=int, default=10_000)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--intervene", help="NODE=VALUE, raw units")
    g.add_argument("--demo-label", action="store_true", help="attach the loan demonstration label")
    g.add_argument("--out")
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--config")
    t.add_argument("--data", help="dataset directory or CSV (defaults to sampling the config's SCM)")
    t.add_argument("--graph", help="config file with a [graph] section, for CSV data")
    t.add_argument("--seed", type=int)
    t.add_argument("--set", action="append", help="model override key=value (repeatable)")
    t.add_argument("--out")
    t.add_argument("-v", "--verbose", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="metric suite against a built-in SCM")
    e.add_argument("--model", required=True)
    e.add_argument("--scm", required=True)
    e.add_argument("--sem", default=None)
    e.add_argument("--data", help="dataset directory with stored exogenous draws")
    e.add_argument("--n-samples", type=int, default=10_000)
    e.add_argument("--data-seed", type=int, default=0)
    e.add_argument("--config", help="config whose [metrics] section is used")
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out")
    e.set_defaults(func=cmd_evaluate)

    q = sub.add_parser("query", help="observational, interventional or counterfactual samples")
    q.add_argument("--model", required=True)
    q.add_argument("--kind", choices=("obs", "int", "cf"), required=True)
    q.add_argument("--node")
    q.add_argument("--alpha", help="value(s) for the node columns, comma separated")
    q.add_argument("--raw", action="store_true", help="alpha in raw units")
    q.add_argument("--n", type=int, default=1000)
    q.add_argument("--factuals", help="dataset directory or CSV in raw units")
    q.add_argument("--mode", choices=("mean", "sample"), default="mean")
    q.add_argument("--no-clamp", action="store_true", help="keep decoded values for the intervened node")
    q.add_argument("--normalized", action="store_true", help="write normalized instead of raw units")
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("--out")
    q.set_defaults(func=cmd_query)

    a = sub.add_parser("audit", help="counterfactual fairness audit")
    a.add_argument("--model", required=True)
    a.add_argument("--data", required=True)
    a.add_argument("--graph")
    a.add_argument("--sensitive", required=True)
    a.add_argument("--label")
    a.add_argument("--m", type=int, default=10)
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--data-seed", type=int, default=0)
    a.add_argument("--out")
    a.set_defaults(func=cmd_audit)

    s = sub.add_parser("sweep", help="grid x seeds with an aggregate table")
    s.add_argument("--config", required=True)
    s.add_argument("--jobs", type=int, default=1)
    s.add_argument("--set", action="append")
    s.add_argument("--out")
    s.set_defaults(func=cmd_sweep)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, CheckpointError, FairnessError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NonFiniteError, TrainingError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
