"""Experiment building blocks shared by the CLI, the scripts and the acceptance suite."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .data import Dataset, normalize
from .fairness import AuditReport, audit, loan_demo_label
from .metrics import KernelSpec, MetricReport, full_report
from .model import TrainReport, VacaConfig, VacaModel, train
from .scm import ScmSpec, builtin_scm, sample_observational

# Compute budget used by the multi-seed suites: IWAE validation on 500 rows every
# 5 epochs. Patience still counts epochs.
BUDGET = {"valid_rows": 500, "eval_every": 5}


def make_data(scm_name: str, sem: str | None, n: int, seed: int) -> tuple[ScmSpec, Dataset, Dataset]:
    """Built-in SCM, its raw sample and the normalized copy used for training."""
    scm = builtin_scm(scm_name, sem)
    raw = sample_observational(scm, n, seed)
    return scm, raw, normalize(raw)


def kernel_for(ds: Dataset, gammas=None, median_heuristic: bool = False, n: int = 1000) -> KernelSpec:
    """Fixed bandwidth mixture, or one bandwidth from the median heuristic on test rows."""
    if median_heuristic:
        test = ds.x_of("test")[:n]
        half = len(test) // 2
        return KernelSpec.median_heuristic(test[:half], test[half : 2 * half])
    return KernelSpec(tuple(gammas)) if gammas else KernelSpec()


@dataclass
class RunResult:
    scm: str
    seed: int
    config: dict
    train: TrainReport
    metrics: MetricReport
    wall_time: float = 0.0
    extra: dict = field(default_factory=dict)

    def row(self) -> dict:
        out = {"scm": self.scm, "seed": self.seed, **self.metrics.scalars(),
               "epochs": self.train.epochs_run, "best_epoch": self.train.best_epoch,
               "best_valid_iwae": self.train.best_valid_iwae, "wall_time": self.wall_time}
        return out


def train_and_evaluate(scm_name: str, sem: str | None, config: VacaConfig, n_samples: int = 10_000,
                       data_seed: int = 0, metric_n: int = 1000, metric_seed: int = 0,
                       kernel: KernelSpec | None = None, estimator: str = "verbatim", cf_mode: str = "mean",
                       cf_max_rows: int | None = None, log=None) -> tuple[RunResult, VacaModel]:
    start = time.perf_counter()
    scm, _, ds = make_data(scm_name, sem, n_samples, data_seed)
    model = VacaModel(scm.graph, config)
    report = train(model, ds, config, log=log)
    metrics = full_report(model, scm, ds, metric_n, metric_seed, kernel, estimator, cf_mode, cf_max_rows)
    label = scm.name
    return RunResult(label, config.seed, config.to_dict(), report, metrics, time.perf_counter() - start), model


def summarize(values) -> tuple[float, float]:
    arr = np.asarray([v for v in values if not (isinstance(v, float) and math.isnan(v))], dtype=float)
    if len(arr) == 0:
        return float("nan"), float("nan")
    return float(arr.mean()), float(arr.std())


# -- design conditions (decoder depth vs longest path) ----------------------------------------


def design_condition_runs(scm_name: str, sem: str | None, hidden_layers: list[int], seeds: list[int],
                          n_samples: int = 10_000, base: VacaConfig | None = None,
                          log=None) -> dict[int, list[RunResult]]:
    """Interventional metrics per decoder depth, one run per seed."""
    base = base or VacaConfig(**BUDGET)
    out: dict[int, list[RunResult]] = {}
    for n_h in hidden_layers:
        for seed in seeds:
            cfg = replace(base, decoder_hidden_layers=n_h, allow_shallow_decoder=True, seed=seed)
            res, _ = train_and_evaluate(scm_name, sem, cfg, n_samples, data_seed=0, metric_seed=seed)
            out.setdefault(n_h, []).append(res)
            if log:
                log(f"{scm_name} {sem} N_h={n_h} seed={seed}: mmd_int={res.metrics.mmd_int:.4f} "
                    f"({res.wall_time:.0f}s)")
    return out


# -- fairness -----------------------------------------------------------------------------------


def loan_fairness_run(seed: int, config: VacaConfig | None = None, n_samples: int = 10_000, m: int = 10,
                      log=None) -> tuple[AuditReport, TrainReport]:
    """Train VACA on loan data with the demonstration label and audit it with G sensitive."""
    cfg = replace(config or VacaConfig(**BUDGET), seed=seed)
    scm, raw, ds = make_data("loan", None, n_samples, seed)
    labels = loan_demo_label(raw.x, seed)
    model = VacaModel(scm.graph, cfg)
    report = train(model, ds, cfg, log=log)
    rep = audit(ds, labels, model, "G", m=m, seed=seed)
    rep.meta.update({"label_rate": float(labels.mean()), "epochs": report.epochs_run})
    return rep, report
