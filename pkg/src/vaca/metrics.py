"""Distribution and counterfactual error metrics over a standard intervention grid.

Everything is computed in normalized data space. Estimators answer queries in
that space; the oracle estimator converts through the dataset's normalization.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from .data import Dataset
from .model import VacaModel
from .queries import (
    InterventionSpec,
    counterfactual_vaca,
    sample_interventional_vaca,
    sample_observational_vaca,
)
from .scm import ScmSpec, evaluate, sample_interventional, sample_observational

DEFAULT_GAMMAS = (0.01, 0.1, 1.0, 10.0, 100.0)
ALPHA_GRID = (-1.0, -0.5, 0.0, 0.5, 1.0)


@dataclass(frozen=True)
class KernelSpec:
    """k(x, y) = sum_b exp(-gamma_b * ||x - y||^2)."""

    gammas: tuple[float, ...] = DEFAULT_GAMMAS

    def __post_init__(self):
        if not self.gammas or any(not g > 0 for g in self.gammas):
            raise ValueError("kernel bandwidth coefficients must be positive")

    @classmethod
    def median_heuristic(cls, xs: np.ndarray, ys: np.ndarray) -> "KernelSpec":
        """Single bandwidth 1 / median squared distance of the pooled sample."""
        pooled = np.vstack([xs, ys])
        d2 = _sq_dists(pooled, pooled)
        med = np.median(d2[np.triu_indices(len(pooled), k=1)])
        return cls((1.0 / med if med > 0 else 1.0,))

    def gram(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        d2 = _sq_dists(a, b)
        return sum(np.exp(-g * d2) for g in self.gammas)


def _sq_dists(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    diff = a[:, None, :] - b[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def mmd2(xs: np.ndarray, ys: np.ndarray, kernel: KernelSpec | None = None, estimator: str = "verbatim") -> float:
    """Squared MMD between equal-size samples.

    ``verbatim`` scales the three full double sums (diagonals included) by
    1/(n(n-1)); ``unbiased`` is the textbook U-statistic with i != j.
    """
    kernel = kernel or KernelSpec()
    xs = np.atleast_2d(np.asarray(xs, dtype=np.float64))
    ys = np.atleast_2d(np.asarray(ys, dtype=np.float64))
    n = xs.shape[0]
    if ys.shape[0] != n:
        raise ValueError(f"mmd2 needs equal sample sizes, got {n} and {ys.shape[0]}")
    if n < 2:
        raise ValueError("mmd2 needs at least 2 samples per set")
    if xs.shape[1] != ys.shape[1]:
        raise ValueError("sample sets have different column counts")
    kxx, kyy, kxy = kernel.gram(xs, xs), kernel.gram(ys, ys), kernel.gram(xs, ys)
    if estimator == "verbatim":
        total = kxx.sum() + kyy.sum() - 2.0 * kxy.sum()
    elif estimator == "unbiased":
        off = ~np.eye(n, dtype=bool)
        total = kxx[off].sum() + kyy[off].sum() - kxy[off].sum() - kxy.T[off].sum()
    else:
        raise ValueError(f"unknown estimator {estimator!r}")
    return float(total / (n * (n - 1)))


# -- estimators ----------------------------------------------------------------------


class Estimator(Protocol):
    def observational(self, n: int, seed: int) -> np.ndarray: ...

    def interventional(self, node: int, alpha: np.ndarray, n: int, seed: int) -> np.ndarray: ...

    def counterfactual(self, x_f: np.ndarray, u_f: np.ndarray | None, node: int, alpha: np.ndarray) -> np.ndarray: ...


@dataclass
class VacaEstimator:
    model: VacaModel
    cf_mode: str = "mean"

    def observational(self, n, seed):
        return sample_observational_vaca(self.model, n, seed).samples

    def interventional(self, node, alpha, n, seed):
        return sample_interventional_vaca(self.model, InterventionSpec(node, tuple(alpha)), n, seed).samples

    def counterfactual(self, x_f, u_f, node, alpha):
        return counterfactual_vaca(self.model, x_f, InterventionSpec(node, tuple(alpha)), self.cf_mode).samples


@dataclass
class OracleEstimator:
    """Ground truth from the SCM, mapped into the dataset's normalized space."""

    scm: ScmSpec
    ds: Dataset

    def _to_raw(self, node: int, alpha: np.ndarray) -> np.ndarray:
        s = self.scm.graph.node_slices[node]
        norm = self.ds.normalization
        return alpha if norm is None else alpha * norm.std[s] + norm.mean[s]

    def _to_norm(self, x: np.ndarray) -> np.ndarray:
        return x if self.ds.normalization is None else self.ds.normalization.apply(x)

    def observational(self, n, seed):
        return self._to_norm(sample_observational(self.scm, n, seed).x)

    def interventional(self, node, alpha, n, seed):
        return self._to_norm(sample_interventional(self.scm, {node: self._to_raw(node, alpha)}, n, seed).x)

    def counterfactual(self, x_f, u_f, node, alpha):
        if u_f is None:
            raise ValueError("oracle counterfactuals need stored exogenous draws")
        return self._to_norm(evaluate(self.scm, u_f, {node: self._to_raw(node, alpha)}))


@dataclass
class FactualEstimator:
    """Baseline that ignores interventions: observational samples, factual rows as counterfactuals."""

    inner: Estimator

    def observational(self, n, seed):
        return self.inner.observational(n, seed)

    def interventional(self, node, alpha, n, seed):
        return self.inner.observational(n, seed)

    def counterfactual(self, x_f, u_f, node, alpha):
        return np.array(x_f, dtype=np.float64, copy=True)


# -- intervention grid ----------------------------------------------------------------


@dataclass(frozen=True)
class GridCell:
    node: int
    alpha: tuple[float, ...]  # normalized units
    multiplier: float | None  # grid multiplier for continuous nodes, None for support values


def intervention_grid(ds: Dataset, alphas: Sequence[float] = ALPHA_GRID) -> list[GridCell]:
    """Non-leaf nodes crossed with ``alpha * sigma`` (sigma from the normalized train split).

    Nodes whose columns are all discrete use their support values instead.
    """
    g = ds.graph
    x_train = ds.x_of("train")
    sigma = x_train.std(axis=0)
    cells = []
    for i in range(g.d):
        if g.is_leaf(i):
            continue
        s = g.node_slices[i]
        kinds = g.kinds[i]
        if all(not k.is_continuous for k in kinds) and len(kinds) == 1:
            k = kinds[0]
            support = range(2) if k.family == "binary" else range(k.cardinality)
            cells.extend(GridCell(i, (float(v),), None) for v in support)
            continue
        modes = [float(np.bincount(x_train[:, c].astype(int)).argmax()) if not k.is_continuous else 0.0
                 for c, k in zip(range(s.start, s.stop), kinds)]
        for a in alphas:
            vals = tuple(a * sigma[c] if k.is_continuous else m
                         for c, k, m in zip(range(s.start, s.stop), kinds, modes))
            cells.append(GridCell(i, vals, a))
    return cells


def descendant_columns(ds: Dataset, node: int) -> list[int]:
    return ds.graph.columns_of(ds.graph.descendants(node))


# -- reports ----------------------------------------------------------------------------


@dataclass
class MetricReport:
    mmd_obs: float = float("nan")
    mmd_int: float = float("nan")
    mean_e: float = float("nan")
    std_e: float = float("nan")
    mse_cf: float = float("nan")
    sdse_cf: float = float("nan")
    cells: list[dict] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    SCALARS = ("mmd_obs", "mmd_int", "mean_e", "std_e", "mse_cf", "sdse_cf")

    def scalars(self) -> dict[str, float]:
        return {k: getattr(self, k) for k in self.SCALARS}

    def merge(self, other: "MetricReport") -> "MetricReport":
        out = MetricReport(cells=self.cells + other.cells, meta={**self.meta, **other.meta})
        for k in self.SCALARS:
            a, b = getattr(self, k), getattr(other, k)
            setattr(out, k, a if not np.isnan(a) else b)
        return out

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "MetricReport":
        return cls(**data)

    def save(self, out_dir: str | Path) -> Path:
        """``report.json`` plus ``cells.csv`` with one row per grid cell."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))
        keys = ["kind", "node", "alpha", "multiplier", "mmd", "mean_e", "std_e", "mse", "sdse"]
        with open(out / "cells.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=keys, extrasaction="ignore")
            w.writeheader()
            for c in self.cells:
                w.writerow({k: c.get(k, "") for k in keys})
        return out

    @classmethod
    def load(cls, out_dir: str | Path) -> "MetricReport":
        return cls.from_dict(json.loads((Path(out_dir) / "report.json").read_text()))


def observational_mmd(est: Estimator, ds: Dataset, n: int = 1000, seed: int = 0,
                      kernel: KernelSpec | None = None, estimator: str = "verbatim") -> float:
    """MMD between ``n`` estimator samples and the first ``n`` test rows."""
    truth = ds.x_of("test")[:n]
    return mmd2(truth, est.observational(len(truth), seed), kernel, estimator)


def interventional_suite(est: Estimator, truth: Estimator, ds: Dataset, n: int = 1000, seed: int = 0,
                         alphas: Sequence[float] = ALPHA_GRID, kernel: KernelSpec | None = None,
                         estimator: str = "verbatim") -> MetricReport:
    """MMD / MeanE / StdE over descendant columns, averaged over the grid."""
    cells, rows = intervention_grid(ds, alphas), []
    for k, cell in enumerate(cells):
        cols = descendant_columns(ds, cell.node)
        alpha = np.asarray(cell.alpha)
        x_true = truth.interventional(cell.node, alpha, n, seed + 2 * k)[:, cols]
        x_hat = est.interventional(cell.node, alpha, n, seed + 2 * k + 1)[:, cols]
        rows.append({
            "kind": "interventional",
            "node": ds.graph.names[cell.node],
            "alpha": list(cell.alpha),
            "multiplier": cell.multiplier,
            "mmd": mmd2(x_true, x_hat, kernel, estimator),
            "mean_e": float(np.mean((x_true.mean(0) - x_hat.mean(0)) ** 2)),
            "std_e": float(np.mean((x_true.std(0) - x_hat.std(0)) ** 2)),
        })
    return MetricReport(
        mmd_int=float(np.mean([r["mmd"] for r in rows])),
        mean_e=float(np.mean([r["mean_e"] for r in rows])),
        std_e=float(np.mean([r["std_e"] for r in rows])),
        cells=rows,
    )


def counterfactual_suite(est: Estimator, truth: Estimator, ds: Dataset, split: str = "test",
                         alphas: Sequence[float] = ALPHA_GRID, max_rows: int | None = None) -> MetricReport:
    """Per-row squared error over descendants; mean and spread of it per cell, averaged over cells."""
    rows_idx = ds.rows(split)
    x_f = ds.x[rows_idx]
    u_f = ds.u[rows_idx] if ds.u is not None else None
    if max_rows is not None:
        x_f = x_f[:max_rows]
        u_f = u_f[:max_rows] if u_f is not None else None
    out = []
    for cell in intervention_grid(ds, alphas):
        cols = descendant_columns(ds, cell.node)
        alpha = np.asarray(cell.alpha)
        x_true = truth.counterfactual(x_f, u_f, cell.node, alpha)[:, cols]
        x_hat = est.counterfactual(x_f, u_f, cell.node, alpha)[:, cols]
        t = ((x_true - x_hat) ** 2).sum(axis=1)
        out.append({
            "kind": "counterfactual",
            "node": ds.graph.names[cell.node],
            "alpha": list(cell.alpha),
            "multiplier": cell.multiplier,
            "mse": float(t.mean() / len(cols)),
            "sdse": float(t.std() / len(cols)),
        })
    return MetricReport(
        mse_cf=float(np.mean([r["mse"] for r in out])),
        sdse_cf=float(np.mean([r["sdse"] for r in out])),
        cells=out,
    )


def full_report(model: VacaModel, scm: ScmSpec, ds: Dataset, n: int = 1000, seed: int = 0,
                kernel: KernelSpec | None = None, estimator: str = "verbatim",
                cf_mode: str = "mean", cf_max_rows: int | None = None) -> MetricReport:
    est = VacaEstimator(model, cf_mode)
    truth = OracleEstimator(scm, ds)
    rep = interventional_suite(est, truth, ds, n, seed, kernel=kernel, estimator=estimator)
    rep = rep.merge(counterfactual_suite(est, truth, ds, max_rows=cf_max_rows))
    rep.mmd_obs = observational_mmd(est, ds, n, seed + 10_000, kernel, estimator)
    rep.meta = {"scm": scm.name, "n": n, "seed": seed, "model_hash": model.fingerprint(),
                "kernel_gammas": list((kernel or KernelSpec()).gammas), "mmd_estimator": estimator}
    return rep
