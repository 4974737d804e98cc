"""Datasets of observed columns (plus stored exogenous draws) and their persistence."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .graph import CausalGraph


class DataError(ValueError):
    """Malformed or missing data files."""


class DegenerateColumnError(DataError):
    """A continuous column has zero variance on the training split."""


class AbductionUnavailableError(DataError):
    """Counterfactual oracle asked for a sample without stored exogenous draws."""


@dataclass(frozen=True)
class Normalization:
    """Per-column affine standardization; identity on non-continuous columns."""

    mean: np.ndarray
    std: np.ndarray

    def apply(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, dtype=float) - self.mean) / self.std

    def invert(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x, dtype=float) * self.std + self.mean

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, data: dict) -> "Normalization":
        return cls(np.asarray(data["mean"], dtype=float), np.asarray(data["std"], dtype=float))


@dataclass
class Dataset:
    """Rows are ordered train, then valid, then test (sizes in ``splits``).

    ``x`` is in normalized units whenever ``normalization`` is set; ``u`` always
    holds the raw exogenous draws that produced each row (None for external data).
    """

    graph: CausalGraph
    x: np.ndarray
    u: np.ndarray | None = None
    y: np.ndarray | None = None
    splits: tuple[int, int, int] | None = None
    normalization: Normalization | None = None
    seed: int | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=float)
        if self.x.ndim != 2 or self.x.shape[1] != self.graph.n_columns:
            raise DataError(f"x has shape {self.x.shape}, layout needs {self.graph.n_columns} columns")
        if self.u is not None:
            self.u = np.asarray(self.u, dtype=float)
            if self.u.shape[0] != self.n:
                raise DataError("u and x row counts differ")
        if self.y is not None:
            self.y = np.asarray(self.y, dtype=float).reshape(-1)
            if self.y.shape[0] != self.n:
                raise DataError("y and x row counts differ")
        if self.splits is None:
            self.splits = (self.n, 0, 0)
        self.splits = tuple(int(s) for s in self.splits)
        if sum(self.splits) != self.n or min(self.splits) < 0:
            raise DataError(f"splits {self.splits} do not partition {self.n} rows")

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def node_slices(self) -> tuple[slice, ...]:
        return self.graph.node_slices

    def rows(self, split: str) -> slice:
        a, b, _ = self.splits
        bounds = {"train": (0, a), "valid": (a, a + b), "test": (a + b, self.n), "all": (0, self.n)}
        if split not in bounds:
            raise DataError(f"unknown split {split!r}")
        return slice(*bounds[split])

    def x_of(self, split: str) -> np.ndarray:
        return self.x[self.rows(split)]

    def raw_x(self) -> np.ndarray:
        return self.x if self.normalization is None else self.normalization.invert(self.x)

    @property
    def is_normalized(self) -> bool:
        return self.normalization is not None


def fit_normalization(graph: CausalGraph, x_train: np.ndarray) -> Normalization:
    if x_train.shape[0] == 0:
        raise DataError("normalization needs a non-empty training split")
    cont = np.array([k.is_continuous for k in graph.column_kinds])
    mean = np.where(cont, x_train.mean(axis=0), 0.0)
    std = np.where(cont, x_train.std(axis=0), 1.0)
    bad = [graph.column_names()[c] for c in np.flatnonzero(cont & ~(std > 0))]
    if bad:
        raise DegenerateColumnError(f"zero-variance continuous columns: {bad}")
    return Normalization(mean, std)


def normalize(ds: Dataset) -> Dataset:
    """Standardize continuous columns with train-split statistics."""
    if ds.is_normalized:
        raise DataError("dataset is already normalized")
    stats = fit_normalization(ds.graph, ds.x_of("train"))
    return replace(ds, x=stats.apply(ds.x), normalization=stats)


def denormalize(ds: Dataset) -> Dataset:
    if not ds.is_normalized:
        return ds
    return replace(ds, x=ds.normalization.invert(ds.x), normalization=None)


# -- persistence -------------------------------------------------------------


def _write_matrix(path: Path, header: list[str], values: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in values:
            w.writerow([repr(float(v)) for v in row])


def _read_matrix(path: Path) -> tuple[list[str], np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DataError(f"{path} is empty")
    try:
        values = np.array([[float(v) for v in r] for r in rows[1:]], dtype=float)
    except ValueError as exc:
        raise DataError(f"{path}: {exc}") from None
    return rows[0], values.reshape(len(rows) - 1, len(rows[0]))


def save_dataset(ds: Dataset, out_dir: str | Path) -> Path:
    """Write ``header.json`` plus ``x.csv`` (and ``u.csv`` / ``y.csv`` when present)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    header = {
        "graph": ds.graph.to_dict(),
        "node_slices": {n: [s.start, s.stop] for n, s in zip(ds.graph.names, ds.node_slices)},
        "column_kinds": [str(k) for k in ds.graph.column_kinds],
        "splits": list(ds.splits),
        "normalization": ds.normalization.to_dict() if ds.normalization else None,
        "seed": ds.seed,
        "meta": ds.meta,
        "has_u": ds.u is not None,
        "has_y": ds.y is not None,
    }
    (out / "header.json").write_text(json.dumps(header, indent=2))
    _write_matrix(out / "x.csv", ds.graph.column_names(), ds.x)
    if ds.u is not None:
        _write_matrix(out / "u.csv", [f"U_{n}" for n in ds.graph.names], ds.u)
    if ds.y is not None:
        _write_matrix(out / "y.csv", [ds.meta.get("label", "y")], ds.y[:, None])
    return out


def load_dataset(path: str | Path) -> Dataset:
    path = Path(path)
    if not (path / "header.json").exists():
        raise DataError(f"no dataset header at {path}")
    header = json.loads((path / "header.json").read_text())
    graph = CausalGraph.from_dict(header["graph"])
    _, x = _read_matrix(path / "x.csv")
    u = _read_matrix(path / "u.csv")[1] if header.get("has_u") else None
    y = _read_matrix(path / "y.csv")[1][:, 0] if header.get("has_y") else None
    norm = header.get("normalization")
    return Dataset(
        graph=graph,
        x=x,
        u=u,
        y=y,
        splits=tuple(header["splits"]),
        normalization=Normalization.from_dict(norm) if norm else None,
        seed=header.get("seed"),
        meta=header.get("meta", {}),
    )


def read_csv_dataset(
    path: str | Path,
    graph: CausalGraph,
    label: str | None = None,
    fractions: tuple[float, float, float] = (0.8, 0.1, 0.1),
    seed: int = 0,
    shuffle: bool = True,
) -> Dataset:
    """Ingest a CSV whose header names the graph's columns (``node`` or ``node_k``).

    Rows are shuffled with ``seed`` (unless ``shuffle`` is off) and split by ``fractions``.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"missing data file {path}")
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        records = list(reader)
        fields = reader.fieldnames or []
    wanted = graph.column_names()
    missing = [c for c in wanted + ([label] if label else []) if c not in fields]
    if missing:
        raise DataError(f"{path}: missing columns {missing}")
    try:
        x = np.array([[float(r[c]) for c in wanted] for r in records], dtype=float)
        y = np.array([float(r[label]) for r in records], dtype=float) if label else None
    except ValueError as exc:
        raise DataError(f"{path}: non-numeric value ({exc})") from None
    for col, kind in enumerate(graph.column_kinds):
        if kind.is_continuous:
            continue
        vals = x[:, col]
        if np.any(vals != np.round(vals)) or vals.min() < 0 or vals.max() >= kind.n_params + (kind.family == "binary"):
            raise DataError(f"{path}: column {wanted[col]} is not valid {kind}")
    perm = np.random.default_rng(seed).permutation(len(x)) if shuffle else np.arange(len(x))
    x = x[perm]
    y = y[perm] if y is not None else None
    n = len(x)
    n_train = int(round(fractions[0] * n))
    n_valid = int(round(fractions[1] * n))
    return Dataset(
        graph=graph,
        x=x,
        y=y,
        splits=(n_train, n_valid, n - n_train - n_valid),
        seed=seed,
        meta={"source": str(path), "label": label} if label else {"source": str(path)},
    )
