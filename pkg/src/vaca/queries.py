"""Observational, interventional and counterfactual queries against a trained VACA.

All inputs and outputs are in the model's (normalized) data space unless an
:class:`InterventionSpec` is flagged ``raw``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .data import Normalization
from .model import VacaModel


@dataclass(frozen=True)
class InterventionSpec:
    """do(X_node = alpha) on a single node; ``alpha`` has one entry per node column."""

    node: int | str
    alpha: float | tuple[float, ...]
    raw: bool = False

    def resolve(self, model: VacaModel, normalization: Normalization | None = None) -> tuple[int, np.ndarray]:
        g = model.graph
        i = g.index(self.node)
        alpha = np.atleast_1d(np.asarray(self.alpha, dtype=np.float64))
        if alpha.shape != (g.node_dims[i],):
            raise ValueError(f"alpha for {g.names[i]!r} needs {g.node_dims[i]} values, got {alpha.shape}")
        if not np.all(np.isfinite(alpha)):
            raise ValueError("alpha must be finite")
        if self.raw:
            if normalization is None:
                raise ValueError("raw alpha needs normalization statistics")
            s = g.node_slices[i]
            alpha = (alpha - normalization.mean[s]) / normalization.std[s]
        return i, alpha

    def to_dict(self) -> dict:
        a = self.alpha if isinstance(self.alpha, (int, float)) else list(self.alpha)
        return {"node": self.node, "alpha": a, "raw": self.raw}


@dataclass
class QueryResult:
    samples: np.ndarray
    kind: str
    provenance: dict = field(default_factory=dict)

    def save(self, path: str | Path, column_names: list[str]) -> Path:
        """CSV of samples plus ``<path>.json`` provenance."""
        import csv

        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(column_names)
            for row in self.samples:
                w.writerow([repr(float(v)) for v in row])
        Path(str(path) + ".json").write_text(
            json.dumps({"kind": self.kind, "provenance": self.provenance}, indent=2, sort_keys=True)
        )
        return path


def _streams(seed: int, k: int) -> list[np.random.Generator]:
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(k)]


def _clamp(model: VacaModel, x: np.ndarray, i: int, alpha: np.ndarray) -> np.ndarray:
    x = x.copy()
    x[:, model.graph.node_slices[i]] = alpha
    return x


def sample_observational_vaca(model: VacaModel, n: int, seed: int) -> QueryResult:
    """Decode prior draws under the causal adjacency and sample the likelihood."""
    rng_z, rng_x = _streams(seed, 2)
    prov = {"model_hash": model.fingerprint(), "seed": seed, "n": n}
    if n == 0:
        return QueryResult(np.zeros((0, model.graph.n_columns)), "observational", prov)
    z = rng_z.standard_normal((model.d, n, model.latent_dim))
    with ad.no_grad():
        params = model.decode(z)
    return QueryResult(model.sample_likelihood(params, rng_x), "observational", prov)


def sample_interventional_vaca(
    model: VacaModel,
    spec: InterventionSpec,
    n: int,
    seed: int,
    normalization: Normalization | None = None,
    filler: np.ndarray | None = None,
    clamp: bool = False,
) -> QueryResult:
    """Encode the intervened value under A^I for Z_i, draw the rest from the prior, decode under A^I.

    ``filler`` supplies the non-intervened coordinates of the encoder input;
    they cannot influence the result because row i of A^I keeps only its self-loop.
    """
    i, alpha = spec.resolve(model, normalization)
    rng_z, rng_eps, rng_x = _streams(seed, 3)
    prov = {"model_hash": model.fingerprint(), "seed": seed, "n": n, "intervention": spec.to_dict()}
    if n == 0:
        return QueryResult(np.zeros((0, model.graph.n_columns)), "interventional", prov)
    adj_i = model.graph.vaca_adjacency([i])
    x_int = np.zeros((n, model.graph.n_columns)) if filler is None else np.array(filler, dtype=np.float64)
    x_int[:, model.graph.node_slices[i]] = alpha
    z = rng_z.standard_normal((model.d, n, model.latent_dim))
    with ad.no_grad():
        mu, logsig = model.encode(x_int, adj_i)
        eps = rng_eps.standard_normal((n, model.latent_dim))
        z[i] = mu.data[i] + np.exp(logsig.data[i]) * eps
        params = model.decode(z, adj_i)
    x = model.sample_likelihood(params, rng_x)
    return QueryResult(_clamp(model, x, i, alpha) if clamp else x, "interventional", prov)


def reconstruct(model: VacaModel, x: np.ndarray) -> np.ndarray:
    """Likelihood means (or modes) of ``decode(E_q[z])`` under the causal adjacency."""
    with ad.no_grad():
        mu, _ = model.encode(x)
        return model.likelihood_mean(model.decode(mu))


def counterfactual_vaca(
    model: VacaModel,
    x_factual: np.ndarray,
    spec: InterventionSpec,
    mode: str = "mean",
    seed: int = 0,
    normalization: Normalization | None = None,
    clamp: bool = False,
) -> QueryResult:
    """Abduction under A, action under A^I for the intervened latent, prediction under A^I.

    ``mode="mean"`` uses posterior means and likelihood means (argmax codes for
    discrete columns); ``mode="sample"`` draws both.
    """
    if mode not in ("mean", "sample"):
        raise ValueError(f"mode must be 'mean' or 'sample', got {mode!r}")
    x_f = np.atleast_2d(np.asarray(x_factual, dtype=np.float64))
    if x_f.shape[1] != model.graph.n_columns:
        raise ValueError(f"factual rows need {model.graph.n_columns} columns, got {x_f.shape[1]}")
    i, alpha = spec.resolve(model, normalization)
    rng_f, rng_i, rng_x = _streams(seed, 3)
    adj_i = model.graph.vaca_adjacency([i])
    x_int = x_f.copy()
    x_int[:, model.graph.node_slices[i]] = alpha
    with ad.no_grad():
        mu_f, logsig_f = model.encode(x_f)
        mu_i, logsig_i = model.encode(x_int, adj_i)
        z = mu_f.data.copy()
        z_i = mu_i.data[i]
        if mode == "sample":
            z = z + np.exp(logsig_f.data) * rng_f.standard_normal(z.shape)
            z_i = z_i + np.exp(logsig_i.data[i]) * rng_i.standard_normal(z_i.shape)
        z[i] = z_i
        params = model.decode(z, adj_i)
    x = model.likelihood_mean(params) if mode == "mean" else model.sample_likelihood(params, rng_x)
    prov = {"model_hash": model.fingerprint(), "seed": seed, "mode": mode, "intervention": spec.to_dict()}
    return QueryResult(_clamp(model, x, i, alpha) if clamp else x, "counterfactual", prov)
