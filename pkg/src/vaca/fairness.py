"""Counterfactual-fairness audit of logistic-regression classifiers.

Four input selectors are compared: ``full`` (every column), ``unaware`` (all
but the sensitive node), ``fair-x`` (nodes that do not descend from the
sensitive node) and ``fair-z`` (posterior-mean latents of every node except the
sensitive one). Unfairness is the dataset average of the gap in positive
probability between counterfactuals under ``do(S = a)`` and ``do(S = 1 - a)``.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit, log_expit

from . import autodiff as ad
from .data import Dataset
from .graph import CausalGraph
from .model import VacaModel
from .queries import InterventionSpec, counterfactual_vaca

SELECTORS = ("full", "unaware", "fair-x", "fair-z")


class FairnessError(ValueError):
    """Invalid audit input (labels, sensitive attribute, selector)."""


# -- logistic regression ---------------------------------------------------------------


def balanced_weights(y: np.ndarray) -> tuple[float, float]:
    """Per-class weights n / (2 n_c) for classes 0 and 1."""
    y = np.asarray(y)
    n1 = int(np.sum(y == 1))
    n0 = len(y) - n1
    if n0 == 0 or n1 == 0:
        raise FairnessError("logistic regression needs both classes in the labels")
    return len(y) / (2.0 * n0), len(y) / (2.0 * n1)


@dataclass
class LogisticRegression:
    """Class-weighted logistic regression on standardized features."""

    weights: np.ndarray
    bias: float
    mean: np.ndarray
    scale: np.ndarray
    class_weights: tuple[float, float]
    steps: int = 0
    converged: bool = False

    def logits(self, features: np.ndarray) -> np.ndarray:
        return ((features - self.mean) / self.scale) @ self.weights + self.bias

    def predict_proba(self, features: np.ndarray) -> np.ndarray:
        return expit(self.logits(features))

    def predict(self, features: np.ndarray) -> np.ndarray:
        return (self.logits(features) > 0).astype(np.int64)

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("weights", "mean", "scale"):
            d[k] = getattr(self, k).tolist()
        return d


def train_logreg(features: np.ndarray, labels: np.ndarray, balanced: bool = True, tol: float = 1e-6,
                 max_steps: int = 10_000) -> LogisticRegression:
    """Full-batch gradient descent on the (class-weighted) mean cross-entropy.

    The step is 1/L with L the Lipschitz bound of the gradient, so the loss
    decreases monotonically; iteration stops when the gradient norm drops below
    ``tol`` or after ``max_steps`` steps.
    """
    x = np.atleast_2d(np.asarray(features, dtype=np.float64))
    y = np.asarray(labels, dtype=np.float64).reshape(-1)
    if x.shape[0] != y.shape[0]:
        raise FairnessError(f"{x.shape[0]} feature rows but {y.shape[0]} labels")
    if not np.all((y == 0) | (y == 1)):
        raise FairnessError("labels must be binary 0/1")
    cw = balanced_weights(y) if balanced else (1.0, 1.0)
    w_row = np.where(y == 1, cw[1], cw[0])
    mean = x.mean(axis=0)
    scale = x.std(axis=0)
    scale = np.where(scale > 0, scale, 1.0)
    xa = np.hstack([(x - mean) / scale, np.ones((x.shape[0], 1))])
    n = x.shape[0]
    lip = 0.25 * w_row.max() * np.linalg.eigvalsh(xa.T @ xa / n).max()
    step = 1.0 / lip
    theta = np.zeros(xa.shape[1])
    converged, k = False, 0
    for k in range(1, max_steps + 1):
        grad = xa.T @ (w_row * (expit(xa @ theta) - y)) / n
        if np.linalg.norm(grad) < tol:
            converged = True
            break
        theta -= step * grad
    return LogisticRegression(theta[:-1].copy(), float(theta[-1]), mean, scale, cw, k, converged)


def weighted_cross_entropy(clf: LogisticRegression, features: np.ndarray, labels: np.ndarray) -> float:
    z = clf.logits(features)
    y = np.asarray(labels, dtype=np.float64)
    w = np.where(y == 1, clf.class_weights[1], clf.class_weights[0])
    return float(-np.mean(w * (y * log_expit(z) + (1 - y) * log_expit(-z))))


def f1_accuracy(y_true: np.ndarray, y_pred: np.ndarray) -> tuple[float, float]:
    """Binary f1 for the positive class (0 when it is never predicted nor present) and accuracy."""
    t = np.asarray(y_true).astype(int)
    p = np.asarray(y_pred).astype(int)
    tp = int(np.sum((t == 1) & (p == 1)))
    fp = int(np.sum((t == 0) & (p == 1)))
    fn = int(np.sum((t == 1) & (p == 0)))
    denom = 2 * tp + fp + fn
    return (2 * tp / denom if denom else 0.0), float(np.mean(t == p))


# -- feature selection ---------------------------------------------------------------------


def selector_nodes(graph: CausalGraph, sensitive: int, selector: str) -> list[int]:
    """Graph nodes whose data (or latents, for ``fair-z``) feed the classifier."""
    if selector == "full":
        return list(range(graph.d))
    if selector in ("unaware", "fair-z"):
        return [i for i in range(graph.d) if i != sensitive]
    if selector == "fair-x":
        banned = graph.descendants(sensitive) | {sensitive}
        return [i for i in range(graph.d) if i not in banned]
    raise FairnessError(f"unknown selector {selector!r}; expected one of {SELECTORS}")


def _data_features(graph: CausalGraph, x: np.ndarray, nodes: list[int]) -> np.ndarray:
    """Selected columns; categorical codes expand to one-hot blocks."""
    kinds = graph.column_kinds
    blocks = []
    for c in graph.columns_of(nodes):
        kind = kinds[c]
        if kind.family == "categorical":
            codes = np.clip(np.rint(x[:, c]).astype(np.intp), 0, kind.cardinality - 1)
            blocks.append(np.eye(kind.cardinality)[codes])
        else:
            blocks.append(x[:, c : c + 1])
    return np.hstack(blocks) if blocks else np.zeros((x.shape[0], 0))


def latent_features(model: VacaModel, x: np.ndarray, nodes: list[int], batch: int = 20_000) -> np.ndarray:
    """Posterior means under the causal adjacency for ``nodes``, flattened per row."""
    out = []
    with ad.no_grad():
        for lo in range(0, x.shape[0], batch):
            mu, _ = model.encode(x[lo : lo + batch])
            out.append(np.transpose(mu.data[nodes], (1, 0, 2)).reshape(mu.shape[1], -1))
    return np.vstack(out) if out else np.zeros((0, len(nodes) * model.latent_dim))


@dataclass
class ClassifierSpec:
    selector: str
    sensitive: int
    nodes: list[int]
    clf: LogisticRegression

    def features(self, x: np.ndarray, graph: CausalGraph, model: VacaModel | None = None) -> np.ndarray:
        if self.selector == "fair-z":
            if model is None:
                raise FairnessError("fair-z features need the VACA model")
            return latent_features(model, x, self.nodes)
        return _data_features(graph, x, self.nodes)

    def proba(self, x: np.ndarray, graph: CausalGraph, model: VacaModel | None = None) -> np.ndarray:
        return self.clf.predict_proba(self.features(x, graph, model))


def fit_classifier(selector: str, x: np.ndarray, y: np.ndarray, graph: CausalGraph, sensitive: int,
                   model: VacaModel | None = None) -> ClassifierSpec:
    nodes = selector_nodes(graph, sensitive, selector)
    spec = ClassifierSpec(selector, sensitive, nodes, clf=None)  # type: ignore[arg-type]
    spec.clf = train_logreg(spec.features(x, graph, model), y)
    return spec


# -- unfairness -----------------------------------------------------------------------------


def _check_sensitive(graph: CausalGraph, sensitive: int) -> int:
    kinds = graph.kinds[sensitive]
    if len(kinds) != 1 or kinds[0].family != "binary":
        raise FairnessError(f"sensitive node {graph.names[sensitive]!r} must be a single binary column")
    return graph.node_slices[sensitive].start


def counterfactual_pairs(model: VacaModel, x_f: np.ndarray, sensitive: int, m: int = 10,
                         seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Sampled counterfactuals under do(S = a) and do(S = 1 - a), each ``(n * m, D)``.

    Rows are repeated ``m`` times in place. Both branches share one seed, so
    coordinates that do not descend from S coincide between them. The
    intervened column is clamped to the do-value.
    """
    col = _check_sensitive(model.graph, sensitive)
    x_rep = np.repeat(np.asarray(x_f, dtype=np.float64), m, axis=0)
    a = np.rint(x_rep[:, col]).astype(int)
    same = np.empty_like(x_rep)
    flip = np.empty_like(x_rep)
    for value in (0, 1):
        rows = np.flatnonzero(a == value)
        if len(rows) == 0:
            continue
        sub = x_rep[rows]
        same[rows] = counterfactual_vaca(model, sub, InterventionSpec(sensitive, float(value)), "sample",
                                         seed, clamp=True).samples
        flip[rows] = counterfactual_vaca(model, sub, InterventionSpec(sensitive, float(1 - value)), "sample",
                                         seed, clamp=True).samples
    return same, flip


def unfairness_from_pairs(spec: ClassifierSpec, same: np.ndarray, flip: np.ndarray, m: int,
                          graph: CausalGraph, model: VacaModel | None = None) -> float:
    p_same = spec.proba(same, graph, model).reshape(-1, m).mean(axis=1)
    p_flip = spec.proba(flip, graph, model).reshape(-1, m).mean(axis=1)
    return float(np.mean(np.abs(p_same - p_flip)))


def unfairness(spec: ClassifierSpec, model: VacaModel, x_f: np.ndarray, m: int = 10, seed: int = 0) -> float:
    """Mean over factual rows of |P(h = 1 | do(S = a)) - P(h = 1 | do(S = 1 - a))|."""
    same, flip = counterfactual_pairs(model, x_f, spec.sensitive, m, seed)
    return unfairness_from_pairs(spec, same, flip, m, model.graph, model)


# -- audit -------------------------------------------------------------------------------------


@dataclass
class AuditReport:
    results: dict[str, dict[str, float]] = field(default_factory=dict)  # selector -> {uf, f1, acc}
    m: int = 10
    model_hash: str = ""
    sensitive: str = ""
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "AuditReport":
        return cls(**data)

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))
        return path

    @classmethod
    def load(cls, path: str | Path) -> "AuditReport":
        return cls.from_dict(json.loads(Path(path).read_text()))


def audit(ds: Dataset, labels: np.ndarray, model: VacaModel, sensitive: int | str, m: int = 10,
          seed: int = 0, selectors: tuple[str, ...] = SELECTORS, eval_split: str = "test") -> AuditReport:
    """Train each classifier on the train split; score f1/acc and unfairness on ``eval_split``."""
    g = ds.graph
    if g.fingerprint() != model.graph.fingerprint():
        raise FairnessError("dataset graph does not match the model graph")
    s = g.index(sensitive)
    _check_sensitive(g, s)
    labels = np.asarray(labels).reshape(-1)
    if labels.shape[0] != ds.n:
        raise FairnessError(f"{labels.shape[0]} labels for {ds.n} rows")
    tr, ev = ds.rows("train"), ds.rows(eval_split)
    x_tr, y_tr = ds.x[tr], labels[tr]
    x_ev, y_ev = ds.x[ev], labels[ev]
    if len(x_ev) == 0:
        raise FairnessError(f"split {eval_split!r} is empty")
    same, flip = counterfactual_pairs(model, x_ev, s, m, seed)
    results = {}
    for sel in selectors:
        spec = fit_classifier(sel, x_tr, y_tr, g, s, model)
        f1, acc = f1_accuracy(y_ev, spec.clf.predict(spec.features(x_ev, g, model)))
        results[sel] = {
            "uf": unfairness_from_pairs(spec, same, flip, m, g, model),
            "f1": f1,
            "acc": acc,
            "gd_steps": spec.clf.steps,
            "converged": spec.clf.converged,
        }
    return AuditReport(results, m, model.fingerprint(), g.names[s],
                       {"seed": seed, "eval_split": eval_split, "n_eval": int(len(x_ev))})


# -- demonstration label ------------------------------------------------------------------------


def loan_demo_label(x_raw: np.ndarray, seed: int) -> np.ndarray:
    """Invented approval label for the loan SCM, used only to exercise the audit.

    y = 1{sigmoid(0.3 I + 0.2 S - 0.1 D - 0.1 L + e) > 0.5}, e ~ N(0, 1), raw units.
    """
    from .scm import LOAN_NAMES

    col = {name: k for k, name in enumerate(LOAN_NAMES)}
    x = np.asarray(x_raw, dtype=np.float64)
    noise = np.random.default_rng([seed, 7]).standard_normal(x.shape[0])
    score = 0.3 * x[:, col["I"]] + 0.2 * x[:, col["S"]] - 0.1 * x[:, col["D"]] - 0.1 * x[:, col["L"]] + noise
    return (expit(score) > 0.5).astype(np.int64)
