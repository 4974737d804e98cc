"""Ground-truth structural causal models used as the verification oracle.

Each node owns one exogenous prior and one structural equation. Equations
receive only their parents' values (keyed by name) and their own exogenous draw.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy.special import expit as sigmoid

from .data import AbductionUnavailableError, Dataset
from .graph import BINARY, CONTINUOUS, CausalGraph, ColumnKind, GraphError, categorical


# -- exogenous priors ----------------------------------------------------------


@dataclass(frozen=True)
class Normal:
    mean: float = 0.0
    var: float = 1.0

    def __post_init__(self):
        if not self.var > 0:
            raise ValueError("Normal variance must be positive")

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return rng.normal(self.mean, np.sqrt(self.var), size=n)


@dataclass(frozen=True)
class MixtureOfGaussians:
    weights: tuple[float, ...]
    means: tuple[float, ...]
    variances: tuple[float, ...]

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        if not (len(self.weights) == len(self.means) == len(self.variances)):
            raise ValueError("mixture components have mismatched lengths")
        if np.any(w < 0) or not np.isclose(w.sum(), 1.0):
            raise ValueError("mixture weights must be non-negative and sum to 1")
        if any(not v > 0 for v in self.variances):
            raise ValueError("mixture variances must be positive")

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        comp = rng.choice(len(self.weights), size=n, p=np.asarray(self.weights))
        eps = rng.standard_normal(n)
        return np.asarray(self.means)[comp] + np.sqrt(np.asarray(self.variances))[comp] * eps


@dataclass(frozen=True)
class Bernoulli:
    p: float = 0.5

    def __post_init__(self):
        if not 0.0 <= self.p <= 1.0:
            raise ValueError("Bernoulli p must lie in [0, 1]")

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return (rng.random(n) < self.p).astype(float)


@dataclass(frozen=True)
class Gamma:
    shape: float
    scale: float

    def __post_init__(self):
        if not (self.shape > 0 and self.scale > 0):
            raise ValueError("Gamma shape and scale must be positive")

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return rng.gamma(self.shape, self.scale, size=n)


@dataclass(frozen=True)
class ShiftedGamma:
    shape: float
    scale: float
    shift: float

    def __post_init__(self):
        if not (self.shape > 0 and self.scale > 0):
            raise ValueError("Gamma shape and scale must be positive")

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return rng.gamma(self.shape, self.scale, size=n) + self.shift


@dataclass(frozen=True)
class Categorical:
    probs: tuple[float, ...]

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=float)
        if np.any(p < 0) or not np.isclose(p.sum(), 1.0):
            raise ValueError("categorical probabilities must be non-negative and sum to 1")

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return rng.choice(len(self.probs), size=n, p=np.asarray(self.probs)).astype(float)


ExogenousPrior = Normal | MixtureOfGaussians | Bernoulli | Gamma | ShiftedGamma | Categorical
Equation = Callable[[Mapping[str, np.ndarray], np.ndarray], np.ndarray]


# -- SCM container -------------------------------------------------------------


@dataclass(frozen=True)
class ScmSpec:
    """An SCM over ``graph``; ``priors[i]`` and ``equations[i]`` belong to node i."""

    name: str
    graph: CausalGraph
    priors: tuple[ExogenousPrior, ...]
    equations: tuple[Equation, ...]

    def __post_init__(self):
        if not (len(self.priors) == len(self.equations) == self.graph.d):
            raise GraphError("an SCM needs exactly one prior and one equation per node")

    @property
    def d(self) -> int:
        return self.graph.d


Intervention = Mapping[int | str, float | Sequence[float]]


def _as_intervention(scm: ScmSpec, intervention) -> dict[int, np.ndarray]:
    if intervention is None:
        return {}
    if isinstance(intervention, tuple) and len(intervention) == 2 and not isinstance(intervention[0], tuple):
        intervention = {intervention[0]: intervention[1]}
    out = {}
    for node, value in intervention.items():
        i = scm.graph.index(node)
        v = np.atleast_1d(np.asarray(value, dtype=float))
        if v.shape != (scm.graph.node_dims[i],) or not np.all(np.isfinite(v)):
            raise ValueError(f"intervention value for {scm.graph.names[i]!r} must be finite with dim {scm.graph.node_dims[i]}")
        out[i] = v
    return out


def draw_u(scm: ScmSpec, n: int, rng: np.random.Generator) -> np.ndarray:
    """One column per node, drawn node by node in index order."""
    return np.stack([p.sample(rng, n) for p in scm.priors], axis=1)


def evaluate(scm: ScmSpec, u: np.ndarray, intervention: Intervention | None = None) -> np.ndarray:
    """Push exogenous draws ``u`` (n x d) through the (possibly intervened) equations."""
    u = np.atleast_2d(np.asarray(u, dtype=float))
    g = scm.graph
    do = _as_intervention(scm, intervention)
    n = u.shape[0]
    x = np.zeros((n, g.n_columns))
    values: dict[int, np.ndarray] = {}
    for i in g.topological_order():
        if i in do:
            v = np.broadcast_to(do[i], (n, g.node_dims[i])).copy()
        else:
            pa = {g.names[j]: values[j] for j in g.parents(i)}
            v = np.asarray(scm.equations[i](pa, u[:, i]), dtype=float).reshape(n, g.node_dims[i])
        values[i] = v[:, 0] if v.shape[1] == 1 else v
        x[:, g.node_slices[i]] = v
    return x


def default_splits(n: int) -> tuple[int, int, int]:
    """Half train, a quarter each for validation and test (5000/2500/2500 at n=10000)."""
    n_train = n // 2
    n_valid = n // 4
    return n_train, n_valid, n - n_train - n_valid


def sample_observational(
    scm: ScmSpec, n: int, seed: int, splits: tuple[int, int, int] | None = None
) -> Dataset:
    if n < 1:
        raise ValueError("n must be at least 1")
    u = draw_u(scm, n, np.random.default_rng(seed))
    return Dataset(scm.graph, evaluate(scm, u), u=u, splits=splits or default_splits(n), seed=seed,
                   meta={"scm": scm.name})


def sample_interventional(
    scm: ScmSpec, intervention: Intervention, n: int, seed: int, splits: tuple[int, int, int] | None = None
) -> Dataset:
    """Same exogenous stream as :func:`sample_observational` for the same seed."""
    if n < 1:
        raise ValueError("n must be at least 1")
    u = draw_u(scm, n, np.random.default_rng(seed))
    do = _as_intervention(scm, intervention)
    meta = {"scm": scm.name, "intervention": {scm.graph.names[i]: v.tolist() for i, v in do.items()}}
    return Dataset(scm.graph, evaluate(scm, u, do), u=u, splits=splits or default_splits(n), seed=seed, meta=meta)


def counterfactual_oracle(scm: ScmSpec, ds: Dataset, rows, intervention: Intervention) -> np.ndarray:
    """Raw-unit counterfactuals for stored rows, with abduction by stored ``u``."""
    if ds.u is None:
        raise AbductionUnavailableError("dataset has no stored exogenous draws")
    idx = np.atleast_1d(np.asarray(rows))
    out = evaluate(scm, ds.u[idx], intervention)
    return out[0] if np.ndim(rows) == 0 else out


# -- built-in SCMs -------------------------------------------------------------

_MOG_LIN = MixtureOfGaussians((0.5, 0.5), (-2.0, 1.5), (1.5, 1.0))
_MOG_NADD = MixtureOfGaussians((0.5, 0.5), (-2.5, 2.5), (1.0, 1.0))

_PRIORS3 = {
    "LIN": (_MOG_LIN, Normal(0, 1), Normal(0, 1)),
    "NLIN": (_MOG_LIN, Normal(0, 0.1), Normal(0, 1)),
    "NADD": (_MOG_NADD, Normal(0, 0.25), Normal(0, 0.0625)),
}


def _root(pa, u):
    return u


def _collider(sem: str):
    if sem == "LIN":
        x3 = lambda pa, u: 0.05 * pa["X1"] + 0.25 * pa["X2"] + u
    elif sem == "NLIN":
        x3 = lambda pa, u: 0.05 * pa["X1"] + 0.25 * pa["X2"] ** 2 + u
    else:
        x3 = lambda pa, u: -1 + 0.1 * np.sign(u) * (pa["X1"] ** 2 + pa["X2"] ** 2) * u
    return (_root, _root, x3), [("X1", "X3"), ("X2", "X3")]


def _triangle(sem: str):
    if sem == "LIN":
        x2 = lambda pa, u: -pa["X1"] + u
        x3 = lambda pa, u: pa["X1"] + 0.25 * pa["X2"] + u
    elif sem == "NLIN":
        x2 = lambda pa, u: -1 + 3 / (1 + np.exp(-2 * pa["X1"])) + u
        x3 = lambda pa, u: pa["X1"] + 0.25 * pa["X2"] ** 2 + u
    else:
        x2 = lambda pa, u: 0.25 * np.sign(u) * pa["X1"] ** 2 * (1 + u**2)
        x3 = lambda pa, u: -1 + 0.1 * np.sign(u) * (pa["X1"] ** 2 + pa["X2"] ** 2) + u
    return (_root, x2, x3), [("X1", "X2"), ("X1", "X3"), ("X2", "X3")]


def _chain(sem: str):
    if sem == "LIN":
        x2 = lambda pa, u: -pa["X1"] + u
        x3 = lambda pa, u: 0.25 * pa["X2"] + u
    elif sem == "NLIN":
        x2 = lambda pa, u: -1 + 3 / (1 + np.exp(-2 * pa["X1"])) + u
        x3 = lambda pa, u: 0.25 * pa["X2"] ** 2 + u
    else:
        x2 = lambda pa, u: 0.25 * np.sign(u) * pa["X1"] ** 2 * (1 + u**2)
        x3 = lambda pa, u: -1 + 0.1 * np.sign(u) * pa["X2"] ** 2 + u
    return (_root, x2, x3), [("X1", "X2"), ("X2", "X3")]


def _mgraph(sem: str):
    if sem == "LIN":
        x3 = lambda pa, u: pa["X1"] + u
        x4 = lambda pa, u: -pa["X2"] + 0.5 * pa["X1"] + u
        x5 = lambda pa, u: -1.5 * pa["X2"] + u
    elif sem == "NLIN":
        x3 = lambda pa, u: pa["X1"] + 0.5 * pa["X1"] ** 2 + u
        x4 = lambda pa, u: -pa["X2"] + 0.5 * pa["X1"] ** 2 + u
        x5 = lambda pa, u: -1.5 * pa["X2"] ** 2 + u
    else:
        x3 = lambda pa, u: pa["X1"] * u
        x4 = lambda pa, u: (-pa["X2"] + 0.5 * pa["X1"] ** 2) * u
        x5 = lambda pa, u: (-1.5 * pa["X2"] ** 2) * u
    return (_root, _root, x3, x4, x5), [("X1", "X3"), ("X2", "X4"), ("X1", "X4"), ("X2", "X5")]


def _synthetic(name: str, sem: str) -> ScmSpec:
    eqs, edges = {"collider": _collider, "triangle": _triangle, "chain": _chain, "mgraph": _mgraph}[name](sem)
    names = [f"X{k + 1}" for k in range(len(eqs))]
    graph = CausalGraph.from_names(names, edges)
    priors = _PRIORS3[sem] if name != "mgraph" else tuple(Normal(0, 1) for _ in names)
    return ScmSpec(f"{name}_{sem}", graph, priors, eqs)


# Loan approval: G gender, A age, E education, L loan amount, D duration,
# I income, S savings.
LOAN_NAMES = ("G", "A", "E", "L", "D", "I", "S")
LOAN_EDGES = [
    ("G", "E"), ("A", "E"), ("G", "L"), ("A", "L"), ("G", "D"), ("A", "D"), ("L", "D"),
    ("G", "I"), ("A", "I"), ("E", "I"), ("I", "S"),
]


def _loan() -> ScmSpec:
    kinds = [[BINARY]] + [[CONTINUOUS]] * 6
    graph = CausalGraph.from_names(LOAN_NAMES, LOAN_EDGES, kinds)
    eqs = (
        _root,
        lambda pa, u: -35 + u,
        lambda pa, u: -0.5 + 1 / (1 + np.exp(1 - 0.5 * pa["G"] - 1 / (1 + np.exp(-0.1 * pa["A"])) - u)),
        lambda pa, u: 1 + 0.01 * (pa["A"] - 5) * (5 - pa["A"]) + pa["G"] + u,
        lambda pa, u: -1 + 0.1 * pa["A"] + 2 * pa["G"] + pa["L"] + u,
        lambda pa, u: -4 + 0.1 * (pa["A"] + 35) + 2 * pa["G"] + pa["G"] * pa["E"] + u,
        lambda pa, u: -4 + 1.5 * (pa["I"] > 0) * pa["I"] + u,
    )
    priors = (
        Bernoulli(0.5), Gamma(10, 3.5), Normal(0, 0.25), Normal(0, 4), Normal(0, 9), Normal(0, 4), Normal(0, 25),
    )
    return ScmSpec("loan", graph, priors, eqs)


# Adult: R race, A age, N native country, S sex, E education, H hours per
# week, W work status, M marital status, L relationship, O occupation, I income.
ADULT_NAMES = ("R", "A", "N", "S", "E", "H", "W", "M", "L", "O", "I")
ADULT_EDGES = (
    [("A", c) for c in "IEHWMOL"]
    + [("R", c) for c in "IEHMO"]
    + [("N", c) for c in "EHMLIW"]
    + [("S", c) for c in "EHILMO"]
    + [("E", c) for c in "IOLWH"]
    + [("H", c) for c in "WMI"]
    + [("W", c) for c in "OIM"]
    + [("M", c) for c in "OIL"]
    + [("O", "I"), ("L", "I")]
)
INCOME_SCALE = 1e4


def _ind(cond) -> np.ndarray:
    return np.asarray(cond, dtype=float)


def _mode_lowest(*cols: np.ndarray) -> np.ndarray:
    """Row-wise most frequent value; ties go to the lowest value."""
    stack = np.stack(np.broadcast_arrays(*cols), axis=1)
    out = np.empty(stack.shape[0])
    for r, row in enumerate(stack):
        vals, counts = np.unique(row, return_counts=True)
        out[r] = vals[np.argmax(counts)]  # np.unique sorts, argmax takes the first max
    return out


def _adult_e(pa, u):
    r, a, n, s = pa["R"], pa["A"], pa["N"], pa["S"]
    base = np.exp(2 * _ind(r == 0) + _ind(r == 1) + sigmoid(a - 30))
    return base + (0.5 * _ind(s == 0) + _ind(s == 1)) * (2 * _ind(n == 1) + 5 * _ind(n == 2) + _ind(n == 3)) + u


def _adult_h(pa, u):
    r, a, n, s, e = pa["R"], pa["A"], pa["N"], pa["S"], pa["E"]
    by_country = 40 * _ind(n == 0) + 36 * _ind(n == 1) + 50 * _ind(n == 2) + 30 * _ind(n == 3)
    by_race = 0.5 * _ind(r == 0) + _ind(r == 1) + 1.3 * _ind(r == 2)
    h = by_country * by_race + 2 * np.exp(-((a - 30) ** 2)) + 5 * np.abs(np.tanh(e - 2)) + 2 * _ind(s == 0) + u
    return h * _ind(a < 70)


def _adult_w(pa, u):
    a, n, e, h = pa["A"], pa["N"], pa["E"], pa["H"]
    soft = sigmoid(h - 30 + u)
    w1 = (
        _ind(5 * np.abs(np.tanh(e - 2)) + soft > 0.3)
        + _ind(soft > 0.3) * _ind(a + 1.5 * u > 50)
        - _ind(n == 0) + _ind(n == 2) + 3 * _ind(n == 3)
    )
    w2 = np.where(w1 <= 3, w1, 3.0)
    return np.where(w2 >= 0, w2, 0.0)


def _adult_m(pa, u):
    r, a, s, h, w = pa["R"], pa["A"], pa["S"], pa["H"], pa["W"]
    r1 = np.trunc(r + 0.2 * u) * _ind((r >= 0) & (r <= 2)) + 2 * _ind(r > 2)
    r2 = 2 * _ind(r1 == 1) + _ind(r1 == 2)
    a1 = a + 2 * u
    a2 = 2 * _ind((a1 > 20) & (a1 <= 40)) + _ind((a1 > 40) & (a1 <= 50)) + 2 * _ind(a1 >= 50)
    h1 = 3 * np.trunc(sigmoid(h - 30))
    h2 = np.where(h1 <= 2, h1, 2.0)
    g1 = np.trunc(s + 0.5 * u)
    g2 = np.where(g1 < 0, 0.0, np.where(g1 > 1, 1.0, g1))
    g3 = _ind(g2 == 0) + 2 * _ind(g2 == 1)
    # H enters the vote verbatim; it can only win a tie when it falls below 0,
    # so the result is clipped onto the three marital codes.
    return np.clip(_mode_lowest(r2, a2, w, h2, h, g3), 0, 2)


def _adult_l(pa, u):
    a, n, s, e, m = pa["A"], pa["N"], pa["S"], pa["E"], pa["M"]
    c_n = u * _ind(n == 0) - u * _ind(n == 1) + 2 * u * _ind(n == 2) + 2 * _ind(n == 3)
    c = c_n + sigmoid(e - 30) + 2 * _ind(a < 20) - 2 * _ind(s == 0)
    married = m == 1
    return np.where(married, np.where(c < -1, 0.0, 1.0), np.where(c >= -1, 2.0, 1.0))


def _adult_o(pa, u):
    r, a, s, e, w, m = pa["R"], pa["A"], pa["S"], pa["E"], pa["W"], pa["M"]
    k = r + 2 * np.exp(-((a + u - 20) ** 2)) - sigmoid(e * u - 30) + w + 3 * m + 4 * s
    return _ind((k >= 1) & (k <= 4)) + 2 * _ind(k > 4)


def _adult_i(pa, u):
    r, a, n, s = pa["R"], pa["A"], pa["N"], pa["S"]
    e, h, w, m, o = pa["E"], pa["H"], pa["W"], pa["M"], pa["O"]
    income = (
        u
        + 10000 * _ind(r > 1.5) + 20000 * _ind(r < 1.5)
        + 3000 * _ind((a >= 21) & (a < 30)) + 8000 * _ind(a >= 30)
        + 5000 * _ind(e < 2) + 10000 * _ind((e >= 2) & (e < 10)) + 30000 * _ind(e >= 10)
        + 5000 * _ind(o == 1) + 15000 * _ind(o == 2)
        + 5000 * _ind(w == 0) + 7000 * _ind(w == 1)
        + 1000 * _ind(m == 0) + 4000 * _ind(m == 1) - 2000 * _ind(m == 2)
        + 15000 * _ind(h > 45) + 10000 * _ind(n >= 2)
        + 4000 * _ind(s == 1) + 3000 * _ind(r <= 1)
    )
    return income / INCOME_SCALE


def _adult() -> ScmSpec:
    kind = {
        "R": categorical(3), "A": CONTINUOUS, "N": categorical(4), "S": BINARY, "E": CONTINUOUS,
        "H": CONTINUOUS, "W": categorical(4), "M": categorical(3), "L": categorical(3),
        "O": categorical(3), "I": CONTINUOUS,
    }
    graph = CausalGraph.from_names(ADULT_NAMES, ADULT_EDGES, [[kind[n]] for n in ADULT_NAMES])
    eqs = (
        _root,
        lambda pa, u: u + 17,
        _root,
        _root,
        _adult_e,
        _adult_h,
        _adult_w,
        _adult_m,
        _adult_l,
        _adult_o,
        _adult_i,
    )
    priors = (
        Categorical((0.25, 0.5, 0.25)),
        Gamma(3, 7),
        Categorical((0.55, 0.15, 0.15, 0.15)),
        Bernoulli(0.5),
        Normal(0, 1),
        Normal(0, 4),
        Normal(0, 1),
        Normal(0, 1),
        Normal(0, 1),
        Normal(0, 1),
        Normal(0, 4e6),
    )
    return ScmSpec("adult", graph, priors, eqs)


SYNTHETIC = ("collider", "triangle", "chain", "mgraph")
SEMS = ("LIN", "NLIN", "NADD")
BUILTIN_NAMES = SYNTHETIC + ("loan", "adult")


def builtin_scm(name: str, sem: str | None = None) -> ScmSpec:
    """``sem`` selects LIN/NLIN/NADD for the synthetic graphs; loan and adult are fixed."""
    name = name.lower()
    sem = None if sem is None else sem.upper()
    if name in SYNTHETIC:
        if sem not in SEMS:
            raise ValueError(f"{name} needs sem in {SEMS}, got {sem!r}")
        return _synthetic(name, sem)
    if name in ("loan", "adult"):
        if sem not in (None, "FIXED"):
            raise ValueError(f"{name} has fixed equations; got sem {sem!r}")
        return _loan() if name == "loan" else _adult()
    raise ValueError(f"unknown SCM {name!r}; choose from {BUILTIN_NAMES}")


def builtin_graph(name: str) -> CausalGraph:
    return builtin_scm(name, "LIN" if name.lower() in SYNTHETIC else None).graph


def kinds_summary(scm: ScmSpec) -> list[str]:
    return [str(k) for k in scm.graph.column_kinds]


__all__ = [
    "Normal", "MixtureOfGaussians", "Bernoulli", "Gamma", "ShiftedGamma", "Categorical",
    "ScmSpec", "builtin_scm", "builtin_graph", "draw_u", "evaluate", "sample_observational",
    "sample_interventional", "counterfactual_oracle", "default_splits", "ColumnKind",
]
