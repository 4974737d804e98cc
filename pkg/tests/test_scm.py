import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vaca.data import (
    AbductionUnavailableError,
    DataError,
    Dataset,
    DegenerateColumnError,
    denormalize,
    load_dataset,
    normalize,
    read_csv_dataset,
    save_dataset,
)
from vaca.graph import BINARY, CONTINUOUS, CausalGraph
from vaca.scm import (
    BUILTIN_NAMES,
    Bernoulli,
    Categorical,
    Gamma,
    MixtureOfGaussians,
    Normal,
    ShiftedGamma,
    _mode_lowest,
    builtin_scm,
    counterfactual_oracle,
    evaluate,
    sample_interventional,
    sample_observational,
)

ALL_SCMS = [(n, s) for n in ("collider", "triangle", "chain", "mgraph") for s in ("LIN", "NLIN", "NADD")] + [
    ("loan", None),
    ("adult", None),
]


def test_zero_noise_collider_is_zero():
    np.testing.assert_array_equal(evaluate(builtin_scm("collider", "LIN"), np.zeros((1, 3))), [[0, 0, 0]])


def test_triangle_nlin_zero_noise():
    x = evaluate(builtin_scm("triangle", "NLIN"), np.zeros((1, 3)))
    np.testing.assert_allclose(x, [[0.0, 0.5, 0.0625]], rtol=0, atol=1e-15)


def test_collider_intervention_example():
    x = evaluate(builtin_scm("collider", "LIN"), np.array([[5.0, 0.0, 0.0]]), {"X1": 2.0})
    np.testing.assert_allclose(x, [[2.0, 0.0, 0.1]], atol=1e-15)


@pytest.mark.parametrize("u1", [-3.0, 0.0, 2.5])
def test_chain_mediator_intervention_severs_root(u1):
    x = evaluate(builtin_scm("chain", "LIN"), np.array([[u1, 7.0, 0.0]]), {"X2": 0.0})
    assert x[0, 2] == 0.0


def test_chain_lin_counterfactual_hand_example():
    scm = builtin_scm("chain", "LIN")
    u = np.array([[1.0, 1.0, 1.0]])
    ds = Dataset(scm.graph, evaluate(scm, u), u=u)
    np.testing.assert_array_equal(ds.x[0], [1.0, 0.0, 1.0])
    cf = counterfactual_oracle(scm, ds, 0, {"X1": 0.0})
    assert cf.tolist() == [0.0, 1.0, 1.25]


def test_loan_fixed_equations_hand_row():
    scm = builtin_scm("loan")
    # G=1, A=0, U_E=0, U_L=0, U_D=0, U_I=0, U_S=0.
    x = evaluate(scm, np.array([[1.0, 35.0, 0.0, 0.0, 0.0, 0.0, 0.0]]))[0]
    e = -0.5 + 1.0 / (1.0 + math.exp(1 - 0.5 - 0.5))
    l = 1 + 0.01 * (-5) * 5 + 1
    d = -1 + 0 + 2 + l
    i = -4 + 3.5 + 2 + e
    s = -4 + 1.5 * i if i > 0 else -4.0
    np.testing.assert_allclose(x, [1.0, 0.0, e, l, d, i, s], rtol=1e-15, atol=1e-15)


def test_adult_hand_row():
    scm = builtin_scm("adult")
    g = scm.graph
    # R=1, A=30 (U_A=13), N=0, S=1, all continuous noises 0.
    u = np.zeros((1, 11))
    u[0, g.index("R")] = 1
    u[0, g.index("A")] = 13
    u[0, g.index("S")] = 1
    x = dict(zip(g.names, evaluate(scm, u)[0]))
    e = math.exp(1 + 0.5)
    assert x["E"] == pytest.approx(e, abs=1e-12)
    h = 40 * 1.0 + 2 * math.exp(0) + 5 * abs(math.tanh(e - 2))
    assert x["H"] == pytest.approx(h, abs=1e-12)
    # w1 = 1 + 1{sigmoid(h-30) > 0.3} * 1{30 > 50} - 1{N=0} = 0
    assert x["W"] == 0
    # r1 = int(1) = 1 -> r2 = 2; a1 = 30 -> a2 = 2; h1 = 3*int(sigmoid(.)) = 0 -> h2 = 0;
    # g1 = int(1) = 1 -> g3 = 2; votes (2, 2, 0, 0, h, 2) -> 2
    assert x["M"] == 2
    # c = 0 + sigmoid(e - 30) + 0 - 0 >= -1 and M != 1 -> L = 2
    assert x["L"] == 2
    # k = 1 + 2exp(-100) - sigmoid(-30) + 0 + 6 + 4 > 4 -> O = 2
    assert x["O"] == 2
    assert h > 45
    income = 20000 + 8000 + 10000 + 15000 + 5000 - 2000 + 15000 + 4000 + 3000
    assert x["I"] == pytest.approx(income / 1e4, abs=1e-12)


@pytest.mark.parametrize(
    "votes, expected",
    [((0, 1, 1, 2), 1), ((2, 0, 2, 0), 0), ((3, 1, 2), 1), ((5, 5, 5), 5)],
)
def test_mode_breaks_ties_low(votes, expected):
    cols = [np.array([float(v)]) for v in votes]
    assert _mode_lowest(*cols)[0] == expected


@pytest.mark.parametrize("name, sem", ALL_SCMS)
def test_sampling_is_reproducible_and_stores_u(name, sem):
    scm = builtin_scm(name, sem)
    a = sample_observational(scm, 200, 11)
    b = sample_observational(scm, 200, 11)
    np.testing.assert_array_equal(a.x, b.x)
    np.testing.assert_array_equal(a.u, b.u)
    assert a.u.shape == (200, scm.d)
    assert np.all(np.isfinite(a.x))
    for col, kind in enumerate(scm.graph.column_kinds):
        if not kind.is_continuous:
            vals = a.x[:, col]
            assert np.all(vals == np.round(vals))
            assert vals.min() >= 0 and vals.max() < max(kind.n_params, 2)


def test_default_split_sizes():
    ds = sample_observational(builtin_scm("collider", "LIN"), 10000, 0)
    assert ds.splits == (5000, 2500, 2500)


def test_interventional_uses_same_exogenous_stream():
    scm = builtin_scm("triangle", "LIN")
    obs = sample_observational(scm, 500, 3)
    leaf = sample_interventional(scm, {"X3": 1.0}, 500, 3)
    np.testing.assert_array_equal(obs.u, leaf.u)
    np.testing.assert_array_equal(obs.x[:, :2], leaf.x[:, :2])
    assert np.all(leaf.x[:, 2] == 1.0)


@settings(max_examples=40, deadline=None)
@given(st.sampled_from(ALL_SCMS), st.data())
def test_oracle_counterfactual_properties(scm_key, data):
    scm = builtin_scm(*scm_key)
    ds = sample_observational(scm, 50, data.draw(st.integers(0, 10_000)))
    node = data.draw(st.integers(0, scm.d - 1))
    row = data.draw(st.integers(0, 49))
    s = scm.graph.node_slices[node]
    null = counterfactual_oracle(scm, ds, row, {node: ds.x[row, s]})
    np.testing.assert_array_equal(null, ds.x[row])
    alpha = data.draw(st.floats(-3, 3, allow_nan=False))
    if not scm.graph.kinds[node][0].is_continuous:
        alpha = float(round(abs(alpha)) % 2)
    cf = counterfactual_oracle(scm, ds, row, {node: alpha})
    keep = [c for c in range(scm.graph.n_columns)
            if c not in scm.graph.columns_of(scm.graph.descendants(node) | {node})]
    assert np.array_equal(cf[keep], ds.x[row, keep])


def test_oracle_needs_stored_u():
    scm = builtin_scm("chain", "LIN")
    ds = sample_observational(scm, 10, 0)
    ds.u = None
    with pytest.raises(AbductionUnavailableError):
        counterfactual_oracle(scm, ds, 0, {"X1": 0.0})


def test_collider_lin_interventional_mean_is_affine():
    scm = builtin_scm("collider", "LIN")
    lo = sample_interventional(scm, {"X1": -1.0}, 20_000, 5).x[:, 2].mean()
    hi = sample_interventional(scm, {"X1": 3.0}, 20_000, 5).x[:, 2].mean()
    assert (hi - lo) / 4.0 == pytest.approx(0.05, abs=1e-12)


def test_collider_u2_sample_mean():
    ds = sample_observational(builtin_scm("collider", "LIN"), 100_000, 1)
    assert abs(ds.u[:, 1].mean()) < 3 / math.sqrt(100_000)


@pytest.mark.parametrize(
    "prior, mean, var",
    [
        (Normal(1.0, 4.0), 1.0, 4.0),
        (MixtureOfGaussians((0.5, 0.5), (-2.0, 1.5), (1.5, 1.0)), -0.25, 1.25 + 0.25 * 3.5**2),
        (Bernoulli(0.3), 0.3, 0.21),
        (Gamma(10, 3.5), 35.0, 122.5),
        (ShiftedGamma(10, 3.5, -35), 0.0, 122.5),
        (Categorical((0.2, 0.3, 0.5)), 1.3, 0.61),
    ],
)
def test_prior_moments(prior, mean, var):
    draws = prior.sample(np.random.default_rng(0), 200_000)
    se = math.sqrt(var / 200_000)
    assert abs(draws.mean() - mean) < 5 * se
    assert draws.var() == pytest.approx(var, rel=0.03)


@pytest.mark.parametrize(
    "make",
    [
        lambda: Normal(0, 0),
        lambda: MixtureOfGaussians((0.5, 0.6), (0, 1), (1, 1)),
        lambda: Bernoulli(1.5),
        lambda: Gamma(0, 1),
        lambda: Categorical((0.5, 0.6)),
    ],
)
def test_prior_validation(make):
    with pytest.raises(ValueError):
        make()


@pytest.mark.parametrize("name, sem", [("collider", None), ("collider", "QUAD"), ("loan", "LIN"), ("nope", None)])
def test_builtin_rejects_bad_combinations(name, sem):
    with pytest.raises(ValueError):
        builtin_scm(name, sem)


def test_builtin_catalog_complete():
    assert set(BUILTIN_NAMES) == {"collider", "triangle", "chain", "mgraph", "loan", "adult"}
    assert str(builtin_scm("loan").graph.kinds[0][0]) == "binary"
    adult = builtin_scm("adult").graph
    cats = {n for n, k in zip(adult.names, adult.kinds) if k[0].family == "categorical"}
    assert {"W", "M", "O", "L"} <= cats


# -- datasets --------------------------------------------------------------------------


def _two_col_graph():
    return CausalGraph.from_names(["b", "c"], [("b", "c")], [[BINARY], [CONTINUOUS]])


def test_normalize_leaves_discrete_columns_alone():
    rng = np.random.default_rng(0)
    x = np.column_stack([rng.integers(0, 2, 100), rng.normal(3, 2, 100)])
    ds = normalize(Dataset(_two_col_graph(), x, splits=(60, 20, 20)))
    np.testing.assert_array_equal(ds.x[:, 0], x[:, 0])
    train = ds.x_of("train")[:, 1]
    assert train.mean() == pytest.approx(0, abs=1e-12)
    assert train.std() == pytest.approx(1, abs=1e-12)
    back = denormalize(ds)
    np.testing.assert_allclose(back.x, x, atol=1e-9)


def test_normalize_z_scored_column_is_unchanged():
    z = np.random.default_rng(1).normal(size=50)
    z = (z - z.mean()) / z.std()
    x = np.column_stack([np.zeros(50), z])
    ds = normalize(Dataset(_two_col_graph(), x))
    np.testing.assert_allclose(ds.x, x, atol=1e-12)


def test_constant_continuous_column_is_degenerate():
    x = np.column_stack([np.arange(10) % 2, np.full(10, 4.0)])
    with pytest.raises(DegenerateColumnError):
        normalize(Dataset(_two_col_graph(), x))


def test_dataset_rejects_bad_splits():
    with pytest.raises(DataError):
        Dataset(_two_col_graph(), np.zeros((10, 2)), splits=(5, 5, 5))


def test_dataset_persistence_round_trip(tmp_path):
    ds = normalize(sample_observational(builtin_scm("loan"), 300, 4))
    ds.y = (ds.x[:, 5] > 0).astype(float)
    save_dataset(ds, tmp_path / "d")
    back = load_dataset(tmp_path / "d")
    np.testing.assert_array_equal(back.x, ds.x)
    np.testing.assert_array_equal(back.u, ds.u)
    np.testing.assert_array_equal(back.y, ds.y)
    np.testing.assert_array_equal(back.normalization.mean, ds.normalization.mean)
    assert back.splits == ds.splits and back.graph == ds.graph and back.seed == 4


def test_csv_ingest(tmp_path):
    g = _two_col_graph()
    path = tmp_path / "data.csv"
    path.write_text("c,b,y\n" + "\n".join(f"{0.5 * k},{k % 2},{(k // 2) % 2}" for k in range(20)))
    ds = read_csv_dataset(path, g, label="y", fractions=(0.5, 0.25, 0.25), seed=3)
    assert ds.splits == (10, 5, 5)
    assert sorted(ds.x[:, 1].tolist()) == [0.5 * k for k in range(20)]
    assert ds.u is None


@pytest.mark.parametrize(
    "body, match",
    [("c\n1.0\n", "missing columns"), ("b,c\n0,abc\n", "non-numeric"), ("b,c\n3,1.0\n", "not valid binary")],
)
def test_csv_ingest_errors(tmp_path, body, match):
    path = tmp_path / "bad.csv"
    path.write_text(body)
    with pytest.raises(DataError, match=match):
        read_csv_dataset(path, _two_col_graph())
