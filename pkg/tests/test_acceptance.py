"""Acceptance criteria, one recorded PASS/FAIL line each (see the terminal summary).

Criteria 2 to 4 train models at full budget and take a few hours on one core.
Set VACA_SKIP_SLOW=1 to run only the fast criteria.
"""

import functools
import json
import math
import os

import numpy as np
import pytest
from _helpers import decoder_fn, encoder_sensitivity, random_inputs, reach_within, record, sensitivity

from vaca import autodiff as ad
from vaca.cli import main
from vaca.config import ExperimentConfig, format_config, parse_config
from vaca.data import Dataset
from vaca.experiments import BUDGET, design_condition_runs, make_data, summarize
from vaca.fairness import audit, loan_demo_label
from vaca.metrics import KernelSpec, full_report, mmd2
from vaca.model import TrainReport, VacaConfig, VacaModel, elbo, load_model, save_model, train
from vaca.scm import builtin_graph, builtin_scm, counterfactual_oracle, evaluate, sample_observational

BUILTINS = ["collider", "triangle", "chain", "mgraph", "loan", "adult"]
SEEDS = list(range(10))

slow = pytest.mark.skipif(os.environ.get("VACA_SKIP_SLOW") == "1", reason="VACA_SKIP_SLOW=1")


# -- 1. structural properties --------------------------------------------------------------------


@pytest.mark.parametrize("name", BUILTINS)
def test_c1_encoder_locality(name):
    g = builtin_graph(name)
    allowed = g.vaca_adjacency().matrix > 0
    worst = 0.0
    for draw in range(20):
        model = VacaModel(g, VacaConfig(seed=1000 + draw))
        s = encoder_sensitivity(model, random_inputs(g, 4, np.random.default_rng(draw)))
        worst = max(worst, float(s[~allowed].max(initial=0.0)))
    assert record(f"C1 encoder locality [{name}]", worst < 1e-8, f"max off-pa* sensitivity {worst:.1e} (< 1e-8)")


@pytest.mark.parametrize("name", BUILTINS)
def test_c1_decoder_reachability(name):
    g = builtin_graph(name)
    cfg = VacaConfig(decoder_hidden_layers=max(g.diameter() - 1, 0), allow_shallow_decoder=True, seed=11)
    model = VacaModel(g, cfg)
    z = np.random.default_rng(0).normal(size=(g.d, 5, cfg.latent_dim))
    expected = np.eye(g.d, dtype=bool)
    for i in range(g.d):
        expected[i, list(g.ancestors(i))] = True
    ok = np.array_equal(sensitivity(decoder_fn(model), z) > 1e-10, expected)
    assert record(f"C1 decoder reachability N_h=delta-1 [{name}]", ok, "nonzero blocks == an*(i)")


@pytest.mark.parametrize("name", BUILTINS)
def test_c1_intervention_severing(name):
    g = builtin_graph(name)
    model = VacaModel(g, VacaConfig(seed=12))  # default depth: longest path - 1
    z = np.random.default_rng(1).normal(size=(g.d, 5, 4))
    full = reach_within(g.vaca_adjacency().matrix, g.d) > 0
    ok = True
    for m in range(g.d):
        adj = g.vaca_adjacency([m])
        live = sensitivity(decoder_fn(model, adj), z) > 1e-10
        # a block vanishes iff every path j -> i crosses the intervened node
        severed = full & ~(reach_within(adj.matrix, g.d) > 0)
        ok &= np.array_equal(live, full & ~severed)
    assert record(f"C1 intervention severing N_h=gamma-1 [{name}]", ok, "vanishing blocks == severed paths")


@pytest.mark.parametrize("name, sem", [("chain", "LIN"), ("triangle", "NLIN"), ("loan", None), ("adult", None)])
def test_c1_oracle_counterfactuals(name, sem):
    scm = builtin_scm(name, sem)
    ds = sample_observational(scm, 50, 3)
    g = scm.graph
    ok = True
    for r in range(8):
        for i in range(g.d):
            s = g.node_slices[i]
            null = counterfactual_oracle(scm, ds, r, (g.names[i], ds.x[r, s]))
            ok &= np.array_equal(null, ds.x[r])
            moved = counterfactual_oracle(scm, ds, r, (g.names[i], ds.x[r + 20, s]))
            keep = g.columns_of(j for j in range(g.d) if j != i and j not in g.descendants(i))
            ok &= np.array_equal(np.asarray(moved).reshape(-1)[keep], ds.x[r, keep])
    detail = "null intervention identity, non-descendants bitwise unchanged"
    if name == "chain":
        u = np.array([[1.0, 1.0, 1.0]])
        hand = counterfactual_oracle(scm, Dataset(g, evaluate(scm, u), u=u), 0, {"X1": 0.0})
        ok &= hand.tolist() == [0.0, 1.0, 1.25]
        detail += f", hand example {hand.tolist()}"
    assert record(f"C1 oracle counterfactual [{name}]", ok, detail)


def test_c1_elbo_gradient_check():
    g = builtin_graph("chain")
    model = VacaModel(g, VacaConfig(latent_dim=1, input_width=1, encoder_hidden=(2,), decoder_width=2, seed=7))
    params = model.parameters()
    n_params = sum(p.data.size for p in params)
    rng = np.random.default_rng(0)
    for name, p in model.named_parameters():
        if ".b" in name or name.endswith("_b"):
            p.data += rng.normal(scale=0.1, size=p.shape)  # keep ReLU pre-activations off the kink
    x = rng.normal(size=(6, 3))
    eps = rng.normal(size=(3, 6, 1))
    model.zero_grad()
    elbo(model, x, eps=eps).backward()
    worst, h = 0.0, 1e-5
    for p in params:
        flat = p.data.reshape(-1)
        for k in range(flat.size):
            old = flat[k]
            flat[k] = old + h
            up = elbo(model, x, eps=eps).item()
            flat[k] = old - h
            down = elbo(model, x, eps=eps).item()
            flat[k] = old
            num, got = (up - down) / (2 * h), p.grad.reshape(-1)[k]
            worst = max(worst, abs(got - num) / max(abs(num), abs(got), 1e-3))
    ok = worst <= 1e-3 and n_params <= 500
    assert record("C1 ELBO gradient check", ok, f"{n_params} parameters, max relative error {worst:.1e} (<= 1e-3)")


def test_c1_mmd_identity_and_hand_value():
    x = np.random.default_rng(0).normal(size=(200, 3))
    ident = abs(mmd2(x, x))
    hand = mmd2(np.zeros((2, 1)), np.ones((2, 1)), KernelSpec((1.0,)))
    err = abs(hand - (4 - 4 * math.exp(-1)))
    ok = ident < 1e-12 and err < 1e-12
    assert record("C1 mmd2 identity and hand value", ok, f"mmd2(x,x)={ident:.1e}, |hand - (4-4/e)|={err:.1e}")


# -- shared training runs --------------------------------------------------------------------------


@functools.cache
def design_runs():
    """Triangle NLIN with N_h in {0, 1} and collider LIN with N_h = 0, ten seeds each."""
    tri = design_condition_runs("triangle", "NLIN", [0, 1], SEEDS)
    col = design_condition_runs("collider", "LIN", [0], SEEDS)
    return tri, col[0]


@functools.cache
def loan_models():
    """One loan model per seed, each on its own data draw with the demonstration label."""
    out = []
    for seed in SEEDS:
        scm, raw, ds = make_data("loan", None, 10_000, seed)
        cfg = VacaConfig(**BUDGET, seed=seed)
        model = VacaModel(scm.graph, cfg)
        report = train(model, ds, cfg)
        out.append((scm, ds, loan_demo_label(raw.x, seed), model, report))
    return out


def _mean(runs, key):
    return summarize([getattr(r.metrics, key) for r in runs])


# -- 2. design conditions ------------------------------------------------------------------------


@slow
def test_c2_triangle_needs_a_hidden_layer():
    tri, _ = design_runs()
    shallow, deep = _mean(tri[0], "mmd_int"), _mean(tri[1], "mmd_int")
    ok = deep[0] <= 0.6 * shallow[0]
    assert record("C2 triangle NLIN int MMD N_h=1 <= 0.6 x N_h=0", ok,
                  f"N_h=0 {shallow[0]:.4f}±{shallow[1]:.4f}, N_h=1 {deep[0]:.4f}±{deep[1]:.4f}, "
                  f"ratio {deep[0] / shallow[0]:.2f}")


@slow
def test_c2_collider_without_hidden_layer():
    _, col = design_runs()
    m = _mean(col, "mmd_int")
    assert record("C2 collider int MMD N_h=0 <= 0.05", m[0] <= 0.05, f"{m[0]:.4f}±{m[1]:.4f}")


# -- 3. metric levels ----------------------------------------------------------------------------


def _check_levels(label, runs, bounds):
    ok = True
    parts = []
    for key, bound in bounds.items():
        mean, std = _mean(runs, key)
        ok &= mean <= bound
        parts.append(f"{key} {mean:.4f}±{std:.4f} (<= {bound})")
    return record(f"C3 {label}", ok, ", ".join(parts) + f", {len(runs)} seeds")


@slow
def test_c3_collider_lin():
    _, col = design_runs()
    bounds = {"mmd_obs": 0.07, "mmd_int": 0.07, "mean_e": 0.04, "mse_cf": 0.30}
    assert _check_levels("collider LIN", col, bounds)


@slow
def test_c3_triangle_nlin():
    tri, _ = design_runs()  # N_h = 1 is the default depth for the triangle
    assert _check_levels("triangle NLIN", tri[1], {"mmd_obs": 0.25, "mse_cf": 0.45})


@slow
def test_c3_loan():
    class Run:
        def __init__(self, metrics):
            self.metrics = metrics

    runs = [Run(full_report(model, scm, ds, 1000, seed)) for seed, (scm, ds, _, model, _) in
            zip(SEEDS[:3], loan_models()[:3])]
    assert _check_levels("loan", runs, {"mmd_obs": 0.10, "std_e": 0.12})


# -- 4. fairness ---------------------------------------------------------------------------------


@functools.cache
def fairness_reports():
    return [audit(ds, y, model, "G", m=10, seed=seed) for seed, (_, ds, y, model, _) in zip(SEEDS, loan_models())]


@slow
def test_c4_ranking():
    reports = fairness_reports()
    uf = [(r.results["full"]["uf"], r.results["unaware"]["uf"], r.results["fair-x"]["uf"]) for r in reports]
    hits = sum(a > b > c for a, b, c in uf)
    per_seed = "; ".join(f"{a:.4f}>{b:.4f}>{c:.4f}" for a, b, c in uf)
    assert record("C4 uf(full) > uf(unaware) > uf(fair-x) in >= 8/10 seeds", hits >= 8, f"{hits}/10 [{per_seed}]")


@slow
def test_c4_fair_x_bound():
    worst = max(r.results["fair-x"]["uf"] for r in fairness_reports())
    assert record("C4 uf(fair-x) <= 0.01", worst <= 0.01, f"max over seeds {worst:.4f}")


@slow
def test_c4_fair_z_accuracy():
    gaps = [abs(r.results["fair-z"]["f1"] - r.results["full"]["f1"]) for r in fairness_reports()]
    assert record("C4 |f1(fair-z) - f1(full)| <= 0.1", max(gaps) <= 0.1, f"max gap {max(gaps):.4f}")


# -- 5. engineering ------------------------------------------------------------------------------


def test_c5_checkpoint_round_trip(tmp_path):
    g = builtin_graph("adult")
    model = VacaModel(g, VacaConfig(seed=4))
    a = save_model(model, tmp_path / "a.ckpt")
    back, _ = load_model(a)
    b = save_model(back, tmp_path / "b.ckpt")
    same_bytes = a.read_bytes() == b.read_bytes()
    same_state = all(np.array_equal(v, back.state_dict()[k]) for k, v in model.state_dict().items())
    x = random_inputs(g, 8, np.random.default_rng(0))
    with ad.no_grad():
        same_out = np.array_equal(model.encode(x)[0].data, back.encode(x)[0].data)
    ok = same_bytes and same_state and same_out
    assert record("C5 checkpoint round trip", ok, "bytes, state and outputs identical")


def test_c5_train_determinism(tmp_path, monkeypatch):
    monkeypatch.setenv("VACA_OUTPUT_ROOT", str(tmp_path))
    cfg = tmp_path / "run.cfg"
    cfg.write_text("[experiment]\nscm = triangle\nsem = NLIN\nn_samples = 400\n"
                   "[model]\nmax_epochs = 3\nvalid_rows = 50\niwae_k = 10\nseed = 5\n")
    codes = [main(["train", "--config", str(cfg), "--out", d]) for d in ("a", "b")]
    a, b = tmp_path / "a", tmp_path / "b"
    reports = [TrainReport.from_dict(json.loads((p / "train_report.json").read_text())).comparable() for p in (a, b)]
    ok = (codes == [0, 0] and (a / "model.ckpt").read_bytes() == (b / "model.ckpt").read_bytes()
          and reports[0] == reports[1])
    assert record("C5 train determinism", ok, "two seeded runs: identical checkpoints and reports")


def test_c5_config_round_trip():
    cfg = ExperimentConfig()
    cfg.sweep = {"decoder_hidden_layers": (0, 1, 2), "encoder_hidden": ((8,), (16, 16))}
    text = format_config(cfg)
    ok = parse_config(text) == cfg and format_config(parse_config(text)) == text
    assert record("C5 config round trip", ok, "parse(format(cfg)) == cfg")
