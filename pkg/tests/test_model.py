import math

import numpy as np
import pytest
from _helpers import decoder_fn, encoder_sensitivity, random_inputs, reach_within, sensitivity

from vaca import autodiff as ad
from vaca.data import normalize
from vaca.graph import BINARY, CONTINUOUS, CausalGraph, categorical
from vaca.model import (
    CheckpointError,
    ConfigError,
    VacaConfig,
    VacaModel,
    elbo,
    iwae,
    kl_standard_normal,
    load_model,
    save_model,
    train,
)
from vaca.scm import builtin_graph, builtin_scm, sample_observational

BUILTINS = ["collider", "triangle", "chain", "mgraph", "loan", "adult"]


@pytest.mark.parametrize("name", BUILTINS)
def test_encoder_locality(name):
    g = builtin_graph(name)
    for draw in range(3):
        model = VacaModel(g, VacaConfig(seed=draw))
        x = random_inputs(g, 5, np.random.default_rng(draw))
        s = encoder_sensitivity(model, x)
        allowed = g.vaca_adjacency().matrix > 0
        assert np.all(s[~allowed] < 1e-12)
        assert np.all(s[allowed] > 0)


@pytest.mark.parametrize("name", BUILTINS)
def test_intervened_encoder_row_sees_only_itself(name):
    g = builtin_graph(name)
    model = VacaModel(g, VacaConfig(seed=1))
    x = random_inputs(g, 4, np.random.default_rng(0))
    for i in range(g.d):
        s = encoder_sensitivity(model, x, g.vaca_adjacency([i]))
        assert np.all(np.delete(s[i], i) == 0) and s[i, i] > 0


@pytest.mark.parametrize("name", BUILTINS)
def test_decoder_reaches_exactly_the_ancestors(name):
    g = builtin_graph(name)
    cfg = VacaConfig(decoder_hidden_layers=g.diameter() - 1, allow_shallow_decoder=True, seed=3)
    model = VacaModel(g, cfg)
    z = np.random.default_rng(0).normal(size=(g.d, 6, cfg.latent_dim))
    s = sensitivity(decoder_fn(model), z)
    expected = np.eye(g.d, dtype=bool)
    for i in range(g.d):
        expected[i, list(g.ancestors(i))] = True
    np.testing.assert_array_equal(s > 1e-10, expected)


def test_shallow_chain_decoder_misses_the_root():
    g = builtin_graph("chain")
    model = VacaModel(g, VacaConfig(decoder_hidden_layers=0, allow_shallow_decoder=True))
    s = sensitivity(decoder_fn(model), np.random.default_rng(0).normal(size=(3, 4, 4)))
    assert s[2, 0] == 0 and s[2, 1] > 0


def test_triangle_intervention_keeps_direct_edge():
    g = builtin_graph("triangle")
    model = VacaModel(g, VacaConfig(decoder_hidden_layers=1))
    s = sensitivity(decoder_fn(model, g.vaca_adjacency([1])), np.random.default_rng(0).normal(size=(3, 4, 4)))
    assert s[2, 0] > 0 and s[1, 0] == 0


@pytest.mark.parametrize("name", BUILTINS)
def test_intervention_severs_paths_through_the_node(name):
    g = builtin_graph(name)
    model = VacaModel(g, VacaConfig(seed=5))
    z = np.random.default_rng(1).normal(size=(g.d, 5, 4))
    for m in range(g.d):
        adj = g.vaca_adjacency([m])
        s = sensitivity(decoder_fn(model, adj), z)
        np.testing.assert_array_equal(s > 1e-10, reach_within(adj.matrix, g.d) > 0)


def test_posterior_scale_is_positive():
    g = builtin_graph("loan")
    mu, ls = VacaModel(g).encode(random_inputs(g, 20, np.random.default_rng(0)))
    assert np.all(np.exp(ls.data) > 0) and mu.shape == (g.d, 20, 4)


def test_kl_vanishes_at_the_prior():
    kl = kl_standard_normal(ad.Tensor(np.zeros((3, 5, 2))), ad.Tensor(np.zeros((3, 5, 2))))
    np.testing.assert_array_equal(kl.data, np.zeros(5))
    kl1 = kl_standard_normal(ad.Tensor(np.ones((1, 1, 1))), ad.Tensor(np.zeros((1, 1, 1))))
    assert kl1.item() == 0.5


def test_gaussian_log_likelihood_at_the_mean():
    g = builtin_graph("triangle")
    model = VacaModel(g)
    x = np.array([[0.3, -1.0, 2.0]])
    params = np.zeros((3, 1, model.param_max))
    params[:, 0, 0] = x[0]
    ll = model.log_likelihood(ad.Tensor(params), x).item()
    assert ll == pytest.approx(3 * -0.5 * math.log(2 * math.pi * 0.025), rel=1e-12)
    assert 3 * -0.5 * math.log(2 * math.pi * 0.025) == pytest.approx(3 * 0.9255012, abs=1e-6)


def test_discrete_log_likelihoods():
    g = CausalGraph.from_names(["a", "b"], [("a", "b")], [[BINARY], [categorical(3), CONTINUOUS]])
    model = VacaModel(g, VacaConfig(decoder_hidden_layers=0))
    params = np.zeros((2, 1, model.param_max))
    params[0, 0, 0] = 2.0  # logit of a
    params[1, 0, :4] = [0.0, 1.0, 2.0, 0.5]  # three logits of b_0 then the mean of b_1
    x = np.array([[1.0, 2.0, 0.5]])
    expected = -math.log1p(math.exp(-2.0)) + 2.0 - math.log(1 + math.e + math.e**2)
    expected += -0.5 * math.log(2 * math.pi * 0.025)
    assert model.log_likelihood(ad.Tensor(params), x).item() == pytest.approx(expected, rel=1e-12)
    np.testing.assert_array_equal(model.likelihood_mean(params), [[1.0, 2.0, 0.5]])


def test_elbo_gradients_match_finite_differences():
    g = builtin_graph("chain")
    cfg = VacaConfig(latent_dim=1, input_width=1, encoder_hidden=(2,), decoder_width=2, seed=7)
    model = VacaModel(g, cfg)
    params = model.parameters()
    assert sum(p.data.size for p in params) <= 500
    rng = np.random.default_rng(0)
    # Zero-initialized biases put dead-unit pre-activations exactly on the ReLU kink.
    for name, p in model.named_parameters():
        if ".b" in name or name.endswith("_b"):
            p.data += rng.normal(scale=0.1, size=p.shape)
    x = rng.normal(size=(6, 3))
    eps = rng.normal(size=(3, 6, 1))

    def f():
        return elbo(model, x, eps=eps)

    model.zero_grad()
    f().backward()
    h = 1e-5
    for p in params:
        flat = p.data.reshape(-1)
        num = np.zeros_like(flat)
        for k in range(flat.size):
            old = flat[k]
            flat[k] = old + h
            up = f().item()
            flat[k] = old - h
            down = f().item()
            flat[k] = old
            num[k] = (up - down) / (2 * h)
        got = p.grad.reshape(-1)
        assert np.all(np.abs(got - num) <= 1e-3 * np.maximum(np.abs(num), np.abs(got)) + 1e-6)


def test_iwae_single_sample_matches_elbo_in_expectation():
    g = builtin_graph("collider")
    model = VacaModel(g, VacaConfig(seed=2))
    x = random_inputs(g, 4000, np.random.default_rng(0))
    one = iwae(model, x, K=1, rng=np.random.default_rng(1))
    with ad.no_grad():
        ref = np.mean([elbo(model, x, rng=np.random.default_rng(s)).item() for s in range(5)])
    assert one == pytest.approx(ref, rel=0.02)
    assert iwae(model, x[:500], K=50, rng=np.random.default_rng(1)) > iwae(model, x[:500], K=1, rng=np.random.default_rng(1))


def test_iwae_finite_with_degenerate_posterior():
    g = builtin_graph("collider")
    model = VacaModel(g)
    upd = model.encoder.layers[0].update
    upd.biases[-1].data[..., :4] = 50.0
    upd.biases[-1].data[..., 4:] = -20.0
    upd.weights[-1].data[..., 4:] = 0.0
    value = iwae(model, random_inputs(g, 30, np.random.default_rng(0)), K=20)
    assert np.isfinite(value)


def test_iwae_rejects_bad_k():
    g = builtin_graph("collider")
    with pytest.raises(ValueError):
        iwae(VacaModel(g), np.zeros((2, 3)), K=0)


def _small_data(name="collider", sem="LIN", n=400, seed=0):
    return normalize(sample_observational(builtin_scm(name, sem), n, seed))


def test_training_improves_the_bound():
    ds = _small_data(n=2000)
    cfg = VacaConfig(max_epochs=10, batch_size=100, iwae_k=10, seed=0)
    report = train(VacaModel(ds.graph, cfg), ds, cfg)
    assert report.best_valid_iwae > report.valid_iwae[0]
    assert report.epochs_run == 10 and report.stop_reason == "max_epochs"


def test_patience_zero_stops_after_first_flat_epoch():
    ds = _small_data()
    cfg = VacaConfig(max_epochs=20, patience=0, lr=0.0, iwae_k=5)
    report = train(VacaModel(ds.graph, cfg), ds, cfg)
    assert report.stop_reason == "patience"
    assert report.epochs_run == 1 and report.best_epoch == 0


def test_training_is_deterministic():
    ds = _small_data()
    cfg = VacaConfig(max_epochs=3, batch_size=64, iwae_k=5, seed=4)
    a, b = VacaModel(ds.graph, cfg), VacaModel(ds.graph, cfg)
    ra, rb = train(a, ds, cfg), train(b, ds, cfg)
    assert ra.comparable() == rb.comparable()
    assert a.fingerprint() == b.fingerprint()


def test_training_keeps_the_best_snapshot():
    ds = _small_data()
    cfg = VacaConfig(max_epochs=4, batch_size=64, iwae_k=5, seed=1)
    model = VacaModel(ds.graph, cfg)
    report = train(model, ds, cfg)
    score = iwae(model, ds.x_of("valid"), cfg.iwae_k, rng=np.random.default_rng([cfg.seed, 2]))
    assert score == report.best_valid_iwae


def test_train_requires_normalized_matching_data():
    raw = sample_observational(builtin_scm("collider", "LIN"), 100, 0)
    with pytest.raises(ValueError):
        train(VacaModel(raw.graph), raw)
    with pytest.raises(ValueError):
        train(VacaModel(builtin_graph("chain")), normalize(raw))


def test_checkpoint_round_trip(tmp_path):
    ds = _small_data()
    model = VacaModel(ds.graph, VacaConfig(seed=3))
    path = save_model(model, tmp_path / "m.ckpt", ds.normalization)
    loaded, meta = load_model(path, ds.graph)
    x = ds.x_of("test")
    with ad.no_grad():
        for a, b in zip(model.encode(x), loaded.encode(x)):
            assert a.data.tobytes() == b.data.tobytes()
    assert loaded.fingerprint() == model.fingerprint() == meta["model_hash"]
    with pytest.raises(CheckpointError):
        load_model(path, builtin_graph("chain"))
    with pytest.raises(CheckpointError):
        load_model(tmp_path / "missing.ckpt")


def test_config_validation():
    with pytest.raises(ConfigError, match="hidden layers"):
        VacaModel(builtin_graph("adult"), VacaConfig(decoder_hidden_layers=2))
    VacaModel(builtin_graph("chain"), VacaConfig(decoder_hidden_layers=0, allow_shallow_decoder=True))
    with pytest.raises(ConfigError):
        VacaConfig.from_dict({"latent": 3})
    with pytest.raises(ConfigError):
        VacaConfig(kl_mode="other").validate()
    cfg = VacaConfig(encoder_hidden=(8, 8), seed=9)
    assert VacaConfig.from_dict(cfg.to_dict()) == cfg


def test_beta_mode_scales_and_defaults():
    fixed, beta = VacaConfig(), VacaConfig(kl_mode="beta")
    assert (fixed.likelihood_var, fixed.kl_weight) == (0.025, 1.0)
    assert (beta.likelihood_var, beta.kl_weight) == (0.5, 0.05)
    assert fixed.sample_var == beta.sample_var == 0.025
    assert fixed.hidden_layers(builtin_graph("adult")) == 5
