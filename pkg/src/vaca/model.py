"""VACA: a variational graph autoencoder whose GNNs follow the causal adjacency.

Latents and hidden features are node-major ``(d, B, F)`` arrays. Data enter as
``(B, D)`` matrices in the dataset column layout (continuous columns
normalized, discrete columns as integer codes).
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Adam, Module, NonFiniteError, Parameter, Tensor, glorot
from .data import Dataset, Normalization
from .gnn import GnnStack, StackedMLP
from .graph import CausalGraph, VacaAdjacency

LOG_2PI = math.log(2.0 * math.pi)


class ConfigError(ValueError):
    """Invalid model or experiment configuration."""


class TrainingError(RuntimeError):
    """Training hit a non-finite loss."""


@dataclass
class VacaConfig:
    latent_dim: int = 4
    input_width: int = 4
    encoder_hidden: tuple[int, ...] = (16,)
    decoder_width: int = 16
    decoder_hidden_layers: int | None = None  # None means longest_path - 1
    allow_shallow_decoder: bool = False
    dropout: float = 0.1
    dropout_encoder: bool = True
    dropout_decoder: bool = True
    lambda_kld: float = 0.05
    kl_mode: str = "fixed"  # "fixed": sigma^2 = lambda/2, KL weight 1; "beta": sigma^2 = 1/2, KL weight lambda
    residual: bool = False
    gnn_mode: str = "disjoint"
    lr: float = 0.005
    batch_size: int = 1000
    max_epochs: int = 500
    patience: int = 50
    iwae_k: int = 100
    valid_rows: int | None = None  # None means the full validation split
    eval_every: int = 1
    seed: int = 0

    def __post_init__(self):
        self.encoder_hidden = tuple(int(w) for w in self.encoder_hidden)

    def validate(self, graph: CausalGraph | None = None) -> "VacaConfig":
        if self.latent_dim < 1 or self.input_width < 1 or self.decoder_width < 1:
            raise ConfigError("latent_dim, input_width and decoder_width must be positive")
        if not self.encoder_hidden or any(w < 1 for w in self.encoder_hidden):
            raise ConfigError("encoder_hidden needs at least one positive width")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")
        if not self.lambda_kld > 0:
            raise ConfigError("lambda_kld must be positive")
        if self.kl_mode not in ("fixed", "beta"):
            raise ConfigError(f"kl_mode must be 'fixed' or 'beta', got {self.kl_mode!r}")
        if self.gnn_mode not in ("disjoint", "shared"):
            raise ConfigError(f"gnn_mode must be 'disjoint' or 'shared', got {self.gnn_mode!r}")
        if self.lr < 0 or self.batch_size < 1 or self.max_epochs < 0 or self.patience < 0:
            raise ConfigError("lr, batch_size, max_epochs and patience must be non-negative (batch_size >= 1)")
        if self.iwae_k < 1 or self.eval_every < 1:
            raise ConfigError("iwae_k and eval_every must be at least 1")
        if self.valid_rows is not None and self.valid_rows < 1:
            raise ConfigError("valid_rows must be positive when set")
        if graph is not None:
            n_h = self.hidden_layers(graph)
            if n_h < 0:
                raise ConfigError("decoder_hidden_layers must be non-negative")
            if n_h < graph.longest_path() - 1 and not self.allow_shallow_decoder:
                raise ConfigError(
                    f"decoder needs at least {graph.longest_path() - 1} hidden layers for this graph "
                    f"(got {n_h}); set allow_shallow_decoder to override"
                )
        return self

    def hidden_layers(self, graph: CausalGraph) -> int:
        if self.decoder_hidden_layers is None:
            return max(graph.longest_path() - 1, 0)
        return int(self.decoder_hidden_layers)

    @property
    def likelihood_var(self) -> float:
        """Variance used when evaluating the Gaussian likelihood in the loss."""
        return self.lambda_kld / 2.0 if self.kl_mode == "fixed" else 0.5

    @property
    def kl_weight(self) -> float:
        return 1.0 if self.kl_mode == "fixed" else self.lambda_kld

    @property
    def sample_var(self) -> float:
        """Observation variance of the generative model (both modes)."""
        return self.lambda_kld / 2.0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["encoder_hidden"] = list(self.encoder_hidden)
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "VacaConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown model config keys: {unknown}")
        return cls(**data)


@dataclass(frozen=True)
class _Column:
    index: int
    node: int
    family: str
    n_params: int
    param_offset: int  # into the node's padded parameter vector
    input_offset: int  # into the node's padded encoder input


class VacaModel(Module):
    def __init__(self, graph: CausalGraph, config: VacaConfig | None = None):
        super().__init__()
        config = (config or VacaConfig()).validate(graph)
        self.graph = graph
        self.config = config
        self.adjacency = graph.vaca_adjacency()
        rng = np.random.default_rng([config.seed, 0])

        cols, col = [], 0
        in_widths, param_widths = [], []
        for i, kinds in enumerate(graph.kinds):
            p_off = i_off = 0
            for kind in kinds:
                cols.append(_Column(col, i, kind.family, kind.n_params, p_off, i_off))
                p_off += kind.n_params
                i_off += kind.in_width
                col += 1
            param_widths.append(p_off)
            in_widths.append(i_off)
        self.columns = tuple(cols)
        self.in_max = max(in_widths)
        self.param_max = max(param_widths)
        self._cont = np.array([c.index for c in cols if c.family == "continuous"], dtype=np.intp)
        self._cont_params = np.array(
            [c.node * self.param_max + c.param_offset for c in cols if c.family == "continuous"], dtype=np.intp
        )
        self._bin = np.array([c.index for c in cols if c.family == "binary"], dtype=np.intp)
        self._bin_params = np.array(
            [c.node * self.param_max + c.param_offset for c in cols if c.family == "binary"], dtype=np.intp
        )
        self._cat = [c for c in cols if c.family == "categorical"]

        L, F = config.latent_dim, config.input_width
        self.adapter_w = Parameter(glorot(rng, (graph.d, self.in_max, F)))
        self.adapter_b = Parameter(np.zeros((graph.d, 1, F)))
        self.encoder = GnnStack(
            self.adjacency, [F, 2 * L], rng, mode=config.gnn_mode,
            message_width=config.encoder_hidden[-1], message_hidden=config.encoder_hidden[:-1],
        )
        # Start posteriors near unit scale: a fresh Glorot layer summing several
        # messages can emit log-scales above 10, which swamps the first epochs.
        last = self.encoder.layers[0].update
        last.weights[-1].data[..., L:] *= 0.1
        n_h = config.hidden_layers(graph)
        W = config.decoder_width
        self.decoder = GnnStack(
            self.adjacency, [L] + [W] * (n_h + 1), rng, mode=config.gnn_mode,
            message_width=W, act_last=True, residual=config.residual,
        )
        self.head = StackedMLP(graph.d, [W, self.param_max], rng)

    # -- layout helpers --------------------------------------------------------

    @property
    def d(self) -> int:
        return self.graph.d

    @property
    def latent_dim(self) -> int:
        return self.config.latent_dim

    def encoder_inputs(self, x: np.ndarray) -> np.ndarray:
        """``(B, D)`` data to padded per-node inputs ``(d, B, in_max)``; categoricals one-hot."""
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.graph.n_columns:
            raise ValueError(f"x must be (B, {self.graph.n_columns}), got {x.shape}")
        out = np.zeros((self.d, x.shape[0], self.in_max))
        for c in self.columns:
            if c.family == "categorical":
                codes = np.clip(np.rint(x[:, c.index]).astype(np.intp), 0, c.n_params - 1)
                out[c.node, np.arange(x.shape[0]), c.input_offset + codes] = 1.0
            else:
                out[c.node, :, c.input_offset] = x[:, c.index]
        return out

    def fingerprint(self) -> str:
        import hashlib

        h = hashlib.sha256(self.graph.fingerprint().encode())
        h.update(json.dumps(self.config.to_dict(), sort_keys=True).encode())
        for name, p in self.named_parameters():
            h.update(name.encode())
            h.update(p.data.tobytes())
        return h.hexdigest()[:16]

    # -- encoder / decoder --------------------------------------------------------

    def encode(self, x: np.ndarray, adj: VacaAdjacency | None = None, dropout: float = 0.0,
               rng: np.random.Generator | None = None) -> tuple[Tensor, Tensor]:
        """Posterior mean and log-scale, each ``(d, B, latent_dim)``."""
        h = ad.matmul(Tensor(self.encoder_inputs(x)), self.adapter_w) + self.adapter_b
        out = self.encoder(h, adj if adj is not None else self.adjacency, dropout, rng)
        L = self.latent_dim
        return out[:, :, :L], out[:, :, L:]

    def decode(self, z: Tensor | np.ndarray, adj: VacaAdjacency | None = None, dropout: float = 0.0,
               rng: np.random.Generator | None = None) -> Tensor:
        """Padded likelihood parameters ``(d, B, param_max)``."""
        z = ad.as_tensor(z)
        if z.ndim != 3 or z.shape[0] != self.d or z.shape[2] != self.latent_dim:
            raise ValueError(f"z must be (d={self.d}, B, {self.latent_dim}), got {z.shape}")
        h = self.decoder(z, adj if adj is not None else self.adjacency, dropout, rng)
        return self.head(h)

    def _flat_params(self, params: Tensor) -> Tensor:
        B = params.shape[1]
        return ad.reshape(ad.transpose(params, (1, 0, 2)), (B, self.d * self.param_max))

    def log_likelihood(self, params: Tensor, x: np.ndarray, var: float | None = None) -> Tensor:
        """Per-sample ``log p(x | z)`` summed over columns; shape ``(B,)``."""
        var = self.config.likelihood_var if var is None else var
        flat = self._flat_params(params)
        terms = []
        if len(self._cont):
            mean = ad.take(flat, self._cont_params, axis=1)
            resid = ad.as_tensor(x[:, self._cont]) - mean
            ll = resid * resid * (-0.5 / var) - 0.5 * (LOG_2PI + math.log(var))
            terms.append(ad.tsum(ll, axis=1))
        if len(self._bin):
            logit = ad.take(flat, self._bin_params, axis=1)
            ll = logit * x[:, self._bin] - ad.softplus(logit)
            terms.append(ad.tsum(ll, axis=1))
        for c in self._cat:
            start = c.node * self.param_max + c.param_offset
            logp = ad.log_softmax(flat[:, start : start + c.n_params], axis=1)
            codes = np.clip(np.rint(x[:, c.index]).astype(np.intp), 0, c.n_params - 1)
            onehot = np.eye(c.n_params)[codes]
            terms.append(ad.tsum(logp * onehot, axis=1))
        total = terms[0]
        for t in terms[1:]:
            total = total + t
        return total

    def likelihood_mean(self, params: Tensor | np.ndarray) -> np.ndarray:
        """Point prediction per column: Gaussian mean, or the most probable code."""
        p = params.data if isinstance(params, Tensor) else params
        flat = np.transpose(p, (1, 0, 2)).reshape(p.shape[1], -1)
        out = np.zeros((flat.shape[0], self.graph.n_columns))
        out[:, self._cont] = flat[:, self._cont_params]
        out[:, self._bin] = (flat[:, self._bin_params] > 0).astype(np.float64)
        for c in self._cat:
            start = c.node * self.param_max + c.param_offset
            out[:, c.index] = np.argmax(flat[:, start : start + c.n_params], axis=1)
        return out

    def sample_likelihood(self, params: Tensor | np.ndarray, rng: np.random.Generator) -> np.ndarray:
        p = params.data if isinstance(params, Tensor) else params
        flat = np.transpose(p, (1, 0, 2)).reshape(p.shape[1], -1)
        B = flat.shape[0]
        out = np.zeros((B, self.graph.n_columns))
        if len(self._cont):
            mean = flat[:, self._cont_params]
            out[:, self._cont] = mean + math.sqrt(self.config.sample_var) * rng.standard_normal(mean.shape)
        if len(self._bin):
            prob = 1.0 / (1.0 + np.exp(-flat[:, self._bin_params]))
            out[:, self._bin] = (rng.random(prob.shape) < prob).astype(np.float64)
        for c in self._cat:
            start = c.node * self.param_max + c.param_offset
            logits = flat[:, start : start + c.n_params]
            prob = np.exp(logits - logits.max(axis=1, keepdims=True))
            prob /= prob.sum(axis=1, keepdims=True)
            u = rng.random((B, 1))
            out[:, c.index] = np.minimum((np.cumsum(prob, axis=1) < u).sum(axis=1), c.n_params - 1)
        return out


# -- objectives ---------------------------------------------------------------------


def kl_standard_normal(mu: Tensor, logsig: Tensor) -> Tensor:
    """KL(N(mu, sigma^2) || N(0, 1)) summed over nodes and latent dims; shape ``(B,)``."""
    term = mu * mu + ad.exp(logsig * 2.0) - 1.0 - logsig * 2.0
    per = ad.tsum(ad.tsum(term, axis=2), axis=0)
    return per * 0.5


def elbo(model: VacaModel, x: np.ndarray, adj: VacaAdjacency | None = None, dropout: float = 0.0,
         rng: np.random.Generator | None = None, eps: np.ndarray | None = None) -> Tensor:
    """Batch-mean ELBO (to maximize) with one reparameterized draw.

    ``eps`` fixes the standard-normal noise (used for gradient checks).
    """
    cfg = model.config
    rng = rng if rng is not None else np.random.default_rng(0)
    p_enc = dropout if cfg.dropout_encoder else 0.0
    p_dec = dropout if cfg.dropout_decoder else 0.0
    mu, logsig = model.encode(x, adj, p_enc, rng)
    if eps is None:
        eps = rng.standard_normal(mu.shape)
    z = mu + ad.exp(logsig) * eps
    params = model.decode(z, adj, p_dec, rng)
    ll = model.log_likelihood(params, x)
    kl = kl_standard_normal(mu, logsig)
    return ad.mean(ll - kl * cfg.kl_weight)


def iwae(model: VacaModel, x: np.ndarray, K: int = 100, adj: VacaAdjacency | None = None,
         rng: np.random.Generator | None = None, max_rows: int = 60_000) -> float:
    """Batch-mean importance-weighted bound with ``K`` samples, no dropout."""
    if K < 1:
        raise ValueError("K must be at least 1")
    rng = rng if rng is not None else np.random.default_rng(0)
    x = np.asarray(x, dtype=np.float64)
    var = model.config.sample_var
    total = 0.0
    with ad.no_grad():
        mu_t, logsig_t = model.encode(x, adj)
        mu, logsig = mu_t.data, logsig_t.data
        chunk = max(1, max_rows // K)
        for lo in range(0, x.shape[0], chunk):
            hi = min(lo + chunk, x.shape[0])
            b = hi - lo
            eps = rng.standard_normal((K,) + mu[:, lo:hi].shape)  # (K, d, b, L)
            z = mu[None, :, lo:hi] + np.exp(logsig[None, :, lo:hi]) * eps
            z_flat = np.transpose(z, (1, 0, 2, 3)).reshape(model.d, K * b, model.latent_dim)
            params = model.decode(z_flat, adj)
            ll = model.log_likelihood(params, np.tile(x[lo:hi], (K, 1)), var=var).data.reshape(K, b)
            log_pz = (-0.5 * (z**2 + LOG_2PI)).sum(axis=(1, 3))
            log_qz = (-0.5 * (eps**2 + LOG_2PI) - logsig[None, :, lo:hi]).sum(axis=(1, 3))
            logw = ll + log_pz - log_qz
            m = logw.max(axis=0)
            lme = m + np.log(np.exp(logw - m).mean(axis=0))
            total += float(lme.sum())
    return total / x.shape[0]


# -- training -------------------------------------------------------------------------


@dataclass
class TrainReport:
    train_elbo: list[float] = field(default_factory=list)
    valid_iwae: list[float] = field(default_factory=list)  # entry 0 is at initialization
    valid_epochs: list[int] = field(default_factory=list)
    best_epoch: int = 0
    best_valid_iwae: float = -math.inf
    stop_reason: str = ""
    epochs_run: int = 0
    wall_time: float = 0.0
    n_parameters: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainReport":
        return cls(**data)

    def comparable(self) -> dict:
        """Everything except wall time."""
        d = self.to_dict()
        d.pop("wall_time")
        return d


def train(model: VacaModel, ds: Dataset, config: VacaConfig | None = None, log=None) -> TrainReport:
    """Minibatch Adam on the negative ELBO with IWAE early stopping on the validation split."""
    cfg = config or model.config
    if not ds.is_normalized:
        raise ValueError("train expects a normalized dataset")
    if ds.graph.fingerprint() != model.graph.fingerprint():
        raise ValueError("dataset graph does not match the model graph")
    x_train = ds.x_of("train")
    x_valid = ds.x_of("valid")
    if len(x_valid) == 0:
        x_valid = x_train
    if cfg.valid_rows is not None:
        x_valid = x_valid[: cfg.valid_rows]
    rng = np.random.default_rng([cfg.seed, 1])
    eval_rng_seed = [cfg.seed, 2]
    opt = Adam(model.parameters(), lr=cfg.lr)
    report = TrainReport(n_parameters=model.n_parameters())
    start = time.perf_counter()

    def score() -> float:
        return iwae(model, x_valid, cfg.iwae_k, rng=np.random.default_rng(eval_rng_seed))

    best = score()
    best_state = model.state_dict()
    report.valid_iwae.append(best)
    report.valid_epochs.append(0)
    report.best_valid_iwae = best
    wait = 0
    report.stop_reason = "max_epochs"
    for epoch in range(1, cfg.max_epochs + 1):
        perm = rng.permutation(len(x_train))
        total, count = 0.0, 0
        for lo in range(0, len(perm), cfg.batch_size):
            batch = x_train[perm[lo : lo + cfg.batch_size]]
            opt.zero_grad()
            try:
                obj = elbo(model, batch, dropout=cfg.dropout, rng=rng)
                loss = obj * -1.0
                loss.backward()
                opt.step()
            except NonFiniteError as exc:
                raise TrainingError(f"non-finite value at epoch {epoch}, batch offset {lo}: {exc}") from exc
            total += obj.item() * len(batch)
            count += len(batch)
        report.train_elbo.append(total / count)
        report.epochs_run = epoch
        if log is not None:
            log(f"epoch {epoch}: train elbo {total / count:.4f}")
        if epoch % cfg.eval_every and epoch != cfg.max_epochs:
            continue
        value = score()
        report.valid_iwae.append(value)
        report.valid_epochs.append(epoch)
        if value > best:
            best, best_state, wait = value, model.state_dict(), 0
            report.best_epoch, report.best_valid_iwae = epoch, value
        else:
            wait += cfg.eval_every
            if wait > cfg.patience:
                report.stop_reason = "patience"
                break
    model.load_state_dict(best_state)
    report.wall_time = time.perf_counter() - start
    return report


# -- persistence ------------------------------------------------------------------------


def sidecar_path(path: str | Path) -> Path:
    p = Path(path)
    return p.with_name(p.name + ".json")


def save_model(model: VacaModel, path: str | Path, normalization: Normalization | None = None,
               extra: dict | None = None) -> Path:
    """Binary checkpoint plus a JSON sidecar carrying config, graph and its hash."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = {
        "config": model.config.to_dict(),
        "graph": model.graph.to_dict(),
        "graph_hash": model.graph.fingerprint(),
        "normalization": normalization.to_dict() if normalization else None,
        "model_hash": model.fingerprint(),
        **(extra or {}),
    }
    ad.save_checkpoint(path, model.state_dict(), {"graph_hash": meta["graph_hash"]})
    sidecar_path(path).write_text(json.dumps(meta, indent=2, sort_keys=True))
    return path


class CheckpointError(ValueError):
    """Missing checkpoint or a graph that does not match it."""


def load_model(path: str | Path, graph: CausalGraph | None = None) -> tuple[VacaModel, dict]:
    path = Path(path)
    if not path.exists() or not sidecar_path(path).exists():
        raise CheckpointError(f"missing checkpoint or sidecar at {path}")
    meta = json.loads(sidecar_path(path).read_text())
    stored = CausalGraph.from_dict(meta["graph"])
    if graph is not None and graph.fingerprint() != meta["graph_hash"]:
        raise CheckpointError(
            f"graph hash {graph.fingerprint()} does not match checkpoint hash {meta['graph_hash']}"
        )
    if stored.fingerprint() != meta["graph_hash"]:
        raise CheckpointError("checkpoint sidecar is inconsistent (stored graph hash mismatch)")
    state, bin_meta = ad.load_checkpoint(path)
    if bin_meta.get("graph_hash") != meta["graph_hash"]:
        raise CheckpointError("checkpoint and sidecar disagree on the graph hash")
    model = VacaModel(graph or stored, VacaConfig.from_dict(meta["config"]))
    model.load_state_dict(state)
    return model, meta
