"""Message-passing layers over the self-looped causal adjacency.

Node features are laid out as ``(d, B, F)``: node-major, then batch. In
``disjoint`` mode every directed edge (self-loop included) owns its message MLP
and every node owns its update MLP; the weights are stacked along a leading
axis so one batched matmul evaluates all of them. ``shared`` mode stores a
leading axis of size 1 and relies on broadcasting.

The edge list is fixed by the base adjacency. Interventions and parents dropout
only mask messages, so a layer built for ``A`` also serves any ``A^I``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Module, Parameter, Tensor, glorot
from .graph import VacaAdjacency

ACTIVATIONS = {"relu": ad.relu, "tanh": ad.tanh, "identity": lambda t: t}


class StackedMLP(Module):
    """``n_nets`` independent MLPs sharing one architecture, evaluated together.

    Input ``(n_nets, B, in)`` (or ``(1, B, in)`` broadcast) maps to
    ``(n_nets, B, out)``. With ``n_nets == 1`` the single net broadcasts over
    whatever leading size the input has.
    """

    def __init__(self, n_nets: int, widths: list[int], rng: np.random.Generator,
                 act: str = "relu", act_last: bool = False):
        super().__init__()
        if len(widths) < 2:
            raise ValueError("an MLP needs at least input and output widths")
        self.widths = list(widths)
        self.n_nets = n_nets
        self.act = ACTIVATIONS[act]
        self.act_last = act_last
        self.weights = []
        self.biases = []
        for k, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
            w = Parameter(glorot(rng, (n_nets, a, b)))
            bias = Parameter(np.zeros((n_nets, 1, b)))
            setattr(self, f"w{k}", w)
            setattr(self, f"b{k}", bias)
            self.weights.append(w)
            self.biases.append(bias)

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.widths[0]:
            raise ValueError(f"MLP expects width {self.widths[0]}, got {x.shape[-1]}")
        n_layers = len(self.weights)
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            x = ad.matmul(x, w) + b
            if k < n_layers - 1 or self.act_last:
                x = self.act(x)
        return x


@dataclass(frozen=True)
class EdgeIndex:
    """Directed edges ``send -> recv`` of a self-looped adjacency, row-major."""

    recv: np.ndarray
    send: np.ndarray
    d: int

    @classmethod
    def from_adjacency(cls, adj: VacaAdjacency) -> "EdgeIndex":
        recv, send = np.nonzero(adj.matrix)
        return cls(recv.astype(np.intp), send.astype(np.intp), adj.d)

    @property
    def n_edges(self) -> int:
        return len(self.recv)

    @property
    def is_self(self) -> np.ndarray:
        return self.recv == self.send

    def mask_for(self, adj: VacaAdjacency) -> np.ndarray:
        """1.0 for edges present in ``adj``; ``adj`` must be a sub-pattern of the base."""
        if adj.d != self.d:
            raise ValueError(f"adjacency has d={adj.d}, layer was built for d={self.d}")
        base = np.zeros((self.d, self.d), dtype=bool)
        base[self.recv, self.send] = True
        if np.any(adj.matrix.astype(bool) & ~base):
            raise ValueError("adjacency contains edges the layer was not built for")
        return adj.matrix[self.recv, self.send].astype(np.float64)


class GnnLayer(Module):
    """h'_i = f^u_i(h_i, sum_j m_ij) with m_ij = f^m_ij(h_i, h_j) over A[i, j] = 1."""

    def __init__(self, edges: EdgeIndex, in_width: int, out_width: int, message_width: int,
                 rng: np.random.Generator, mode: str = "disjoint",
                 message_hidden: tuple[int, ...] = (), update_hidden: tuple[int, ...] = (),
                 act: str = "relu"):
        super().__init__()
        if mode not in ("disjoint", "shared"):
            raise ValueError(f"unknown GNN mode {mode!r}")
        self.edges = edges
        self.mode = mode
        self.in_width = in_width
        self.out_width = out_width
        n_msg = edges.n_edges if mode == "disjoint" else 1
        n_upd = edges.d if mode == "disjoint" else 1
        self.message = StackedMLP(n_msg, [2 * in_width, *message_hidden, message_width], rng, act, act_last=True)
        self.update = StackedMLP(n_upd, [in_width + message_width, *update_hidden, out_width], rng, act)

    def __call__(self, h: Tensor, edge_mask: np.ndarray | None = None) -> Tensor:
        """``h`` is ``(d, B, F)``; ``edge_mask`` is ``(E, B, 1)`` or ``(E, 1, 1)``."""
        if h.shape[0] != self.edges.d or h.shape[-1] != self.in_width:
            raise ValueError(f"layer expects (d={self.edges.d}, B, {self.in_width}), got {h.shape}")
        pair = ad.concat([ad.take(h, self.edges.recv, 0), ad.take(h, self.edges.send, 0)], axis=-1)
        msgs = self.message(pair)
        if edge_mask is not None:
            msgs = msgs * edge_mask
        agg = ad.segment_sum(msgs, self.edges.recv, self.edges.d)
        return self.update(ad.concat([h, agg], axis=-1))


def parents_dropout_mask(edges: EdgeIndex, batch: int, p: float, rng: np.random.Generator) -> np.ndarray:
    """Per node and sample, drop every incoming non-self message with probability ``p``."""
    drop = rng.random((edges.d, batch)) < p
    keep_edge = ~drop[edges.recv] | edges.is_self[:, None]
    return keep_edge[:, :, None].astype(np.float64)


class GnnStack(Module):
    """Sequential GNN layers; ``N_h = len(layers) - 1`` hidden layers."""

    def __init__(self, adj: VacaAdjacency, widths: list[int], rng: np.random.Generator,
                 mode: str = "disjoint", message_width: int | None = None,
                 message_hidden: tuple[int, ...] = (), act: str = "relu", act_last: bool = False,
                 residual: bool = False):
        super().__init__()
        if len(widths) < 2:
            raise ValueError("a GNN stack needs at least one layer")
        self.edges = EdgeIndex.from_adjacency(adj)
        self.act = ACTIVATIONS[act]
        self.act_last = act_last
        self.residual = residual
        self.layers = [
            GnnLayer(self.edges, a, b, message_width or b, rng, mode, message_hidden, act=act)
            for a, b in zip(widths[:-1], widths[1:])
        ]

    @property
    def n_hidden(self) -> int:
        return len(self.layers) - 1

    def edge_mask(self, adj: VacaAdjacency | None, batch: int, dropout: float = 0.0,
                  rng: np.random.Generator | None = None) -> np.ndarray | None:
        mask = None
        if adj is not None:
            m = self.edges.mask_for(adj)
            if not m.all():
                mask = m[:, None, None]
        if dropout > 0.0:
            if rng is None:
                raise ValueError("parents dropout needs an rng")
            drop = parents_dropout_mask(self.edges, batch, dropout, rng)
            mask = drop if mask is None else mask * drop
        return mask

    def __call__(self, h: Tensor, adj: VacaAdjacency | None = None, dropout: float = 0.0,
                 rng: np.random.Generator | None = None) -> Tensor:
        mask = self.edge_mask(adj, h.shape[1], dropout, rng)
        last = len(self.layers) - 1
        for k, layer in enumerate(self.layers):
            out = layer(h, mask)
            if k < last or self.act_last:
                out = self.act(out)
            if self.residual and out.shape == h.shape:
                out = out + h
            h = out
        return h
