"""Encode-process-decode message-passing network over a (padded) mesh graph."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import nn

from .autodiff import DTYPE, MLP, ShapeMismatch, make_mlp, mlp_param_count
from .bc_padding import LatentPadMap, pad_latent
from .mesh import N_NODE_TYPES, Mesh, node_type_one_hot


@dataclass
class GraphTensors:
    """Static graph data shared by every block evaluation."""

    pos: torch.Tensor  # (N, 2) normalized coordinates
    onehot: torch.Tensor  # (N, 6) node categories
    senders: torch.Tensor  # (2E,) j
    receivers: torch.Tensor  # (2E,) i, messages flow j -> i
    rel: torch.Tensor  # (2E, 3) [x_j - x_i, |x_j - x_i|] / length scale
    n_true: int

    @property
    def n_nodes(self) -> int:
        return self.pos.shape[0]


def graph_tensors(mesh: Mesh, n_true: int | None = None, length_scale: float | None = None) -> GraphTensors:
    e = mesh.edges
    senders = np.concatenate([e[:, 1], e[:, 0]])
    receivers = np.concatenate([e[:, 0], e[:, 1]])
    d = mesh.nodes[senders] - mesh.nodes[receivers]
    dist = np.linalg.norm(d, axis=1, keepdims=True)
    if length_scale is None:
        length_scale = float(dist.mean()) if len(dist) else 1.0
    lo, hi = mesh.nodes.min(0), mesh.nodes.max(0)
    span = np.where(hi - lo > 0, hi - lo, 1.0)
    pos = 2.0 * (mesh.nodes - lo) / span - 1.0
    t = lambda a: torch.as_tensor(np.ascontiguousarray(a), dtype=DTYPE)
    return GraphTensors(
        pos=t(pos),
        onehot=t(node_type_one_hot(mesh.node_type)),
        senders=torch.as_tensor(senders, dtype=torch.long),
        receivers=torch.as_tensor(receivers, dtype=torch.long),
        rel=t(np.concatenate([d, dist], axis=1) / length_scale),
        n_true=mesh.n_nodes if n_true is None else int(n_true),
    )


def gather(x: torch.Tensor, idx: torch.Tensor) -> torch.Tensor:
    return x.index_select(x.dim() - 2, idx)


def scatter_sum(msg: torch.Tensor, idx: torch.Tensor, n: int) -> torch.Tensor:
    out = msg.new_zeros(msg.shape[:-2] + (n, msg.shape[-1]))
    return out.index_add(out.dim() - 2, idx, msg)


def edge_inputs(u: torch.Tensor, graph: GraphTensors, u_scale: torch.Tensor) -> torch.Tensor:
    """[u_j - u_i, x_j - x_i, |x_j - x_i|] per directed edge."""
    du = (gather(u, graph.senders) - gather(u, graph.receivers)) / u_scale
    rel = graph.rel.expand(du.shape[:-1] + (3,))
    return torch.cat([du, rel], dim=-1)


class MPNNLayer(nn.Module):
    """m_ij = phi(h_i, h_j - h_i, e_ij); h_i' = gamma(h_i, sum_j m_ij) (+ h_i)."""

    def __init__(self, latent: int, edge_width: int, hidden: int, n_hidden: int, residual: bool, generator=None):
        super().__init__()
        self.phi = make_mlp(2 * latent + edge_width, latent, hidden, n_hidden, generator)
        self.gamma = make_mlp(2 * latent, latent, hidden, n_hidden, generator)
        self.residual = residual

    def forward(self, h: torch.Tensor, e: torch.Tensor, graph: GraphTensors) -> torch.Tensor:
        hi = gather(h, graph.receivers)
        hj = gather(h, graph.senders)
        e = e.expand(hi.shape[:-1] + (e.shape[-1],))
        msg = self.phi(torch.cat([hi, hj - hi, e], dim=-1))
        agg = scatter_sum(msg, graph.receivers, h.shape[-2])
        out = self.gamma(torch.cat([h, agg], dim=-1))
        return out + h if self.residual else out


@dataclass
class GNNConfig:
    channels: int = 2
    latent: int = 64
    hidden: int = 64
    n_hidden: int = 2
    layers: int = 4

    def __post_init__(self):
        if self.layers < 2:
            raise ValueError("the processor needs at least 2 layers")

    def to_json(self) -> dict:
        return asdict(self)


def gnn_param_count(cfg: GNNConfig) -> int:
    m, H, hid, nh = cfg.channels, cfg.latent, cfg.hidden, cfg.n_hidden
    w = lambda a, b: mlp_param_count([a] + [hid] * nh + [b])
    enc = w(m + 2 + N_NODE_TYPES, H) + w(m + 3, H)
    layer = w(3 * H, H) + w(2 * H, H)
    return enc + cfg.layers * layer + w(H, m)


class GNNBlock(nn.Module):
    """Learns the non-diffusive part of the time derivative."""

    def __init__(self, cfg: GNNConfig, generator: torch.Generator | None = None):
        super().__init__()
        self.cfg = cfg
        m, H = cfg.channels, cfg.latent
        mk = lambda a, b: make_mlp(a, b, cfg.hidden, cfg.n_hidden, generator)
        self.node_enc = mk(m + 2 + N_NODE_TYPES, H)
        self.edge_enc = mk(m + 3, H)
        self.layers = nn.ModuleList(
            MPNNLayer(H, H, cfg.hidden, cfg.n_hidden, residual=l < cfg.layers - 1, generator=generator)
            for l in range(cfg.layers)
        )
        self.decoder = mk(H, m)
        self.register_buffer("u_mean", torch.zeros(m, dtype=DTYPE))
        self.register_buffer("u_scale", torch.ones(m, dtype=DTYPE))
        self.register_buffer("out_scale", torch.ones(m, dtype=DTYPE))

    def set_normalization(self, u_mean, u_scale, out_scale) -> None:
        with torch.no_grad():
            self.u_mean.copy_(torch.as_tensor(u_mean, dtype=DTYPE))
            self.u_scale.copy_(torch.as_tensor(u_scale, dtype=DTYPE))
            self.out_scale.copy_(torch.as_tensor(out_scale, dtype=DTYPE))

    def encode(self, u: torch.Tensor, graph: GraphTensors) -> tuple[torch.Tensor, torch.Tensor]:
        if u.shape[-1] != self.cfg.channels or u.shape[-2] != graph.n_nodes:
            raise ShapeMismatch(f"state shape {tuple(u.shape)} does not fit the graph")
        static = torch.cat([graph.pos, graph.onehot], dim=-1).expand(u.shape[:-1] + (2 + N_NODE_TYPES,))
        h0 = self.node_enc(torch.cat([(u - self.u_mean) / self.u_scale, static], dim=-1))
        e = self.edge_enc(edge_inputs(u, graph, self.u_scale))
        return h0, e

    def process(self, h: torch.Tensor, e: torch.Tensor, graph: GraphTensors, pad_map: LatentPadMap | None = None):
        if pad_map is not None and pad_map.dirichlet_embeddings is None:
            pad_map = pad_map.capture(h)
        last = len(self.layers) - 1
        for l, layer in enumerate(self.layers):
            h = layer(h, e, graph)
            if pad_map is not None and l < last:
                h = pad_latent(h, pad_map)
        return h

    def decode(self, h: torch.Tensor) -> torch.Tensor:
        if h.shape[-1] != self.cfg.latent:
            raise ShapeMismatch("latent width mismatch")
        return self.decoder(h) * self.out_scale

    def forward(self, u: torch.Tensor, graph: GraphTensors, pad_map: LatentPadMap | None = None) -> torch.Tensor:
        """Time-derivative contribution on the true nodes, shape (..., n_true, m)."""
        h0, e = self.encode(u, graph)
        hL = self.process(h0, e, graph, pad_map)
        return self.decode(hL[..., : graph.n_true, :])
