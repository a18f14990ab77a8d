"""Diffusion term: cotangent Laplacian plus a small learned correction inside the
mass scaling, out_i = nu * (z_i + sum_j w_ij (u_j - u_i)) / d_i."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch import nn

from .autodiff import DTYPE, ShapeMismatch, make_mlp, mlp_param_count
from .bc_padding import LatentPadMap, pad_latent
from .gnn import GraphTensors, MPNNLayer, edge_inputs, gather, scatter_sum
from .laplace_geom import GeomLaplacian
from .mesh import N_NODE_TYPES


@dataclass
class LaplaceBlockConfig:
    channels: int = 2
    latent: int = 16
    hidden: int = 16
    n_hidden: int = 1
    layers: int = 2
    nu: float | list[float] = 5e-3
    learn_nu: bool = False
    correction: bool = True
    geom_features: bool = True  # feed w_ij to messages and S_i / sum_j |w_ij| to the encoder

    def __post_init__(self):
        if self.correction and self.layers < 1:
            raise ValueError("the correction needs at least one message-passing layer")

    def nu_vector(self) -> np.ndarray:
        return np.broadcast_to(np.asarray(self.nu, dtype=float), (self.channels,)).copy()

    def to_json(self) -> dict:
        d = asdict(self)
        d["nu"] = self.nu_vector().tolist() if np.ndim(self.nu) else float(self.nu)
        return d


def laplace_block_param_count(cfg: LaplaceBlockConfig) -> int:
    """Exact number of trainable parameters of the block."""
    total = cfg.channels if cfg.learn_nu else 0
    if not cfg.correction or cfg.layers == 0:
        return total
    m, H, hid, nh = cfg.channels, cfg.latent, cfg.hidden, cfg.n_hidden
    w = lambda a, b: mlp_param_count([a] + [hid] * nh + [b])
    extra = m if cfg.geom_features else 0
    total += w(m + 2 + N_NODE_TYPES + extra, H)
    total += cfg.layers * (w(2 * H + m + 3 + (1 if cfg.geom_features else 0), H) + w(2 * H, H))
    total += w(H, m)
    return total


@dataclass
class LaplaceTensors:
    """Cotangent weights per directed edge (aligned with GraphTensors) and masses."""

    weights: torch.Tensor  # (2E,)
    masses: torch.Tensor  # (N,)
    weight_sum: torch.Tensor  # (N,) sum_j |w_ij|, a mass-free local scale

    @classmethod
    def from_geom(cls, lap: GeomLaplacian) -> "LaplaceTensors":
        w = np.concatenate([lap.weights, lap.weights])
        n = len(lap.masses)
        ws = np.bincount(lap.edges.ravel(), np.repeat(np.abs(lap.weights), 2), minlength=n)
        ws = np.where(ws > 0, ws, 1.0)
        t = lambda a: torch.as_tensor(a, dtype=DTYPE)
        return cls(t(w), t(lap.masses), t(ws))

    def scaled(self, mass_factor: float) -> "LaplaceTensors":
        return LaplaceTensors(self.weights, self.masses * mass_factor, self.weight_sum)


def cotangent_sum(u: torch.Tensor, graph: GraphTensors, lt: LaplaceTensors) -> torch.Tensor:
    """S_i = sum_j w_ij (u_j - u_i) over directed edges j -> i."""
    du = gather(u, graph.senders) - gather(u, graph.receivers)
    return scatter_sum(du * lt.weights[:, None], graph.receivers, u.shape[-2])


class LaplaceBlock(nn.Module):
    def __init__(self, cfg: LaplaceBlockConfig, generator: torch.Generator | None = None):
        super().__init__()
        self.cfg = cfg
        m, H = cfg.channels, cfg.latent
        nu = torch.as_tensor(cfg.nu_vector(), dtype=DTYPE)
        if cfg.learn_nu:
            self.nu = nn.Parameter(nu)
        else:
            self.register_buffer("nu", nu)
        self.encoder = self.layers = self.decoder = None
        if cfg.correction:
            mk = lambda a, b: make_mlp(a, b, cfg.hidden, cfg.n_hidden, generator)
            gf = 1 if cfg.geom_features else 0
            self.encoder = mk(m + 2 + N_NODE_TYPES + gf * m, H)
            self.layers = nn.ModuleList(
                MPNNLayer(H, m + 3 + gf, cfg.hidden, cfg.n_hidden, residual=True, generator=generator)
                for _ in range(cfg.layers)
            )
            self.decoder = mk(H, m)
        self.register_buffer("u_mean", torch.zeros(m, dtype=DTYPE))
        self.register_buffer("u_scale", torch.ones(m, dtype=DTYPE))
        self.register_buffer("z_scale", torch.ones(m, dtype=DTYPE))
        self.register_buffer("lap_scale", torch.ones(m, dtype=DTYPE))
        self.register_buffer("w_scale", torch.ones(1, dtype=DTYPE))

    def set_normalization(self, u_mean, u_scale, z_scale, lap_scale=None, w_scale=None) -> None:
        with torch.no_grad():
            self.u_mean.copy_(torch.as_tensor(u_mean, dtype=DTYPE))
            self.u_scale.copy_(torch.as_tensor(u_scale, dtype=DTYPE))
            self.z_scale.copy_(torch.as_tensor(z_scale, dtype=DTYPE))
            if lap_scale is not None:
                self.lap_scale.copy_(torch.as_tensor(lap_scale, dtype=DTYPE))
            if w_scale is not None:
                self.w_scale.copy_(torch.as_tensor(w_scale, dtype=DTYPE).reshape(1))

    def correction(
        self,
        u: torch.Tensor,
        graph: GraphTensors,
        lt: LaplaceTensors,
        pad_map: LatentPadMap | None = None,
        s: torch.Tensor | None = None,
    ) -> torch.Tensor:
        """z on every node of the graph (zero when the correction is disabled)."""
        if self.encoder is None:
            return torch.zeros_like(u)
        static = torch.cat([graph.pos, graph.onehot], dim=-1).expand(u.shape[:-1] + (2 + N_NODE_TYPES,))
        node_in = [(u - self.u_mean) / self.u_scale, static]
        e = edge_inputs(u, graph, self.u_scale)
        if self.cfg.geom_features:
            if s is None:
                s = cotangent_sum(u, graph, lt)
            node_in.append(s / lt.weight_sum[:, None] / self.lap_scale)
            w = (lt.weights[:, None] / self.w_scale).expand(e.shape[:-1] + (1,))
            e = torch.cat([e, w], dim=-1)
        h = self.encoder(torch.cat(node_in, dim=-1))
        if pad_map is not None and pad_map.dirichlet_embeddings is None:
            pad_map = pad_map.capture(h)
        for layer in self.layers:
            h = layer(h, e, graph)
            if pad_map is not None:
                h = pad_latent(h, pad_map)
        return self.decoder(h) * self.z_scale

    def forward(
        self,
        u: torch.Tensor,
        graph: GraphTensors,
        lt: LaplaceTensors,
        pad_map: LatentPadMap | None = None,
    ) -> torch.Tensor:
        """Diffusion contribution on the true nodes, shape (..., n_true, m)."""
        if u.shape[-2] != graph.n_nodes or u.shape[-1] != self.cfg.channels:
            raise ShapeMismatch(f"state shape {tuple(u.shape)} does not fit the graph")
        if lt.masses.shape[0] != graph.n_nodes:
            raise ShapeMismatch("Laplacian assembled on a different graph")
        s = cotangent_sum(u, graph, lt)
        total = s + self.correction(u, graph, lt, pad_map, s)
        n = graph.n_true
        return self.nu * total[..., :n, :] / lt.masses[:n, None]
