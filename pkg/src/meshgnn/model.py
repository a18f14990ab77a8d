"""Full learned right-hand side F(u) = GNN(pad(u)) + Laplace(pad(u)) on a mesh,
with the boundary-condition plumbing and checkpoint round trip."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .autodiff import (
    DTYPE,
    arrays_to_module,
    load_checkpoint,
    module_to_arrays,
    param_count,
    save_checkpoint,
)
from .bc_padding import BCSpec, build_padded_graph, make_latent_pad_map, make_padder, save_bc, load_bc
from .gnn import GNNBlock, GNNConfig, graph_tensors
from .laplace_block import LaplaceBlock, LaplaceBlockConfig, LaplaceTensors, cotangent_sum
from .laplace_geom import assemble
from .mesh import Mesh, load_mesh, save_mesh


@dataclass
class ModelConfig:
    channels: int = 2
    gnn: GNNConfig = field(default_factory=GNNConfig)
    laplace: LaplaceBlockConfig = field(default_factory=LaplaceBlockConfig)
    use_laplace_block: bool = True
    use_padding: bool = True
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.gnn, dict):
            self.gnn = GNNConfig(**self.gnn)
        if isinstance(self.laplace, dict):
            self.laplace = LaplaceBlockConfig(**self.laplace)
        if self.gnn.channels != self.channels or self.laplace.channels != self.channels:
            raise ValueError("block channel counts must match the model")

    def to_json(self) -> dict:
        return {
            "channels": self.channels,
            "gnn": self.gnn.to_json(),
            "laplace": self.laplace.to_json(),
            "use_laplace_block": self.use_laplace_block,
            "use_padding": self.use_padding,
            "seed": self.seed,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "ModelConfig":
        return cls(**doc)


class PhysicsModel(nn.Module):
    """Learned time derivative on the true nodes of ``mesh``."""

    def __init__(self, cfg: ModelConfig, mesh: Mesh, bc: BCSpec):
        super().__init__()
        self.cfg, self.mesh, self.bc = cfg, mesh, bc
        gen = torch.Generator().manual_seed(int(cfg.seed))
        self.gnn = GNNBlock(cfg.gnn, gen)
        self.laplace = LaplaceBlock(cfg.laplace, gen) if cfg.use_laplace_block else None
        m = cfg.channels
        if cfg.use_padding:
            pg = build_padded_graph(mesh, bc)
            self.padded = pg
            self.padder = make_padder(pg, bc, m)
            self.pad_map = make_latent_pad_map(pg, bc)
            graph_mesh = pg.mesh
            self.graph = graph_tensors(graph_mesh, pg.n_true)
        else:
            self.padded = self.padder = self.pad_map = None
            graph_mesh = mesh
            self.graph = graph_tensors(mesh)
        self.lap = LaplaceTensors.from_geom(assemble(graph_mesh))

    @property
    def n_true(self) -> int:
        return self.mesh.n_nodes

    def pad(self, u: torch.Tensor) -> torch.Tensor:
        return u if self.padder is None else self.padder(u)

    def apply_bc(self, u: torch.Tensor) -> torch.Tensor:
        """Dirichlet overwrite on the true nodes (identity without padding)."""
        return u if self.padder is None else self.padder.apply_dirichlet(u)

    def gnn_term(self, u: torch.Tensor) -> torch.Tensor:
        return self.gnn(self.pad(u), self.graph, self.pad_map)

    def laplace_term(self, u: torch.Tensor) -> torch.Tensor:
        if self.laplace is None:
            return torch.zeros_like(u[..., : self.n_true, :])
        return self.laplace(self.pad(u), self.graph, self.lap, self.pad_map)

    def forward(self, u: torch.Tensor) -> torch.Tensor:
        up = self.pad(u)
        out = self.gnn(up, self.graph, self.pad_map)
        if self.laplace is not None:
            out = out + self.laplace(up, self.graph, self.lap, self.pad_map)
        return out

    eval_F = forward

    def fit_normalization(self, frames: np.ndarray, dt: float) -> None:
        """Input and output scales from training frames (T, N, m) sampled at ``dt``."""
        frames = np.asarray(frames, dtype=float)
        mean = frames.mean(axis=(0, 1))
        std = frames.std(axis=(0, 1))
        std = np.where(std > 0, std, 1.0)
        du = np.diff(frames, axis=0) / dt
        dstd = du.std(axis=(0, 1)) if len(du) else np.ones_like(std)
        dstd = np.where(dstd > 0, dstd, 1.0)
        self.gnn.set_normalization(mean, std, dstd)
        if self.laplace is not None:
            u = torch.as_tensor(frames[:: max(1, len(frames) // 20)], dtype=DTYPE)
            up = self.pad(u)
            s = cotangent_sum(up, self.graph, self.lap)
            lap = (s / self.lap.weight_sum[:, None]).std(dim=(0, 1)).numpy()
            lap = np.where(lap > 0, lap, 1.0)
            z = (s.abs().mean(dim=(0, 1))).numpy()
            z = np.where(z > 0, z, 1.0)
            self.laplace.set_normalization(mean, std, 0.1 * z, lap, self.lap.weights.abs().mean())

    def n_params(self) -> int:
        return param_count(self)


def model_paths(path) -> tuple[Path, Path, Path, Path]:
    """Checkpoint plus its JSON config, mesh and boundary sidecars."""
    p = Path(path)
    stem = p.with_suffix("")
    return p, stem.with_suffix(".model.json"), stem.with_suffix(".mesh.json"), stem.with_suffix(".bc.json")


def save_model(model: PhysicsModel, path) -> None:
    ck, cfg_path, mesh_path, bc_path = model_paths(path)
    save_checkpoint(ck, module_to_arrays(model))
    cfg_path.write_text(json.dumps(model.cfg.to_json(), indent=2, sort_keys=True))
    save_mesh(model.mesh, mesh_path)
    save_bc(model.bc, bc_path)


def load_model(path) -> PhysicsModel:
    ck, cfg_path, mesh_path, bc_path = model_paths(path)
    cfg = ModelConfig.from_json(json.loads(cfg_path.read_text()))
    model = PhysicsModel(cfg, load_mesh(mesh_path), load_bc(bc_path))
    arrays_to_module(model, load_checkpoint(ck))
    return model
