"""Supervised fitting of the Laplace block on the synthetic Laplacian corpus:
the block maps a padded field to its Laplacian (nu = 1) and is compared with
the plain cotangent operator on the same mesh."""

from __future__ import annotations

import copy
import json
import time
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from .autodiff import DTYPE, adam_init, adam_step, backward
from .bc_padding import build_padded_graph, make_latent_pad_map, make_padder
from .datasets import LaplaceDataset
from .gnn import graph_tensors
from .laplace_block import LaplaceBlock, LaplaceBlockConfig, LaplaceTensors, cotangent_sum
from .laplace_geom import assemble


@dataclass
class LaplaceFitConfig:
    latent: int = 16
    hidden: int = 16
    n_hidden: int = 1
    layers: int = 2
    geom_features: bool = True
    epochs: int = 20
    lr: float = 3e-3
    lr_decay: float = 0.99
    batch_size: int = 16
    seed: int = 0

    def block_config(self) -> LaplaceBlockConfig:
        return LaplaceBlockConfig(
            channels=1,
            latent=self.latent,
            hidden=self.hidden,
            n_hidden=self.n_hidden,
            layers=self.layers,
            nu=1.0,
            geom_features=self.geom_features,
        )

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, doc: dict) -> "LaplaceFitConfig":
        unknown = set(doc) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown LaplaceFitConfig fields: {sorted(unknown)}")
        return cls(**doc)


def load_fit_config(path) -> LaplaceFitConfig:
    return LaplaceFitConfig.from_json(json.loads(Path(path).read_text()))


class LaplaceProblem:
    """Padded graph, cotangent data and padded inputs of a Laplace corpus."""

    def __init__(self, ds: LaplaceDataset):
        self.ds = ds
        pg = build_padded_graph(ds.mesh, ds.bc)
        self.n_true = pg.n_true
        self.graph = graph_tensors(pg.mesh, pg.n_true)
        self.lt = LaplaceTensors.from_geom(assemble(pg.mesh))
        self.pad_map = make_latent_pad_map(pg, ds.bc)
        padder = make_padder(pg, ds.bc, 1)
        self.inputs = torch.as_tensor(np.stack([padder(x[:, None]) for x in ds.inputs]), dtype=DTYPE)
        self.targets = torch.as_tensor(ds.targets[..., None], dtype=DTYPE)

    def part(self, name: str) -> tuple[torch.Tensor, torch.Tensor]:
        idx = torch.as_tensor(self.ds.split[name])
        return self.inputs[idx], self.targets[idx]

    def mesh_laplace(self, x: torch.Tensor) -> torch.Tensor:
        """Cotangent Laplacian on the true nodes, shape (S, n_true, 1)."""
        s = cotangent_sum(x, self.graph, self.lt)
        return s[..., : self.n_true, :] / self.lt.masses[: self.n_true, None]


def relative_error(pred: torch.Tensor, truth: torch.Tensor) -> float:
    return float(torch.linalg.norm(pred - truth) / torch.linalg.norm(truth))


def mesh_predictions(problem: LaplaceProblem) -> np.ndarray:
    """Mesh Laplace prediction of every sample, shape (S, N)."""
    with torch.no_grad():
        return problem.mesh_laplace(problem.inputs)[..., 0].numpy()


@torch.no_grad()
def block_predictions(block: LaplaceBlock, problem: LaplaceProblem, x: torch.Tensor | None = None, chunk: int = 64):
    x = problem.inputs if x is None else x
    parts = [block(x[k : k + chunk], problem.graph, problem.lt, problem.pad_map) for k in range(0, len(x), chunk)]
    return torch.cat(parts)


@dataclass
class LaplaceFitResult:
    block: LaplaceBlock
    history: list[tuple[int, float, float]]  # epoch, train loss, validation RNE
    best_epoch: int
    seconds: float


def fit_laplace_block(
    problem: LaplaceProblem, cfg: LaplaceFitConfig, log: Callable[[str], None] | None = None
) -> LaplaceFitResult:
    """Train the correction on Laplacian targets; keeps the best validation weights."""
    t0 = time.perf_counter()
    block = LaplaceBlock(cfg.block_config(), torch.Generator().manual_seed(cfg.seed))
    xtr, ytr = problem.part("train")
    xva, yva = problem.part("val")
    n = problem.n_true
    with torch.no_grad():
        s = cotangent_sum(xtr, problem.graph, problem.lt)[:, :n]
        residual = ytr * problem.lt.masses[:n, None] - s
        block.set_normalization(
            [0.0],
            [float(xtr.std())],
            [float(residual.std())],
            [float((s / problem.lt.weight_sum[:n, None]).std())],
            float(problem.lt.weights.abs().mean()),
        )
    params = [p for p in block.parameters() if p.requires_grad]
    state = adam_init(params)
    rng = np.random.default_rng(cfg.seed + 1)
    scale = float((ytr**2).mean())
    best = relative_error(block_predictions(block, problem, xva), yva) if len(xva) else float("nan")
    best_state, best_epoch = copy.deepcopy(block.state_dict()), 0
    history = []
    lr = cfg.lr
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(xtr))
        total = 0.0
        for k in range(0, len(order), cfg.batch_size):
            idx = torch.as_tensor(order[k : k + cfg.batch_size])
            pred = block(xtr[idx], problem.graph, problem.lt, problem.pad_map)
            loss = ((pred - ytr[idx]) ** 2).mean() / scale
            adam_step(params, backward(loss, params), state, lr=lr)
            total += loss.item() * len(idx)
        lr *= cfg.lr_decay
        val = relative_error(block_predictions(block, problem, xva), yva) if len(xva) else float("nan")
        history.append((epoch, total / len(xtr), val))
        if log is not None:
            log(f"epoch {epoch} train_loss {total / len(xtr):.6e} val_rne {val:.6f}")
        if np.isfinite(val) and (not np.isfinite(best) or val < best):
            best, best_state, best_epoch = val, copy.deepcopy(block.state_dict()), epoch
    block.load_state_dict(best_state)
    return LaplaceFitResult(block, history, best_epoch, time.perf_counter() - t0)
