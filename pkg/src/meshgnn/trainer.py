"""Segment training with pushforward: supervise the first and the last step of
each M-frame window, with the intermediate rollout detached from the tape."""

from __future__ import annotations

import copy
import csv
import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .autodiff import adam_init, adam_step, backward
from .bc_padding import BCSpec
from .integrator import get_scheme
from .mesh import Mesh
from .model import ModelConfig, PhysicsModel


class SegmentTooLong(ValueError):
    pass


@dataclass
class TrainConfig:
    segment_length: int = 20
    stride: int | None = None  # defaults to segment_length
    noise: float = 0.02  # fraction of the per-channel data std
    epochs: int = 100
    lr: float = 1e-3
    lr_decay: float = 0.99
    batch_size: int = 8
    scheme: str = "rk2"
    use_laplace_block: bool = True
    use_padding: bool = True
    val_fraction: float = 0.1
    seed: int = 0
    model: dict = field(default_factory=dict)  # ModelConfig overrides

    def __post_init__(self):
        if self.segment_length < 2:
            raise ValueError("segment_length must be >= 2")
        if self.noise < 0:
            raise ValueError("noise must be >= 0")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")
        get_scheme(self.scheme)

    def model_config(self, channels: int) -> ModelConfig:
        doc = dict(self.model)
        doc.setdefault("channels", channels)
        gnn = dict(doc.get("gnn", {}))
        gnn["channels"] = doc["channels"]
        lap = dict(doc.get("laplace", {}))
        lap["channels"] = doc["channels"]
        doc.update(gnn=gnn, laplace=lap, use_laplace_block=self.use_laplace_block, use_padding=self.use_padding)
        doc.setdefault("seed", self.seed)
        return ModelConfig(**doc)

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, doc: dict) -> "TrainConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown TrainConfig fields: {sorted(unknown)}")
        return cls(**doc)


def load_train_config(path) -> TrainConfig:
    return TrainConfig.from_json(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class Segment:
    traj: int
    start: int
    length: int


def make_segments(lengths: Sequence[int] | Sequence[np.ndarray], M: int, stride: int | None = None) -> list[Segment]:
    """Windows of M consecutive frames at offsets 0, stride, 2*stride, ..."""
    stride = M if stride is None else stride
    if stride < 1:
        raise ValueError("stride must be >= 1")
    out = []
    for t, T in enumerate(lengths):
        T = T if isinstance(T, (int, np.integer)) else len(T)
        if M > T:
            raise SegmentTooLong(f"segment length {M} exceeds trajectory length {T}")
        out.extend(Segment(t, s, M) for s in range(0, T - M + 1, stride))
    return out


def segment_loss(
    F: Callable[[torch.Tensor], torch.Tensor],
    frames: torch.Tensor,
    dt: float,
    scheme: str = "rk2",
    noise_std=None,
    generator: torch.Generator | None = None,
    bc: Callable | None = None,
) -> tuple[torch.Tensor, int]:
    """Two-endpoint loss over a batch of segments, frames shape (B, M, N, m).

    Returns the loss and the number of segments skipped because the detached
    rollout went non-finite.
    """
    step = get_scheme(scheme)
    M = frames.shape[1]
    if M < 2:
        raise ValueError("segments need at least 2 frames")
    u0 = frames[:, 0]
    if noise_std is not None:
        std = torch.as_tensor(noise_std, dtype=u0.dtype)
        if torch.any(std > 0):
            u0 = u0 + std * torch.randn(u0.shape, generator=generator, dtype=u0.dtype)
    u1 = step(F, u0, dt, bc)
    first = ((u1 - frames[:, 1]) ** 2).mean(dim=(-2, -1))
    if M == 2:
        return 2.0 * first.mean(), 0
    with torch.no_grad():
        u = u1.detach()
        for _ in range(M - 3):
            u = step(F, u, dt, bc)
    ok = torch.isfinite(u).flatten(1).all(dim=1)
    u = torch.where(ok[:, None, None], u, torch.zeros_like(u))
    last = ((step(F, u, dt, bc) - frames[:, M - 1]) ** 2).mean(dim=(-2, -1))
    per = first + last
    skipped = int((~ok).sum())
    if skipped == len(ok):
        return per.sum() * 0.0, skipped
    return per[ok].mean(), skipped


def _rne(pred: np.ndarray, truth: np.ndarray) -> float:
    return float(np.linalg.norm(pred - truth) / np.linalg.norm(truth))


@torch.no_grad()
def rollout_frames(model: PhysicsModel, u0, steps: int, dt: float, scheme: str) -> np.ndarray:
    step = get_scheme(scheme)
    u = model.apply_bc(torch.as_tensor(np.asarray(u0), dtype=torch.float64))
    out = [u.numpy().copy()]
    for _ in range(steps):
        u = step(model, u, dt, model.apply_bc)
        out.append(u.numpy().copy())
    return np.stack(out)


def validation_rne(model: PhysicsModel, vals: Sequence[np.ndarray], dt: float, scheme: str) -> float:
    if not vals or min(len(v) for v in vals) < 2:
        return float("nan")
    u0 = np.stack([v[0] for v in vals])
    T = min(len(v) for v in vals)
    truth = np.stack([v[:T] for v in vals], axis=1)
    pred = rollout_frames(model, u0, T - 1, dt, scheme)
    if not np.all(np.isfinite(pred)):
        return float("inf")
    return _rne(pred[1:], truth[1:])


@dataclass
class TrainResult:
    model: PhysicsModel
    history: list[tuple[int, float, float]]
    best_epoch: int
    skipped: int
    seconds: float


def split_train_val(trajs: Sequence[np.ndarray], val_fraction: float) -> tuple[list, list]:
    train, val = [], []
    for t in trajs:
        n_val = int(round(val_fraction * len(t)))
        cut = len(t) - n_val
        train.append(t[:cut])
        val.append(t[cut - 1 :] if n_val > 0 else t[:0])
    return train, val


def train(
    trajs: Sequence[np.ndarray],
    mesh: Mesh,
    bc: BCSpec,
    dt: float,
    cfg: TrainConfig,
    log: Callable[[str], None] | None = None,
) -> TrainResult:
    """Fit a PhysicsModel to trajectories (each (T, N, m)); keeps the best-validation weights."""
    t0 = time.perf_counter()
    if not trajs:
        raise ValueError("need at least one trajectory")
    trajs = [np.asarray(t, dtype=np.float64) for t in trajs]
    m = trajs[0].shape[-1]
    train_parts, val_parts = split_train_val(trajs, cfg.val_fraction)
    model = PhysicsModel(cfg.model_config(m), mesh, bc)
    stacked = np.concatenate(train_parts)
    model.fit_normalization(stacked, dt)
    noise_std = cfg.noise * stacked.std(axis=(0, 1))
    segs = make_segments([len(t) for t in train_parts], cfg.segment_length, cfg.stride)
    params = [p for p in model.parameters() if p.requires_grad]
    state = adam_init(params)
    gen = torch.Generator().manual_seed(cfg.seed + 1)
    rng = np.random.default_rng(cfg.seed + 2)
    tensors = [torch.as_tensor(t) for t in train_parts]

    def batch_frames(batch):
        return torch.stack([tensors[s.traj][s.start : s.start + s.length] for s in batch])

    best = validation_rne(model, val_parts, dt, cfg.scheme)
    best_state, best_epoch = copy.deepcopy(model.state_dict()), 0
    history = []
    skipped_total = 0
    lr = cfg.lr
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(segs))
        total, count = 0.0, 0
        for k in range(0, len(order), cfg.batch_size):
            batch = [segs[i] for i in order[k : k + cfg.batch_size]]
            loss, skipped = segment_loss(
                model, batch_frames(batch), dt, cfg.scheme, noise_std, gen, model.apply_bc
            )
            skipped_total += skipped
            grads = backward(loss, params)
            adam_step(params, grads, state, lr=lr)
            total += loss.item() * len(batch)
            count += len(batch)
        lr *= cfg.lr_decay
        val = validation_rne(model, val_parts, dt, cfg.scheme)
        history.append((epoch, total / max(count, 1), val))
        if log is not None:
            log(f"epoch {epoch} train_loss {total / max(count, 1):.6e} val_rne {val:.6f}")
        if np.isfinite(val) and (not np.isfinite(best) or val < best):
            best, best_state, best_epoch = val, copy.deepcopy(model.state_dict()), epoch
    model.load_state_dict(best_state)
    return TrainResult(model, history, best_epoch, skipped_total, time.perf_counter() - t0)


def write_history(path, history: Sequence[tuple[int, float, float]]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "val_rne"])
        for e, tl, v in history:
            w.writerow([e, repr(float(tl)), repr(float(v))])
