"""Differentiable building blocks on top of torch (float64): MLPs, gradient
extraction, an Adam update, finite-difference gradient checks and the
binary checkpoint format."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch
from torch import nn

DTYPE = torch.float64
CHECKPOINT_MAGIC = b"PMPN"
CHECKPOINT_VERSION = 1


class ShapeMismatch(ValueError):
    pass


class NonFiniteGradient(FloatingPointError):
    pass


class DisconnectedParameter(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


def silu(x: torch.Tensor) -> torch.Tensor:
    return x * torch.sigmoid(x)


class MLP(nn.Module):
    """Dense layers with SiLU between them and an identity output layer."""

    def __init__(self, widths: Sequence[int], generator: torch.Generator | None = None):
        super().__init__()
        if len(widths) < 2:
            raise ValueError("an MLP needs at least input and output widths")
        self.widths = tuple(int(w) for w in widths)
        self.layers = nn.ModuleList(
            nn.Linear(a, b, dtype=DTYPE) for a, b in zip(self.widths[:-1], self.widths[1:])
        )
        with torch.no_grad():
            for lin in self.layers:
                bound = (1.0 / lin.in_features) ** 0.5
                lin.weight.uniform_(-bound, bound, generator=generator)
                lin.bias.uniform_(-bound, bound, generator=generator)

    @property
    def in_width(self) -> int:
        return self.widths[0]

    @property
    def out_width(self) -> int:
        return self.widths[-1]

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        for lin in self.layers[:-1]:
            x = silu(lin(x))
        return self.layers[-1](x)


def make_mlp(in_width: int, out_width: int, hidden: int, n_hidden: int, generator=None) -> MLP:
    return MLP([in_width] + [hidden] * n_hidden + [out_width], generator)


def mlp_param_count(widths: Sequence[int]) -> int:
    return sum(a * b + b for a, b in zip(widths[:-1], widths[1:]))


def mlp_forward(net: MLP, x: torch.Tensor) -> torch.Tensor:
    if x.shape[-1] != net.in_width:
        raise ShapeMismatch(f"input width {x.shape[-1]} != MLP input width {net.in_width}")
    return net(x)


def param_count(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters() if p.requires_grad)


def backward(loss: torch.Tensor, params: Sequence[torch.Tensor], debug: bool = False) -> list[torch.Tensor]:
    """Gradients of a scalar loss; parameters it does not touch get zeros."""
    if loss.numel() != 1:
        raise ShapeMismatch("loss must be a scalar")
    grads = torch.autograd.grad(loss, list(params), allow_unused=True)
    out = []
    for p, g in zip(params, grads):
        if g is None:
            if debug:
                raise DisconnectedParameter("parameter is not on the tape")
            g = torch.zeros_like(p)
        out.append(g)
    return out


@dataclass
class AdamState:
    m: list[torch.Tensor]
    v: list[torch.Tensor]
    t: int = 0


def adam_init(params: Sequence[torch.Tensor]) -> AdamState:
    return AdamState([torch.zeros_like(p) for p in params], [torch.zeros_like(p) for p in params])


@torch.no_grad()
def adam_step(
    params: Sequence[torch.Tensor],
    grads: Sequence[torch.Tensor],
    state: AdamState,
    lr: float = 1e-3,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> AdamState:
    """In-place bias-corrected Adam update of ``params``."""
    for g in grads:
        if not torch.all(torch.isfinite(g)):
            raise NonFiniteGradient("gradient has NaN or Inf entries")
    state.t += 1
    c1 = 1.0 - beta1**state.t
    c2 = 1.0 - beta2**state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if m.shape != p.shape:
            raise ShapeMismatch("optimizer state does not match parameters")
        m.mul_(beta1).add_(g, alpha=1.0 - beta1)
        v.mul_(beta2).addcmul_(g, g, value=1.0 - beta2)
        p.sub_(lr * (m / c1) / ((v / c2).sqrt() + eps))
    return state


def gradient_check(
    loss_fn: Callable[[], torch.Tensor],
    params: Sequence[torch.Tensor],
    h: float = 1e-6,
    max_entries: int | None = 40,
    seed: int = 0,
    analytic: Sequence[torch.Tensor] | None = None,
) -> float:
    """Largest autodiff vs central-difference discrepancy over sampled entries.

    The error of each parameter tensor is max|g_ad - g_fd| / max|g_fd|
    over the checked entries; the worst tensor is returned. ``analytic``
    replaces the autodiff gradient of ``loss_fn`` when the two are computed
    by different routes.
    """
    params = list(params)
    if analytic is None:
        analytic = backward(loss_fn(), params)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for p, g in zip(params, analytic):
        flat = p.data.view(-1)
        n = flat.numel()
        idx = np.arange(n) if max_entries is None or n <= max_entries else rng.choice(n, max_entries, replace=False)
        fd = np.empty(len(idx))
        with torch.no_grad():
            for r, i in enumerate(idx):
                old = flat[i].item()
                flat[i] = old + h
                fp = loss_fn().item()
                flat[i] = old - h
                fm = loss_fn().item()
                flat[i] = old
                fd[r] = (fp - fm) / (2 * h)
        ad = g.detach().view(-1)[torch.as_tensor(idx)].numpy()
        scale = np.abs(fd).max()
        if scale == 0.0:
            err = np.abs(ad).max()
        else:
            err = np.abs(ad - fd).max() / scale
        worst = max(worst, float(err))
    return worst


# --- checkpoints -----------------------------------------------------------------


def save_checkpoint(path, tensors: dict[str, np.ndarray]) -> None:
    """Write named 2-D float64 arrays; 1-D arrays are stored as single rows."""
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors.items():
            a = np.asarray(arr, dtype="<f8")
            a = a.reshape(1, -1) if a.ndim <= 1 else a.reshape(a.shape[0], -1)
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<II", a.shape[0], a.shape[1]))
            fh.write(np.ascontiguousarray(a).tobytes())


def load_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError("bad checkpoint magic")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (count,) = struct.unpack_from("<I", data, 8)
    off = 12
    out = {}
    for _ in range(count):
        (ln,) = struct.unpack_from("<I", data, off)
        off += 4
        name = data[off : off + ln].decode("utf-8")
        off += ln
        rows, cols = struct.unpack_from("<II", data, off)
        off += 8
        nbytes = 8 * rows * cols
        out[name] = np.frombuffer(data[off : off + nbytes], dtype="<f8").reshape(rows, cols).copy()
        off += nbytes
    return out


def module_to_arrays(module: nn.Module) -> dict[str, np.ndarray]:
    return {k: v.detach().cpu().numpy() for k, v in module.state_dict().items()}


def arrays_to_module(module: nn.Module, arrays: dict[str, np.ndarray]) -> None:
    state = module.state_dict()
    missing = set(state) - set(arrays)
    if missing:
        raise CheckpointError(f"checkpoint lacks {sorted(missing)[:3]}")
    module.load_state_dict(
        {k: torch.as_tensor(arrays[k], dtype=v.dtype).reshape(v.shape) for k, v in state.items()}
    )
