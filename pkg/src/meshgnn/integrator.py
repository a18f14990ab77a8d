"""Explicit time stepping (Euler, Heun RK2, RK4) of du/dt = F(u) and the
trajectory file format."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch

from .datasets import NonFiniteState

TRAJ_MAGIC = b"PMPG"
TRAJ_VERSION = 1

Derivative = Callable[[torch.Tensor], torch.Tensor]
BoundaryFix = Callable[[torch.Tensor], torch.Tensor]


class TrajectoryFormatError(ValueError):
    pass


def _fix(u, bc: BoundaryFix | None):
    return u if bc is None else bc(u)


def step_euler(F: Derivative, u, dt: float, bc: BoundaryFix | None = None):
    return _fix(u + dt * F(u), bc)


def step_rk2(F: Derivative, u, dt: float, bc: BoundaryFix | None = None):
    """Heun: g1 = F(u), g2 = F(u + dt g1), u + dt/2 (g1 + g2)."""
    g1 = F(u)
    g2 = F(u + dt * g1)
    return _fix(u + 0.5 * dt * (g1 + g2), bc)


def step_rk4(F: Derivative, u, dt: float, bc: BoundaryFix | None = None):
    g1 = F(u)
    g2 = F(u + 0.5 * dt * g1)
    g3 = F(u + 0.5 * dt * g2)
    g4 = F(u + dt * g3)
    return _fix(u + dt / 6.0 * (g1 + 2.0 * g2 + 2.0 * g3 + g4), bc)


SCHEMES = {"euler": step_euler, "rk2": step_rk2, "rk4": step_rk4}


def get_scheme(name: str):
    try:
        return SCHEMES[name]
    except KeyError:
        raise ValueError(f"unknown scheme {name!r}; choose from {sorted(SCHEMES)}") from None


@dataclass
class Trajectory:
    values: np.ndarray  # (T, N, m)
    dt: float

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 3:
            raise TrajectoryFormatError("trajectory values must be (T, N, m)")

    @property
    def steps(self) -> int:
        return self.values.shape[0]

    @property
    def n_nodes(self) -> int:
        return self.values.shape[1]

    @property
    def channels(self) -> int:
        return self.values.shape[2]

    @property
    def times(self) -> np.ndarray:
        return self.dt * np.arange(self.steps)


def rollout(
    F: Derivative,
    u0,
    steps: int,
    dt: float,
    scheme: str = "rk2",
    bc: BoundaryFix | None = None,
) -> Trajectory:
    """Iterate ``steps`` steps from ``u0``; the result holds steps + 1 frames."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    step = get_scheme(scheme)
    u = torch.as_tensor(np.asarray(u0), dtype=torch.float64)
    u = _fix(u, bc)
    frames = [u.numpy().copy()]
    with torch.no_grad():
        for k in range(1, steps + 1):
            u = step(F, u, dt, bc)
            if not torch.all(torch.isfinite(u)):
                raise NonFiniteState(k)
            frames.append(u.numpy().copy())
    return Trajectory(np.stack(frames), dt)


def write_trajectory(path, traj: Trajectory) -> None:
    T, N, m = traj.values.shape
    with open(path, "wb") as fh:
        fh.write(TRAJ_MAGIC)
        fh.write(struct.pack("<IIIId", TRAJ_VERSION, N, m, T, float(traj.dt)))
        fh.write(np.ascontiguousarray(traj.values, dtype="<f8").tobytes())


def read_trajectory(path) -> Trajectory:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != TRAJ_MAGIC:
        raise TrajectoryFormatError("bad trajectory magic")
    version, N, m, T, dt = struct.unpack_from("<IIIId", data, 4)
    if version != TRAJ_VERSION:
        raise TrajectoryFormatError(f"unsupported trajectory version {version}")
    off = 4 + struct.calcsize("<IIIId")
    expected = 8 * T * N * m
    if len(data) - off != expected:
        raise TrajectoryFormatError("trajectory payload has the wrong length")
    vals = np.frombuffer(data, dtype="<f8", offset=off).reshape(T, N, m).copy()
    return Trajectory(vals, dt)
