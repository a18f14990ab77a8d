"""Ground-truth generation: random periodic trig fields with a fourth-order
finite-difference Laplacian, coarse point sets, and a periodic Burgers solver."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .bc_padding import BCSpec, boundary_kinds
from .mesh import Mesh, delaunay_triangulate, rectangle_groups


class CFLViolation(ValueError):
    pass


class NonFiniteState(FloatingPointError):
    def __init__(self, step: int, msg: str = ""):
        super().__init__(msg or f"non-finite state at step {step}")
        self.step = step


@dataclass(frozen=True)
class SyntheticLaplaceConfig:
    cutoff: int = 12
    grid: int = 129  # closed grid: first and last rows coincide periodically
    samples: int = 1000
    seed: int = 0
    coarse_nodes: int = 983

    def __post_init__(self):
        if self.cutoff < 1 or self.grid < 3:
            raise ValueError("need cutoff >= 1 and grid >= 3")


# --- random periodic fields ------------------------------------------------------


def trig_coefficients(cutoff: int, seed) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng(seed)
    A = rng.standard_normal((cutoff + 1, cutoff + 1))
    B = rng.standard_normal((cutoff + 1, cutoff + 1))
    return A, B


def trig_field_from_coeffs(A: np.ndarray, B: np.ndarray, n: int, normalize: bool = True) -> np.ndarray:
    """Unnormalised (or max-normalised) trig sum on the periodic n x n grid.

    Entry [k, l] sits at x = k/n, y = l/n. Phases are reduced modulo n in
    integer arithmetic so every mode is sampled from one exact table.
    """
    N = A.shape[0] - 1
    freqs = np.arange(N + 1) - N // 2
    k = np.arange(n)
    idx = np.mod(np.outer(freqs, k), n)
    table_s = np.sin(2.0 * np.pi * np.arange(n) / n)
    table_c = np.cos(2.0 * np.pi * np.arange(n) / n)
    S, C = table_s[idx], table_c[idx]  # (N+1, n)
    f = S.T @ A @ C + C.T @ A @ S + C.T @ B @ C - S.T @ B @ S
    if normalize:
        f = f / f.max()
    return f


def close_grid(f: np.ndarray) -> np.ndarray:
    """Append the periodic wrap row/column: (n, n, ...) -> (n+1, n+1, ...)."""
    pad = [(0, 1), (0, 1)] + [(0, 0)] * (f.ndim - 2)
    return np.pad(f, pad, mode="wrap")


def random_trig_field(cfg: SyntheticLaplaceConfig, sample_seed) -> np.ndarray:
    """Normalised random field on the closed ``grid`` x ``grid`` lattice over [0, 1]^2."""
    A, B = trig_coefficients(cfg.cutoff, sample_seed)
    return close_grid(trig_field_from_coeffs(A, B, cfg.grid - 1))


def fd_laplacian_oracle(field: np.ndarray, h: float, closed: bool = True) -> np.ndarray:
    """Fourth-order 9-point periodic Laplacian, coefficients (-1, 16, -60, 16, -1) / 12h^2."""
    f = field[:-1, :-1] if closed else field
    # written as differences from the centre so constants cancel exactly
    out = np.zeros_like(f)
    for ax in (0, 1):
        out = out + 16.0 * ((np.roll(f, 1, ax) - f) + (np.roll(f, -1, ax) - f))
        out = out - ((np.roll(f, 2, ax) - f) + (np.roll(f, -2, ax) - f))
    out = out / (12.0 * h * h)
    return close_grid(out) if closed else out


def fd_gradient(f: np.ndarray, h: float, axis: int) -> np.ndarray:
    """Fourth-order periodic central difference (1, -8, 0, 8, -1) / 12h."""
    return (
        -np.roll(f, -2, axis) + 8.0 * np.roll(f, -1, axis) - 8.0 * np.roll(f, 1, axis) + np.roll(f, 2, axis)
    ) / (12.0 * h)


# --- coarse point sets -----------------------------------------------------------


def _greedy_disk(cands: np.ndarray, r: float, periodic: bool, size: np.ndarray) -> np.ndarray:
    cell = r / np.sqrt(2.0)
    dims = np.maximum((size / cell).astype(int), 1)
    grid: dict[tuple[int, int], list[int]] = {}
    accepted = []
    r2 = r * r
    for idx, p in enumerate(cands):
        ci = (int(p[0] / size[0] * dims[0]), int(p[1] / size[1] * dims[1]))
        ok = True
        for dx in (-2, -1, 0, 1, 2):
            for dy in (-2, -1, 0, 1, 2):
                key = (ci[0] + dx, ci[1] + dy)
                if periodic:
                    key = (key[0] % dims[0], key[1] % dims[1])
                for j in grid.get(key, ()):
                    d = cands[j] - p
                    if periodic:
                        d = d - size * np.round(d / size)
                    if d[0] * d[0] + d[1] * d[1] < r2:
                        ok = False
                        break
                if not ok:
                    break
            if not ok:
                break
        if ok:
            accepted.append(idx)
            grid.setdefault(ci, []).append(idx)
    return np.asarray(accepted, dtype=np.int64)


def poisson_disk_points(
    n_target: int, seed: int, size=(1.0, 1.0), periodic: bool = True, rtol: float = 0.05
) -> np.ndarray:
    """Dart-throwing point set in [0, Lx) x [0, Ly) with about ``n_target`` points.

    The exclusion radius is bisected until the count is within ``rtol``.
    """
    size = np.asarray(size, dtype=float)
    rng = np.random.default_rng(seed)
    cands = rng.random((40 * n_target, 2)) * size
    area = size.prod()
    lo, hi = 0.2 * np.sqrt(area / n_target), 2.0 * np.sqrt(area / n_target)
    best = None
    for _ in range(40):
        r = 0.5 * (lo + hi)
        acc = _greedy_disk(cands, r, periodic, size)
        if best is None or abs(len(acc) - n_target) < abs(len(best) - n_target):
            best = acc
        if abs(len(acc) - n_target) <= rtol * n_target:
            break
        if len(acc) > n_target:
            lo = r
        else:
            hi = r
    return cands[np.sort(best)]


def snap_to_grid(points: np.ndarray, n: int, size=(1.0, 1.0)) -> tuple[np.ndarray, np.ndarray]:
    """Move points onto the periodic n x n lattice; returns (coords, lattice index pairs)."""
    size = np.asarray(size, dtype=float)
    h = size / n
    idx = np.mod(np.ceil(points / h - 0.5).astype(np.int64), n)
    _, first = np.unique(idx[:, 0] * n + idx[:, 1], return_index=True)
    idx = idx[np.sort(first)]
    return idx * h, idx


def downsample_to_mesh(field: np.ndarray, points: np.ndarray, size=(1.0, 1.0)) -> np.ndarray:
    """Nearest-node sampling of a closed-grid field; ties go to the lowest flattened index."""
    size = np.asarray(size, dtype=float)
    nx, ny = field.shape[:2]
    h = size / (np.array([nx, ny]) - 1)
    ij = np.ceil(np.asarray(points) / h - 0.5).astype(np.int64)
    ij[:, 0] = np.clip(ij[:, 0], 0, nx - 1)
    ij[:, 1] = np.clip(ij[:, 1], 0, ny - 1)
    return field[ij[:, 0], ij[:, 1]]


def periodic_square_mesh(points: np.ndarray, size=(1.0, 1.0)) -> tuple[Mesh, BCSpec]:
    """Delaunay mesh of a point cloud in the periodic box plus its BC spec."""
    mesh = delaunay_triangulate(points)
    box = ((0.0, size[0]), (0.0, size[1]))
    groups = rectangle_groups(mesh, box)
    bc = BCSpec.periodic_box(size[0], size[1])
    bc = BCSpec({k: v for k, v in bc.groups.items() if k in groups}, bc.band, bc.period)
    return mesh.with_groups(groups, boundary_kinds(bc)), bc


def sample_seeds(seed: int, count: int) -> np.ndarray:
    return np.random.SeedSequence(seed).generate_state(count, dtype=np.uint32).astype(np.int64)


def split_sizes(count: int) -> tuple[int, int, int]:
    n_train = int(round(0.7 * count))
    n_val = int(round(0.2 * count))
    return n_train, n_val, count - n_train - n_val


@dataclass
class LaplaceDataset:
    mesh: Mesh
    bc: BCSpec
    grid_index: np.ndarray  # (N, 2) fine-lattice index of each coarse node
    inputs: np.ndarray  # (S, N)
    targets: np.ndarray  # (S, N)
    seeds: np.ndarray
    split: dict[str, np.ndarray] = field(default_factory=dict)

    def subset(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        idx = self.split[name]
        return self.inputs[idx], self.targets[idx]


def gen_laplace_dataset(cfg: SyntheticLaplaceConfig) -> LaplaceDataset:
    n = cfg.grid - 1
    h = 1.0 / n
    pts = poisson_disk_points(cfg.coarse_nodes, cfg.seed)
    coords, idx = snap_to_grid(pts, n)
    mesh, bc = periodic_square_mesh(coords)
    seeds = sample_seeds(cfg.seed, cfg.samples)
    inputs = np.empty((cfg.samples, len(coords)))
    targets = np.empty_like(inputs)
    for s, sd in enumerate(seeds):
        A, B = trig_coefficients(cfg.cutoff, int(sd))
        f = trig_field_from_coeffs(A, B, n)
        lap = fd_laplacian_oracle(f, h, closed=False)
        inputs[s] = f[idx[:, 0], idx[:, 1]]
        targets[s] = lap[idx[:, 0], idx[:, 1]]
    n_train, n_val, _ = split_sizes(cfg.samples)
    order = np.arange(cfg.samples)
    split = {
        "train": order[:n_train],
        "val": order[n_train : n_train + n_val],
        "test": order[n_train + n_val :],
    }
    return LaplaceDataset(mesh, bc, idx, inputs, targets, seeds, split)


# --- Burgers reference solver -----------------------------------------------------


@dataclass(frozen=True)
class BurgersConfig:
    nu: float = 5e-3
    grid: int = 128  # periodic fine lattice points per axis
    dt_fine: float = 5e-4
    dt_out: float = 1e-3
    steps: int = 1600  # output frames, initial condition included
    trajectories: int = 1
    seed: int = 0
    ic_cutoff: int = 4
    ic_amplitude: float = 1.0
    coarse_nodes: int = 503
    advection: bool = True

    @property
    def thin(self) -> int:
        ratio = self.dt_out / self.dt_fine
        k = int(round(ratio))
        if k < 1 or abs(ratio - k) > 1e-9:
            raise ValueError("dt_out must be an integer multiple of dt_fine")
        return k


def burgers_ic(cfg: BurgersConfig, seed) -> np.ndarray:
    """Two-channel initial condition on the fine periodic lattice, shape (n, n, 2)."""
    ss = np.random.SeedSequence(int(seed)).generate_state(2)
    chans = []
    for s in ss:
        A, B = trig_coefficients(cfg.ic_cutoff, int(s))
        chans.append(cfg.ic_amplitude * trig_field_from_coeffs(A, B, cfg.grid))
    return np.stack(chans, axis=-1)


def burgers_rhs(w: np.ndarray, nu: float, h: float, advection: bool = True) -> np.ndarray:
    """w has shape (2, n, n) with w[0] = u, w[1] = v."""
    lap = fd_laplacian_oracle(w[0], h, closed=False), fd_laplacian_oracle(w[1], h, closed=False)
    out = nu * np.stack(lap)
    if advection:
        u, v = w[0], w[1]
        for c in range(2):
            out[c] -= u * fd_gradient(w[c], h, 0) + v * fd_gradient(w[c], h, 1)
    return out


def check_cfl(cfg: BurgersConfig, umax: float) -> None:
    h = 1.0 / cfg.grid
    limit = 0.2 * h * h / cfg.nu
    if umax > 0:
        limit = min(limit, 0.5 * h / umax)
    if cfg.dt_fine > limit:
        raise CFLViolation(f"dt_fine={cfg.dt_fine} exceeds stability bound {limit:.3e}")


def burgers_reference(cfg: BurgersConfig, ic: np.ndarray, sample_index: np.ndarray | None = None) -> np.ndarray:
    """RK4 solve of u_t = nu Lap u - (u . grad) u on the fine periodic lattice.

    Returns ``cfg.steps`` frames spaced ``dt_out`` apart, shape (T, n, n, 2),
    or (T, K, 2) when ``sample_index`` (K, 2) selects lattice nodes.
    """
    h = 1.0 / cfg.grid
    w = np.moveaxis(np.asarray(ic, dtype=float), -1, 0).copy()
    check_cfl(cfg, float(np.abs(w).max()))
    thin = cfg.thin
    dt = cfg.dt_fine

    def record(state):
        if sample_index is None:
            return np.moveaxis(state, 0, -1).copy()
        return state[:, sample_index[:, 0], sample_index[:, 1]].T.copy()

    frames = [record(w)]
    for k in range(1, cfg.steps):
        for _ in range(thin):
            k1 = burgers_rhs(w, cfg.nu, h, cfg.advection)
            k2 = burgers_rhs(w + 0.5 * dt * k1, cfg.nu, h, cfg.advection)
            k3 = burgers_rhs(w + 0.5 * dt * k2, cfg.nu, h, cfg.advection)
            k4 = burgers_rhs(w + dt * k3, cfg.nu, h, cfg.advection)
            w = w + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if not np.all(np.isfinite(w)):
            raise NonFiniteState(k)
        check_cfl(cfg, float(np.abs(w).max()))
        frames.append(record(w))
    return np.stack(frames)


@dataclass
class BurgersDataset:
    mesh: Mesh
    bc: BCSpec
    grid_index: np.ndarray
    trajectories: list[np.ndarray]  # each (T, N, 2)
    seeds: np.ndarray
    dt: float


def gen_burgers_dataset(cfg: BurgersConfig) -> BurgersDataset:
    pts = poisson_disk_points(cfg.coarse_nodes, cfg.seed)
    coords, idx = snap_to_grid(pts, cfg.grid)
    mesh, bc = periodic_square_mesh(coords)
    seeds = sample_seeds(cfg.seed + 7919, cfg.trajectories)
    trajs = [burgers_reference(cfg, burgers_ic(cfg, sd), idx) for sd in seeds]
    return BurgersDataset(mesh, bc, idx, trajs, seeds, cfg.dt_out)


def self_convergence(cfg: BurgersConfig, seed: int, grids=(32, 64, 128), steps: int = 51) -> dict:
    """Grid refinement check of the reference solver.

    One initial condition is built on the finest lattice and subsampled, each
    grid is advanced ``steps`` frames with a common time step, and RMS
    differences between successive grids are compared.
    """
    fine = burgers_ic(BurgersConfig(grid=grids[-1], ic_cutoff=cfg.ic_cutoff, ic_amplitude=cfg.ic_amplitude), seed)
    final = {}
    dt_fine = min(cfg.dt_fine, 2.5e-4)
    for n in grids:
        c = BurgersConfig(nu=cfg.nu, grid=n, dt_fine=dt_fine, dt_out=cfg.dt_out, steps=steps, advection=cfg.advection)
        stride = grids[-1] // n
        final[n] = burgers_reference(c, fine[::stride, ::stride])[-1]
    errs = []
    for a, b in zip(grids[:-1], grids[1:]):
        d = final[a] - final[b][:: b // a, :: b // a]
        errs.append(float(np.sqrt(np.mean(d**2))))
    ratios = [e1 / e2 for e1, e2 in zip(errs[:-1], errs[1:])]
    return {"grids": list(grids), "rms_differences": errs, "ratios": ratios, "seed": int(seed)}
