"""Boundary conditions by ghost nodes: Dirichlet overwrite, mirrored
Neumann/Robin ghosts, periodic copies, and embedding padding."""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field, replace

import numpy as np

from .mesh import Mesh, NodeType, boundary_edges, delaunay_triangulate, mesh_from_cells


class PaddingError(ValueError):
    pass


class EmptyBand(PaddingError):
    pass


class PeriodicMismatch(PaddingError):
    pass


class MissingBoundaryValue(PaddingError):
    pass


class MapStale(PaddingError):
    pass


class GhostRule(enum.IntEnum):
    MIRROR_NEUMANN = 0
    MIRROR_ROBIN = 1
    PERIODIC_COPY = 2


_KIND_TO_TYPE = {
    "dirichlet": NodeType.DIRICHLET,
    "neumann": NodeType.NEUMANN,
    "robin": NodeType.ROBIN,
    "periodic": NodeType.PERIODIC,
}


@dataclass(frozen=True)
class GroupBC:
    kind: str
    value: object = None  # dirichlet: scalar, per-channel list, or (k, m) per node
    flux: object = None  # neumann f
    alpha: float | None = None  # robin
    beta: float | None = None
    g: object = None
    partner: str | None = None  # periodic
    translation: tuple[float, float] | None = None

    def __post_init__(self):
        if self.kind not in _KIND_TO_TYPE:
            raise ValueError(f"unknown boundary kind {self.kind!r}")
        if self.kind == "robin" and self.beta is not None and self.beta == 0:
            raise ValueError("Robin condition needs beta != 0")


@dataclass(frozen=True)
class BCSpec:
    groups: dict[str, GroupBC]
    band: float | None = None  # None: one mean edge length
    period: tuple[float, float] | None = None

    @classmethod
    def periodic_box(cls, lx: float = 1.0, ly: float = 1.0, band: float | None = None) -> "BCSpec":
        return cls(
            {
                "left": GroupBC("periodic", partner="right", translation=(lx, 0.0)),
                "right": GroupBC("periodic", partner="left", translation=(-lx, 0.0)),
                "bottom": GroupBC("periodic", partner="top", translation=(0.0, ly)),
                "top": GroupBC("periodic", partner="bottom", translation=(0.0, -ly)),
            },
            band=band,
            period=(lx, ly),
        )

    def to_json(self) -> dict:
        groups = {}
        for name, g in self.groups.items():
            doc = {"kind": g.kind}
            for key in ("value", "flux", "alpha", "beta", "g", "partner", "translation"):
                v = getattr(g, key)
                if v is not None:
                    doc[key] = np.asarray(v).tolist() if not isinstance(v, str) else v
            groups[name] = doc
        out = {"groups": groups, "band": self.band}
        if self.period is not None:
            out["period"] = list(self.period)
        return out

    @classmethod
    def from_json(cls, doc: dict) -> "BCSpec":
        groups = {}
        for name, g in doc["groups"].items():
            g = dict(g)
            if "translation" in g:
                g["translation"] = tuple(g["translation"])
            groups[name] = GroupBC(**g)
        period = doc.get("period")
        return cls(groups, doc.get("band"), tuple(period) if period is not None else None)


def save_bc(bc: BCSpec, path) -> None:
    with open(path, "w") as fh:
        json.dump(bc.to_json(), fh, indent=1)


def load_bc(path) -> BCSpec:
    with open(path) as fh:
        return BCSpec.from_json(json.load(fh))


@dataclass(frozen=True)
class PaddedGraph:
    base: Mesh
    mesh: Mesh  # true nodes first, then ghosts
    ghost_source: np.ndarray  # (G,)
    ghost_rule: np.ndarray  # (G,) GhostRule
    ghost_group: tuple[str, ...]  # (G,) owning boundary group
    # mirror ghosts: boundary foot point between nodes k1 and k2
    foot_k1: np.ndarray
    foot_k2: np.ndarray
    foot_lam: np.ndarray  # weight of k1 in the interpolation
    foot_dx: np.ndarray  # source-to-boundary distance (0 for periodic)
    dirichlet_nodes: np.ndarray
    band: float

    @property
    def n_true(self) -> int:
        return self.base.n_nodes

    @property
    def n_ghosts(self) -> int:
        return len(self.ghost_source)

    @property
    def ghost_coords(self) -> np.ndarray:
        return self.mesh.nodes[self.n_true :]


def mean_edge_length(mesh: Mesh) -> float:
    e = mesh.edges
    return float(np.linalg.norm(mesh.nodes[e[:, 1]] - mesh.nodes[e[:, 0]], axis=1).mean())


def _group_segments(mesh: Mesh, nodes: np.ndarray) -> np.ndarray:
    member = np.zeros(mesh.n_nodes, dtype=bool)
    member[nodes] = True
    be = boundary_edges(mesh)
    return be[member[be[:, 0]] & member[be[:, 1]]]


def _project_to_segments(p: np.ndarray, a: np.ndarray, b: np.ndarray):
    """Closest point of each p on the nearest segment (a, b)."""
    d = b - a
    L2 = (d * d).sum(1)
    t = ((p[:, None, :] - a[None]) * d[None]).sum(2) / L2[None]
    t = np.clip(t, 0.0, 1.0)
    foot = a[None] + t[..., None] * d[None]
    dist = np.linalg.norm(p[:, None, :] - foot, axis=2)
    best = np.argmin(dist, axis=1)
    rows = np.arange(len(p))
    return best, t[rows, best], foot[rows, best], dist[rows, best]


def build_padded_graph(mesh: Mesh, bc: BCSpec) -> PaddedGraph:
    """Create ghost nodes for every non-Dirichlet group and re-triangulate."""
    for name in bc.groups:
        if name not in mesh.boundary_groups:
            raise PaddingError(f"mesh has no boundary group {name!r}")
    band = bc.band if bc.band is not None else mean_edge_length(mesh)
    pts = mesh.nodes
    ghosts, src, rule, owner = [], [], [], []
    k1, k2, lam, dx = [], [], [], []
    dirichlet = []

    # periodic: collect, per node, the translations whose source band it falls in
    shifts: dict[int, list[tuple[str, np.ndarray]]] = {}
    for name, g in bc.groups.items():
        if g.kind != "periodic":
            continue
        partner = bc.groups.get(g.partner) if g.partner else None
        if partner is None or partner.kind != "periodic" or partner.partner != name:
            raise PeriodicMismatch(f"periodic group {name!r} has no matching partner")
        t = np.asarray(g.translation, dtype=float)
        if not np.allclose(np.asarray(partner.translation, dtype=float), -t):
            raise PeriodicMismatch(f"translations of {name!r} and {g.partner!r} are not opposite")
        tn = t / np.linalg.norm(t)
        s = pts @ tn
        near = np.flatnonzero(s - s.min() < band)
        if len(near) == 0:
            raise EmptyBand(f"no nodes within band of {name!r}")
        for i in near:
            shifts.setdefault(int(i), []).append((name, t))
    for i in sorted(shifts):
        opts = shifts[i]
        # every combination of shifts along distinct directions (corner copies)
        for mask in range(1, 1 << len(opts)):
            chosen = [opts[b] for b in range(len(opts)) if mask >> b & 1]
            axes = [int(np.argmax(np.abs(t))) for _, t in chosen]
            if len(set(axes)) != len(axes):
                continue
            shift = sum(t for _, t in chosen)
            ghosts.append(pts[i] + shift)
            src.append(i)
            rule.append(GhostRule.PERIODIC_COPY)
            owner.append("+".join(n for n, _ in chosen))
            k1.append(i)
            k2.append(i)
            lam.append(1.0)
            dx.append(0.0)

    for name, g in bc.groups.items():
        group = mesh.boundary_groups[name]
        if g.kind == "dirichlet":
            dirichlet.append(group.nodes)
            continue
        if g.kind == "periodic":
            continue
        segs = _group_segments(mesh, group.nodes)
        if len(segs) == 0:
            raise EmptyBand(f"group {name!r} has no boundary segments")
        on_boundary = np.zeros(mesh.n_nodes, dtype=bool)
        on_boundary[group.nodes] = True
        cand = np.flatnonzero(~on_boundary)
        seg, t, foot, dist = _project_to_segments(pts[cand], pts[segs[:, 0]], pts[segs[:, 1]])
        keep = (dist < band) & (dist > 1e-9)
        if not np.any(keep):
            raise EmptyBand(f"no nodes within band of {name!r}")
        r = GhostRule.MIRROR_NEUMANN if g.kind == "neumann" else GhostRule.MIRROR_ROBIN
        for c, s, tt, f, d in zip(cand[keep], seg[keep], t[keep], foot[keep], dist[keep]):
            ghosts.append(2.0 * f - pts[c])
            src.append(int(c))
            rule.append(r)
            owner.append(name)
            k1.append(int(segs[s, 0]))
            k2.append(int(segs[s, 1]))
            lam.append(1.0 - float(tt))
            dx.append(float(d))

    ghosts = np.asarray(ghosts, dtype=float).reshape(-1, 2)
    # ghosts landing on an existing point (e.g. two mirrors at a corner) are dropped
    keep = _dedupe(pts, ghosts)
    sel = np.flatnonzero(keep)
    all_pts = np.vstack([pts, ghosts[sel]])
    tri = delaunay_triangulate(all_pts)
    node_type = np.concatenate([mesh.node_type, np.full(len(sel), NodeType.GHOST)])
    padded = mesh_from_cells(all_pts, tri.cells, node_type)
    dirichlet_nodes = np.unique(np.concatenate(dirichlet)) if dirichlet else np.zeros(0, dtype=np.int64)
    return PaddedGraph(
        base=mesh,
        mesh=padded,
        ghost_source=np.asarray(src, dtype=np.int64)[sel],
        ghost_rule=np.asarray(rule, dtype=np.int64)[sel],
        ghost_group=tuple(owner[i] for i in sel),
        foot_k1=np.asarray(k1, dtype=np.int64)[sel],
        foot_k2=np.asarray(k2, dtype=np.int64)[sel],
        foot_lam=np.asarray(lam, dtype=float)[sel],
        foot_dx=np.asarray(dx, dtype=float)[sel],
        dirichlet_nodes=dirichlet_nodes.astype(np.int64),
        band=float(band),
    )


def _dedupe(pts: np.ndarray, ghosts: np.ndarray, tol: float = 1e-9) -> np.ndarray:
    from scipy.spatial import cKDTree

    keep = np.ones(len(ghosts), dtype=bool)
    if len(ghosts) == 0:
        return keep
    tree = cKDTree(pts)
    d, _ = tree.query(ghosts)
    keep &= d > tol
    gtree = cKDTree(ghosts)
    for i, j in sorted(gtree.query_pairs(tol)):
        if keep[i]:
            keep[j] = False
    return keep


# --- physical padding -----------------------------------------------------------


def _node_values(spec, nodes_in_group: np.ndarray, at: np.ndarray, m: int, what: str) -> np.ndarray:
    """Evaluate a boundary value spec at boundary node indices ``at`` -> (len(at), m)."""
    if spec is None:
        raise MissingBoundaryValue(f"missing {what}")
    arr = np.asarray(spec, dtype=float)
    if arr.ndim == 0:
        return np.full((len(at), m), float(arr))
    if arr.ndim == 1:
        return np.broadcast_to(arr, (len(at), m)).copy()
    # per group node, per channel
    lookup = {int(n): r for r, n in enumerate(nodes_in_group)}
    return arr[[lookup[int(n)] for n in at]].reshape(len(at), m)


@dataclass(frozen=True)
class PhysicalPadder:
    """Affine map from true-node state to true+ghost state.

    ghost = u[src] + coef * (lam * u[k1] + (1 - lam) * u[k2]) + const
    and Dirichlet rows of the true state are overwritten.
    """

    n_true: int
    src: np.ndarray
    k1: np.ndarray
    k2: np.ndarray
    lam: np.ndarray  # (G, 1)
    coef: np.ndarray  # (G, 1)
    const: np.ndarray  # (G, m)
    dirichlet_nodes: np.ndarray
    dirichlet_values: np.ndarray  # (D, m)

    def apply_dirichlet(self, u):
        if len(self.dirichlet_nodes) == 0:
            return u
        mask = np.zeros((self.n_true, 1))
        mask[self.dirichlet_nodes] = 1.0
        vals = np.zeros((self.n_true, self.const.shape[1]))
        vals[self.dirichlet_nodes] = self.dirichlet_values
        mask, vals = _like(u, mask), _like(u, vals)
        return u * (1.0 - mask) + vals * mask

    def __call__(self, u):
        if u.shape[-2] != self.n_true:
            u = u[..., : self.n_true, :]
        u = self.apply_dirichlet(u)
        g = _take(u, self.src)
        if np.any(self.coef != 0):
            uk = _like(u, self.lam) * _take(u, self.k1) + _like(u, 1.0 - self.lam) * _take(u, self.k2)
            g = g + _like(u, self.coef) * uk
        if np.any(self.const != 0):
            g = g + _like(u, self.const)
        return _cat(u, g)


def make_padder(pg: PaddedGraph, bc: BCSpec, m: int) -> PhysicalPadder:
    G = pg.n_ghosts
    coef = np.zeros((G, 1))
    const = np.zeros((G, m))
    base = pg.base
    for gi in range(G):
        rule = pg.ghost_rule[gi]
        if rule == GhostRule.PERIODIC_COPY:
            continue
        name = pg.ghost_group[gi]
        g = bc.groups[name]
        nodes = base.boundary_groups[name].nodes
        ends = np.array([pg.foot_k1[gi], pg.foot_k2[gi]])
        lam = pg.foot_lam[gi]
        two_dx = 2.0 * pg.foot_dx[gi]
        if rule == GhostRule.MIRROR_NEUMANN:
            f = _node_values(g.flux, nodes, ends, m, f"Neumann flux for {name!r}")
            const[gi] = two_dx * (lam * f[0] + (1 - lam) * f[1])
        else:
            if g.alpha is None or g.beta is None:
                raise MissingBoundaryValue(f"Robin coefficients for {name!r}")
            gk = _node_values(g.g, nodes, ends, m, f"Robin g for {name!r}")
            const[gi] = two_dx / g.beta * (lam * gk[0] + (1 - lam) * gk[1])
            coef[gi] = -two_dx * g.alpha / g.beta
    d_nodes, d_vals = [], []
    for name, g in bc.groups.items():
        if g.kind != "dirichlet":
            continue
        nodes = base.boundary_groups[name].nodes
        d_nodes.append(nodes)
        d_vals.append(_node_values(g.value, nodes, nodes, m, f"Dirichlet value for {name!r}"))
    return PhysicalPadder(
        n_true=pg.n_true,
        src=pg.ghost_source,
        k1=pg.foot_k1,
        k2=pg.foot_k2,
        lam=pg.foot_lam[:, None],
        coef=coef,
        const=const,
        dirichlet_nodes=np.concatenate(d_nodes) if d_nodes else np.zeros(0, dtype=np.int64),
        dirichlet_values=np.concatenate(d_vals) if d_vals else np.zeros((0, m)),
    )


def pad_physical(pg: PaddedGraph, u, bc: BCSpec):
    """State over true+ghost nodes with every boundary rule applied."""
    return make_padder(pg, bc, u.shape[-1])(u)


# --- latent padding ------------------------------------------------------------


@dataclass(frozen=True)
class LatentPadMap:
    n_total: int
    ghost_idx: np.ndarray  # ghosts that copy their source embedding
    source_idx: np.ndarray
    dirichlet_nodes: np.ndarray
    dirichlet_embeddings: object = None  # captured encoder output on dirichlet nodes

    def capture(self, h0) -> "LatentPadMap":
        if h0.shape[-2] != self.n_total:
            raise MapStale("embedding field does not match the padded graph")
        return replace(self, dirichlet_embeddings=_take(h0, self.dirichlet_nodes))


def make_latent_pad_map(pg: PaddedGraph, bc: BCSpec) -> LatentPadMap:
    """Periodic and zero-flux Neumann ghosts copy embeddings; others are left alone."""
    copy = []
    for gi in range(pg.n_ghosts):
        rule = pg.ghost_rule[gi]
        if rule == GhostRule.PERIODIC_COPY:
            copy.append(gi)
        elif rule == GhostRule.MIRROR_NEUMANN:
            flux = bc.groups[pg.ghost_group[gi]].flux
            if flux is not None and np.all(np.asarray(flux, dtype=float) == 0):
                copy.append(gi)
    copy = np.asarray(copy, dtype=np.int64)
    return LatentPadMap(
        n_total=pg.mesh.n_nodes,
        ghost_idx=pg.n_true + copy,
        source_idx=pg.ghost_source[copy] if len(copy) else np.zeros(0, dtype=np.int64),
        dirichlet_nodes=pg.dirichlet_nodes,
    )


def pad_latent(h, pad_map: LatentPadMap):
    if h.shape[-2] != pad_map.n_total:
        raise MapStale("embedding field does not match the padded graph")
    if len(pad_map.ghost_idx):
        h = _replace_rows(h, pad_map.ghost_idx, _take(h, pad_map.source_idx))
    if len(pad_map.dirichlet_nodes) and pad_map.dirichlet_embeddings is not None:
        h = _replace_rows(h, pad_map.dirichlet_nodes, pad_map.dirichlet_embeddings)
    return h


def boundary_kinds(bc: BCSpec) -> dict[str, NodeType]:
    return {name: _KIND_TO_TYPE[g.kind] for name, g in bc.groups.items()}


# --- array helpers working on numpy and torch alike --------------------------------


def _is_torch(x) -> bool:
    return type(x).__module__.startswith("torch")


def _like(ref, arr: np.ndarray):
    if _is_torch(ref):
        import torch

        return torch.as_tensor(arr, dtype=ref.dtype)
    return arr


def _take(x, idx: np.ndarray):
    if _is_torch(x):
        import torch

        return x.index_select(-2, torch.as_tensor(idx, dtype=torch.long))
    return x[..., idx, :]


def _cat(a, b):
    if _is_torch(a):
        import torch

        return torch.cat([a, b], dim=-2)
    return np.concatenate([a, b], axis=-2)


def _replace_rows(x, idx: np.ndarray, vals):
    if _is_torch(x):
        import torch

        return x.index_copy(x.dim() - 2, torch.as_tensor(idx, dtype=torch.long), vals)
    out = np.array(x, copy=True)
    out[..., idx, :] = vals
    return out
