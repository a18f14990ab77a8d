"""Planar triangle meshes: Bowyer-Watson Delaunay triangulation, edges,
boundary detection and node typing."""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from scipy.spatial import cKDTree


class MeshError(ValueError):
    pass


class CollinearInput(MeshError):
    pass


class DuplicatePoints(MeshError):
    pass


class DegenerateTriangle(MeshError):
    pass


class NodeType(enum.IntEnum):
    INTERIOR = 0
    DIRICHLET = 1
    NEUMANN = 2
    ROBIN = 3
    PERIODIC = 4
    GHOST = 5


N_NODE_TYPES = len(NodeType)


class Point2(NamedTuple):
    x: float
    y: float


@dataclass(frozen=True)
class BoundaryGroup:
    nodes: np.ndarray  # (k,) node indices
    normals: np.ndarray  # (k, 2) outward unit normals


@dataclass(frozen=True)
class Mesh:
    nodes: np.ndarray  # (N, 2)
    cells: np.ndarray  # (C, 3), counter-clockwise
    edges: np.ndarray  # (E, 2), i < j
    node_type: np.ndarray  # (N,)
    boundary_groups: dict[str, BoundaryGroup] = field(default_factory=dict)

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    def cell_areas(self) -> np.ndarray:
        return signed_areas(self.nodes, self.cells)

    def with_groups(self, groups: dict[str, BoundaryGroup], kinds: dict[str, NodeType] | None = None) -> "Mesh":
        """Copy of the mesh with new boundary groups; ``kinds`` relabels group nodes."""
        node_type = self.node_type.copy()
        for name, kind in (kinds or {}).items():
            node_type[groups[name].nodes] = kind
        return Mesh(self.nodes, self.cells, self.edges, node_type, dict(groups))


def node_type_one_hot(node_type: np.ndarray) -> np.ndarray:
    out = np.zeros((len(node_type), N_NODE_TYPES))
    out[np.arange(len(node_type)), np.asarray(node_type, dtype=int)] = 1.0
    return out


def signed_areas(nodes: np.ndarray, cells: np.ndarray) -> np.ndarray:
    a, b, c = nodes[cells[:, 0]], nodes[cells[:, 1]], nodes[cells[:, 2]]
    return 0.5 * ((b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1]) - (b[:, 1] - a[:, 1]) * (c[:, 0] - a[:, 0]))


def circumcenter(a, b, c) -> Point2:
    ax, ay = float(a[0]), float(a[1])
    bx, by = float(b[0]) - ax, float(b[1]) - ay
    cx, cy = float(c[0]) - ax, float(c[1]) - ay
    d = 2.0 * (bx * cy - by * cx)
    if abs(d) <= 4e-14:
        raise DegenerateTriangle(f"degenerate triangle {a}, {b}, {c}")
    b2 = bx * bx + by * by
    c2 = cx * cx + cy * cy
    ux = (cy * b2 - by * c2) / d
    uy = (bx * c2 - cx * b2) / d
    return Point2(ax + ux, ay + uy)


def circumcenters(nodes: np.ndarray, cells: np.ndarray) -> np.ndarray:
    """Vectorised circumcenters of all cells, shape (C, 2)."""
    a = nodes[cells[:, 0]]
    b = nodes[cells[:, 1]] - a
    c = nodes[cells[:, 2]] - a
    d = 2.0 * (b[:, 0] * c[:, 1] - b[:, 1] * c[:, 0])
    if np.any(np.abs(d) <= 4e-14):
        raise DegenerateTriangle("degenerate cell in circumcenter computation")
    b2 = (b * b).sum(1)
    c2 = (c * c).sum(1)
    ux = (c[:, 1] * b2 - b[:, 1] * c2) / d
    uy = (b[:, 0] * c2 - c[:, 0] * b2) / d
    return a + np.stack([ux, uy], axis=1)


# --- Delaunay ----------------------------------------------------------------

_COCIRCULAR_RTOL = 1e-12


def _incircle(tri_pts: np.ndarray, p: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Incircle determinant and its magnitude scale, in extended precision.

    ``tri_pts`` has shape (k, 3, 2) with CCW triangles; positive determinant
    means ``p`` lies strictly inside the circumcircle.
    """
    t = tri_pts.astype(np.longdouble) - np.asarray(p, dtype=np.longdouble)
    dx, dy = t[..., 0], t[..., 1]
    lift = dx * dx + dy * dy
    m1 = dx[:, 1] * dy[:, 2] - dx[:, 2] * dy[:, 1]
    m2 = dx[:, 0] * dy[:, 2] - dx[:, 2] * dy[:, 0]
    m3 = dx[:, 0] * dy[:, 1] - dx[:, 1] * dy[:, 0]
    det = lift[:, 0] * m1 - lift[:, 1] * m2 + lift[:, 2] * m3
    adx, ady = np.abs(dx), np.abs(dy)
    scale = (
        lift[:, 0] * (adx[:, 1] * ady[:, 2] + adx[:, 2] * ady[:, 1])
        + lift[:, 1] * (adx[:, 0] * ady[:, 2] + adx[:, 2] * ady[:, 0])
        + lift[:, 2] * (adx[:, 0] * ady[:, 1] + adx[:, 1] * ady[:, 0])
    )
    return det, scale


class _Triangulator:
    """Incremental Bowyer-Watson with a far super-triangle."""

    def __init__(self, pts: np.ndarray):
        lo, hi = pts.min(0), pts.max(0)
        center = 0.5 * (lo + hi)
        span = max(float((hi - lo).max()), 1e-300)
        big = 1e5 * span
        supers = center + big * np.array([[-1.0, -1.0], [1.0, -1.0], [0.0, 1.0]])
        self.pts = np.vstack([pts, supers])
        self.n = len(pts)
        cap = 8 * len(pts) + 16
        self.tri = np.zeros((cap, 3), dtype=np.int64)
        self.alive = np.zeros(cap, dtype=bool)
        self.cc = np.zeros((cap, 2))
        self.r2 = np.zeros(cap)
        self.count = 0
        self.edge_tris: dict[tuple[int, int], list[int]] = {}
        n = self.n
        self._add(n, n + 1, n + 2)

    def _add(self, a: int, b: int, c: int) -> None:
        if self.count == len(self.tri):
            self._grow()
        t = self.count
        self.count += 1
        self.tri[t] = (a, b, c)
        self.alive[t] = True
        pa, pb, pc = self.pts[a], self.pts[b], self.pts[c]
        try:
            center = np.asarray(circumcenter(pa, pb, pc))
            self.cc[t] = center
            self.r2[t] = float(((pa - center) ** 2).sum())
        except DegenerateTriangle:
            # flat cavity triangle; rely on the exact determinant only
            self.cc[t] = pa
            self.r2[t] = np.inf
        for e in ((a, b), (b, c), (c, a)):
            self.edge_tris.setdefault((min(e), max(e)), []).append(t)

    def _kill(self, t: int) -> None:
        self.alive[t] = False
        a, b, c = self.tri[t]
        for e in ((a, b), (b, c), (c, a)):
            key = (min(e), max(e))
            lst = self.edge_tris[key]
            lst.remove(t)
            if not lst:
                del self.edge_tris[key]

    def _grow(self) -> None:
        cap = 2 * len(self.tri)
        for name in ("tri", "alive", "cc", "r2"):
            old = getattr(self, name)
            new = np.zeros((cap,) + old.shape[1:], dtype=old.dtype)
            new[: len(old)] = old
            setattr(self, name, new)

    def insert(self, idx: int) -> None:
        p = self.pts[idx]
        live = np.flatnonzero(self.alive[: self.count])
        d2 = ((self.cc[live] - p) ** 2).sum(1)
        r2 = self.r2[live]
        cand = live[d2 <= r2 * (1.0 + 1e-7) + 1e-300]
        if len(cand) == 0:
            raise MeshError("point not covered by the triangulation")
        det, scale = _incircle(self.pts[self.tri[cand]], p)
        bad_mask = det > _COCIRCULAR_RTOL * scale
        bad = set(cand[bad_mask].tolist())
        if not bad:
            raise MeshError("no cavity found during insertion")
        # keep only the connected component touching the point's location
        seed = self._containing(cand[bad_mask], p)
        cavity = {seed}
        stack = [seed]
        while stack:
            t = stack.pop()
            a, b, c = self.tri[t]
            for e in ((a, b), (b, c), (c, a)):
                for nb in self.edge_tris[(min(e), max(e))]:
                    if nb != t and nb in bad and nb not in cavity:
                        cavity.add(nb)
                        stack.append(nb)
        # boundary of cavity, oriented as in the CCW triangles
        boundary = []
        for t in cavity:
            a, b, c = self.tri[t]
            for u, v in ((a, b), (b, c), (c, a)):
                others = [s for s in self.edge_tris[(min(u, v), max(u, v))] if s != t]
                if not others or others[0] not in cavity:
                    boundary.append((u, v))
        for t in cavity:
            self._kill(t)
        for u, v in boundary:
            self._add(int(u), int(v), idx)

    def _containing(self, cands: np.ndarray, p: np.ndarray) -> int:
        best, best_val = int(cands[0]), -np.inf
        for t in cands:
            a, b, c = self.pts[self.tri[t]]
            vals = [
                (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]),
                (c[0] - b[0]) * (p[1] - b[1]) - (c[1] - b[1]) * (p[0] - b[0]),
                (a[0] - c[0]) * (p[1] - c[1]) - (a[1] - c[1]) * (p[0] - c[0]),
            ]
            m = min(vals)
            if m >= 0:
                return int(t)
            if m > best_val:
                best, best_val = int(t), m
        return best

    def cells(self) -> np.ndarray:
        tri = self.tri[: self.count][self.alive[: self.count]]
        keep = (tri < self.n).all(1)
        return tri[keep]


def _check_points(pts: np.ndarray) -> None:
    if pts.ndim != 2 or pts.shape[1] != 2 or len(pts) < 3:
        raise MeshError("need at least 3 points of shape (N, 2)")
    if not np.all(np.isfinite(pts)):
        raise MeshError("non-finite point coordinates")
    if cKDTree(pts).query_pairs(1e-12):
        raise DuplicatePoints("two input points are closer than 1e-12")
    d = pts - pts[0]
    span = np.abs(d).max()
    far = d[np.argmax((d * d).sum(1))]
    cross = far[0] * d[:, 1] - far[1] * d[:, 0]
    if np.abs(cross).max() <= 1e-12 * span * span:
        raise CollinearInput("all points are collinear")


def delaunay_triangulate(points) -> Mesh:
    """Delaunay triangulation of ``points`` (N, 2), node order preserved."""
    pts = np.array(points, dtype=float).reshape(-1, 2)
    _check_points(pts)
    tr = _Triangulator(pts)
    for i in range(len(pts)):
        tr.insert(i)
    cells = tr.cells()
    return mesh_from_cells(pts, cells)


def mesh_from_cells(nodes: np.ndarray, cells: np.ndarray, node_type: np.ndarray | None = None) -> Mesh:
    nodes = np.asarray(nodes, dtype=float)
    cells = np.asarray(cells, dtype=np.int64).reshape(-1, 3).copy()
    area = signed_areas(nodes, cells)
    flip = area < 0
    cells[flip] = cells[flip][:, [0, 2, 1]]
    if np.any(np.abs(area) <= 1e-14):
        raise DegenerateTriangle("cell with zero area")
    edges = edges_from_cells(cells)
    if node_type is None:
        node_type = np.full(len(nodes), NodeType.INTERIOR, dtype=np.int64)
    mesh = Mesh(nodes, cells, edges, np.asarray(node_type, dtype=np.int64), {})
    bnodes, normals = extract_boundary(mesh)
    groups = {"boundary": BoundaryGroup(bnodes, normals)} if len(bnodes) else {}
    return Mesh(nodes, cells, edges, mesh.node_type, groups)


def edges_from_cells(cells: np.ndarray) -> np.ndarray:
    e = np.concatenate([cells[:, [0, 1]], cells[:, [1, 2]], cells[:, [2, 0]]])
    e.sort(axis=1)
    return np.unique(e, axis=0)


def boundary_edges(mesh: Mesh) -> np.ndarray:
    """Directed boundary edges (a, b) with the mesh interior on their left."""
    c = mesh.cells
    directed = np.concatenate([c[:, [0, 1]], c[:, [1, 2]], c[:, [2, 0]]])
    key = np.sort(directed, axis=1)
    _, inv, counts = np.unique(key, axis=0, return_inverse=True, return_counts=True)
    if np.any(counts > 2):
        raise MeshError("edge shared by more than two cells")
    return directed[counts[inv.ravel()] == 1]


def extract_boundary(mesh: Mesh) -> tuple[np.ndarray, np.ndarray]:
    """Boundary node indices (sorted) and their outward unit normals.

    A node normal is the normalised sum of the outward normals of its two
    boundary edges. Both edges turn through the same exterior angle at the
    node, so angle weighting reduces to this bisector.
    """
    be = boundary_edges(mesh)
    if len(be) == 0:
        return np.zeros(0, dtype=np.int64), np.zeros((0, 2))
    p = mesh.nodes
    t = p[be[:, 1]] - p[be[:, 0]]
    n = np.stack([t[:, 1], -t[:, 0]], axis=1)
    n /= np.linalg.norm(n, axis=1, keepdims=True)
    acc = np.zeros_like(p)
    np.add.at(acc, be[:, 0], n)
    np.add.at(acc, be[:, 1], n)
    nodes = np.unique(be)
    normals = acc[nodes]
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    return nodes, normals


def rectangle_groups(mesh: Mesh, box=((0.0, 1.0), (0.0, 1.0))) -> dict[str, BoundaryGroup]:
    """Split the hull nodes into left/right/bottom/top by the nearest box side."""
    bnodes, normals = extract_boundary(mesh)
    (x0, x1), (y0, y1) = box
    p = mesh.nodes[bnodes]
    dist = np.stack([p[:, 0] - x0, x1 - p[:, 0], p[:, 1] - y0, y1 - p[:, 1]], axis=1)
    side = np.argmin(dist, axis=1)
    names = ["left", "right", "bottom", "top"]
    return {
        name: BoundaryGroup(bnodes[side == k], normals[side == k])
        for k, name in enumerate(names)
        if np.any(side == k)
    }


def grid_mesh(nx: int, ny: int, box=((0.0, 1.0), (0.0, 1.0))) -> Mesh:
    """Structured right-triangle mesh of an ``nx`` by ``ny`` node grid.

    Node ``i * ny + j`` sits at x-index ``i`` and y-index ``j``; every grid
    square is cut along the same diagonal.
    """
    (x0, x1), (y0, y1) = box
    xs = np.linspace(x0, x1, nx)
    ys = np.linspace(y0, y1, ny)
    X, Y = np.meshgrid(xs, ys, indexing="ij")
    nodes = np.stack([X.ravel(), Y.ravel()], axis=1)
    idx = np.arange(nx * ny).reshape(nx, ny)
    a = idx[:-1, :-1].ravel()
    b = idx[1:, :-1].ravel()
    c = idx[1:, 1:].ravel()
    d = idx[:-1, 1:].ravel()
    cells = np.concatenate([np.stack([a, b, c], 1), np.stack([a, c, d], 1)])
    return mesh_from_cells(nodes, cells)


def save_mesh(mesh: Mesh, path) -> None:
    doc = {
        "nodes": mesh.nodes.tolist(),
        "cells": mesh.cells.tolist(),
        "node_type": [int(t) for t in mesh.node_type],
        "boundary_groups": {
            name: {"nodes": g.nodes.tolist(), "normals": g.normals.tolist()}
            for name, g in mesh.boundary_groups.items()
        },
    }
    with open(path, "w") as fh:
        json.dump(doc, fh)


def load_mesh(path) -> Mesh:
    with open(path) as fh:
        doc = json.load(fh)
    nodes = np.asarray(doc["nodes"], dtype=float).reshape(-1, 2)
    cells = np.asarray(doc["cells"], dtype=np.int64).reshape(-1, 3)
    groups = {
        name: BoundaryGroup(
            np.asarray(g["nodes"], dtype=np.int64), np.asarray(g["normals"], dtype=float).reshape(-1, 2)
        )
        for name, g in doc.get("boundary_groups", {}).items()
    }
    node_type = np.asarray(doc.get("node_type", [0] * len(nodes)), dtype=np.int64)
    return Mesh(nodes, cells, edges_from_cells(cells), node_type, groups)
