"""Cotangent-weight discrete Laplace-Beltrami operator on planar triangle meshes."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .mesh import DegenerateTriangle, Mesh, circumcenters, signed_areas


class LengthMismatch(ValueError):
    pass


@dataclass(frozen=True)
class GeomLaplacian:
    edges: np.ndarray  # (E, 2) undirected, i < j
    weights: np.ndarray  # (E,) cotangent weights w_ij
    masses: np.ndarray  # (N,) mixed Voronoi areas d_i

    @property
    def n_nodes(self) -> int:
        return len(self.masses)

    def neighbors(self, i: int) -> np.ndarray:
        e = self.edges
        return np.concatenate([e[e[:, 0] == i, 1], e[e[:, 1] == i, 0]])

    def edge_sum(self, f: np.ndarray) -> np.ndarray:
        """S_i = sum_j w_ij (f_j - f_i) for every node, channel-wise."""
        f = np.asarray(f, dtype=float)
        i, j = self.edges[:, 0], self.edges[:, 1]
        w = self.weights.reshape((-1,) + (1,) * (f.ndim - 1))
        flux = w * (f[j] - f[i])
        out = np.zeros_like(f)
        np.add.at(out, i, flux)
        np.add.at(out, j, -flux)
        return out

    def scaled(self, mass_factor: float) -> "GeomLaplacian":
        return GeomLaplacian(self.edges, self.weights, self.masses * mass_factor)


def _cell_cotangents(nodes: np.ndarray, cells: np.ndarray) -> np.ndarray:
    """cot of the interior angle at each corner, shape (C, 3)."""
    area2 = 2.0 * signed_areas(nodes, cells)
    if np.any(np.abs(area2) <= 2e-14):
        raise DegenerateTriangle("cell with |area| <= 1e-14")
    cots = np.empty(cells.shape)
    for k in range(3):
        p = nodes[cells[:, k]]
        u = nodes[cells[:, (k + 1) % 3]] - p
        v = nodes[cells[:, (k + 2) % 3]] - p
        cots[:, k] = (u * v).sum(1) / np.abs(area2)
    if not np.all(np.isfinite(cots)):
        raise DegenerateTriangle("cotangent overflow")
    return cots


def cotangent_weights(mesh: Mesh) -> np.ndarray:
    """w_ij = (cot a_ij + cot b_ij) / 2 aligned with ``mesh.edges``.

    Boundary edges only have one opposite angle and get half its cotangent.
    Obtuse opposite angles give negative weights, which are kept.
    """
    cells = mesh.cells
    cots = _cell_cotangents(mesh.nodes, cells)
    # edge opposite corner k joins corners k+1 and k+2
    pairs = np.concatenate([cells[:, [1, 2]], cells[:, [2, 0]], cells[:, [0, 1]]])
    pairs.sort(axis=1)
    vals = 0.5 * np.concatenate([cots[:, 0], cots[:, 1], cots[:, 2]])
    n = mesh.n_nodes
    key_edges = mesh.edges[:, 0] * n + mesh.edges[:, 1]
    key_pairs = pairs[:, 0] * n + pairs[:, 1]
    pos = np.searchsorted(key_edges, key_pairs)
    w = np.zeros(len(mesh.edges))
    np.add.at(w, pos, vals)
    return w


def mixed_voronoi_masses(mesh: Mesh) -> np.ndarray:
    """Per-node area of the mixed Voronoi region.

    Each cell gives node i the polygon (i, mid(i,j), X, mid(i,k)) where X is
    the circumcenter, or the midpoint of the edge opposite the obtuse angle
    when the cell is obtuse. The pieces tile each cell exactly.
    """
    nodes, cells = mesh.nodes, mesh.cells
    cots = _cell_cotangents(nodes, cells)
    obtuse = cots < 0  # cot < 0 <=> angle > 90 degrees
    X = circumcenters(nodes, cells)
    for k in range(3):
        rows = obtuse[:, k]
        if np.any(rows):
            a = nodes[cells[rows, (k + 1) % 3]]
            b = nodes[cells[rows, (k + 2) % 3]]
            X[rows] = 0.5 * (a + b)
    masses = np.zeros(mesh.n_nodes)
    for k in range(3):
        p = nodes[cells[:, k]]
        q = nodes[cells[:, (k + 1) % 3]]
        r = nodes[cells[:, (k + 2) % 3]]
        poly = [p, 0.5 * (p + q), X, 0.5 * (p + r)]
        np.add.at(masses, cells[:, k], _shoelace(poly))
    incident = np.zeros(mesh.n_nodes, dtype=bool)
    incident[cells.ravel()] = True
    if np.any(masses[incident] <= 0):
        raise DegenerateTriangle("non-positive node mass")
    return masses


def _shoelace(poly: list[np.ndarray]) -> np.ndarray:
    s = np.zeros(len(poly[0]))
    for a, b in zip(poly, poly[1:] + poly[:1]):
        s += a[:, 0] * b[:, 1] - b[:, 0] * a[:, 1]
    return 0.5 * s


def assemble(mesh: Mesh) -> GeomLaplacian:
    masses = mixed_voronoi_masses(mesh)
    incident = np.zeros(mesh.n_nodes, dtype=bool)
    incident[mesh.cells.ravel()] = True
    if not incident.all():
        raise DegenerateTriangle("isolated node without an incident cell")
    return GeomLaplacian(mesh.edges.copy(), cotangent_weights(mesh), masses)


def mesh_laplace(lap: GeomLaplacian, f) -> np.ndarray:
    """Delta f_i = (1/d_i) sum_j w_ij (f_j - f_i); positive on x^2 + y^2."""
    f = np.asarray(f, dtype=float)
    if f.shape[0] != lap.n_nodes:
        raise LengthMismatch(f"field has {f.shape[0]} rows, mesh has {lap.n_nodes} nodes")
    s = lap.edge_sum(f)
    return s / lap.masses.reshape((-1,) + (1,) * (f.ndim - 1))
