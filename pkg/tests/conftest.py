import os

import numpy as np
import pytest
import torch

from meshgnn.bc_padding import boundary_kinds
from meshgnn.mesh import delaunay_triangulate, rectangle_groups

torch.set_num_threads(int(os.environ.get("PMPGN_THREADS", "1")))


def square_mesh(points, bc):
    """Delaunay mesh of ``points`` in the unit square with side groups typed by ``bc``."""
    mesh = delaunay_triangulate(np.asarray(points, dtype=float))
    groups = rectangle_groups(mesh)
    return mesh.with_groups(groups, boundary_kinds(bc))


def jittered_grid(n, jitter=0.2, seed=0):
    """Unit-square grid of n x n points; interior points jittered by a fraction of h."""
    h = 1.0 / (n - 1)
    xs, ys = np.meshgrid(np.linspace(0, 1, n), np.linspace(0, 1, n), indexing="ij")
    pts = np.column_stack([xs.ravel(), ys.ravel()])
    rng = np.random.default_rng(seed)
    inner = (pts > 1e-12).all(1) & (pts < 1 - 1e-12).all(1)
    pts[inner] += rng.uniform(-jitter * h, jitter * h, (inner.sum(), 2))
    return pts


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
