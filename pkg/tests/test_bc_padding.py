import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import jittered_grid, square_mesh
from meshgnn.bc_padding import (
    BCSpec,
    EmptyBand,
    GhostRule,
    GroupBC,
    MapStale,
    MissingBoundaryValue,
    PeriodicMismatch,
    build_padded_graph,
    load_bc,
    make_latent_pad_map,
    make_padder,
    pad_latent,
    pad_physical,
    save_bc,
)
from meshgnn.datasets import poisson_disk_points
from meshgnn.mesh import NodeType


def mixed_bc(flux=3.0, robin=(1.0, 2.0, 5.0), dirichlet=0.7, band=0.12):
    a, b, g = robin
    return BCSpec(
        {
            "left": GroupBC("dirichlet", value=dirichlet),
            "right": GroupBC("neumann", flux=flux),
            "bottom": GroupBC("robin", alpha=a, beta=b, g=g),
            "top": GroupBC("dirichlet", value=dirichlet),
        },
        band=band,
    )


def one_group_bc(name, group, band):
    others = {k: GroupBC("dirichlet", value=0.0) for k in ("left", "right", "bottom", "top") if k != name}
    return BCSpec({name: group, **others}, band=band)


def test_periodic_translation_example():
    pts = np.vstack([jittered_grid(6, 0.0), [[0.05, 0.5]]])
    bc = BCSpec.periodic_box(band=0.1)
    mesh = square_mesh(pts, bc)
    pg = build_padded_graph(mesh, bc)
    src = pg.ghost_source == len(pts) - 1
    coords = pg.ghost_coords[src]
    assert any(np.array_equal(c, [1.05, 0.5]) for c in coords)


def test_neumann_mirror_example():
    pts = np.vstack([jittered_grid(6, 0.0), [[0.93, 0.4]]])
    bc = one_group_bc("right", GroupBC("neumann", flux=3.0), band=0.1)
    mesh = square_mesh(pts, bc)
    pg = build_padded_graph(mesh, bc)
    sel = (pg.ghost_source == len(pts) - 1) & (pg.ghost_rule == GhostRule.MIRROR_NEUMANN)
    np.testing.assert_allclose(pg.ghost_coords[sel], [[1.07, 0.4]], atol=1e-12)
    assert pg.foot_dx[sel][0] == pytest.approx(0.07, abs=1e-12)


def test_mirror_geometry_invariant():
    bc = mixed_bc()
    mesh = square_mesh(jittered_grid(12, 0.25, seed=3), bc)
    pg = build_padded_graph(mesh, bc)
    mirror = pg.ghost_rule != GhostRule.PERIODIC_COPY
    src = mesh.nodes[pg.ghost_source[mirror]]
    ghost = pg.ghost_coords[mirror]
    mid = 0.5 * (src + ghost)
    # the midpoint lies on the boundary and the distance to it is foot_dx on both sides
    on_side = np.minimum.reduce([np.abs(mid[:, 0] - 1), np.abs(mid[:, 1])])
    assert np.all(on_side < 1e-12)
    np.testing.assert_allclose(np.linalg.norm(ghost - mid, axis=1), pg.foot_dx[mirror], atol=1e-9)
    np.testing.assert_allclose(np.linalg.norm(src - mid, axis=1), pg.foot_dx[mirror], atol=1e-9)
    assert np.all(pg.mesh.node_type[pg.n_true :] == NodeType.GHOST)


def test_neumann_ghost_value_example():
    # u_i = 2, dx = 0.1, f = 3 -> 2.6, checked on a constructed ghost
    pts = np.vstack([jittered_grid(6, 0.0), [[0.9, 0.5]]])
    bc = one_group_bc("right", GroupBC("neumann", flux=3.0), band=0.15)
    mesh = square_mesh(pts, bc)
    pg = build_padded_graph(mesh, bc)
    u = np.full((mesh.n_nodes, 1), 2.0)
    up = pad_physical(pg, u, bc)
    g = np.flatnonzero((pg.ghost_source == len(pts) - 1) & (pg.ghost_rule == GhostRule.MIRROR_NEUMANN))[0]
    assert pg.foot_dx[g] == pytest.approx(0.1, abs=1e-12)
    assert up[pg.n_true + g, 0] == pytest.approx(2.6, abs=1e-12)


def test_neumann_central_difference_recovers_flux(rng):
    bc = mixed_bc(flux=-1.75)
    mesh = square_mesh(jittered_grid(12, 0.25, seed=1), bc)
    pg = build_padded_graph(mesh, bc)
    u = rng.standard_normal((mesh.n_nodes, 2))
    up = pad_physical(pg, u, bc)
    sel = np.flatnonzero(pg.ghost_rule == GhostRule.MIRROR_NEUMANN)
    ui = up[pg.ghost_source[sel]]
    uj = up[pg.n_true + sel]
    fk = (uj - ui) / (2 * pg.foot_dx[sel])[:, None]
    np.testing.assert_allclose(fk, -1.75, rtol=1e-12)


def test_robin_example_substitution():
    # alpha=1, beta=2, dx=0.1, g=5, u_k=1, u_i=0.5 -> 0.9
    a, b, g, dx, uk, ui = 1.0, 2.0, 5.0, 0.1, 1.0, 0.5
    assert (2 * dx / b) * (g - a * uk) + ui == pytest.approx(0.9, abs=1e-15)
    pts = np.vstack([jittered_grid(6, 0.0), [[0.5, 0.1]]])
    bc = one_group_bc("bottom", GroupBC("robin", alpha=a, beta=b, g=g), band=0.15)
    mesh = square_mesh(pts, bc)
    pg = build_padded_graph(mesh, bc)
    gi = np.flatnonzero((pg.ghost_source == len(pts) - 1) & (pg.ghost_rule == GhostRule.MIRROR_ROBIN))[0]
    u = np.full((mesh.n_nodes, 1), uk)
    u[len(pts) - 1] = ui
    up = pad_physical(pg, u, bc)
    assert up[pg.n_true + gi, 0] == pytest.approx(0.9, abs=1e-12)


def test_robin_formula_on_random_field(rng):
    a, b, g = 0.8, -1.3, 2.2
    bc = mixed_bc(robin=(a, b, g))
    mesh = square_mesh(jittered_grid(12, 0.25, seed=2), bc)
    pg = build_padded_graph(mesh, bc)
    u = rng.standard_normal((mesh.n_nodes, 1))
    up = pad_physical(pg, u, bc)
    sel = np.flatnonzero(pg.ghost_rule == GhostRule.MIRROR_ROBIN)
    lam = pg.foot_lam[sel][:, None]
    base = up[: pg.n_true]
    uk = lam * base[pg.foot_k1[sel]] + (1 - lam) * base[pg.foot_k2[sel]]
    ui = base[pg.ghost_source[sel]]
    expect = (2 * pg.foot_dx[sel][:, None] / b) * (g - a * uk) + ui
    np.testing.assert_allclose(up[pg.n_true + sel], expect, rtol=1e-12, atol=1e-14)


def test_dirichlet_overwrite_and_idempotence(rng):
    bc = mixed_bc(dirichlet=[0.25, -1.5])
    mesh = square_mesh(jittered_grid(10, 0.2), bc)
    pg = build_padded_graph(mesh, bc)
    u = rng.standard_normal((mesh.n_nodes, 2))
    up = pad_physical(pg, u, bc)
    d = pg.dirichlet_nodes
    assert len(d) > 0
    assert np.all(up[d] == np.array([0.25, -1.5]))
    others = np.setdiff1d(np.arange(mesh.n_nodes), d)
    assert np.array_equal(up[others], u[others])
    again = pad_physical(pg, up, bc)
    assert np.array_equal(again, up)


def test_periodic_ghosts_bit_equal_sources():
    bc = BCSpec.periodic_box()
    mesh = square_mesh(jittered_grid(15, 0.3, seed=5), bc)
    pg = build_padded_graph(mesh, bc)
    x = mesh.nodes[:, 0]
    u = np.sin(2 * np.pi * x)[:, None]
    up = pad_physical(pg, u, bc)
    assert np.array_equal(up[pg.n_true :], u[pg.ghost_source])
    # coordinates are exact translations
    shift = pg.ghost_coords - mesh.nodes[pg.ghost_source]
    assert np.all(np.isin(np.round(shift, 12), [-1.0, 0.0, 1.0]))


def test_periodic_band_counts():
    # half-open point set, as produced for periodic datasets
    bc = BCSpec.periodic_box()
    mesh = square_mesh(poisson_disk_points(503, 0), bc)
    pg = build_padded_graph(mesh, bc)
    x, y = mesh.nodes.T
    band = pg.band
    near = {
        "left": x - x.min() < band,
        "right": x.max() - x < band,
        "bottom": y - y.min() < band,
        "top": y.max() - y < band,
    }
    for name, mask in near.items():
        owners = [i for i, o in enumerate(pg.ghost_group) if o == name]
        assert mask.sum() > 0
        assert len(owners) == mask.sum()
        assert set(pg.ghost_source[owners].tolist()) == set(np.flatnonzero(mask).tolist())


def test_torch_and_numpy_padding_agree(rng):
    bc = mixed_bc()
    mesh = square_mesh(jittered_grid(9, 0.2), bc)
    pg = build_padded_graph(mesh, bc)
    u = rng.standard_normal((3, mesh.n_nodes, 2))
    pad = make_padder(pg, bc, 2)
    np.testing.assert_array_equal(pad(torch.as_tensor(u)).numpy(), pad(u))


def test_missing_value_raises():
    bc = BCSpec({"left": GroupBC("dirichlet"), "right": GroupBC("neumann", flux=0.0)}, band=0.2)
    mesh = square_mesh(jittered_grid(6, 0.0), bc)
    pg = build_padded_graph(mesh, bc)
    with pytest.raises(MissingBoundaryValue):
        make_padder(pg, bc, 1)


def test_periodic_mismatch_and_empty_band():
    bad = BCSpec({"left": GroupBC("periodic", partner="right", translation=(1.0, 0.0))})
    mesh = square_mesh(jittered_grid(6, 0.0), bad)
    with pytest.raises(PeriodicMismatch):
        build_padded_graph(mesh, bad)
    tiny = BCSpec({"right": GroupBC("neumann", flux=0.0)}, band=1e-6)
    with pytest.raises(EmptyBand):
        build_padded_graph(square_mesh(jittered_grid(6, 0.0), tiny), tiny)


def test_robin_requires_nonzero_beta():
    with pytest.raises(ValueError):
        GroupBC("robin", alpha=1.0, beta=0.0, g=1.0)


def test_bc_json_roundtrip(tmp_path):
    bc = mixed_bc()
    save_bc(bc, tmp_path / "bc.json")
    back = load_bc(tmp_path / "bc.json")
    assert back.to_json() == bc.to_json()
    per = BCSpec.periodic_box(2.0, 1.0, band=0.3)
    save_bc(per, tmp_path / "p.json")
    assert load_bc(tmp_path / "p.json") == per


def latent_setup(bc):
    mesh = square_mesh(jittered_grid(9, 0.2), bc)
    pg = build_padded_graph(mesh, bc)
    return pg, make_latent_pad_map(pg, bc)


def test_latent_all_equal_stays_equal():
    pg, pm = latent_setup(BCSpec.periodic_box())
    h = torch.full((pg.mesh.n_nodes, 4), 0.3, dtype=torch.float64)
    assert torch.equal(pad_latent(h, pm), h)


def test_latent_periodic_copy_exact(rng):
    pg, pm = latent_setup(BCSpec.periodic_box())
    h = torch.as_tensor(rng.standard_normal((2, pg.mesh.n_nodes, 5)))
    out = pad_latent(h, pm)
    assert torch.equal(out[:, pg.n_true :], h[:, pg.ghost_source])
    assert torch.equal(out[:, : pg.n_true], h[:, : pg.n_true])


def test_latent_dirichlet_embeddings(rng):
    bc = mixed_bc(flux=0.0)
    pg, pm = latent_setup(bc)
    h0 = torch.as_tensor(rng.standard_normal((pg.mesh.n_nodes, 3)))
    pm = pm.capture(h0)
    h1 = torch.as_tensor(rng.standard_normal((pg.mesh.n_nodes, 3)))
    out = pad_latent(h1, pm)
    d = pg.dirichlet_nodes
    assert torch.equal(out[d], h0[d])
    # zero-flux Neumann ghosts copy their source; Robin ghosts are left alone
    neu = np.flatnonzero(pg.ghost_rule == GhostRule.MIRROR_NEUMANN)
    rob = np.flatnonzero(pg.ghost_rule == GhostRule.MIRROR_ROBIN)
    assert torch.equal(out[pg.n_true + neu], out[pg.ghost_source[neu]])
    assert torch.equal(out[pg.n_true + rob], h1[pg.n_true + rob])


def test_latent_map_stale():
    pg, pm = latent_setup(BCSpec.periodic_box())
    with pytest.raises(MapStale):
        pad_latent(torch.zeros(pg.mesh.n_nodes + 1, 2, dtype=torch.float64), pm)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 1000), st.floats(-5, 5), st.floats(0.5, 3), st.floats(-2, 2))
def test_padding_idempotent_property(seed, flux, beta, g):
    bc = mixed_bc(flux=flux, robin=(1.0, beta, g), band=0.25)
    mesh = square_mesh(jittered_grid(7, 0.2, seed=seed), bc)
    pg = build_padded_graph(mesh, bc)
    u = np.random.default_rng(seed).standard_normal((mesh.n_nodes, 1))
    up = pad_physical(pg, u, bc)
    assert np.array_equal(pad_physical(pg, up, bc), up)
