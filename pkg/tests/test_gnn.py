import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from meshgnn.autodiff import DTYPE, ShapeMismatch, gradient_check, param_count
from meshgnn.gnn import GNNBlock, GNNConfig, GraphTensors, MPNNLayer, gnn_param_count, graph_tensors
from meshgnn.mesh import N_NODE_TYPES, delaunay_triangulate


def edge_graph(pos, edges, types=None):
    """GraphTensors from explicit coordinates and undirected edges."""
    pos = np.asarray(pos, dtype=float)
    e = np.asarray(edges, dtype=int).reshape(-1, 2)
    s = np.concatenate([e[:, 1], e[:, 0]])
    r = np.concatenate([e[:, 0], e[:, 1]])
    d = pos[s] - pos[r]
    rel = np.concatenate([d, np.linalg.norm(d, axis=1, keepdims=True)], axis=1)
    onehot = np.zeros((len(pos), N_NODE_TYPES))
    onehot[np.arange(len(pos)), 0 if types is None else types] = 1.0
    t = lambda a: torch.as_tensor(a, dtype=DTYPE)
    return GraphTensors(t(pos), t(onehot), torch.as_tensor(s), torch.as_tensor(r), t(rel), len(pos))


def path_graph(n):
    pos = np.column_stack([np.linspace(-1, 1, n), np.zeros(n)])
    return edge_graph(pos, [(i, i + 1) for i in range(n - 1)])


def random_graph(n=12, seed=0):
    pts = np.random.default_rng(seed).random((n, 2))
    return graph_tensors(delaunay_triangulate(pts))


def small_block(seed=0, **kw):
    cfg = GNNConfig(**{"channels": 2, "latent": 8, "hidden": 8, "n_hidden": 1, "layers": 3, **kw})
    return GNNBlock(cfg, torch.Generator().manual_seed(seed))


def zero_module(mod):
    with torch.no_grad():
        for p in mod.parameters():
            p.zero_()


def test_identical_inputs_identical_embeddings():
    g = edge_graph([[0.1, 0.2], [0.1, 0.2], [0.5, 0.5]], [(0, 2), (1, 2)])
    block = small_block()
    u = torch.tensor([[1.0, 2.0], [1.0, 2.0], [0.0, 3.0]], dtype=DTYPE)
    h0, _ = block.encode(u, g)
    assert torch.equal(h0[0], h0[1])


def test_distance_feature_matches_offset():
    g = random_graph(15, 1)
    np.testing.assert_allclose(g.rel[:, 2].numpy(), np.linalg.norm(g.rel[:, :2].numpy(), axis=1), rtol=1e-14)


def test_zero_encoders_give_zero_embeddings():
    block = small_block()
    zero_module(block.node_enc)
    zero_module(block.edge_enc)
    g = random_graph()
    h0, e = block.encode(torch.randn(g.n_nodes, 2, dtype=DTYPE), g)
    assert torch.all(h0 == 0) and torch.all(e == 0)


def test_zero_gamma_residual_fixed_point():
    block = small_block(layers=4)
    for layer in block.layers:
        zero_module(layer.gamma)
    g = random_graph()
    h = torch.randn(g.n_nodes, 8, dtype=DTYPE)
    e = torch.randn(len(g.senders), 8, dtype=DTYPE)
    for layer in block.layers[:-1]:
        assert torch.equal(layer(h, e, g), h)
    assert torch.all(block.process(h, e, g) == 0)


def test_isolated_node_update_ignores_graph():
    g = edge_graph([[0, 0], [1, 0], [0.5, 0.5]], [(0, 1)])
    layer = MPNNLayer(4, 4, 8, 1, residual=True, generator=torch.Generator().manual_seed(2))
    h = torch.randn(3, 4, dtype=DTYPE)
    out = layer(h, torch.randn(2, 4, dtype=DTYPE), g)
    alone = layer.gamma(torch.cat([h[2], torch.zeros(4, dtype=DTYPE)])) + h[2]
    torch.testing.assert_close(out[2], alone, rtol=1e-14, atol=1e-14)


def test_zero_latent_zero_bias_decoder():
    block = small_block()
    with torch.no_grad():
        for lin in block.decoder.layers:
            lin.bias.zero_()
    assert torch.all(block.decode(torch.zeros(5, 8, dtype=DTYPE)) == 0)


def test_decoder_identity_slice():
    cfg = GNNConfig(channels=2, latent=4, hidden=4, n_hidden=0, layers=2)
    block = GNNBlock(cfg)
    with torch.no_grad():
        lin = block.decoder.layers[0]
        lin.weight.copy_(torch.eye(2, 4, dtype=DTYPE))
        lin.bias.zero_()
    h = torch.randn(6, 4, dtype=DTYPE)
    assert torch.equal(block.decode(h), h[:, :2])


def test_decode_rowwise_matches_batched():
    block = small_block()
    h = torch.randn(7, 8, dtype=DTYPE)
    rows = torch.cat([block.decode(h[i : i + 1]) for i in range(7)])
    torch.testing.assert_close(rows, block.decode(h), rtol=1e-14, atol=1e-14)


def test_decode_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        small_block().decode(torch.zeros(3, 5, dtype=DTYPE))


def test_encode_shape_mismatch():
    g = random_graph()
    with pytest.raises(ShapeMismatch):
        small_block().encode(torch.zeros(g.n_nodes + 1, 2, dtype=DTYPE), g)


def permute_graph(g, perm):
    inv = np.argsort(perm)
    inv_t = torch.as_tensor(inv)
    eperm = torch.as_tensor(np.random.default_rng(9).permutation(len(g.senders)))
    return GraphTensors(
        g.pos[perm],
        g.onehot[perm],
        inv_t[g.senders][eperm],
        inv_t[g.receivers][eperm],
        g.rel[eperm],
        g.n_nodes,
    )


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000))
def test_permutation_equivariance(seed):
    g = random_graph(14, seed)
    block = small_block(seed)
    u = torch.randn(g.n_nodes, 2, dtype=DTYPE, generator=torch.Generator().manual_seed(seed))
    perm = np.random.default_rng(seed).permutation(g.n_nodes)
    out = block(u, g)
    out_p = block(u[perm], permute_graph(g, perm))
    assert (out_p - out[perm]).abs().max() <= 1e-12


@pytest.mark.parametrize("layers", [2, 3, 4])
@pytest.mark.parametrize("v", [3, 10])
def test_locality_on_path(layers, v):
    n = 16
    g = path_graph(n)
    block = small_block(layers=layers)
    u = torch.randn(n, 2, dtype=DTYPE, generator=torch.Generator().manual_seed(1))
    u2 = u.clone()
    u2[v] += 0.7
    diff = (block(u2, g) - block(u, g)).abs().amax(dim=1)
    dist = np.abs(np.arange(n) - v)
    assert torch.all(diff[torch.as_tensor(dist > layers)] == 0)
    assert torch.all(diff[torch.as_tensor(dist <= layers)] > 0)


@pytest.mark.parametrize("cfg", [GNNConfig(), GNNConfig(latent=32, hidden=32, n_hidden=1), GNNConfig(channels=1, layers=2)])
def test_param_count_matches_module(cfg):
    assert gnn_param_count(cfg) == param_count(GNNBlock(cfg))


def test_layers_have_separate_parameters():
    block = small_block()
    a, b = block.layers[0].phi.layers[0].weight, block.layers[1].phi.layers[0].weight
    assert a.data_ptr() != b.data_ptr() and not torch.equal(a, b)


def test_config_rejects_single_layer():
    with pytest.raises(ValueError):
        GNNConfig(layers=1)


@pytest.mark.parametrize("part", ["encoder", "layer", "decoder", "block"])
def test_gradient_check(part):
    g = random_graph(12, 3)
    block = small_block(4)
    gen = torch.Generator().manual_seed(5)
    u = torch.randn(g.n_nodes, 2, dtype=DTYPE, generator=gen)
    h = torch.randn(g.n_nodes, 8, dtype=DTYPE, generator=gen)
    e = torch.randn(len(g.senders), 8, dtype=DTYPE, generator=gen)
    if part == "encoder":
        fn = lambda: sum((t**2).sum() for t in block.encode(u, g)) * 1e-2
        params = list(block.node_enc.parameters()) + list(block.edge_enc.parameters())
    elif part == "layer":
        fn = lambda: (block.layers[0](h, e, g) ** 2).mean()
        params = list(block.layers[0].parameters())
    elif part == "decoder":
        fn = lambda: (block.decode(h) ** 2).mean()
        params = list(block.decoder.parameters())
    else:
        fn = lambda: (block(u, g) ** 2).mean()
        params = list(block.parameters())
    assert gradient_check(fn, params, h=1e-6) < 1e-5
