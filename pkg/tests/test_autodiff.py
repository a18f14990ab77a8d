import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from meshgnn.autodiff import (
    DTYPE,
    MLP,
    CheckpointError,
    DisconnectedParameter,
    NonFiniteGradient,
    ShapeMismatch,
    adam_init,
    adam_step,
    backward,
    gradient_check,
    load_checkpoint,
    make_mlp,
    mlp_forward,
    mlp_param_count,
    save_checkpoint,
    silu,
)


def set_linear(lin, w, b):
    with torch.no_grad():
        lin.weight.copy_(torch.as_tensor(w, dtype=DTYPE))
        lin.bias.copy_(torch.as_tensor(b, dtype=DTYPE))


def test_zero_mlp_outputs_zero():
    net = make_mlp(3, 2, 8, 2, torch.Generator().manual_seed(0))
    for p in net.parameters():
        torch.nn.init.zeros_(p)
    x = torch.randn(5, 3, dtype=DTYPE)
    assert torch.all(mlp_forward(net, x) == 0)


def test_identity_single_layer():
    net = MLP([3, 3])
    set_linear(net.layers[0], np.eye(3), np.zeros(3))
    x = torch.randn(4, 3, dtype=DTYPE)
    assert torch.equal(mlp_forward(net, x), x)


def test_affine_scalar():
    net = MLP([1, 1])
    set_linear(net.layers[0], [[2.0]], [1.0])
    assert mlp_forward(net, torch.tensor([[3.0]], dtype=DTYPE)).item() == 7.0


def test_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        mlp_forward(MLP([3, 2]), torch.zeros(2, 4, dtype=DTYPE))


def test_silu_values():
    x = torch.tensor([0.0], dtype=DTYPE, requires_grad=True)
    y = silu(x)
    assert y.item() == 0.0
    (g,) = torch.autograd.grad(y.sum(), x)
    assert g.item() == 0.5


def test_hidden_activation_is_silu():
    net = MLP([1, 1, 1])
    set_linear(net.layers[0], [[1.0]], [0.0])
    set_linear(net.layers[1], [[1.0]], [0.0])
    x = 1.3
    assert mlp_forward(net, torch.tensor([[x]], dtype=DTYPE)).item() == pytest.approx(x / (1 + math.exp(-x)))


def test_init_bounds_and_seed():
    a = make_mlp(16, 4, 32, 2, torch.Generator().manual_seed(3))
    b = make_mlp(16, 4, 32, 2, torch.Generator().manual_seed(3))
    for lin_a, lin_b in zip(a.layers, b.layers):
        bound = 1 / math.sqrt(lin_a.in_features)
        assert lin_a.weight.abs().max() <= bound
        assert torch.equal(lin_a.weight, lin_b.weight)


@pytest.mark.parametrize("widths, count", [([3, 2], 8), ([2, 4, 1], 17), ([5, 8, 8, 3], 147)])
def test_param_count(widths, count):
    assert mlp_param_count(widths) == count
    assert sum(p.numel() for p in MLP(widths).parameters()) == count


def test_chain_rule_example():
    w = torch.tensor(1.0, dtype=DTYPE, requires_grad=True)
    loss = (w * 2.0 - 0.0) ** 2
    (g,) = backward(loss, [w])
    assert g.item() == 8.0


def test_constant_parameter_gets_zero_gradient():
    w = torch.tensor(1.5, dtype=DTYPE, requires_grad=True)
    c = torch.tensor(2.0, dtype=DTYPE, requires_grad=True)
    gw, gc = backward(w**2, [w, c])
    assert gw.item() == 3.0
    assert gc.item() == 0.0
    with pytest.raises(DisconnectedParameter):
        backward(w**2, [w, c], debug=True)


def test_backward_needs_scalar():
    w = torch.ones(3, dtype=DTYPE, requires_grad=True)
    with pytest.raises(ShapeMismatch):
        backward(w * 2, [w])


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_mlp_gradient_check(seed):
    gen = torch.Generator().manual_seed(seed)
    net = make_mlp(4, 3, 8, 1, gen)
    x = torch.randn(6, 4, dtype=DTYPE, generator=gen)
    t = torch.randn(6, 3, dtype=DTYPE, generator=gen)
    err = gradient_check(lambda: ((net(x) - t) ** 2).mean(), list(net.parameters()), max_entries=None)
    assert err < 1e-5


def test_gradient_check_detects_wrong_gradient():
    w = torch.tensor([0.7, -0.2], dtype=DTYPE, requires_grad=True)

    class Wrong(torch.autograd.Function):
        @staticmethod
        def forward(ctx, x):
            ctx.save_for_backward(x)
            return (x**3).sum()

        @staticmethod
        def backward(ctx, g):
            (x,) = ctx.saved_tensors
            return g * 2 * x**2  # true derivative is 3x^2

    assert gradient_check(lambda: Wrong.apply(w), [w]) > 0.1


def test_adam_zero_gradient_keeps_params():
    p = torch.tensor([1.0, -2.0], dtype=DTYPE)
    adam_step([p], [torch.zeros(2, dtype=DTYPE)], adam_init([p]), lr=0.1)
    assert p.tolist() == [1.0, -2.0]


def test_adam_zero_gradient_decays_moments():
    p = torch.tensor([1.0, -2.0], dtype=DTYPE)
    st_ = adam_init([p])
    st_.m[0] += 0.5
    st_.v[0] += 0.25
    adam_step([p], [torch.zeros(2, dtype=DTYPE)], st_, lr=0.1)
    assert torch.allclose(st_.m[0], torch.full((2,), 0.45, dtype=DTYPE))
    assert torch.allclose(st_.v[0], torch.full((2,), 0.25 * 0.999, dtype=DTYPE))


@pytest.mark.parametrize("g", [5.0, -3.0, 100.0])
def test_adam_first_step_magnitude(g):
    p = torch.tensor([0.0], dtype=DTYPE)
    adam_step([p], [torch.tensor([g], dtype=DTYPE)], adam_init([p]), lr=0.01)
    assert p.item() == pytest.approx(-0.01 * math.copysign(1, g), rel=1e-6)


def adam_scalar_oracle(w, steps, lr, b1=0.9, b2=0.999, eps=1e-8):
    m = v = 0.0
    for t in range(1, steps + 1):
        g = 2 * (w - 3)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        w -= lr * (m / (1 - b1**t)) / (math.sqrt(v / (1 - b2**t)) + eps)
    return w


def test_adam_quadratic():
    w = torch.tensor([0.0], dtype=DTYPE, requires_grad=True)
    st_ = adam_init([w])
    for _ in range(100):
        grads = backward(((w - 3) ** 2).sum(), [w])
        adam_step([w], grads, st_, lr=0.1)
    expected = adam_scalar_oracle(0.0, 100, 0.1)
    assert w.item() == pytest.approx(expected, abs=1e-12)
    assert abs(w.item() - 3) < 0.1


def test_adam_rejects_nonfinite():
    p = torch.zeros(2, dtype=DTYPE)
    with pytest.raises(NonFiniteGradient):
        adam_step([p], [torch.tensor([1.0, math.nan], dtype=DTYPE)], adam_init([p]))


def test_adam_state_shape_mismatch():
    p = torch.zeros(2, dtype=DTYPE)
    st_ = adam_init([torch.zeros(3, dtype=DTYPE)])
    with pytest.raises(ShapeMismatch):
        adam_step([p], [torch.ones(2, dtype=DTYPE)], st_)


def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    arrays = {"enc.weight": rng.standard_normal((4, 3)), "enc.bias": rng.standard_normal(4), "s": np.array(2.5)}
    path = tmp_path / "m.pmpn"
    save_checkpoint(path, arrays)
    back = load_checkpoint(path)
    assert list(back) == list(arrays)
    np.testing.assert_array_equal(back["enc.weight"], arrays["enc.weight"])
    np.testing.assert_array_equal(back["enc.bias"].ravel(), arrays["enc.bias"])
    assert back["s"].shape == (1, 1)
    raw = path.read_bytes()
    assert raw[:4] == b"PMPN"


def test_checkpoint_bad_magic(tmp_path):
    path = tmp_path / "bad.pmpn"
    path.write_bytes(b"XXXX" + bytes(8))
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_training_steps_deterministic(seed):
    def run():
        gen = torch.Generator().manual_seed(seed)
        net = make_mlp(2, 1, 4, 1, gen)
        x = torch.randn(8, 2, dtype=DTYPE, generator=gen)
        params = list(net.parameters())
        st_ = adam_init(params)
        for _ in range(3):
            adam_step(params, backward((net(x) ** 2).mean(), params), st_, lr=0.05)
        return torch.cat([p.detach().ravel() for p in params])

    assert torch.equal(run(), run())
