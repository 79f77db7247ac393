import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from torch import nn

from gradcases import CASES
from p2rec.nn import (Adam, CausalSelfAttention, GRUCell, Linear, LoRALinear, NonFiniteError, ShapeError,
                      grad_check, install_finite_checks, named_trainable, preference_mse)


@pytest.mark.parametrize("case", list(CASES))
def test_gradients_match_finite_differences(float64, case):
    loss_fn, params = CASES[case]()
    assert grad_check(loss_fn, params) < 1e-4


def test_two_layer_perceptron_ten_samples(float64):
    torch.manual_seed(0)
    mlp = nn.Sequential(Linear(3, 4), nn.Tanh(), Linear(4, 2))
    x = torch.randn(5, 3)
    err = grad_check(lambda: (mlp(x) ** 2).sum(), list(mlp.parameters()), sample_frac=0.0, min_samples=10)
    assert err < 1e-4


def test_grad_check_detects_a_wrong_gradient(float64):
    w = nn.Parameter(torch.randn(4))

    class Wrong(torch.autograd.Function):
        @staticmethod
        def forward(ctx, x):
            return (x ** 2).sum()

        @staticmethod
        def backward(ctx, g):
            return g * torch.ones(4)

    assert grad_check(lambda: Wrong.apply(w), [w], min_samples=4) > 0.1


def test_identity_linear():
    m = Linear(3, 3, bias=False)
    with torch.no_grad():
        m.weight.copy_(torch.eye(3))
    x = torch.randn(2, 3)
    assert torch.equal(m(x), x)


def test_shape_error_names_layer():
    with pytest.raises(ShapeError) as err:
        Linear(4, 2, name="probe")(torch.zeros(3, 5))
    assert err.value.layer == "probe"


def test_softmax_uniform_and_sums_to_one():
    assert torch.allclose(torch.softmax(torch.zeros(5), -1), torch.full((5,), 0.2))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=20))
def test_softmax_sums_to_one_property(xs):
    p = torch.softmax(torch.tensor(xs, dtype=torch.float64), -1)
    assert abs(p.sum().item() - 1.0) < 1e-12
    assert (p >= 0).all()


def test_mse_stationary_at_target():
    g = torch.tensor([[0.2, 0.3, 0.5]], requires_grad=True)
    preference_mse(g, g.detach().clone()).backward()
    assert torch.equal(g.grad, torch.zeros_like(g))


def test_mse_reductions():
    pred = torch.tensor([[0.5, 0.5], [1.0, 0.0]])
    tgt = torch.tensor([[1.0, 0.0], [1.0, 0.0]])
    assert preference_mse(pred, tgt, "sum").item() == pytest.approx(0.5)
    assert preference_mse(pred, tgt, "mean").item() == pytest.approx(0.25)
    with pytest.raises(ValueError):
        preference_mse(pred, tgt, "median")


def test_lora_zero_init_matches_base_bitwise():
    base = nn.Linear(6, 4)
    lora = LoRALinear(base, rank=2, generator=torch.Generator().manual_seed(0))
    x = torch.randn(5, 6)
    assert torch.equal(lora(x), base(x))


def test_lora_gradients_only_reach_adapters():
    lora = LoRALinear(nn.Linear(6, 4), rank=2)
    with torch.no_grad():
        lora.lora_B.normal_()
    (lora(torch.randn(3, 6)) ** 2).sum().backward()
    assert lora.weight.grad is None and lora.bias.grad is None
    assert lora.lora_A.grad.abs().sum() > 0 and lora.lora_B.grad.abs().sum() > 0
    assert {n for n, _ in named_trainable(lora)} == {"lora_A", "lora_B"}


def test_lora_base_unchanged_after_training():
    lora = LoRALinear(nn.Linear(6, 4), rank=2)
    w0, b0 = lora.weight.clone(), lora.bias.clone()
    opt = Adam(lora.named_parameters(), lr=1e-2)
    x, y = torch.randn(8, 6), torch.randn(8, 4)
    for _ in range(100):
        opt.zero_grad()
        ((lora(x) - y) ** 2).mean().backward()
        opt.step()
    assert torch.equal(lora.weight, w0) and torch.equal(lora.bias, b0)
    assert lora.lora_B.abs().sum() > 0


def test_causal_attention_ignores_future():
    torch.manual_seed(0)
    attn = CausalSelfAttention(8, 2)
    x = torch.randn(1, 6, 8, requires_grad=True)
    for t in range(6):
        x.grad = None
        attn(x)[0, t].sum().backward()
        assert torch.count_nonzero(x.grad[0, t + 1:]) == 0
        assert torch.count_nonzero(x.grad[0, :t + 1]) > 0


def test_attention_rejects_indivisible_heads():
    with pytest.raises(ShapeError):
        CausalSelfAttention(10, 3)


def test_gru_cell_matches_reference():
    ours = GRUCell(5, 4)
    ref = nn.GRUCell(5, 4)
    with torch.no_grad():
        ref.weight_ih.copy_(ours.x2h.weight)
        ref.bias_ih.copy_(ours.x2h.bias)
        ref.weight_hh.copy_(ours.h2h.weight)
        ref.bias_hh.copy_(ours.h2h.bias)
    x, h = torch.randn(3, 5), torch.randn(3, 4)
    assert torch.allclose(ours(x, h), ref(x, h), atol=1e-6)


def test_adam_first_step_moves_by_lr():
    p = nn.Parameter(torch.zeros(3))
    opt = Adam([("p", p)], lr=0.1)
    p.grad = torch.ones(3)
    opt.step()
    assert torch.allclose(p, torch.full((3,), -0.1), atol=1e-6)


def test_adam_zero_gradient_leaves_params():
    p = nn.Parameter(torch.randn(4))
    p0 = p.clone()
    opt = Adam([p], lr=0.1)
    for _ in range(5):
        p.grad = torch.zeros(4)
        opt.step()
    assert torch.equal(p, p0)


def test_adam_matches_reference_trajectory():
    torch.manual_seed(0)
    a = nn.Parameter(torch.randn(5))
    b = nn.Parameter(a.detach().clone())
    ours, ref = Adam([a], lr=0.05), torch.optim.Adam([b], lr=0.05)
    for step in range(20):
        g = torch.randn(5)
        a.grad, b.grad = g.clone(), g.clone()
        ours.step()
        ref.step()
    assert torch.allclose(a, b, atol=1e-6)


def test_adam_refuses_nan_step_and_names_parameter():
    good = nn.Parameter(torch.ones(2))
    bad = nn.Parameter(torch.ones(2))
    opt = Adam([("good", good), ("bad.weight", bad)], lr=0.1)
    good.grad = torch.ones(2)
    bad.grad = torch.tensor([1.0, math.nan])
    with pytest.raises(NonFiniteError, match="bad.weight"):
        opt.step()
    assert torch.equal(good, torch.ones(2))


def test_adam_skips_frozen_parameters():
    frozen = nn.Parameter(torch.ones(2), requires_grad=False)
    live = nn.Parameter(torch.ones(2))
    opt = Adam([("frozen", frozen), ("live", live)], lr=0.1)
    assert len(opt.param_groups[0]["params"]) == 1
    live.grad = torch.ones(2)
    opt.step()
    assert torch.equal(frozen, torch.ones(2))


def test_finite_checks_catch_nan_forward():
    m = nn.Sequential(Linear(2, 2), nn.Identity())
    install_finite_checks(m)
    with pytest.raises(NonFiniteError):
        m(torch.tensor([[math.inf, 0.0]]))


def test_deterministic_forward():
    torch.manual_seed(3)
    m = CausalSelfAttention(8, 2)
    x = torch.randn(2, 4, 8)
    assert np.array_equal(m(x).detach().numpy(), m(x).detach().numpy())
