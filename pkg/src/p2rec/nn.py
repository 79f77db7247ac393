"""Layers, losses, optimizer and gradient verification shared by every model.

Tensors and reverse-mode differentiation come from torch; the layers that
carry the method (low-rank adapters, causal attention, the recurrent cell),
the optimizer and the finite-difference checker are defined here.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn


class ShapeError(ValueError):
    def __init__(self, layer: str, expected, got):
        super().__init__(f"{layer}: expected trailing dimension {expected}, got shape {tuple(got)}")
        self.layer = layer
        self.expected = expected
        self.got = tuple(got)


class NonFiniteError(FloatingPointError):
    pass


def _check_dim(layer: str, x: torch.Tensor, expected: int):
    if x.shape[-1] != expected:
        raise ShapeError(layer, expected, x.shape)


class Linear(nn.Linear):
    """``nn.Linear`` that reports shape mismatches with the layer name."""

    def __init__(self, in_features, out_features, bias=True, name="linear"):
        super().__init__(in_features, out_features, bias=bias)
        self.name = name

    def forward(self, x):
        _check_dim(self.name, x, self.in_features)
        return super().forward(x)


class LoRALinear(nn.Module):
    """Frozen linear map plus a trainable low-rank update.

    ``forward(x) = x W^T + b + (alpha / r) * (x A^T) B^T``. ``B`` starts at
    zero, so a freshly wrapped layer reproduces its base exactly.
    """

    def __init__(self, base: nn.Linear, rank: int = 8, alpha: float = 16.0,
                 init_std: float = 0.02, generator: torch.Generator | None = None):
        super().__init__()
        self.name = getattr(base, "name", "lora")
        self.in_features, self.out_features = base.in_features, base.out_features
        self.weight = nn.Parameter(base.weight.detach().clone(), requires_grad=False)
        if base.bias is not None:
            self.bias = nn.Parameter(base.bias.detach().clone(), requires_grad=False)
        else:
            self.register_parameter("bias", None)
        self.rank = rank
        self.scaling = alpha / rank
        a = torch.empty(rank, self.in_features, dtype=base.weight.dtype)
        a.normal_(0.0, init_std, generator=generator)
        self.lora_A = nn.Parameter(a)
        self.lora_B = nn.Parameter(torch.zeros(self.out_features, rank, dtype=base.weight.dtype))

    def forward(self, x):
        _check_dim(self.name, x, self.in_features)
        base = F.linear(x, self.weight, self.bias)
        return base + self.scaling * F.linear(F.linear(x, self.lora_A), self.lora_B)


class CausalSelfAttention(nn.Module):
    def __init__(self, d_model: int, n_heads: int, dropout: float = 0.0):
        super().__init__()
        if d_model % n_heads:
            raise ShapeError("attention", f"multiple of n_heads={n_heads}", (d_model,))
        self.d_model, self.n_heads = d_model, n_heads
        self.q_proj = Linear(d_model, d_model, name="attention.q_proj")
        self.k_proj = Linear(d_model, d_model, name="attention.k_proj")
        self.v_proj = Linear(d_model, d_model, name="attention.v_proj")
        self.out_proj = Linear(d_model, d_model, name="attention.out_proj")
        self.dropout = nn.Dropout(dropout)

    def forward(self, x):
        _check_dim("attention", x, self.d_model)
        B, T, _ = x.shape
        hd = self.d_model // self.n_heads

        def heads(t):
            return t.view(B, T, self.n_heads, hd).transpose(1, 2)

        q, k, v = heads(self.q_proj(x)), heads(self.k_proj(x)), heads(self.v_proj(x))
        scores = q @ k.transpose(-2, -1) / math.sqrt(hd)
        future = torch.ones(T, T, dtype=torch.bool, device=x.device).triu(1)
        scores = scores.masked_fill(future, float("-inf"))
        weights = self.dropout(torch.softmax(scores, dim=-1))
        out = (weights @ v).transpose(1, 2).reshape(B, T, self.d_model)
        return self.out_proj(out)


class FeedForward(nn.Module):
    def __init__(self, d_model: int, d_hidden: int, dropout: float = 0.0, activation: str = "gelu"):
        super().__init__()
        self.fc1 = Linear(d_model, d_hidden, name="ffn.fc1")
        self.fc2 = Linear(d_hidden, d_model, name="ffn.fc2")
        self.act = nn.GELU() if activation == "gelu" else nn.ReLU()
        self.dropout = nn.Dropout(dropout)

    def forward(self, x):
        return self.dropout(self.fc2(self.dropout(self.act(self.fc1(x)))))


class DecoderBlock(nn.Module):
    """Pre-norm causal transformer block."""

    def __init__(self, d_model: int, n_heads: int, dropout: float = 0.0,
                 ffn_mult: int = 4, activation: str = "gelu"):
        super().__init__()
        self.ln1 = nn.LayerNorm(d_model, eps=1e-5)
        self.attn = CausalSelfAttention(d_model, n_heads, dropout)
        self.ln2 = nn.LayerNorm(d_model, eps=1e-5)
        self.ffn = FeedForward(d_model, ffn_mult * d_model, dropout, activation)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x):
        x = x + self.dropout(self.attn(self.ln1(x)))
        return x + self.ffn(self.ln2(x))


class GRUCell(nn.Module):
    """Single gated recurrent step, gate order (reset, update, candidate)."""

    def __init__(self, input_size: int, hidden_size: int):
        super().__init__()
        self.input_size, self.hidden_size = input_size, hidden_size
        self.x2h = Linear(input_size, 3 * hidden_size, name="gru.x2h")
        self.h2h = Linear(hidden_size, 3 * hidden_size, name="gru.h2h")
        bound = 1.0 / math.sqrt(hidden_size)
        for p in self.parameters():
            nn.init.uniform_(p, -bound, bound)

    def forward(self, x, h):
        _check_dim("gru.h", h, self.hidden_size)
        xr, xz, xn = self.x2h(x).chunk(3, dim=-1)
        hr, hz, hn = self.h2h(h).chunk(3, dim=-1)
        r = torch.sigmoid(xr + hr)
        z = torch.sigmoid(xz + hz)
        n = torch.tanh(xn + r * hn)
        return (1 - z) * n + z * h


def preference_mse(pred: torch.Tensor, target: torch.Tensor, reduction: str = "mean") -> torch.Tensor:
    """Squared reconstruction error summed over groups.

    ``reduction="sum"`` sums over users as well; ``"mean"`` divides that by
    the number of users.
    """
    per_user = ((target - pred) ** 2).sum(dim=-1)
    if reduction == "sum":
        return per_user.sum()
    if reduction == "mean":
        return per_user.mean()
    raise ValueError(f"unknown reduction {reduction!r}")


def next_item_loss(logits: torch.Tensor, targets: torch.Tensor, ignore_index: int = -100) -> torch.Tensor:
    """Full-softmax cross-entropy over the catalog, padded positions ignored."""
    return F.cross_entropy(logits.reshape(-1, logits.shape[-1]), targets.reshape(-1),
                           ignore_index=ignore_index)


class Adam(torch.optim.Optimizer):
    """Bias-corrected Adam.

    Parameters may be given as ``(name, tensor)`` pairs so a non-finite
    gradient can be reported by name; such a step is refused before any
    parameter changes. Parameters with ``requires_grad=False`` are skipped.
    """

    def __init__(self, params, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        pairs = list(params)
        if pairs and not isinstance(pairs[0], tuple):
            pairs = [(None, p) for p in pairs]
        pairs = [(n, p) for n, p in pairs if p.requires_grad]
        super().__init__([p for _, p in pairs], dict(lr=lr, betas=betas, eps=eps))
        self._names = {id(p): n for n, p in pairs if n is not None}

    def _name(self, p) -> str:
        return self._names.get(id(p), f"<param shape={tuple(p.shape)}>")

    @torch.no_grad()
    def step(self, closure=None):
        for group in self.param_groups:
            for p in group["params"]:
                if p.grad is not None and not torch.isfinite(p.grad).all():
                    raise NonFiniteError(f"non-finite gradient for {self._name(p)}; step aborted")

        for group in self.param_groups:
            beta1, beta2 = group["betas"]
            for p in group["params"]:
                if p.grad is None:
                    continue
                g = p.grad
                state = self.state[p]
                if not state:
                    state["step"] = 0
                    state["exp_avg"] = torch.zeros_like(p)
                    state["exp_avg_sq"] = torch.zeros_like(p)
                state["step"] += 1
                t = state["step"]
                m, v = state["exp_avg"], state["exp_avg_sq"]
                m.mul_(beta1).add_(g, alpha=1 - beta1)
                v.mul_(beta2).addcmul_(g, g, value=1 - beta2)
                bc1 = 1 - beta1 ** t
                bc2 = 1 - beta2 ** t
                denom = (v / bc2).sqrt_().add_(group["eps"])
                p.addcdiv_(m, denom, value=-group["lr"] / bc1)


def grad_check(loss_fn: Callable[[], torch.Tensor], params: Iterable[torch.Tensor],
               sample_frac: float = 0.01, min_samples: int = 10, h: float = 1e-5,
               seed: int = 0, floor: float | None = None) -> float:
    """Worst relative error between autograd and central differences.

    ``loss_fn`` must rebuild the scalar loss from the current parameter
    values; parameters should be float64. A random ``sample_frac`` of the
    entries (at least ``min_samples`` per call) is probed. Relative error is
    ``|a - n| / max(|a|, |n|, floor)``. The default floor is
    ``1e-6 * max(1, |loss|)``: central differences cannot resolve gradients
    below the loss round-off divided by ``h``, so structurally zero entries
    (a key bias under softmax, say) are compared on that absolute scale.
    """
    params = [p for p in params if p.requires_grad]
    for p in params:
        p.grad = None
    loss = loss_fn()
    loss.backward()
    if floor is None:
        floor = 1e-6 * max(1.0, abs(loss.item()))
    analytic = [p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p) for p in params]

    sizes = np.array([p.numel() for p in params])
    total = int(sizes.sum())
    n = min(total, max(min_samples, int(math.ceil(sample_frac * total))))
    rng = np.random.default_rng(seed)
    flat_ids = rng.choice(total, size=n, replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])

    worst = 0.0
    with torch.no_grad():
        for fid in flat_ids:
            k = int(np.searchsorted(offsets, fid, side="right") - 1)
            idx = int(fid - offsets[k])
            flat = params[k].view(-1)
            orig = flat[idx].item()
            flat[idx] = orig + h
            up = loss_fn().item()
            flat[idx] = orig - h
            down = loss_fn().item()
            flat[idx] = orig
            numeric = (up - down) / (2 * h)
            a = analytic[k].view(-1)[idx].item()
            rel = abs(a - numeric) / max(abs(a), abs(numeric), floor)
            worst = max(worst, rel)
    return worst


def install_finite_checks(module: nn.Module) -> list:
    """Raise :class:`NonFiniteError` as soon as any submodule emits NaN/Inf."""

    def hook(mod, _inp, out):
        if isinstance(out, torch.Tensor) and not torch.isfinite(out).all():
            raise NonFiniteError(f"non-finite output from {mod.__class__.__name__}")

    return [m.register_forward_hook(hook) for m in module.modules()]


def named_trainable(module: nn.Module) -> list[tuple[str, torch.Tensor]]:
    return [(n, p) for n, p in module.named_parameters() if p.requires_grad]
