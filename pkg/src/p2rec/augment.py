"""Information augmentation: per-item knowledge embeddings and gated fusion."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .artifacts import Kind
from .data import ConfigError
from .pregroup import GroupModel
from .preference import PreferenceModel


@dataclass
class EnhancedItemSet:
    """Knowledge embeddings H (N x d_model) and category distributions G (N x K)."""

    KIND = Kind.ENHANCED_ITEMS

    H: np.ndarray
    G: np.ndarray
    forward_calls: int = 0

    def to_tensors(self):
        return {"H": self.H, "G": self.G}, {"forward_calls": self.forward_calls}

    @classmethod
    def from_tensors(cls, tensors, meta):
        return cls(tensors["H"], tensors["G"], int(meta.get("forward_calls", 0)))


@torch.no_grad()
def embed_all_items(model: PreferenceModel, num_items: int, batch_size: int = 256) -> EnhancedItemSet:
    """Run every item through the fine-tuned model as a one-item prompt."""
    model.eval()
    model.prompt_forwards = 0
    H, G = [], []
    for start in range(0, num_items, batch_size):
        items = np.arange(start, min(start + batch_size, num_items))
        batch = model.prompts([np.array([v]) for v in items])
        h = model.forward_h(batch)
        H.append(h)
        G.append(model.head(h))
    return EnhancedItemSet(torch.cat(H).numpy().astype(np.float32),
                           torch.cat(G).numpy().astype(np.float32),
                           forward_calls=model.prompt_forwards)


def top_n_desc(row: np.ndarray, n: int) -> np.ndarray:
    """Indices of the ``n`` largest entries, ties resolved toward the lower index."""
    return np.lexsort((np.arange(len(row)), -row))[:n]


def category_agreement(G: np.ndarray, groups: GroupModel | np.ndarray, top_n: int = 3) -> tuple[float, float, float]:
    """Fractions of items whose inferred categories agree with the pre-grouping.

    C1: top-1 inferred category equals the pre-group; C2: pre-group is within
    the top ``top_n`` but not first; C3: everything else.
    """
    assignment = groups.assignment if isinstance(groups, GroupModel) else np.asarray(groups)
    G = np.asarray(G)
    if isinstance(groups, GroupModel) and G.shape[1] != groups.K:
        raise ConfigError(f"G has {G.shape[1]} categories, group model has {groups.K}")
    order = np.lexsort((np.broadcast_to(np.arange(G.shape[1]), G.shape), -G), axis=1)[:, :top_n]
    first = order[:, 0] == assignment
    within = (order == assignment[:, None]).any(axis=1)
    n = len(G)
    c1 = first.sum() / n
    c2 = (within & ~first).sum() / n
    return float(c1), float(c2), float(1.0 - c1 - c2)


@dataclass
class FusionConfig:
    """``mode``: gate (elementwise), scalar_gate, or sum. ``gate``: learned,
    id_only (gate pinned to 1) or enhanced_only (gate pinned to 0)."""

    mode: str = "gate"
    gate: str = "learned"
    tie_output: bool = True

    def validate(self):
        if self.mode not in ("gate", "scalar_gate", "sum"):
            raise ConfigError(f"fusion.mode {self.mode!r} not in gate/scalar_gate/sum")
        if self.gate not in ("learned", "id_only", "enhanced_only"):
            raise ConfigError(f"fusion.gate {self.gate!r} not in learned/id_only/enhanced_only")


class GatedFusion(nn.Module):
    """fused_v = g * e_v + (1 - g) * P h_v, with g = sigmoid(W_g [e_v ; P h_v] + b_g).

    ``H`` is a frozen buffer; the ID table, ``P`` and the gate are trained
    with the backbone.
    """

    def __init__(self, id_items: nn.Module, H: np.ndarray, cfg: FusionConfig | None = None,
                 generator: torch.Generator | None = None):
        super().__init__()
        cfg = cfg or FusionConfig()
        cfg.validate()
        self.cfg = cfg
        self.id_items = id_items
        self.num_items, d = id_items.num_items, id_items.dim
        self.dim = d
        if H.shape[0] != self.num_items:
            raise ConfigError(f"H has {H.shape[0]} rows for {self.num_items} items")
        self.register_buffer("H", torch.as_tensor(np.asarray(H, dtype=np.float32)))
        d_model = self.H.shape[1]
        self.P = nn.Linear(d_model, d, bias=False)
        gate_out = 1 if cfg.mode == "scalar_gate" else d
        self.gate = nn.Linear(2 * d, gate_out)
        # start P h at the ID table's per-entry scale, 1/sqrt(d)
        with torch.no_grad():
            h_rms = float(self.H.pow(2).mean().sqrt())
            h_rms = h_rms if math.isfinite(h_rms) and h_rms > 0 else 1.0
            self.P.weight.normal_(0.0, 1.0 / (h_rms * (d * d_model) ** 0.5), generator=generator)
            self.gate.weight.uniform_(-(2 * d) ** -0.5, (2 * d) ** -0.5, generator=generator)
            self.gate.bias.zero_()

    @property
    def id_weight(self):
        return self.id_items.id_weight

    def gate_values(self, e: torch.Tensor, ph: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.gate(torch.cat([e, ph], dim=-1)))

    def forward(self):
        e = self.id_items()
        ph = self.P(self.H)
        if self.cfg.gate == "id_only":
            return e
        if self.cfg.gate == "enhanced_only":
            return ph
        if self.cfg.mode == "sum":
            return e + ph
        g = self.gate_values(e, ph)
        return g * e + (1 - g) * ph
