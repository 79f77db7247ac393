"""ID-based sequential recommenders: a causal self-attention model and a GRU.

Both tie input and output item representations and expose the same
``score_batch`` interface, so every later stage is backbone-agnostic.
"""

from __future__ import annotations

import copy
import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch import nn

from .artifacts import Kind
from .data import ConfigError, InteractionDataset
from .evaluation import evaluate
from .nn import Adam, DecoderBlock, GRUCell, next_item_loss

logger = logging.getLogger(__name__)


@dataclass
class BackboneConfig:
    arch: str = "sasrec"
    dim: int = 64
    layers: int = 2
    heads: int = 2
    max_seq_len: int = 50
    dropout: float = 0.2
    lr: float = 1e-3
    batch_size: int = 256
    patience: int = 10
    max_epochs: int = 200

    def validate(self):
        if self.arch not in ("sasrec", "gru"):
            raise ConfigError(f"backbone.arch must be 'sasrec' or 'gru', got {self.arch!r}")
        if self.arch == "sasrec" and self.dim % self.heads:
            raise ConfigError("backbone.dim must be divisible by backbone.heads")


@dataclass
class ItemEmbeddingTable:
    KIND = Kind.EMBEDDING_TABLE

    matrix: np.ndarray
    provenance: str = ""

    def to_tensors(self):
        return {"E": self.matrix.astype(np.float32)}, {"provenance": self.provenance}

    @classmethod
    def from_tensors(cls, tensors, meta):
        return cls(tensors["E"], meta.get("provenance", ""))


@dataclass
class ModelCheckpoint:
    """A named set of float32 parameter arrays plus JSON metadata."""

    KIND = Kind.MODEL_CHECKPOINT

    state: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)

    def to_tensors(self):
        return dict(self.state), dict(self.meta)

    @classmethod
    def from_tensors(cls, tensors, meta):
        meta = {k: v for k, v in meta.items() if k != "config_hash"}
        return cls(tensors, meta)

    @classmethod
    def from_module(cls, module: nn.Module, **meta):
        state = {k: v.detach().cpu().numpy().astype(np.float32, copy=True)
                 for k, v in module.state_dict().items()}
        return cls(state, meta)

    def load_into(self, module: nn.Module):
        module.load_state_dict({k: torch.from_numpy(v.copy()) for k, v in self.state.items()})


class IDEmbedding(nn.Module):
    """Plain learnable item table; the base representation."""

    def __init__(self, num_items: int, dim: int):
        super().__init__()
        self.num_items, self.dim = num_items, dim
        self.weight = nn.Parameter(torch.randn(num_items, dim) / dim ** 0.5)

    @property
    def id_weight(self):
        return self.weight

    def forward(self):
        return self.weight


class SequentialRecommender(nn.Module):
    def __init__(self, cfg: BackboneConfig, items: nn.Module, tie_output: bool = True):
        super().__init__()
        self.cfg = cfg
        self.items = items
        self.tie_output = tie_output

    @property
    def num_items(self) -> int:
        return self.items.num_items

    def encode(self, inputs: torch.Tensor, table: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError

    def output_table(self, table):
        return table if self.tie_output else self.items.id_weight

    def forward(self, inputs: torch.Tensor) -> torch.Tensor:
        """Next-item logits at every position of a right-padded batch."""
        table = self.items()
        hidden = self.encode(inputs, table)
        return hidden @ self.output_table(table).T

    @torch.no_grad()
    def score_batch(self, histories: list[np.ndarray]) -> np.ndarray:
        was_training = self.training
        self.eval()
        inputs, lengths = pad_batch([h[-self.cfg.max_seq_len:] for h in histories])
        table = self.items()
        hidden = self.encode(inputs, table)
        last = hidden[torch.arange(len(histories)), lengths - 1]
        scores = (last @ self.output_table(table).T).numpy()
        self.train(was_training)
        return scores


class SASRec(SequentialRecommender):
    def __init__(self, cfg: BackboneConfig, items: nn.Module, tie_output: bool = True):
        super().__init__(cfg, items, tie_output)
        self.pos = nn.Embedding(cfg.max_seq_len, cfg.dim)
        self.drop = nn.Dropout(cfg.dropout)
        self.blocks = nn.ModuleList(
            DecoderBlock(cfg.dim, cfg.heads, cfg.dropout, ffn_mult=1, activation="relu")
            for _ in range(cfg.layers))
        self.ln = nn.LayerNorm(cfg.dim, eps=1e-5)

    def encode(self, inputs, table):
        T = inputs.shape[1]
        x = self.drop(table[inputs] + self.pos.weight[:T])
        for block in self.blocks:
            x = block(x)
        return self.ln(x)


class GRURec(SequentialRecommender):
    def __init__(self, cfg: BackboneConfig, items: nn.Module, tie_output: bool = True):
        super().__init__(cfg, items, tie_output)
        self.cell = GRUCell(cfg.dim, cfg.dim)
        self.drop = nn.Dropout(cfg.dropout)
        self.out = nn.Linear(cfg.dim, cfg.dim)

    def encode(self, inputs, table):
        x = self.drop(table[inputs])
        h = x.new_zeros(inputs.shape[0], self.cfg.dim)
        states = []
        for t in range(inputs.shape[1]):
            h = self.cell(x[:, t], h)
            states.append(h)
        return self.out(self.drop(torch.stack(states, dim=1)))


ARCHS = {"sasrec": SASRec, "gru": GRURec}


def pad_batch(seqs: list[np.ndarray], pad: int = 0):
    lengths = torch.tensor([len(s) for s in seqs])
    if (lengths == 0).any():
        raise ValueError("empty history cannot be scored")
    out = torch.full((len(seqs), int(lengths.max())), pad, dtype=torch.long)
    for i, s in enumerate(seqs):
        out[i, :len(s)] = torch.as_tensor(s, dtype=torch.long)
    return out, lengths


def build_model(cfg: BackboneConfig, num_items: int, items: nn.Module | None = None,
                tie_output: bool = True) -> SequentialRecommender:
    cfg.validate()
    items = items if items is not None else IDEmbedding(num_items, cfg.dim)
    return ARCHS[cfg.arch](cfg, items, tie_output)


def score_all_items(model: SequentialRecommender, history, mask_history: bool = False) -> np.ndarray:
    """Scores over the whole catalog for one history; masked items get -inf."""
    history = np.asarray(history, dtype=np.int64)
    if len(history) == 0:
        raise ValueError("empty history cannot be scored")
    scores = model.score_batch([history])[0]
    if mask_history:
        scores[history] = -np.inf
    return scores


class TrainingDivergedError(RuntimeError):
    def __init__(self, message, last_good_state):
        super().__init__(message)
        self.last_good_state = last_good_state


def _training_windows(data: InteractionDataset, max_len: int) -> list[np.ndarray]:
    return [s[-(max_len + 1):] for s in data.train_sequences() if len(s) >= 2]


@dataclass
class TrainLog:
    epochs: list[dict] = field(default_factory=list)
    best_epoch: int = -1
    best_valid: float = float("-inf")
    seconds: float = 0.0

    def as_dict(self):
        return asdict(self)


def train_backbone(data: InteractionDataset, cfg: BackboneConfig, seed: int = 0,
                   enhanced=None, fusion=None, log_every: int = 0):
    """Train a next-item model with early stopping on validation NDCG@10.

    With ``enhanced`` (an :class:`~p2rec.augment.EnhancedItemSet`) the item
    representation is the gated fusion of a fresh ID table and the frozen
    knowledge embeddings. Returns ``(model, ItemEmbeddingTable, TrainLog)``
    restored to the best validation epoch.
    """
    cfg.validate()
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    items = IDEmbedding(data.num_items, cfg.dim)
    body_gen_state = torch.get_rng_state()
    tie = True
    if enhanced is not None:
        from .augment import FusionConfig, GatedFusion

        fusion = fusion or FusionConfig()
        if enhanced.H.shape[0] != data.num_items:
            raise ConfigError(f"enhanced set has {enhanced.H.shape[0]} items, dataset has {data.num_items}")
        gen = torch.Generator().manual_seed(seed + 1)
        items = GatedFusion(items, enhanced.H, fusion, generator=gen)
        tie = fusion.tie_output
    torch.set_rng_state(body_gen_state)
    model = build_model(cfg, data.num_items, items, tie_output=tie)

    opt = Adam(model.named_parameters(), lr=cfg.lr)
    windows = _training_windows(data, cfg.max_seq_len)
    log = TrainLog()
    best_state = copy.deepcopy(model.state_dict())
    start = time.perf_counter()
    for epoch in range(cfg.max_epochs):
        model.train()
        order = rng.permutation(len(windows))
        total, count = 0.0, 0
        for b in range(0, len(order), cfg.batch_size):
            batch = [windows[i] for i in order[b:b + cfg.batch_size]]
            inputs, lengths = pad_batch([w[:-1] for w in batch])
            targets = torch.full_like(inputs, -100)
            for i, w in enumerate(batch):
                targets[i, :len(w) - 1] = torch.as_tensor(w[1:])
            loss = next_item_loss(model(inputs), targets)
            if not torch.isfinite(loss):
                model.load_state_dict(best_state)
                raise TrainingDivergedError(f"loss became {loss.item()} at epoch {epoch}", best_state)
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(batch)
            count += len(batch)
        valid = evaluate(model.score_batch, data, ks=(10,), split="valid").metrics()["NDCG@10"]
        log.epochs.append({"epoch": epoch, "loss": total / max(count, 1), "valid_ndcg10": valid})
        if log_every and epoch % log_every == 0:
            logger.info("epoch %d loss %.4f valid NDCG@10 %.4f", epoch, total / max(count, 1), valid)
        if valid > log.best_valid:
            log.best_valid, log.best_epoch = valid, epoch
            best_state = copy.deepcopy(model.state_dict())
        elif epoch - log.best_epoch >= cfg.patience:
            break
    log.seconds = time.perf_counter() - start
    model.load_state_dict(best_state)
    model.eval()
    table = ItemEmbeddingTable(model.items().detach().numpy().astype(np.float32, copy=True),
                               provenance=f"{cfg.arch}-seed{seed}-epoch{log.best_epoch}")
    return model, table, log
