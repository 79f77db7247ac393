"""Preference reconstruction: a compact decoder LM fine-tuned with LoRA to map a
user's projected item sequence onto that user's latent-category distribution.

Prompt layout per user::

    [<bos> instruction words] [linear_proj(e_v) for each item] [Response: <eos>]

The knowledge embedding ``h`` is the final hidden state at the last response
token; a softmax group head turns it into a distribution over K groups.
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
from .nn import Adam, DecoderBlock, Linear, LoRALinear, next_item_loss, preference_mse
from .pregroup import PreferenceTargets

logger = logging.getLogger(__name__)

INSTRUCTION = ("Given the user's purchase history, predict the user's distribution "
               "among {K} purchase preferences.")
RESPONSE = "Response:"
SPECIALS = ("<pad>", "<bos>", "<eos>", "<unk>")


class PromptVocab:
    """Word-level vocabulary over the fixed instruction and response strings."""

    def __init__(self, K: int):
        self.K = K
        inst_words = INSTRUCTION.format(K=K).split()
        res_words = RESPONSE.split()
        self.tokens = list(SPECIALS)
        for w in inst_words + res_words:
            if w not in self.tokens:
                self.tokens.append(w)
        self.index = {t: i for i, t in enumerate(self.tokens)}
        self.inst_ids = [self.index["<bos>"]] + [self.index[w] for w in inst_words]
        self.res_ids = [self.index[w] for w in res_words] + [self.index["<eos>"]]

    def __len__(self):
        return len(self.tokens)

    @property
    def pad_id(self) -> int:
        return self.index["<pad>"]


@dataclass
class ProxyConfig:
    d_model: int = 128
    layers: int = 4
    heads: int = 4
    max_items: int = 50
    pretrain: bool = True
    pretrain_epochs: int = 5
    pretrain_lr: float = 1e-3
    batch_size: int = 64


@dataclass
class LoRAConfig:
    rank: int = 8
    alpha: float = 16.0
    init_std: float = 0.02


@dataclass
class SFTConfig:
    lr: float = 1e-3
    epochs: int = 50
    batch_size: int = 64
    patience: int = 5
    holdout: float = 0.1
    reduction: str = "mean"
    train_proj: bool = True

    def validate(self):
        if self.reduction not in ("mean", "sum"):
            raise ConfigError(f"sft.reduction must be 'mean' or 'sum', got {self.reduction!r}")
        if not 0.0 <= self.holdout < 1.0:
            raise ConfigError("sft.holdout must lie in [0, 1)")


@dataclass
class PromptBatch:
    tokens: torch.Tensor
    items: torch.Tensor
    is_item: torch.Tensor
    lengths: torch.Tensor

    def __len__(self):
        return len(self.lengths)


def assemble_prompts(sequences: list[np.ndarray], vocab: PromptVocab, max_items: int) -> PromptBatch:
    """Lay out each prompt and right-pad the batch.

    Only the most recent ``max_items`` items of a sequence are kept.
    """
    rows = []
    for seq in sequences:
        seq = np.asarray(seq, dtype=np.int64)[-max_items:]
        if len(seq) == 0:
            raise ValueError("cannot build a prompt from an empty sequence")
        rows.append(seq)
    n_inst, n_res = len(vocab.inst_ids), len(vocab.res_ids)
    lengths = torch.tensor([n_inst + len(s) + n_res for s in rows])
    T = int(lengths.max())
    tokens = torch.full((len(rows), T), vocab.pad_id, dtype=torch.long)
    items = torch.zeros((len(rows), T), dtype=torch.long)
    is_item = torch.zeros((len(rows), T), dtype=torch.bool)
    inst = torch.tensor(vocab.inst_ids)
    res = torch.tensor(vocab.res_ids)
    for i, s in enumerate(rows):
        L = len(s)
        tokens[i, :n_inst] = inst
        items[i, n_inst:n_inst + L] = torch.from_numpy(s)
        is_item[i, n_inst:n_inst + L] = True
        tokens[i, n_inst + L:n_inst + L + n_res] = res
    return PromptBatch(tokens, items, is_item, lengths)


class ProxyLM(nn.Module):
    """Decoder-only transformer standing in for the large language model."""

    def __init__(self, vocab_size: int, d_model: int = 128, layers: int = 4, heads: int = 4,
                 max_len: int = 128):
        super().__init__()
        self.d_model, self.max_len = d_model, max_len
        self.tok = nn.Embedding(vocab_size, d_model)
        self.pos = nn.Embedding(max_len, d_model)
        nn.init.normal_(self.tok.weight, std=0.02)
        nn.init.normal_(self.pos.weight, std=0.02)
        self.blocks = nn.ModuleList(DecoderBlock(d_model, heads) for _ in range(layers))
        self.ln_f = nn.LayerNorm(d_model, eps=1e-5)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        T = x.shape[1]
        if T > self.max_len:
            raise ValueError(f"prompt length {T} exceeds positional table {self.max_len}")
        x = x + self.pos.weight[:T]
        for block in self.blocks:
            x = block(x)
        return self.ln_f(x)

    def freeze(self):
        for p in self.parameters():
            p.requires_grad_(False)

    def insert_lora(self, cfg: LoRAConfig, generator: torch.Generator | None = None):
        """Freeze the base and wrap every attention query/value projection.

        Adapters already in place are kept, and stay trainable.
        """
        for name, p in self.named_parameters():
            p.requires_grad_("lora_" in name)
        for block in self.blocks:
            attn = block.attn
            for name in ("q_proj", "v_proj"):
                base = getattr(attn, name)
                if not isinstance(base, LoRALinear):
                    setattr(attn, name, LoRALinear(base, cfg.rank, cfg.alpha, cfg.init_std, generator))

    def lora_parameters(self):
        return [(n, p) for n, p in self.named_parameters() if "lora_" in n]


class GroupHead(nn.Module):
    def __init__(self, d_model: int, K: int):
        super().__init__()
        self.linear = Linear(d_model, K, name="group_head")

    def forward(self, h):
        return predict_distribution(h, self)


def predict_distribution(h: torch.Tensor, head: GroupHead) -> torch.Tensor:
    return torch.softmax(head.linear(h), dim=-1)


class PreferenceModel(nn.Module):
    """Proxy LM plus the item-embedding projection and the group head.

    ``prompt_forwards`` counts prompts passed through the LM.
    """

    def __init__(self, lm: ProxyLM, item_table: np.ndarray, K: int, vocab: PromptVocab | None = None,
                 max_items: int = 50):
        super().__init__()
        self.lm = lm
        self.vocab = vocab or PromptVocab(K)
        self.max_items = max_items
        self.register_buffer("E", torch.as_tensor(np.asarray(item_table, dtype=np.float32)))
        self.proj = Linear(self.E.shape[1], lm.d_model, name="linear_proj")
        self.head = GroupHead(lm.d_model, K)
        self.prompt_forwards = 0

    @property
    def K(self) -> int:
        return self.head.linear.out_features

    def prompts(self, sequences) -> PromptBatch:
        return assemble_prompts(sequences, self.vocab, self.max_items)

    def embed(self, batch: PromptBatch) -> torch.Tensor:
        tok = self.lm.tok(batch.tokens)
        slots = self.proj(self.E.to(tok.dtype)[batch.items])
        return torch.where(batch.is_item.unsqueeze(-1), slots, tok)

    def hidden(self, batch: PromptBatch) -> torch.Tensor:
        self.prompt_forwards += len(batch)
        return self.lm(self.embed(batch))

    def forward_h(self, batch: PromptBatch) -> torch.Tensor:
        hidden = self.hidden(batch)
        return hidden[torch.arange(len(batch)), batch.lengths - 1]

    def forward(self, batch: PromptBatch) -> torch.Tensor:
        return self.head(self.forward_h(batch))

    def trainable_parameters(self, train_proj: bool = True):
        named = list(self.lm.lora_parameters()) + [("head." + n, p) for n, p in self.head.named_parameters()]
        if train_proj:
            named += [("proj." + n, p) for n, p in self.proj.named_parameters()]
        else:
            self.proj.requires_grad_(False)
        return named


def build_preference_model(item_table: np.ndarray, K: int, cfg: ProxyConfig, seed: int = 0) -> PreferenceModel:
    torch.manual_seed(seed)
    vocab = PromptVocab(K)
    n_fixed = len(vocab.inst_ids) + len(vocab.res_ids)
    lm = ProxyLM(len(vocab), cfg.d_model, cfg.layers, cfg.heads, max_len=n_fixed + cfg.max_items)
    return PreferenceModel(lm, item_table, K, vocab, cfg.max_items)


def pretrain_proxy_base(data: InteractionDataset, item_table: np.ndarray, K: int, cfg: ProxyConfig,
                        seed: int = 0) -> tuple[PreferenceModel, list[dict]]:
    """Build the proxy LM and, if configured, train it on next-item-slot prediction.

    The slot at position t predicts the item in slot t+1 by scoring all
    projected item embeddings. Afterwards the LM is frozen; the projection
    stays trainable so fine-tuning can start from it.
    """
    model = build_preference_model(item_table, K, cfg, seed)
    log = []
    if cfg.pretrain and cfg.pretrain_epochs > 0:
        rng = np.random.default_rng(seed)
        seqs = [s for s in data.train_sequences() if len(s) >= 2]
        params = [(n, p) for n, p in model.named_parameters() if not n.startswith("head.")]
        opt = Adam(params, lr=cfg.pretrain_lr)
        n_inst = len(model.vocab.inst_ids)
        for epoch in range(cfg.pretrain_epochs):
            order = rng.permutation(len(seqs))
            total = 0.0
            start = time.perf_counter()
            for b in range(0, len(order), cfg.batch_size):
                batch_seqs = [seqs[i][-model.max_items:] for i in order[b:b + cfg.batch_size]]
                batch = model.prompts(batch_seqs)
                hidden = model.hidden(batch)
                T = hidden.shape[1]
                targets = torch.full((len(batch_seqs), T), -100, dtype=torch.long)
                for i, s in enumerate(batch_seqs):
                    targets[i, n_inst:n_inst + len(s) - 1] = torch.from_numpy(s[1:])
                logits = hidden @ model.proj(model.E).T
                loss = next_item_loss(logits, targets)
                opt.zero_grad()
                loss.backward()
                opt.step()
                total += loss.item() * len(batch_seqs)
            log.append({"epoch": epoch, "loss": total / len(seqs), "seconds": time.perf_counter() - start})
            logger.info("proxy pretrain epoch %d loss %.4f", epoch, log[-1]["loss"])
    model.lm.freeze()
    model.prompt_forwards = 0
    return model, log


@dataclass
class AdapterCheckpoint:
    """Trainable SFT state: LoRA factors, the input projection and the group head."""

    KIND = Kind.ADAPTER_CHECKPOINT

    state: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)

    def to_tensors(self):
        return dict(self.state), dict(self.meta)

    @classmethod
    def from_tensors(cls, tensors, meta):
        return cls(tensors, {k: v for k, v in meta.items() if k != "config_hash"})

    @classmethod
    def from_model(cls, model: PreferenceModel, **meta):
        keep = {k: v for k, v in model.state_dict().items()
                if "lora_" in k or k.startswith("proj.") or k.startswith("head.")}
        return cls({k: v.detach().numpy().astype(np.float32, copy=True) for k, v in keep.items()}, meta)

    def load_into(self, model: PreferenceModel):
        missing = set(self.state) - set(model.state_dict())
        if missing:
            raise ConfigError(f"adapter checkpoint has unknown tensors: {sorted(missing)}")
        model.load_state_dict({k: torch.from_numpy(v.copy()) for k, v in self.state.items()}, strict=False)


@dataclass
class SFTLog:
    epochs: list[dict] = field(default_factory=list)
    best_epoch: int = -1
    train_users: int = 0
    holdout_users: list[int] = field(default_factory=list)
    instance_level_calls: int = 0

    def as_dict(self):
        return asdict(self)


def split_holdout(users: np.ndarray, fraction: float, seed: int):
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(users))
    n_hold = int(round(fraction * len(users)))
    return np.sort(users[perm[n_hold:]]), np.sort(users[perm[:n_hold]])


def sft_train(model: PreferenceModel, data: InteractionDataset, targets: PreferenceTargets,
              cfg: SFTConfig, lora: LoRAConfig | None = None, seed: int = 0) -> SFTLog:
    """User-level fine-tuning: one prompt per user per epoch.

    Minimizes the squared error between the head output and each user's
    normalized group-frequency vector. A held-out share of users drives early
    stopping; each of them is forwarded once per epoch for validation, so an
    epoch costs exactly one prompt forward per user.
    """
    cfg.validate()
    if targets.K != model.K:
        raise ConfigError(f"targets have K={targets.K}, head has K={model.K}")
    gen = torch.Generator().manual_seed(seed)
    model.lm.insert_lora(lora or LoRAConfig(), generator=gen)
    params = model.trainable_parameters(cfg.train_proj)
    opt = Adam(params, lr=cfg.lr)
    rng = np.random.default_rng(seed)

    train_users, hold_users = split_holdout(targets.users, cfg.holdout, seed)
    target_rows = {int(u): i for i, u in enumerate(targets.users)}
    dist = torch.from_numpy(targets.dist)

    def batches(users, shuffle):
        order = rng.permutation(len(users)) if shuffle else np.arange(len(users))
        for b in range(0, len(order), cfg.batch_size):
            chunk = users[order[b:b + cfg.batch_size]]
            rows = torch.tensor([target_rows[int(u)] for u in chunk])
            yield model.prompts([data.train(int(u)) for u in chunk]), dist[rows]

    log = SFTLog(train_users=len(train_users), holdout_users=[int(u) for u in hold_users],
                 instance_level_calls=data.num_interactions)
    best_state, best_val = copy.deepcopy(model.state_dict()), float("inf")
    for epoch in range(cfg.epochs):
        start = time.perf_counter()
        model.prompt_forwards = 0
        model.train()
        total = 0.0
        for batch, target in batches(train_users, shuffle=True):
            loss = preference_mse(model(batch), target, cfg.reduction)
            if not torch.isfinite(loss):
                model.load_state_dict(best_state)
                raise FloatingPointError(f"SFT loss became {loss.item()} at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * (len(batch) if cfg.reduction == "mean" else 1)
        train_calls = model.prompt_forwards
        train_loss = total / max(len(train_users), 1)
        val_loss = float("nan")
        if len(hold_users):
            model.eval()
            with torch.no_grad():
                err = sum(preference_mse(model(b), t, "sum").item() for b, t in batches(hold_users, False))
            val_loss = err / len(hold_users)
        entry = {"epoch": epoch, "loss": train_loss, "valid_loss": val_loss,
                 "train_forward_calls": train_calls, "forward_calls": model.prompt_forwards,
                 "seconds": time.perf_counter() - start}
        log.epochs.append(entry)
        logger.info("sft epoch %d loss %.5f valid %.5f", epoch, train_loss, val_loss)
        monitor = val_loss if len(hold_users) else train_loss
        if monitor < best_val:
            best_val, log.best_epoch = monitor, epoch
            best_state = copy.deepcopy(model.state_dict())
        elif epoch - log.best_epoch >= cfg.patience:
            break
    model.load_state_dict(best_state)
    model.eval()
    model.prompt_forwards = 0
    return log
