import logging

import numpy as np
import pytest
import torch

from conftest import make_dataset
from p2rec.artifacts import Kind, load_artifact, save_artifact
from p2rec.data import ConfigError
from p2rec.nn import preference_mse
from p2rec.pregroup import PreferenceTargets, build_targets
from p2rec.preference import (AdapterCheckpoint, GroupHead, LoRAConfig, PromptVocab, ProxyConfig, SFTConfig,
                              assemble_prompts, build_preference_model, predict_distribution,
                              pretrain_proxy_base, sft_train)

TINY = ProxyConfig(d_model=16, layers=1, heads=2, max_items=10, pretrain_epochs=2, batch_size=16)


def tiny_model(num_items=20, K=3, cfg=TINY, seed=0):
    table = np.random.default_rng(seed).standard_normal((num_items, 8)).astype(np.float32)
    return build_preference_model(table, K, cfg, seed=seed)


def test_vocab_lengths():
    v = PromptVocab(8)
    assert len(v.inst_ids) == 14 and len(v.res_ids) == 2
    assert "8" in v.tokens and "Response:" in v.tokens


def test_prompt_layout_length():
    v = PromptVocab(4)
    batch = assemble_prompts([np.array([5, 6, 7])], v, max_items=50)
    assert batch.lengths.tolist() == [19]
    assert batch.is_item[0].nonzero().flatten().tolist() == [14, 15, 16]
    assert batch.items[0, 14:17].tolist() == [5, 6, 7]
    assert batch.tokens[0, :14].tolist() == v.inst_ids
    assert batch.tokens[0, 17:19].tolist() == v.res_ids


def test_prompt_preserves_order():
    v = PromptVocab(4)
    batch = assemble_prompts([np.array([1, 2, 3]), np.array([3, 1, 2])], v, 50)
    assert batch.items[0, 14:17].tolist() == [1, 2, 3]
    assert batch.items[1, 14:17].tolist() == [3, 1, 2]


def test_prompt_keeps_most_recent_items():
    v = PromptVocab(4)
    seq = np.arange(120)
    batch = assemble_prompts([seq], v, max_items=50)
    assert batch.items[0][batch.is_item[0]].tolist() == list(range(70, 120))


def test_prompt_padding_only_at_right_edge():
    v = PromptVocab(4)
    batch = assemble_prompts([np.array([1]), np.array([1, 2, 3, 4])], v, 50)
    assert batch.tokens.shape[1] == 20
    assert (batch.tokens[0, 17:] == v.pad_id).all()


def test_empty_sequence_rejected():
    with pytest.raises(ValueError):
        assemble_prompts([np.array([], dtype=np.int64)], PromptVocab(4), 50)


def test_forward_h_is_deterministic_and_padding_invariant():
    model = tiny_model().eval()
    with torch.no_grad():
        alone = model.forward_h(model.prompts([np.array([1, 2])]))
        again = model.forward_h(model.prompts([np.array([1, 2])]))
        padded = model.forward_h(model.prompts([np.array([1, 2]), np.arange(10)]))[:1]
    assert torch.equal(alone, again)
    assert torch.allclose(alone, padded, atol=1e-6)


def test_zero_init_lora_matches_frozen_base_bitwise():
    model = tiny_model().eval()
    batch = model.prompts([np.array([3, 1, 4]), np.array([1, 5])])
    with torch.no_grad():
        before = model.forward_h(batch)
        model.lm.insert_lora(LoRAConfig(rank=4), torch.Generator().manual_seed(0))
        after = model.forward_h(batch)
    assert torch.equal(before, after)


def test_head_examples():
    head = GroupHead(6, 4)
    with torch.no_grad():
        head.linear.weight.zero_()
        head.linear.bias.zero_()
        h = torch.randn(2, 6)
        assert torch.allclose(predict_distribution(h, head), torch.full((2, 4), 0.25))
        head.linear.bias[0] = 10.0
        assert predict_distribution(h, head)[0, 0] > 0.99
        head.linear.weight.normal_()
        out = predict_distribution(torch.randn(50, 6), head)
    assert (out > 0).all()
    assert torch.allclose(out.sum(-1), torch.ones(50), atol=1e-6)


def test_sft_loss_examples():
    g = torch.tensor([[0.2, 0.8], [0.6, 0.4]])
    assert preference_mse(g, g, "sum").item() == 0.0
    assert preference_mse(torch.tensor([[0.5, 0.5]]), torch.tensor([[1.0, 0.0]]), "sum").item() == 0.5


def counting_setup(M=100, per_user=9, num_items=30, K=3):
    rng = np.random.default_rng(0)
    data = make_dataset([rng.integers(0, num_items, size=per_user) for _ in range(M)], num_items=num_items)
    targets = build_targets(data, rng.integers(0, K, size=num_items), K=K)
    return data, targets


def test_forward_calls_per_epoch_equal_users():
    data, targets = counting_setup()
    model = tiny_model(num_items=30)
    log = sft_train(model, data, targets, SFTConfig(epochs=3, batch_size=16, patience=10))
    assert data.num_interactions == 900
    assert log.instance_level_calls == 900
    for e in log.epochs:
        assert e["forward_calls"] == 100
        assert e["train_forward_calls"] == log.train_users == 90
    assert len(log.holdout_users) == 10


def test_trainable_set_and_frozen_base():
    data, targets = counting_setup(M=30)
    model = tiny_model(num_items=30)
    frozen = {k: v.clone() for k, v in model.lm.state_dict().items()}
    sft_train(model, data, targets, SFTConfig(epochs=3, batch_size=8, lr=1e-2))
    state = model.lm.state_dict()
    for k, v in frozen.items():
        assert torch.equal(state[k], v), k
    assert any(("lora_B" in k) and state[k].abs().sum() > 0 for k in state)

    model.train()
    model.zero_grad()
    batch = model.prompts([data.train(u) for u in range(4)])
    preference_mse(model(batch), torch.from_numpy(targets.dist[:4])).backward()
    touched = {n for n, p in model.named_parameters() if p.grad is not None and p.grad.abs().sum() > 0}
    allowed = {n for n, p in model.named_parameters()
               if "lora_" in n or n.startswith("proj.") or n.startswith("head.")}
    assert touched and touched <= allowed


def test_frozen_projection_flag():
    data, targets = counting_setup(M=20)
    model = tiny_model(num_items=30)
    w = model.proj.weight.clone()
    sft_train(model, data, targets, SFTConfig(epochs=2, batch_size=8, lr=1e-2, train_proj=False))
    assert torch.equal(model.proj.weight, w)


def test_sft_learns_separable_targets():
    # every user's items come from a single group; the held-out loss must fall well below its start
    rng = np.random.default_rng(0)
    K, N = 3, 30
    assignment = np.arange(N) % K
    seqs = []
    for u in range(150):
        pool = np.flatnonzero(assignment == u % K)
        seqs.append(rng.choice(pool, size=8))
    data = make_dataset(seqs, num_items=N)
    targets = build_targets(data, assignment, K=K)
    table = np.eye(K)[assignment].astype(np.float32) + 0.1 * rng.standard_normal((N, K)).astype(np.float32)
    model = build_preference_model(table, K, TINY, seed=0)
    log = sft_train(model, data, targets, SFTConfig(epochs=30, batch_size=16, lr=3e-3, patience=30))
    assert log.epochs[log.best_epoch]["valid_loss"] < 0.25 * log.epochs[0]["valid_loss"]


def test_k_mismatch_is_config_error():
    data, targets = counting_setup(M=10, K=3)
    with pytest.raises(ConfigError):
        sft_train(tiny_model(num_items=30, K=4), data, targets, SFTConfig(epochs=1))


def test_sum_reduction_runs():
    data, targets = counting_setup(M=20)
    log = sft_train(tiny_model(num_items=30), data, targets, SFTConfig(epochs=2, reduction="sum"))
    assert np.isfinite(log.epochs[-1]["loss"])
    with pytest.raises(ConfigError):
        SFTConfig(reduction="max").validate()


def test_pretraining_loss_decreases(small_synthetic):
    data, _ = small_synthetic
    table = np.random.default_rng(0).standard_normal((data.num_items, 8)).astype(np.float32)
    cfg = ProxyConfig(d_model=16, layers=1, heads=2, max_items=10, pretrain_epochs=4, batch_size=16)
    model, log = pretrain_proxy_base(data, table, 4, cfg, seed=0)
    losses = [e["loss"] for e in log]
    assert losses[-1] < losses[0]
    assert all(not p.requires_grad for p in model.lm.parameters())


def test_random_base_option(small_synthetic):
    data, _ = small_synthetic
    table = np.zeros((data.num_items, 8), dtype=np.float32)
    cfg = ProxyConfig(d_model=16, layers=1, heads=2, max_items=10, pretrain=False)
    model, log = pretrain_proxy_base(data, table, 4, cfg, seed=0)
    assert log == [] and all(not p.requires_grad for p in model.lm.parameters())


def test_adapter_checkpoint_round_trip(tmp_path):
    data, targets = counting_setup(M=20)
    model = tiny_model(num_items=30)
    sft_train(model, data, targets, SFTConfig(epochs=2, batch_size=8, lr=1e-2))
    save_artifact(AdapterCheckpoint.from_model(model), tmp_path / "a.bin")
    fresh = tiny_model(num_items=30)
    fresh.lm.load_state_dict({k: v for k, v in model.lm.state_dict().items() if "lora_" not in k}, strict=False)
    fresh.lm.insert_lora(LoRAConfig())
    load_artifact(Kind.ADAPTER_CHECKPOINT, tmp_path / "a.bin").load_into(fresh)
    fresh.eval()
    batch = model.prompts([np.array([1, 2, 3])])
    with torch.no_grad():
        assert torch.equal(model(batch), fresh(batch))


def test_users_without_train_items_are_skipped(caplog):
    data = make_dataset([[0, 1, 2], [1, 2, 0, 1], [2, 0, 1, 1]], num_items=3)
    data.sequences[0] = np.array([], dtype=np.int64)
    with caplog.at_level(logging.INFO):
        targets = build_targets(data, np.array([0, 1, 2]), K=3)
    assert isinstance(targets, PreferenceTargets) and len(targets.users) == 2
    log = sft_train(tiny_model(num_items=3), data, targets, SFTConfig(epochs=1, holdout=0.0))
    assert log.epochs[0]["forward_calls"] == 2


def test_repeated_lora_insertion_keeps_adapters_trainable():
    model = tiny_model()
    model.lm.insert_lora(LoRAConfig(rank=2))
    model.lm.insert_lora(LoRAConfig(rank=2))
    trainable = {n for n, p in model.lm.named_parameters() if p.requires_grad}
    assert trainable and all("lora_" in n for n in trainable)
    assert len(trainable) == 2 * 2 * TINY.layers
