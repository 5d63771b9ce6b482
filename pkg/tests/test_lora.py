import copy
import warnings

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from torch import nn

from conftest import random_images, toy_model
from im2latex.lora import (
    LoraConfig,
    LoraConfigError,
    LoraLinear,
    base_hash,
    expected_trainable_count,
    inject,
    load_adapters,
    matches,
    merge,
    save_adapters,
    trainable_count,
)
from im2latex.trainer import TrainConfig, Trainer


def quiet_inject(model, cfg=None, seed=0):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return inject(model, cfg, seed)


def perturb_adapters(adapted, seed=0):
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for m in adapted.adapters().values():
            m.lora_B.copy_(torch.randn(m.lora_B.shape, generator=g) * 0.05)


def random_inputs(n, vocab, seed=0):
    g = torch.Generator().manual_seed(seed)
    for i in range(n):
        yield random_images(1, seed=seed * 1000 + i), torch.randint(0, vocab, (1, 1 + i % 12), generator=g)


def test_config_validation():
    with pytest.raises(LoraConfigError):
        LoraConfig(r=0)
    with pytest.raises(LoraConfigError):
        LoraConfig(dropout=1.0)
    assert LoraConfig().scaling == 0.5


@pytest.mark.parametrize("name, pattern, hit", [
    ("decoder.transformer.h.0.attn.c_proj", "attn.c_proj", True),
    ("decoder.transformer.h.0.attn.c_proj", "c_proj", True),
    ("decoder.transformer.h.0.crossattention.c_proj", "attn.c_proj", False),
    ("decoder.transformer.h.0.mlp.c_fc", "c_fc", True),
    ("decoder.transformer.h.0.mlp.xc_fc", "c_fc", False),
])
def test_suffix_matching(name, pattern, hit):
    assert matches(name, pattern) is hit


def test_zero_init_identity(model):
    model.eval()
    base = copy.deepcopy(model)
    adapted = quiet_inject(model, LoraConfig(dropout=0.2), seed=1).eval()
    for images, ids in random_inputs(10, model.config.decoder.vocab_size):
        assert torch.equal(adapted(images, ids), base(images, ids))


def test_freeze_flags(model):
    adapted = quiet_inject(model)
    for name, p in adapted.named_parameters():
        assert p.requires_grad == (".lora_" in name), name


def test_base_weights_bitwise_frozen_after_training(tokenizer, collator, records):
    adapted = quiet_inject(toy_model(tokenizer), LoraConfig(), seed=0)
    before = {n: p.detach().clone() for n, p in adapted.base_parameters().items()}
    adapters_before = adapted.adapter_state_dict()
    cfg = TrainConfig.for_stage("finetune", batch_size=8, epochs=100, max_steps=50, eval_interval_steps=1000,
                                lr=1e-3, warmup_steps=0)
    history = Trainer(adapted, collator, records[:16], [], cfg).train()
    assert len(history.steps) == 50
    after = adapted.base_parameters()
    assert all(torch.equal(before[n], after[n]) for n in before)
    assert any(not torch.equal(adapters_before[n], v) for n, v in adapted.adapter_state_dict().items())


def test_single_target_count(model):
    adapted = quiet_inject(model, LoraConfig(r=16, target_patterns=["decoder.transformer.h.0.attn.c_proj"]))
    assert trainable_count(adapted) == 16 * 64 + 64 * 16 == 2048


def test_no_match_is_an_error(model):
    with pytest.raises(LoraConfigError):
        inject(model, LoraConfig(target_patterns=["nothing.here"]))


def test_unmatched_pattern_warns(model):
    with pytest.warns(UserWarning, match="attn.qkv"):
        inject(model, LoraConfig())


def test_default_patterns_hit_decoder_linears(model):
    adapted = quiet_inject(model)
    n_layers = model.config.decoder.n_layers
    # c_attn x2, c_proj x3 (self, cross, mlp), c_fc per block
    assert len(adapted.targets) == 6 * n_layers
    assert all(t.startswith("decoder.") for t in adapted.targets)


@settings(max_examples=25, deadline=None)
@given(st.data())
def test_count_law_random_targets(tokenizer, data):
    model = toy_model(tokenizer)
    linears = {n: m for n, m in model.named_modules() if isinstance(m, nn.Linear)}
    chosen = data.draw(st.lists(st.sampled_from(sorted(linears)), min_size=1, max_size=10, unique=True))
    r = data.draw(st.integers(1, 8))
    oracle = sum(r * (linears[n].in_features + linears[n].out_features) for n in chosen)
    adapted = quiet_inject(model, LoraConfig(r=r, target_patterns=chosen))
    assert trainable_count(adapted) == expected_trainable_count(adapted) == oracle


def test_merge_right_after_inject_equals_base(model):
    base = copy.deepcopy(model)
    merged = merge(quiet_inject(model))
    sb, sm = base.state_dict(), merged.state_dict()
    assert sb.keys() == sm.keys()
    assert all(torch.equal(sb[k], sm[k]) for k in sb)


def test_merge_fidelity(model):
    adapted = quiet_inject(model, LoraConfig(dropout=0.2), seed=4)
    perturb_adapters(adapted)
    adapted.eval()
    merged = merge(adapted).eval()
    worst_abs = worst_rel = 0.0
    for images, ids in random_inputs(100, model.config.decoder.vocab_size, seed=1):
        a, m = adapted(images, ids), merged(images, ids)
        worst_abs = max(worst_abs, float((a - m).abs().max()))
        worst_rel = max(worst_rel, float((a - m).norm() / a.norm()))
    assert worst_abs <= 1e-5 and worst_rel <= 1e-5


def test_merge_idempotent(model):
    merged = merge(quiet_inject(model))
    assert merge(merged) is merged


def test_dropout_only_in_training_mode():
    torch.manual_seed(0)
    layer = LoraLinear(nn.Linear(8, 8), r=4, alpha=8, dropout=0.5, generator=torch.Generator().manual_seed(0))
    with torch.no_grad():
        layer.lora_B.normal_()
    x = torch.randn(5, 8)
    layer.eval()
    assert torch.equal(layer(x), layer(x))
    layer.train()
    assert not torch.equal(layer(x), layer(x))


def test_a_init_range_and_seed():
    a = LoraLinear(nn.Linear(64, 32), 16, 8, 0.0, torch.Generator().manual_seed(3))
    b = LoraLinear(nn.Linear(64, 32), 16, 8, 0.0, torch.Generator().manual_seed(3))
    assert torch.equal(a.lora_A, b.lora_A)
    assert float(a.lora_A.abs().max()) <= 1 / 8 and bool((a.lora_B == 0).all())


def test_adapter_checkpoint_round_trip(tmp_path, tokenizer):
    base = toy_model(tokenizer, seed=5)
    adapted = quiet_inject(copy.deepcopy(base), LoraConfig(dropout=0.0), seed=2)
    perturb_adapters(adapted, seed=3)
    save_adapters(adapted, tmp_path / "ad")
    loaded = load_adapters(copy.deepcopy(base), tmp_path / "ad").eval()
    adapted.eval()
    images, ids = random_images(1, seed=7), torch.tensor([[1, 5, 9]])
    assert torch.equal(loaded(images, ids), adapted(images, ids))
    assert base_hash(loaded) == base_hash(base)


def test_adapter_checkpoint_rejects_other_base(tmp_path, tokenizer):
    adapted = quiet_inject(toy_model(tokenizer, seed=5))
    save_adapters(adapted, tmp_path / "ad")
    with pytest.raises(LoraConfigError, match="hash"):
        load_adapters(toy_model(tokenizer, seed=6), tmp_path / "ad")


