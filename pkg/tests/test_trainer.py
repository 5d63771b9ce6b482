import copy
import csv
import json
import math
import warnings

import pytest
import torch
import torch.multiprocessing as mp
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import flat_params, random_images, rel_diff, toy_model
from im2latex.distributed import DistContext, ShardMismatchError, ddp_step_contract, replica_gradients
from im2latex.lora import inject
from im2latex.model.core import NonFiniteLossError, teacher_forcing, token_losses
from im2latex.model.generation import generate
from im2latex.precision import apply_precision_policy, compile_hook
from im2latex.trainer import TrainConfig, Trainer, clip_gradients, linear_warmup_lr


def make_trainer(tokenizer, collator, train, val=(), out_dir=None, seed=0, **kw):
    kw.setdefault("eval_interval_steps", 10_000)
    kw.setdefault("lr", 1e-3)
    kw.setdefault("warmup_steps", 0)
    cfg = TrainConfig(seed=seed, **kw)
    return Trainer(toy_model(tokenizer, seed=seed), collator, train, list(val), cfg, out_dir)


# --------------------------------------------------------------------------- config, schedule, clipping

def test_stage_defaults():
    base, ft = TrainConfig.for_stage("base"), TrainConfig.for_stage("finetune")
    assert (base.lr, base.epochs, base.eval_interval_steps, base.batch_size, base.clip_norm) == (1e-4, 10, 200, 32, 1.0)
    assert (ft.lr, ft.epochs, ft.eval_interval_steps) == (2e-4, 40, 40)


@pytest.mark.parametrize("field, value", [("batch_size", 0), ("lr", 0.0), ("eval_interval_steps", 0),
                                          ("accum_steps", 0), ("stage", "pretrain"), ("warmup_steps", -1)])
def test_config_validation(field, value):
    cfg = TrainConfig(**{field: value})
    with pytest.raises(ValueError):
        cfg.validate()


def test_schedule_values():
    assert linear_warmup_lr(0, 100, 300, 2e-4) == 0.0
    assert linear_warmup_lr(100, 100, 300, 2e-4) == 2e-4
    assert linear_warmup_lr(200, 100, 300, 2e-4) == 1e-4
    assert linear_warmup_lr(50, 100, 300, 2e-4) == 1e-4
    assert linear_warmup_lr(250, 100, 300, 2e-4) == 2e-4 * (50 / 200)
    assert linear_warmup_lr(300, 100, 300, 2e-4) == 0.0
    assert linear_warmup_lr(5, 5, 5, 1.0) == 0.0


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 500), st.integers(1, 1000), st.floats(1e-6, 1.0))
def test_schedule_shape(warmup, extra, base_lr):
    total = warmup + extra
    values = [linear_warmup_lr(s, warmup, total, base_lr) for s in range(total + 1)]
    peak = values[warmup]
    assert peak == base_lr
    assert all(a <= b + 1e-15 for a, b in zip(values[:warmup], values[1:warmup + 1]))
    assert all(a >= b - 1e-15 for a, b in zip(values[warmup:], values[warmup + 1:]))
    assert values[-1] == 0.0 and min(values) >= 0.0


def test_clip_examples():
    zeros = [torch.zeros(3), torch.zeros(2, 2)]
    _, norm = clip_gradients(zeros, 1.0)
    assert norm == 0.0 and all(bool((z == 0).all()) for z in zeros)
    g = torch.ones(4)  # norm 2
    _, norm = clip_gradients([g], 1.0)
    assert norm == 2.0 and torch.equal(g, torch.full((4,), 0.5))


def test_clip_random_sets():
    gen = torch.Generator().manual_seed(0)
    for _ in range(100):
        grads = [torch.randn(int(torch.randint(1, 50, (1,), generator=gen)), generator=gen)
                 * float(10 ** torch.empty(1).uniform_(-3, 3, generator=gen)) for _ in range(5)]
        oracle = math.sqrt(sum(float((g.double() ** 2).sum()) for g in grads))
        originals = [g.clone() for g in grads]
        _, norm = clip_gradients(grads, 1.0)
        post = math.sqrt(sum(float((g.double() ** 2).sum()) for g in grads))
        assert math.isclose(norm, oracle, rel_tol=1e-9)
        assert post <= 1.0 + 1e-6
        if oracle <= 1.0:
            assert all(torch.equal(a, b) for a, b in zip(grads, originals))


def test_clip_non_finite():
    with pytest.raises(FloatingPointError):
        clip_gradients([torch.tensor([1.0, float("inf")])], 1.0)


def test_clip_on_real_model_gradients(model, collator, records):
    batch = collator(records[:4])
    inputs, targets = teacher_forcing(batch)
    total, n = token_losses(model(batch.images, inputs), targets)
    (total * 100).backward()  # make sure clipping kicks in
    grads = [p.grad for p in model.parameters() if p.grad is not None]
    _, pre = clip_gradients(grads, 1.0)
    post = math.sqrt(sum(float((g.double() ** 2).sum()) for g in grads))
    assert pre > 1.0 and post <= 1.0 + 1e-6


# --------------------------------------------------------------------------- accumulation and data parallel

def test_accumulation_equals_large_batch(tokenizer, collator, records):
    big = make_trainer(tokenizer, collator, records[:32], batch_size=32, accum_steps=1, epochs=1, max_steps=1)
    acc = make_trainer(tokenizer, collator, records[:32], batch_size=8, accum_steps=4, epochs=1, max_steps=1)
    big.train()
    acc.train()
    assert big.step == acc.step == 1
    assert rel_diff(flat_params(acc.model), flat_params(big.model)) <= 1e-5
    assert math.isclose(acc.history.steps[0].train_loss, big.history.steps[0].train_loss, rel_tol=1e-5)


def test_simulated_ddp_equals_single_batch(tokenizer, collator, records):
    model = toy_model(tokenizer)
    full = collator(records[:32])
    shards = [collator(records[:16]), collator(records[16:32])]
    tokens = [int((b.loss_labels[:, 1:] != -100).sum()) for b in shards]
    denom = sum(tokens) / 2

    def shard_loss(replica, batch):
        inputs, targets = teacher_forcing(batch)
        return token_losses(replica(batch.images, inputs), targets)[0] / denom

    averaged = ddp_step_contract(replica_gradients(model, shards, shard_loss), world_size=2, shard_sizes=[16, 16])
    single = copy.deepcopy(model)
    inputs, targets = teacher_forcing(full)
    total, n = token_losses(single(full.images, inputs), targets)
    (total / n).backward()
    reference = torch.cat([p.grad.reshape(-1) for p in single.parameters()])
    assert rel_diff(torch.cat([g.reshape(-1) for g in averaged]), reference) <= 1e-5

    # and the resulting optimizer updates agree
    replica = copy.deepcopy(model)
    for p, g in zip(replica.parameters(), averaged):
        p.grad = g.clone()
    for m in (replica, single):
        torch.optim.AdamW(m.parameters(), lr=1e-3).step()
    assert rel_diff(flat_params(replica), flat_params(single)) <= 1e-5


def test_ddp_contract_edge_cases():
    g = [torch.ones(3), torch.zeros(2)]
    assert ddp_step_contract([g], 1) == g
    with pytest.raises(ShardMismatchError):
        ddp_step_contract([g, g], 2, shard_sizes=[16, 15])
    with pytest.raises(ValueError):
        ddp_step_contract([g], 2)
    out = ddp_step_contract([[torch.tensor([1.0])], [torch.tensor([3.0])]], 2)
    assert float(out[0]) == 2.0


def test_effective_batch_is_world_times_local(tokenizer, collator, records):
    cfg = TrainConfig(batch_size=32, world_size=4)
    trainer = Trainer.__new__(Trainer)
    trainer.cfg = cfg
    assert trainer.global_batch == 128


def test_world_size_must_match_group(tokenizer, collator, records):
    with pytest.raises(ValueError):
        make_trainer(tokenizer, collator, records[:8], batch_size=4, world_size=2)


def _spawn_target(rank, world, init_file, vocab, formulas, out):
    from _ddp_worker import run
    run(rank, world, init_file, vocab, formulas, out)


@pytest.mark.skipif(not torch.distributed.is_available(), reason="torch.distributed unavailable")
def test_two_process_gloo_matches_single_process(tmp_path, tokenizer, collator, formulas, records):
    out = tmp_path / "params.pt"
    mp.spawn(_spawn_target, args=(2, str(tmp_path / "init"), tokenizer.to_json(), formulas[:32], str(out)),
             nprocs=2, join=True)
    single = make_trainer(tokenizer, collator, records[:32], batch_size=32, epochs=1, max_steps=1)
    single.train()
    ddp = torch.cat([p.reshape(-1).double() for p in torch.load(out)])
    assert rel_diff(ddp, flat_params(single.model)) <= 1e-5


# --------------------------------------------------------------------------- loop contracts

def test_eval_records_at_interval(tmp_path, tokenizer, collator, records):
    trainer = make_trainer(tokenizer, collator, records[:40], records[40:44], tmp_path, batch_size=8, epochs=3,
                           eval_interval_steps=5)
    history = trainer.train()
    assert len(history.steps) == 15
    assert [e.step for e in history.evals] == [5, 10, 15]
    with open(tmp_path / "history.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [int(r["step"]) for r in rows if r["val_loss"]] == [5, 10, 15]
    assert [int(r["step"]) for r in rows] == list(range(1, 16))
    assert json.loads((tmp_path / "history.json").read_text())["best"]["step"] in (5, 10, 15)


def test_best_checkpoint_monotone(tmp_path, tokenizer, collator, records):
    trainer = make_trainer(tokenizer, collator, records[:16], records[:4], tmp_path, batch_size=8, epochs=6,
                           eval_interval_steps=2)
    history = trainer.train()
    trace = history.best_trace
    assert len(trace) == len(history.evals) == 6
    assert all(b <= a for a, b in zip(trace, trace[1:]))
    assert history.best.val_loss == min(e.val_loss for e in history.evals)
    config = json.loads((tmp_path / "best" / "config.json").read_text())
    assert config["extra"]["step"] == history.best.step
    assert config["extra"]["val_loss"] == history.best.val_loss


def test_default_warmup_is_five_percent(tokenizer, collator, records):
    trainer = make_trainer(tokenizer, collator, records[:40], batch_size=8, epochs=20, warmup_steps=None)
    assert trainer.total_steps == 100 and trainer.warmup_steps == 5


def test_ragged_tail_dropped_for_multiple_replicas(tokenizer, collator, records):
    trainer = make_trainer(tokenizer, collator, records[:20], batch_size=8)
    assert trainer.micro_batches_per_epoch() == 3
    trainer.cfg.world_size = 2
    assert trainer.micro_batches_per_epoch() == 1


def test_resume_matches_uninterrupted(tmp_path, tokenizer, collator, records):
    common = dict(batch_size=8, epochs=20, warmup_steps=5, lr=1e-3)
    full = make_trainer(tokenizer, collator, records[:16], max_steps=40, **common)
    full.train()
    first = make_trainer(tokenizer, collator, records[:16], out_dir=tmp_path / "a", max_steps=20, **common)
    first.train()
    resumed = make_trainer(tokenizer, collator, records[:16], out_dir=tmp_path / "b", seed=0, max_steps=40, **common)
    with torch.no_grad():  # start from different weights to prove they are restored
        for p in resumed.model.parameters():
            p.add_(1.0)
    resumed.train(resume_from=tmp_path / "a" / "last")
    assert resumed.step == 40
    assert rel_diff(flat_params(resumed.model), flat_params(full.model)) <= 1e-6
    assert [s.train_loss for s in resumed.history.steps] == pytest.approx([s.train_loss for s in full.history.steps],
                                                                          rel=1e-6)


def test_non_finite_loss_reports_last_good(tmp_path, tokenizer, collator, records):
    trainer = make_trainer(tokenizer, collator, records[:8], records[:2], tmp_path, batch_size=8, epochs=2,
                           eval_interval_steps=1, max_steps=1)
    trainer.train()
    with torch.no_grad():
        trainer.model.decoder.transformer.ln_f.weight.fill_(float("nan"))
    batch = collator(records[:8])
    batch.batch_id = "e9w9m0"
    with pytest.raises(NonFiniteLossError) as info:
        trainer.train_window([batch])
    assert info.value.batch_id == "e9w9m0"
    assert info.value.checkpoint == str(tmp_path / "best")


def test_finetune_requires_adapters(tokenizer, collator, records):
    with pytest.raises(ValueError):
        make_trainer(tokenizer, collator, records[:8], stage="finetune")


def test_finetune_stage_trains_only_adapters(tokenizer, collator, records):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        adapted = inject(toy_model(tokenizer))
    cfg = TrainConfig.for_stage("finetune", batch_size=8, max_steps=3, warmup_steps=0)
    trainer = Trainer(adapted, collator, records[:8], [], cfg)
    assert all(".lora_" in n for n, p in trainer.model.named_parameters() if p.requires_grad)
    assert len(trainer.params) == 2 * len(adapted.targets)
    trainer.train()


# --------------------------------------------------------------------------- precision and compilation

def test_highest_is_bitwise_reproducible(tokenizer, collator, records):
    runs = []
    for _ in range(2):
        t = make_trainer(tokenizer, collator, records[:16], batch_size=8, epochs=5, precision="highest")
        t.train()
        runs.append(flat_params(t.model))
    assert torch.equal(runs[0], runs[1])


def test_high_warns_off_accelerator(tokenizer, collator, records):
    with pytest.warns(RuntimeWarning, match="high"):
        t = make_trainer(tokenizer, collator, records[:8], batch_size=8, epochs=1, precision="high")
    t.train()
    assert len(t.history.steps) == 1


def test_unknown_policy():
    with pytest.raises(ValueError):
        apply_precision_policy("double")


def test_mixed_precision_close_to_full(tokenizer, collator, records):
    losses = {}
    for policy in ("highest", "mixed"):
        t = make_trainer(tokenizer, collator, records[:16], batch_size=8, epochs=25, max_steps=50, lr=1e-3,
                         warmup_steps=5, precision=policy)
        t.train()
        losses[policy] = [s.train_loss for s in t.history.steps]
    assert len(losses["mixed"]) == 50 and all(math.isfinite(x) for x in losses["mixed"])
    assert abs(losses["mixed"][-1] - losses["highest"][-1]) <= 0.05 * losses["highest"][-1]


def test_compile_hook_disabled_is_identity(model):
    assert compile_hook(model, enabled=False) is model


def test_compiled_model_equivalent(tokenizer):
    eager = toy_model(tokenizer).eval()
    compiled = compile_hook(copy.deepcopy(eager))
    gen = torch.Generator().manual_seed(0)
    with torch.no_grad():
        for i in range(20):  # one shape, so the graph compiles once
            images = random_images(2, seed=i)
            ids = torch.randint(0, tokenizer.vocab_size, (2, 9), generator=gen)
            assert rel_diff(compiled(images, ids), eager(images, ids)) <= 1e-4
    img = random_images(1, seed=99)[0]
    assert generate(compiled, img, tokenizer.bos_id, tokenizer.eos_id, 12) == \
        generate(eager, img, tokenizer.bos_id, tokenizer.eos_id, 12)


def test_dist_context_defaults():
    ctx = DistContext()
    assert not ctx.enabled and ctx.is_main and ctx.all_reduce_sum(3.0) == 3.0
