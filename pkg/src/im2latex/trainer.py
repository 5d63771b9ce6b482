"""Two-stage training loop: base training and LoRA fine-tuning.

One optimizer step consumes ``accum_steps`` micro-batches per replica.  The
summed token loss of a window is divided by the window's token count
(divided by the world size), so accumulated and data-parallel updates equal
the single large-batch update exactly, whatever the sequence lengths.
"""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .corpus import FormulaRecord
from .distributed import DistContext
from .evaluation import evaluate_model
from .lora import AdaptedModel
from .model.checkpoint import PreprocessSettings, load_training_state, save_checkpoint
from .model.core import NonFiniteLossError, NoTargetsError, teacher_forcing, token_losses
from .precision import PrecisionContext, apply_precision_policy, compile_hook
from .preprocessing import Collator

log = logging.getLogger(__name__)

STAGE_DEFAULTS = {
    "base": {"lr": 1e-4, "epochs": 10, "eval_interval_steps": 200},
    "finetune": {"lr": 2e-4, "epochs": 40, "eval_interval_steps": 40},
}


@dataclass
class TrainConfig:
    stage: str = "base"
    batch_size: int = 32
    lr: float = 1e-4
    epochs: int = 10
    eval_interval_steps: int = 200
    clip_norm: float = 1.0
    accum_steps: int = 1
    warmup_steps: int | None = None  # None: 5% of all optimizer steps
    precision: str = "highest"
    world_size: int = 1
    seed: int = 0
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    eval_max_items: int = 512
    eval_batch_size: int = 32
    eval_strategy: str = "greedy"
    max_steps: int | None = None  # stop early (schedule still spans all epochs)
    compile: bool = False
    num_workers: int = 0
    device: str = "cpu"

    @classmethod
    def for_stage(cls, stage: str, **overrides) -> "TrainConfig":
        if stage not in STAGE_DEFAULTS:
            raise ValueError(f"stage must be one of {sorted(STAGE_DEFAULTS)}, got {stage!r}")
        return cls(**{"stage": stage, **STAGE_DEFAULTS[stage], **overrides})

    def validate(self) -> None:
        if self.stage not in STAGE_DEFAULTS:
            raise ValueError(f"stage must be one of {sorted(STAGE_DEFAULTS)}, got {self.stage!r}")
        for name in ("batch_size", "lr", "epochs", "eval_interval_steps", "clip_norm", "accum_steps",
                     "world_size", "eval_max_items", "eval_batch_size"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.warmup_steps is not None and self.warmup_steps < 0:
            raise ValueError("warmup_steps must be >= 0")


# --------------------------------------------------------------------------- schedule and clipping

def linear_warmup_lr(step: int, warmup: int, total: int, base_lr: float) -> float:
    """Linear ramp 0 -> base_lr over ``warmup`` steps, then linear decay to 0 at ``total``."""
    if step < warmup:
        return base_lr * (step / warmup)
    if total <= warmup:
        return 0.0
    return max(0.0, base_lr * ((total - step) / (total - warmup)))


def clip_gradients(grads: Sequence[torch.Tensor], max_norm: float) -> tuple[list[torch.Tensor], float]:
    """Scale all gradients in place so their global L2 norm is at most ``max_norm``.

    Returns the gradients and the norm measured before clipping.
    """
    grads = [g for g in grads if g is not None]
    if not grads:
        return [], 0.0
    norm = float(torch.linalg.vector_norm(torch.stack([torch.linalg.vector_norm(g.double()) for g in grads])))
    if not math.isfinite(norm):
        raise FloatingPointError(f"non-finite gradient norm {norm}")
    if norm > max_norm:
        scale = max_norm / norm
        for g in grads:
            g.mul_(scale)
    return grads, norm


# --------------------------------------------------------------------------- history

@dataclass
class StepRecord:
    step: int
    lr: float
    train_loss: float
    grad_norm: float


@dataclass
class EvalRecord:
    step: int
    val_loss: float
    val_gleu: float


@dataclass
class BestRecord:
    step: int
    val_loss: float
    checkpoint: str


@dataclass
class TrainHistory:
    steps: list[StepRecord] = field(default_factory=list)
    evals: list[EvalRecord] = field(default_factory=list)
    best: BestRecord | None = None
    best_trace: list[float] = field(default_factory=list)  # best val loss after each eval

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainHistory":
        return cls(steps=[StepRecord(**s) for s in doc["steps"]], evals=[EvalRecord(**e) for e in doc["evals"]],
                   best=BestRecord(**doc["best"]) if doc.get("best") else None,
                   best_trace=list(doc.get("best_trace", [])))

    def write_csv(self, path: str | Path) -> None:
        evals = {e.step: e for e in self.evals}
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "lr", "train_loss", "grad_norm", "val_loss", "val_gleu"])
            for s in self.steps:
                e = evals.get(s.step)
                w.writerow([s.step, f"{s.lr:.8g}", f"{s.train_loss:.8g}", f"{s.grad_norm:.8g}",
                            f"{e.val_loss:.8g}" if e else "", f"{e.val_gleu:.8g}" if e else ""])

    def write_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n")


# --------------------------------------------------------------------------- trainer

def resolve_device(name: str) -> torch.device:
    if name == "auto":
        return torch.device("cuda" if torch.cuda.is_available() else "cpu")
    return torch.device(name)


class Trainer:
    """Runs :class:`TrainConfig` against a model (or LoRA-adapted model).

    Checkpoints go to ``out_dir/best`` (lowest validation loss) and
    ``out_dir/last`` (resumable, written when the run stops).  The history
    lands in ``out_dir/history.csv`` and ``out_dir/history.json``.
    """

    def __init__(self, model: torch.nn.Module, collator: Collator, train_records: Sequence[FormulaRecord],
                 val_records: Sequence[FormulaRecord], cfg: TrainConfig, out_dir: str | Path | None = None,
                 dist_ctx: DistContext | None = None):
        cfg.validate()
        if cfg.stage == "finetune" and not isinstance(model, AdaptedModel):
            raise ValueError("finetune stage expects a LoRA-adapted model")
        if not train_records:
            raise ValueError("no training records")
        self.cfg = cfg
        self.dist = dist_ctx or DistContext()
        if self.dist.world_size != cfg.world_size:
            raise ValueError(f"config world_size {cfg.world_size} != process group size {self.dist.world_size}")
        self.device = resolve_device(cfg.device)
        self.model = model.to(self.device)
        self.collator = collator
        self.train_records = list(train_records)
        self.val_records = list(val_records)[:cfg.eval_max_items]
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.params = [p for p in self.model.parameters() if p.requires_grad]
        self.optimizer = torch.optim.AdamW(self.params, lr=cfg.lr, betas=cfg.betas, eps=cfg.eps,
                                           weight_decay=cfg.weight_decay)
        self.precision: PrecisionContext = apply_precision_policy(cfg.precision, self.device)
        compile_hook(self.model, enabled=cfg.compile)
        self.history = TrainHistory()
        self.step = 0
        self.epoch = 0
        self.window = 0  # next accumulation window within the epoch
        self.data_seed = cfg.seed  # shuffle seed; a resumed run keeps the checkpointed one

    # -- data plan

    @property
    def global_batch(self) -> int:
        return self.cfg.batch_size * self.cfg.world_size

    def micro_batches_per_epoch(self) -> int:
        n = len(self.train_records)
        if self.cfg.world_size == 1:
            return math.ceil(n / self.cfg.batch_size)
        count = n // self.global_batch  # equal shards: drop the ragged tail
        if count == 0:
            raise ValueError(f"{n} records cannot fill one global batch of {self.global_batch}")
        return count

    def windows_per_epoch(self) -> int:
        return math.ceil(self.micro_batches_per_epoch() / self.cfg.accum_steps)

    @property
    def total_steps(self) -> int:
        return self.cfg.epochs * self.windows_per_epoch()

    @property
    def warmup_steps(self) -> int:
        if self.cfg.warmup_steps is not None:
            return self.cfg.warmup_steps
        return int(0.05 * self.total_steps)

    def epoch_order(self, epoch: int) -> np.ndarray:
        return np.random.default_rng([self.data_seed, epoch]).permutation(len(self.train_records))

    def window_shards(self, epoch: int, window: int) -> list[list[int]]:
        """This replica's record indices for each micro-batch of a window."""
        order = self.epoch_order(epoch)
        n_micro = self.micro_batches_per_epoch()
        first = window * self.cfg.accum_steps
        shards = []
        for m in range(first, min(first + self.cfg.accum_steps, n_micro)):
            glob = order[m * self.global_batch:(m + 1) * self.global_batch]
            if self.cfg.world_size > 1:
                glob = glob[self.dist.rank * self.cfg.batch_size:(self.dist.rank + 1) * self.cfg.batch_size]
            shards.append([int(i) for i in glob])
        return shards

    def _collate(self, indices: list[int], tag: str):
        batch = self.collator([self.train_records[i] for i in indices])
        batch.batch_id = tag
        return batch.to(self.device)

    # -- one optimizer step

    def train_window(self, batches) -> tuple[float, float]:
        """Accumulate gradients over ``batches`` and take one optimizer step.

        Returns (window mean token loss, pre-clip gradient norm).
        """
        local_tokens = sum(int((b.loss_labels[:, 1:] != -100).sum()) for b in batches)
        global_tokens = self.dist.all_reduce_sum(float(local_tokens))
        if global_tokens == 0:
            raise NoTargetsError("accumulation window has no target tokens")
        denom = global_tokens / self.cfg.world_size
        self.optimizer.zero_grad(set_to_none=True)
        loss_sum = 0.0
        for batch in batches:
            inputs, targets = teacher_forcing(batch)
            with self.precision.autocast():
                logits = self.model(batch.images, inputs)
            total, _ = token_losses(logits, targets)
            if not torch.isfinite(total):
                raise NonFiniteLossError(batch.batch_id, float(total), self._last_good())
            self.precision.backward(total / denom)
            loss_sum += float(total.detach())
        self.dist.average_gradients(self.params)
        scaler = self.precision.scaler
        if scaler is not None:
            scaler.unscale_(self.optimizer)
        grads = [p.grad for p in self.params if p.grad is not None]
        try:
            _, norm = clip_gradients(grads, self.cfg.clip_norm)
        except FloatingPointError:
            if scaler is None:
                raise NonFiniteLossError(batches[0].batch_id, float("nan"), self._last_good()) from None
            norm = float("inf")  # scaler skips this step and lowers its scale
        lr = linear_warmup_lr(self.step, self.warmup_steps, self.total_steps, self.cfg.lr)
        for group in self.optimizer.param_groups:
            group["lr"] = lr
        if scaler is not None:
            scaler.step(self.optimizer)
            scaler.update()
        else:
            self.optimizer.step()
        self.step += 1
        mean_loss = self.dist.all_reduce_sum(loss_sum) / global_tokens
        self.history.steps.append(StepRecord(self.step, lr, mean_loss, norm))
        return mean_loss, norm

    # -- evaluation and checkpoints

    def _last_good(self) -> str | None:
        if self.history.best is not None:
            return self.history.best.checkpoint
        return None

    def preprocess_settings(self) -> PreprocessSettings:
        c = self.collator
        return PreprocessSettings(side=c.side, max_len=c.max_len, mean=c.mean, std=c.std)

    def evaluate(self):
        if not self.val_records:
            return None
        result = evaluate_model(self.model, self.val_records, self.collator, self.cfg.eval_strategy,
                                batch_size=self.cfg.eval_batch_size, device=self.device)
        record = EvalRecord(self.step, result.mean_loss, result.gleu)
        self.history.evals.append(record)
        best = self.history.best
        if best is None or record.val_loss < best.val_loss:
            path = self.out_dir / "best" if self.out_dir else None
            if path is not None:
                save_checkpoint(path, self.model, self.collator.tokenizer, self.preprocess_settings(),
                                extra={"step": self.step, "val_loss": record.val_loss, "stage": self.cfg.stage})
            self.history.best = BestRecord(self.step, record.val_loss, str(path) if path else "")
        self.history.best_trace.append(self.history.best.val_loss)
        log.info("step %d: val_loss %.4f val_gleu %.4f", self.step, record.val_loss, record.val_gleu)
        return record

    def training_state(self) -> dict:
        return {
            "step": self.step,
            "epoch": self.epoch,
            "window": self.window,
            "data_seed": self.data_seed,
            "optimizer": self.optimizer.state_dict(),
            "scaler": self.precision.scaler.state_dict() if self.precision.scaler is not None else None,
            "torch_rng": torch.get_rng_state(),
            "history": self.history.to_dict(),
            "config": asdict(self.cfg),
        }

    def save_last(self) -> Path | None:
        if self.out_dir is None or not self.dist.is_main:
            return None
        return save_checkpoint(self.out_dir / "last", self.model, self.collator.tokenizer, self.preprocess_settings(),
                               training_state=self.training_state(), extra={"step": self.step, "stage": self.cfg.stage})

    def restore(self, checkpoint_dir: str | Path) -> None:
        """Load parameters and optimizer/data position from a ``last`` checkpoint."""
        from safetensors.torch import load_file

        state = load_training_state(checkpoint_dir)
        if state is None:
            raise FileNotFoundError(f"{checkpoint_dir} has no training_state.pt")
        params = load_file(str(Path(checkpoint_dir) / "model.safetensors"))
        self.model.load_state_dict({k: v.to(self.device) for k, v in params.items()})
        self.optimizer.load_state_dict(state["optimizer"])
        if state["scaler"] is not None and self.precision.scaler is not None:
            self.precision.scaler.load_state_dict(state["scaler"])
        torch.set_rng_state(state["torch_rng"])
        self.step, self.epoch, self.window = state["step"], state["epoch"], state["window"]
        self.data_seed = state.get("data_seed", state["config"]["seed"])
        if self.data_seed != self.cfg.seed:
            log.warning("resuming with the checkpoint's data seed %d (config seed %d ignored)",
                        self.data_seed, self.cfg.seed)
        self.history = TrainHistory.from_dict(state["history"])

    # -- main loop

    def train(self, resume_from: str | Path | None = None) -> TrainHistory:
        if resume_from is not None:
            self.restore(resume_from)
        else:
            torch.manual_seed(self.cfg.seed)
        self.model.train()
        stop = self.cfg.max_steps
        while self.epoch < self.cfg.epochs:
            while self.window < self.windows_per_epoch():
                if stop is not None and self.step >= stop:
                    return self._finish()
                shards = self.window_shards(self.epoch, self.window)
                if self.cfg.world_size > 1:
                    self.dist.check_shard_sizes(len(shards[0]))
                batches = [self._collate(s, f"e{self.epoch}w{self.window}m{i}") for i, s in enumerate(shards)]
                self.train_window(batches)
                self.window += 1
                if self.step % self.cfg.eval_interval_steps == 0:
                    if self.dist.is_main:
                        self.evaluate()
                        self.model.train()
                    self.dist.barrier()
            self.epoch += 1
            self.window = 0
        return self._finish()

    def _finish(self) -> TrainHistory:
        if self.out_dir is not None and self.dist.is_main:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            self.save_last()
            self.history.write_csv(self.out_dir / "history.csv")
            self.history.write_json(self.out_dir / "history.json")
        self.dist.barrier()
        return self.history


def train_epochs(model, collator: Collator, train_records, val_records, cfg: TrainConfig,
                 out_dir=None, resume_from=None, dist_ctx: DistContext | None = None) -> TrainHistory:
    return Trainer(model, collator, train_records, val_records, cfg, out_dir, dist_ctx).train(resume_from)
