"""Encoder-decoder assembly, seeded initialization, loss and parameter accounting."""
from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import nn

from ..preprocessing import IGNORE_INDEX, Batch
from .config import ModelConfig
from .gpt2 import GPT2Decoder
from .swin import SwinEncoder


class NonFiniteLossError(FloatingPointError):
    def __init__(self, batch_id, value: float, checkpoint=None):
        super().__init__(f"non-finite loss {value} on batch {batch_id}"
                         + (f"; last good checkpoint: {checkpoint}" if checkpoint else ""))
        self.batch_id = batch_id
        self.value = value
        self.checkpoint = checkpoint


class NoTargetsError(ValueError):
    """Every position in the batch is ignore-index, so the mean loss is undefined."""


class VisionEncoderDecoder(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        config.validate()
        self.config = config
        self.encoder = SwinEncoder(config.encoder)
        self.decoder = GPT2Decoder(config.decoder)
        if config.has_bridge:
            self.enc_to_dec_proj = nn.Linear(config.encoder.hidden_size, config.decoder.d_model)
        else:
            self.enc_to_dec_proj = None

    def encode_images(self, images: torch.Tensor) -> torch.Tensor:
        """(B, 3, S, S) -> cross-attention context (B, L, d_model)."""
        context = self.encoder(images)
        if self.enc_to_dec_proj is not None:
            context = self.enc_to_dec_proj(context)
        return context

    def decode(self, input_ids: torch.Tensor, context: torch.Tensor) -> torch.Tensor:
        return self.decoder(input_ids, context)

    def forward(self, images: torch.Tensor, input_ids: torch.Tensor) -> torch.Tensor:
        return self.decode(input_ids, self.encode_images(images))


def _init_weights(model: nn.Module, n_layers: int) -> None:
    for name, module in model.named_modules():
        if isinstance(module, (nn.Linear, nn.Conv2d)):
            nn.init.trunc_normal_(module.weight, std=0.02)
            if module.bias is not None:
                nn.init.zeros_(module.bias)
        elif isinstance(module, nn.Embedding):
            nn.init.normal_(module.weight, std=0.02)
        elif isinstance(module, nn.LayerNorm):
            nn.init.ones_(module.weight)
            nn.init.zeros_(module.bias)
    for name, p in model.named_parameters():
        if name.endswith("relative_position_bias_table"):
            nn.init.trunc_normal_(p, std=0.02)
        elif name.startswith("decoder.") and name.endswith("c_proj.weight"):
            # GPT-2 residual-projection scaling
            nn.init.normal_(p, std=0.02 / math.sqrt(2 * n_layers))


def build_model(config: ModelConfig, init: str = "random", seed: int = 0, device=None) -> VisionEncoderDecoder:
    """Assemble the model.  ``init`` is ``"random"`` (seeded) or ``"pretrained"``.

    Random initialization runs under a forked RNG so the global torch stream
    is untouched and equal seeds give bitwise-equal weights.
    """
    if init not in ("random", "pretrained"):
        raise ValueError(f"init must be 'random' or 'pretrained', got {init!r}")
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        if device is not None and torch.device(device).type == "meta":
            with torch.device("meta"):
                return VisionEncoderDecoder(config)
        model = VisionEncoderDecoder(config)
        _init_weights(model, config.decoder.n_layers)
    if init == "pretrained":
        from .pretrained import load_pretrained_backbones
        load_pretrained_backbones(model)
    if device is not None:
        model.to(device)
    return model


def token_losses(logits: torch.Tensor, targets: torch.Tensor) -> tuple[torch.Tensor, int]:
    """Summed cross-entropy over non-ignored targets and the number of such targets."""
    n = int((targets != IGNORE_INDEX).sum())
    if logits.dtype in (torch.float16, torch.bfloat16):
        logits = logits.float()
    total = F.cross_entropy(logits.reshape(-1, logits.shape[-1]), targets.reshape(-1),
                            ignore_index=IGNORE_INDEX, reduction="sum")
    return total, n


def teacher_forcing(batch: Batch) -> tuple[torch.Tensor, torch.Tensor]:
    """Decoder inputs (labels without their last column) and next-token targets."""
    return batch.labels[:, :-1], batch.loss_labels[:, 1:]


def forward(model: nn.Module, batch: Batch) -> tuple[torch.Tensor, torch.Tensor]:
    """Logits (B, T-1, V) and mean token cross-entropy for a batch."""
    inputs, targets = teacher_forcing(batch)
    logits = model(batch.images, inputs)
    total, n = token_losses(logits, targets)
    if n == 0:
        raise NoTargetsError(f"batch {batch.batch_id}: no positions carry a loss label")
    loss = total / n
    if not torch.isfinite(loss):
        raise NonFiniteLossError(batch.batch_id, loss.item())
    return logits, loss


def count_parameters(model: nn.Module, trainable_only: bool = False) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad or not trainable_only)


def parameter_registry(model: nn.Module) -> dict[str, tuple[tuple[int, ...], bool]]:
    """name -> (shape, trainable) for every registered parameter."""
    return {n: (tuple(p.shape), p.requires_grad) for n, p in model.named_parameters()}
