"""Numeric precision policies and the optional compilation hook."""
from __future__ import annotations

import contextlib
import logging
import warnings
from dataclasses import dataclass

import torch

log = logging.getLogger(__name__)

POLICIES = ("highest", "high", "mixed")


@dataclass
class PrecisionContext:
    policy: str
    device_type: str
    autocast_dtype: torch.dtype | None = None
    scaler: torch.amp.GradScaler | None = None

    def autocast(self):
        if self.autocast_dtype is None:
            return contextlib.nullcontext()
        return torch.autocast(self.device_type, dtype=self.autocast_dtype)

    def backward(self, loss: torch.Tensor) -> None:
        (self.scaler.scale(loss) if self.scaler is not None else loss).backward()


def apply_precision_policy(policy: str = "highest", device="cpu") -> PrecisionContext:
    """Configure float32 matmul precision and, for ``mixed``, autocast plus loss scaling.

    ``high`` only changes anything on hardware with reduced-mantissa float32
    matmuls (TF32 / bf16x3); elsewhere it warns and runs at full precision.
    """
    if policy not in POLICIES:
        raise ValueError(f"precision policy must be one of {POLICIES}, got {policy!r}")
    device_type = torch.device(device).type
    if policy == "high":
        if device_type != "cuda":
            warnings.warn("precision 'high' has no reduced-precision matmul path on this device; "
                          "running at full float32", RuntimeWarning, stacklevel=2)
        torch.set_float32_matmul_precision("high")
        return PrecisionContext(policy, device_type)
    torch.set_float32_matmul_precision("highest")
    if policy == "highest":
        return PrecisionContext(policy, device_type)
    if device_type == "cuda" and not torch.cuda.is_bf16_supported():
        dtype = torch.float16
    else:
        dtype = torch.bfloat16
    return PrecisionContext(policy, device_type, dtype, torch.amp.GradScaler(device_type))


def compile_hook(model: torch.nn.Module, enabled: bool = True, backend: str = "inductor") -> torch.nn.Module:
    """Compile encoder and decoder in place; parameter names are unchanged.

    Returns the model untouched when disabled or when ``torch.compile`` is
    unavailable.  Compilation is lazy, so the first forward pays for it.
    """
    if not enabled:
        return model
    if not hasattr(torch, "compile"):
        warnings.warn("torch.compile unavailable; using the eager model", RuntimeWarning, stacklevel=2)
        return model
    core = getattr(model, "base", model)
    core.encoder.compile(backend=backend)
    core.decoder.compile(backend=backend, dynamic=True)
    return model
