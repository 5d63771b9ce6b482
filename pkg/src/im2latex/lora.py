"""Low-rank adapters: injection, accounting, merging and adapter-only checkpoints."""
from __future__ import annotations

import copy
import hashlib
import json
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import torch
import torch.nn.functional as F
from torch import nn

ENCODER_PATTERNS = ("attn.qkv", "attn.proj", "mlp.fc1", "mlp.fc2")
DECODER_PATTERNS = ("c_attn", "c_proj", "c_fc", "attn.c_proj")
ADAPTER_FORMAT = "im2latex-lora/1"


class LoraConfigError(ValueError):
    pass


@dataclass
class LoraConfig:
    r: int = 16
    alpha: float = 8.0
    dropout: float = 0.2
    target_patterns: list[str] = field(default_factory=lambda: [*ENCODER_PATTERNS, *DECODER_PATTERNS])

    def __post_init__(self):
        if self.r < 1:
            raise LoraConfigError(f"r must be >= 1, got {self.r}")
        if not 0.0 <= self.dropout < 1.0:
            raise LoraConfigError(f"dropout must be in [0, 1), got {self.dropout}")

    @property
    def scaling(self) -> float:
        return self.alpha / self.r


def matches(name: str, pattern: str) -> bool:
    """Suffix match on dotted module names: ``pattern`` equals the name or its tail."""
    return name == pattern or name.endswith("." + pattern)


class LoraLinear(nn.Module):
    """``base(x) + scaling * B(A(dropout(x)))`` with ``base`` frozen."""

    def __init__(self, base: nn.Linear, r: int, alpha: float, dropout: float, generator: torch.Generator | None = None):
        super().__init__()
        self.base_layer = base
        self.r = r
        self.scaling = alpha / r
        d_in, d_out = base.in_features, base.out_features
        device, dtype = base.weight.device, base.weight.dtype
        self.lora_A = nn.Parameter(torch.empty(r, d_in, device=device, dtype=dtype))
        self.lora_B = nn.Parameter(torch.zeros(d_out, r, device=device, dtype=dtype))
        self.lora_dropout = nn.Dropout(dropout) if dropout > 0 else nn.Identity()
        if device.type != "meta":
            bound = 1.0 / math.sqrt(d_in)
            with torch.no_grad():
                a = torch.rand(r, d_in, generator=generator, dtype=torch.float64) * (2 * bound) - bound
                self.lora_A.copy_(a.to(dtype))
        for p in base.parameters():
            p.requires_grad_(False)

    @property
    def in_features(self) -> int:
        return self.base_layer.in_features

    @property
    def out_features(self) -> int:
        return self.base_layer.out_features

    def forward(self, x):
        return self.base_layer(x) + self.scaling * F.linear(F.linear(self.lora_dropout(x), self.lora_A), self.lora_B)

    def merged_linear(self) -> nn.Linear:
        base = self.base_layer
        out = nn.Linear(base.in_features, base.out_features, bias=base.bias is not None,
                        device=base.weight.device, dtype=base.weight.dtype)
        with torch.no_grad():
            delta = self.scaling * (self.lora_B.double() @ self.lora_A.double())
            out.weight.copy_((base.weight.double() + delta).to(base.weight.dtype))
            if base.bias is not None:
                out.bias.copy_(base.bias)
        return out


def _set_submodule(root: nn.Module, name: str, module: nn.Module) -> None:
    parent, _, leaf = name.rpartition(".")
    setattr(root.get_submodule(parent) if parent else root, leaf, module)


class AdaptedModel(nn.Module):
    """A base model with frozen weights and trainable low-rank adapters."""

    def __init__(self, base: nn.Module, cfg: LoraConfig, targets: list[str]):
        super().__init__()
        self.base = base
        self.lora_config = cfg
        self.targets = targets

    @property
    def config(self):
        return self.base.config

    def encode_images(self, images):
        return self.base.encode_images(images)

    def decode(self, input_ids, context):
        return self.base.decode(input_ids, context)

    def forward(self, images, input_ids):
        return self.base(images, input_ids)

    def adapters(self) -> dict[str, LoraLinear]:
        return {n: self.base.get_submodule(n) for n in self.targets}

    def adapter_state_dict(self) -> dict[str, torch.Tensor]:
        out = {}
        for name, mod in self.adapters().items():
            out[f"{name}.lora_A"] = mod.lora_A.detach().clone()
            out[f"{name}.lora_B"] = mod.lora_B.detach().clone()
        return out

    def base_parameters(self) -> dict[str, torch.Tensor]:
        return {n: p for n, p in self.base.named_parameters() if ".lora_" not in n}


def inject(model: nn.Module, cfg: LoraConfig | None = None, seed: int = 0) -> AdaptedModel:
    """Wrap every ``nn.Linear`` whose name suffix-matches a target pattern.

    Mutates ``model`` in place (the returned object holds it as ``.base``);
    deep-copy first to keep an untouched base.  All base parameters are
    frozen.  Patterns matching nothing are reported with a warning; matching
    nothing at all is an error.
    """
    cfg = cfg or LoraConfig()
    linear_names = [n for n, m in model.named_modules() if isinstance(m, nn.Linear)]
    targets = [n for n in linear_names if any(matches(n, p) for p in cfg.target_patterns)]
    unmatched = [p for p in cfg.target_patterns if not any(matches(n, p) for n in linear_names)]
    if not targets:
        raise LoraConfigError(f"no linear submodule matches any of {list(cfg.target_patterns)}")
    if unmatched:
        warnings.warn(f"LoRA patterns matched no module: {unmatched}", stacklevel=2)
    for p in model.parameters():
        p.requires_grad_(False)
    gen = torch.Generator().manual_seed(seed)
    for name in targets:
        base = model.get_submodule(name)
        _set_submodule(model, name, LoraLinear(base, cfg.r, cfg.alpha, cfg.dropout, gen))
    return AdaptedModel(model, cfg, targets)


def trainable_count(adapted: AdaptedModel) -> int:
    return sum(p.numel() for p in adapted.parameters() if p.requires_grad)


def expected_trainable_count(adapted: AdaptedModel) -> int:
    """Closed form: sum over targets of r * (d_in + d_out)."""
    return sum(m.r * (m.in_features + m.out_features) for m in adapted.adapters().values())


def merge(model: nn.Module) -> nn.Module:
    """Fold adapters into their base weights and return a plain, fully trainable copy.

    A model without adapters is returned unchanged, so merging is idempotent.
    """
    if not isinstance(model, AdaptedModel):
        return model
    base = copy.deepcopy(model.base)
    for name in model.targets:
        _set_submodule(base, name, base.get_submodule(name).merged_linear())
    for p in base.parameters():
        p.requires_grad_(True)
    return base


def base_hash(model: nn.Module) -> str:
    """SHA-256 over the frozen base weights (names, shapes and bytes, sorted by name)."""
    if isinstance(model, AdaptedModel):
        params = model.base_parameters()
        params = {n.replace(".base_layer", ""): p for n, p in params.items()}
    else:
        params = dict(model.named_parameters())
    h = hashlib.sha256()
    for name in sorted(params):
        t = params[name].detach().cpu().contiguous()
        h.update(name.encode())
        h.update(str(tuple(t.shape)).encode())
        h.update(t.numpy().tobytes())
    return h.hexdigest()


def save_adapters(adapted: AdaptedModel, path: str | Path) -> None:
    from safetensors.torch import save_file

    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    meta = {"format": ADAPTER_FORMAT, "config": asdict(adapted.lora_config),
            "targets": adapted.targets, "base_sha256": base_hash(adapted)}
    (path / "adapter_config.json").write_text(json.dumps(meta, indent=2) + "\n")
    save_file(adapted.adapter_state_dict(), str(path / "adapters.safetensors"))


def load_adapters(model: nn.Module, path: str | Path) -> AdaptedModel:
    """Inject and fill adapters saved by :func:`save_adapters` onto a matching base."""
    from safetensors.torch import load_file

    path = Path(path)
    meta = json.loads((path / "adapter_config.json").read_text())
    if meta.get("format") != ADAPTER_FORMAT:
        raise LoraConfigError(f"unsupported adapter format {meta.get('format')!r}")
    digest = base_hash(model)
    if digest != meta["base_sha256"]:
        raise LoraConfigError(f"base weights hash {digest[:12]} does not match adapter base {meta['base_sha256'][:12]}")
    cfg = LoraConfig(**meta["config"])
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        adapted = inject(model, cfg)
    if adapted.targets != meta["targets"]:
        raise LoraConfigError("adapter targets do not match the base model's modules")
    state = load_file(str(path / "adapters.safetensors"))
    with torch.no_grad():
        for name, mod in adapted.adapters().items():
            mod.lora_A.copy_(state[f"{name}.lora_A"])
            mod.lora_B.copy_(state[f"{name}.lora_B"])
    return adapted
