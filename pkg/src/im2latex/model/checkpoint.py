"""Checkpoint directories.

Layout (format ``im2latex-checkpoint/1``)::

    config.json          model configs, preprocessing constants, vocabulary reference, LoRA config
    model.safetensors    parameters, indexed by name
    manifest.json        name -> shape, dtype, trainable
    vocab.json           tokenizer (see LatexTokenizer.to_json)
    training_state.pt    optimizer moments, scheduler step, data position, RNG states (optional)
"""
from __future__ import annotations

import json
import warnings
from dataclasses import asdict, dataclass
from pathlib import Path

import torch

from ..lora import AdaptedModel, LoraConfig, inject
from ..preprocessing import DEFAULT_MAX_LEN, IMAGE_MEAN, IMAGE_STD, LatexTokenizer
from .config import ModelConfig
from .core import build_model

FORMAT = "im2latex-checkpoint/1"


class CheckpointMismatchError(ValueError):
    def __init__(self, field: str, expected, found):
        super().__init__(f"checkpoint field {field!r} mismatch: expected {expected!r}, found {found!r}")
        self.field = field


@dataclass
class PreprocessSettings:
    side: int = 224
    max_len: int = DEFAULT_MAX_LEN
    mean: tuple[float, float, float] = IMAGE_MEAN
    std: tuple[float, float, float] = IMAGE_STD


@dataclass
class LoadedCheckpoint:
    model: torch.nn.Module
    tokenizer: LatexTokenizer
    preprocess: PreprocessSettings
    config: ModelConfig
    lora: LoraConfig | None
    path: Path
    meta: dict


def save_checkpoint(path: str | Path, model: torch.nn.Module, tokenizer: LatexTokenizer,
                    preprocess: PreprocessSettings, training_state: dict | None = None, extra: dict | None = None) -> Path:
    from safetensors.torch import save_file

    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    lora = model.lora_config if isinstance(model, AdaptedModel) else None
    doc = {
        "format": FORMAT,
        "model": model.config.to_dict(),
        "preprocessing": asdict(preprocess),
        "vocab": {"file": "vocab.json", "name": tokenizer.name, "size": tokenizer.vocab_size},
        "lora": asdict(lora) if lora else None,
        "lora_targets": model.targets if lora else None,
        "extra": extra or {},
    }
    (path / "config.json").write_text(json.dumps(doc, indent=2) + "\n")
    state = {k: v.detach().contiguous().cpu() for k, v in model.state_dict().items()}
    save_file(state, str(path / "model.safetensors"))
    trainable = {n: p.requires_grad for n, p in model.named_parameters()}
    manifest = {n: {"shape": list(t.shape), "dtype": str(t.dtype).replace("torch.", ""),
                    "trainable": trainable.get(n, False)} for n, t in state.items()}
    (path / "manifest.json").write_text(json.dumps(manifest, indent=1) + "\n")
    tokenizer.save(path / "vocab.json")
    if training_state is not None:
        torch.save(training_state, path / "training_state.pt")
    elif (path / "training_state.pt").exists():
        (path / "training_state.pt").unlink()
    return path


def read_config(path: str | Path) -> dict:
    cfg_file = Path(path) / "config.json"
    if not cfg_file.exists():
        raise FileNotFoundError(f"no checkpoint at {path} (missing config.json)")
    doc = json.loads(cfg_file.read_text())
    if doc.get("format") != FORMAT:
        raise CheckpointMismatchError("format", FORMAT, doc.get("format"))
    return doc


def load_checkpoint(path: str | Path, device="cpu", expect: ModelConfig | None = None) -> LoadedCheckpoint:
    """Rebuild the model (with adapters when present) and its tokenizer.

    Raises :class:`CheckpointMismatchError` naming the first inconsistent
    field, both internally (vocabulary vs decoder, image side vs encoder)
    and against ``expect`` when given.
    """
    from safetensors.torch import load_file

    path = Path(path)
    doc = read_config(path)
    config = ModelConfig.from_dict(doc["model"])
    pre = doc["preprocessing"]
    preprocess = PreprocessSettings(side=pre["side"], max_len=pre["max_len"], mean=tuple(pre["mean"]),
                                    std=tuple(pre["std"]))
    tokenizer = LatexTokenizer.load(path / doc["vocab"]["file"])
    if tokenizer.vocab_size != config.decoder.vocab_size:
        raise CheckpointMismatchError("decoder.vocab_size", tokenizer.vocab_size, config.decoder.vocab_size)
    if preprocess.side != config.encoder.input_side:
        raise CheckpointMismatchError("encoder.input_side", preprocess.side, config.encoder.input_side)
    if expect is not None:
        for section in ("encoder", "decoder"):
            want, got = asdict(getattr(expect, section)), asdict(getattr(config, section))
            for key in want:
                if want[key] != got[key]:
                    raise CheckpointMismatchError(f"{section}.{key}", want[key], got[key])
    model = build_model(config, seed=0)
    lora = None
    if doc.get("lora"):
        lora = LoraConfig(**doc["lora"])
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            model = inject(model, lora)
        if model.targets != doc["lora_targets"]:
            raise CheckpointMismatchError("lora_targets", doc["lora_targets"], model.targets)
    state = load_file(str(path / "model.safetensors"))
    missing, unexpected = model.load_state_dict(state, strict=False)
    if missing or unexpected:
        raise CheckpointMismatchError("parameters", "matching names",
                                      f"missing={missing[:3]} unexpected={unexpected[:3]}")
    model.to(device)
    model.eval()
    return LoadedCheckpoint(model, tokenizer, preprocess, config, lora, path, doc)


def load_training_state(path: str | Path) -> dict | None:
    f = Path(path) / "training_state.pt"
    if not f.exists():
        return None
    return torch.load(f, map_location="cpu", weights_only=False)
