"""Run configuration document (YAML) with ``section.key=value`` overrides.

Every field has a default, so an empty file is a valid configuration.
Unknown sections or keys are rejected by name.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import yaml

from .corpus import DEFAULT_MAX_ASPECT, DEFAULT_MAX_CHARS, DEFAULT_RATIOS
from .lora import DECODER_PATTERNS, ENCODER_PATTERNS, LoraConfig
from .model.config import DecoderConfig, EncoderConfig, ModelConfig, preset
from .preprocessing import DEFAULT_MAX_LEN, IMAGE_MEAN, IMAGE_STD
from .trainer import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class CorpusSection:
    profile: str | None = None  # None: printed for base, handwritten for finetune
    max_chars: int = DEFAULT_MAX_CHARS
    max_aspect: float = DEFAULT_MAX_ASPECT
    ratios: list[float] = field(default_factory=lambda: list(DEFAULT_RATIOS))


@dataclass
class PreprocessingSection:
    max_len: int = DEFAULT_MAX_LEN
    vocab: str = "train"  # "train" (toy BPE on the train split), "gpt2", or a vocab.json path
    num_merges: int = 1024
    mean: list[float] = field(default_factory=lambda: list(IMAGE_MEAN))
    std: list[float] = field(default_factory=lambda: list(IMAGE_STD))


@dataclass
class ModelSection:
    preset: str = "toy"
    init: str = "random"
    encoder: dict = field(default_factory=dict)
    decoder: dict = field(default_factory=dict)
    bridge: str = "auto"

    def build_config(self, vocab_size: int) -> ModelConfig:
        cfg = preset(self.preset)
        for key, value in self.encoder.items():
            setattr(cfg.encoder, key, value)
        for key, value in self.decoder.items():
            setattr(cfg.decoder, key, value)
        cfg.decoder.vocab_size = vocab_size
        cfg.bridge = self.bridge
        cfg.validate()
        return cfg


@dataclass
class LoraSection:
    r: int = 16
    alpha: float = 8.0
    dropout: float = 0.2
    target_patterns: list[str] = field(default_factory=lambda: [*ENCODER_PATTERNS, *DECODER_PATTERNS])

    def to_lora_config(self) -> LoraConfig:
        return LoraConfig(self.r, self.alpha, self.dropout, list(self.target_patterns))


@dataclass
class TrainerSection(TrainConfig):
    # None: take the stage default (or the top-level seed)
    lr: float | None = None
    epochs: int | None = None
    eval_interval_steps: int | None = None
    seed: int | None = None
    val_split: str = "val"


@dataclass
class EvalSection:
    strategy: str = "beam:4"
    split: str = "test"
    batch_size: int = 32


@dataclass
class RunConfig:
    seed: int = 0
    corpus: CorpusSection = field(default_factory=CorpusSection)
    preprocessing: PreprocessingSection = field(default_factory=PreprocessingSection)
    model: ModelSection = field(default_factory=ModelSection)
    lora: LoraSection = field(default_factory=LoraSection)
    trainer: TrainerSection = field(default_factory=TrainerSection)
    eval: EvalSection = field(default_factory=EvalSection)

    def train_config(self, stage: str) -> TrainConfig:
        """Trainer settings for ``stage``; stage defaults fill fields the document left unset."""
        cfg = TrainConfig.for_stage(stage, seed=self.seed)
        for f in dataclasses.fields(TrainConfig):
            value = getattr(self.trainer, f.name)
            if f.name != "stage" and value is not None:
                setattr(cfg, f.name, value)
        cfg.betas = tuple(cfg.betas)
        cfg.validate()
        return cfg


_NESTED_FREEFORM = {("model", "encoder"): EncoderConfig, ("model", "decoder"): DecoderConfig}


def _check_keys(section: str, cls, doc: dict) -> None:
    names = {f.name for f in dataclasses.fields(cls)}
    for key in doc:
        if key not in names:
            raise ConfigError(f"unknown key {section}.{key}" if section else f"unknown key {key}")


def from_dict(doc: dict | None) -> RunConfig:
    doc = doc or {}
    if not isinstance(doc, dict):
        raise ConfigError("configuration document must be a mapping")
    _check_keys("", RunConfig, doc)
    kwargs: dict[str, Any] = {}
    for f in dataclasses.fields(RunConfig):
        if f.name not in doc:
            continue
        value = doc[f.name]
        if f.name == "seed":
            kwargs["seed"] = int(value)
            continue
        cls = f.default_factory().__class__
        if not isinstance(value, dict):
            raise ConfigError(f"section {f.name} must be a mapping")
        _check_keys(f.name, cls, value)
        for (sec, key), inner in _NESTED_FREEFORM.items():
            if sec == f.name and key in value:
                _check_keys(f"{sec}.{key}", inner, value[key] or {})
        try:
            obj = cls(**value)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"section {f.name}: {exc}") from None
        kwargs[f.name] = obj
    return RunConfig(**kwargs)


def apply_overrides(doc: dict, overrides: Sequence[str]) -> dict:
    """Apply ``section.key=value`` strings (values parsed as YAML scalars)."""
    doc = dict(doc or {})
    for item in overrides:
        path, sep, raw = item.partition("=")
        if not sep or not path:
            raise ConfigError(f"override {item!r} is not of the form section.key=value")
        keys = path.split(".")
        node = doc
        for key in keys[:-1]:
            node = node.setdefault(key, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {item!r} descends into a non-mapping")
        node[keys[-1]] = yaml.safe_load(raw)
    return doc


def load_run_config(path: str | Path | None = None, overrides: Sequence[str] = ()) -> RunConfig:
    doc = {}
    if path is not None:
        text = Path(path).read_text(encoding="utf-8")
        doc = yaml.safe_load(text) or {}
    return from_dict(apply_overrides(doc, overrides))


def to_dict(cfg: RunConfig) -> dict:
    return dataclasses.asdict(cfg)
