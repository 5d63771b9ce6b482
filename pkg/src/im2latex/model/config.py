"""Encoder/decoder configurations and the toy and full-scale presets."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field


class ModelConfigError(ValueError):
    pass


@dataclass
class EncoderConfig:
    input_side: int = 224
    patch_size: int = 4
    window_size: int = 7
    embed_dim: int = 128
    depths: list[int] = field(default_factory=lambda: [2, 2, 18, 2])
    num_heads: list[int] = field(default_factory=lambda: [4, 8, 16, 32])
    num_channels: int = 3
    mlp_ratio: float = 4.0
    qkv_bias: bool = True
    hidden_dropout: float = 0.0
    attention_dropout: float = 0.0
    drop_path_rate: float = 0.1
    layer_norm_eps: float = 1e-5

    @property
    def num_stages(self) -> int:
        return len(self.depths)

    @property
    def hidden_size(self) -> int:
        return self.embed_dim * 2 ** (self.num_stages - 1)

    @property
    def stage_resolutions(self) -> list[int]:
        grid = self.input_side // self.patch_size
        return [grid // 2 ** i for i in range(self.num_stages)]

    @property
    def sequence_length(self) -> int:
        """Number of visual tokens emitted by the final stage."""
        return self.stage_resolutions[-1] ** 2

    def validate(self) -> None:
        if len(self.depths) != len(self.num_heads) or not self.depths:
            raise ModelConfigError("depths and num_heads must be non-empty and the same length")
        step = self.patch_size * self.window_size
        if self.input_side % step:
            raise ModelConfigError(f"input_side {self.input_side} not divisible by patch*window = {step}")
        grid = self.input_side // self.patch_size
        if grid % 2 ** (self.num_stages - 1):
            raise ModelConfigError(f"patch grid {grid} cannot be halved {self.num_stages - 1} times")
        for res in self.stage_resolutions:
            if res > self.window_size and res % self.window_size:
                raise ModelConfigError(f"stage resolution {res} not divisible by window {self.window_size}")
        for i, heads in enumerate(self.num_heads):
            if (self.embed_dim * 2 ** i) % heads:
                raise ModelConfigError(f"stage {i} width not divisible by {heads} heads")


@dataclass
class DecoderConfig:
    vocab_size: int = 50257
    n_layers: int = 12
    n_heads: int = 12
    d_model: int = 768
    max_positions: int = 1024
    cross_attention: bool = True
    mlp_ratio: int = 4
    dropout: float = 0.1
    layer_norm_eps: float = 1e-5

    def validate(self) -> None:
        if not self.cross_attention:
            raise ModelConfigError("the decoder always cross-attends to the image")
        if self.d_model % self.n_heads:
            raise ModelConfigError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.vocab_size < 1 or self.max_positions < 2:
            raise ModelConfigError("vocab_size must be >= 1 and max_positions >= 2")


@dataclass
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    # "auto": learned linear bridge iff widths differ; "none": widths must match
    bridge: str = "auto"

    def validate(self) -> None:
        self.encoder.validate()
        self.decoder.validate()
        if self.bridge not in ("auto", "none"):
            raise ModelConfigError(f"bridge must be 'auto' or 'none', got {self.bridge!r}")
        if self.bridge == "none" and self.encoder.hidden_size != self.decoder.d_model:
            raise ModelConfigError(
                f"encoder width {self.encoder.hidden_size} != decoder width {self.decoder.d_model} and no projection")

    @property
    def has_bridge(self) -> bool:
        return self.encoder.hidden_size != self.decoder.d_model

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "ModelConfig":
        return cls(encoder=EncoderConfig(**doc["encoder"]), decoder=DecoderConfig(**doc["decoder"]),
                   bridge=doc.get("bridge", "auto"))


def toy_preset(vocab_size: int = 128) -> ModelConfig:
    return ModelConfig(
        encoder=EncoderConfig(input_side=56, embed_dim=32, depths=[2, 2], num_heads=[2, 4], drop_path_rate=0.0),
        decoder=DecoderConfig(vocab_size=vocab_size, n_layers=2, n_heads=4, d_model=64, max_positions=128,
                              dropout=0.0),
    )


def full_preset(vocab_size: int = 50257) -> ModelConfig:
    """swin-base-patch4-window7-224 encoder + gpt2 (base) decoder."""
    return ModelConfig(encoder=EncoderConfig(), decoder=DecoderConfig(vocab_size=vocab_size))


PRESETS = {"toy": toy_preset, "full": full_preset}


def preset(name: str, **kwargs) -> ModelConfig:
    try:
        return PRESETS[name](**kwargs)
    except KeyError:
        raise ModelConfigError(f"unknown preset {name!r}; expected one of {sorted(PRESETS)}") from None
