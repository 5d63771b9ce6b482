"""Hierarchical shifted-window vision encoder.

Module and parameter names follow the Hugging Face ``SwinModel`` layout
(``encoder.layers.{i}.blocks.{j}.attention.self.query`` ...), so published
Swin checkpoints load by name.
"""
from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn

from .config import EncoderConfig


def window_partition(x: torch.Tensor, window: int) -> torch.Tensor:
    """(B, H, W, C) -> (B * nW, window, window, C)."""
    b, h, w, c = x.shape
    x = x.view(b, h // window, window, w // window, window, c)
    return x.permute(0, 1, 3, 2, 4, 5).reshape(-1, window, window, c)


def window_reverse(windows: torch.Tensor, window: int, h: int, w: int) -> torch.Tensor:
    c = windows.shape[-1]
    b = windows.shape[0] // ((h // window) * (w // window))
    x = windows.view(b, h // window, w // window, window, window, c)
    return x.permute(0, 1, 3, 2, 4, 5).reshape(b, h, w, c)


def relative_position_index(window: int) -> torch.Tensor:
    coords = torch.stack(torch.meshgrid(torch.arange(window), torch.arange(window), indexing="ij"))
    flat = coords.flatten(1)
    rel = (flat[:, :, None] - flat[:, None, :]).permute(1, 2, 0)
    rel[:, :, 0] += window - 1
    rel[:, :, 1] += window - 1
    rel[:, :, 0] *= 2 * window - 1
    return rel.sum(-1)


def shifted_window_mask(h: int, w: int, window: int, shift: int) -> torch.Tensor:
    """Additive mask (nW, N, N) keeping attention inside each pre-shift region."""
    img = torch.zeros(1, h, w, 1)
    cnt = 0
    for hs in (slice(0, -window), slice(-window, -shift), slice(-shift, None)):
        for ws in (slice(0, -window), slice(-window, -shift), slice(-shift, None)):
            img[:, hs, ws, :] = cnt
            cnt += 1
    regions = window_partition(img, window).view(-1, window * window)
    mask = regions[:, None, :] - regions[:, :, None]
    return mask.masked_fill(mask != 0, -100.0).masked_fill(mask == 0, 0.0)


class SwinPatchEmbeddings(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.projection = nn.Conv2d(cfg.num_channels, cfg.embed_dim, kernel_size=cfg.patch_size, stride=cfg.patch_size)

    def forward(self, pixels):
        x = self.projection(pixels)
        h, w = x.shape[-2:]
        return x.flatten(2).transpose(1, 2), (h, w)


class SwinEmbeddings(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.patch_embeddings = SwinPatchEmbeddings(cfg)
        self.norm = nn.LayerNorm(cfg.embed_dim, eps=cfg.layer_norm_eps)
        self.dropout = nn.Dropout(cfg.hidden_dropout)

    def forward(self, pixels):
        x, hw = self.patch_embeddings(pixels)
        return self.dropout(self.norm(x)), hw


class SwinSelfAttention(nn.Module):
    def __init__(self, dim: int, heads: int, window: int, cfg: EncoderConfig):
        super().__init__()
        if dim % heads:
            raise ValueError(f"encoder width {dim} not divisible by {heads} heads")
        self.heads = heads
        self.head_dim = dim // heads
        self.window = window
        self.relative_position_bias_table = nn.Parameter(torch.zeros((2 * window - 1) ** 2, heads))
        self.register_buffer("relative_position_index", relative_position_index(window), persistent=False)
        self.query = nn.Linear(dim, dim, bias=cfg.qkv_bias)
        self.key = nn.Linear(dim, dim, bias=cfg.qkv_bias)
        self.value = nn.Linear(dim, dim, bias=cfg.qkv_bias)
        self.dropout = nn.Dropout(cfg.attention_dropout)

    def _split(self, x):
        b, n, _ = x.shape
        return x.view(b, n, self.heads, self.head_dim).transpose(1, 2)

    def forward(self, x, mask=None):
        b, n, c = x.shape
        q, k, v = self._split(self.query(x)), self._split(self.key(x)), self._split(self.value(x))
        scores = (q @ k.transpose(-2, -1)) / self.head_dim ** 0.5
        bias = self.relative_position_bias_table[self.relative_position_index.view(-1)]
        scores = scores + bias.view(n, n, -1).permute(2, 0, 1).unsqueeze(0)
        if mask is not None:
            nw = mask.shape[0]
            scores = scores.view(b // nw, nw, self.heads, n, n) + mask[None, :, None].to(scores.dtype)
            scores = scores.view(b, self.heads, n, n)
        probs = self.dropout(scores.softmax(dim=-1))
        return (probs @ v).transpose(1, 2).reshape(b, n, c)


class SwinSelfOutput(nn.Module):
    def __init__(self, dim: int, cfg: EncoderConfig):
        super().__init__()
        self.dense = nn.Linear(dim, dim)
        self.dropout = nn.Dropout(cfg.attention_dropout)

    def forward(self, x):
        return self.dropout(self.dense(x))


class SwinAttention(nn.Module):
    def __init__(self, dim, heads, window, cfg):
        super().__init__()
        self.self = SwinSelfAttention(dim, heads, window, cfg)
        self.output = SwinSelfOutput(dim, cfg)

    def forward(self, x, mask=None):
        return self.output(self.self(x, mask))


class SwinIntermediate(nn.Module):
    def __init__(self, dim, cfg):
        super().__init__()
        self.dense = nn.Linear(dim, int(cfg.mlp_ratio * dim))

    def forward(self, x):
        return F.gelu(self.dense(x))


class SwinOutput(nn.Module):
    def __init__(self, dim, cfg):
        super().__init__()
        self.dense = nn.Linear(int(cfg.mlp_ratio * dim), dim)
        self.dropout = nn.Dropout(cfg.hidden_dropout)

    def forward(self, x):
        return self.dropout(self.dense(x))


class DropPath(nn.Module):
    """Stochastic depth on the residual branch (per sample)."""

    def __init__(self, p: float):
        super().__init__()
        self.p = p

    def forward(self, x):
        if self.p == 0.0 or not self.training:
            return x
        keep = 1.0 - self.p
        noise = x.new_empty((x.shape[0],) + (1,) * (x.dim() - 1)).bernoulli_(keep)
        return x * noise / keep


class SwinLayer(nn.Module):
    def __init__(self, dim, resolution, heads, shift, cfg: EncoderConfig, drop_path: float):
        super().__init__()
        h, w = resolution
        window = cfg.window_size
        if min(h, w) <= window:
            # stage fits in one window: no shift, window shrinks to the grid
            window, shift = min(h, w), 0
        self.window = window
        self.shift = shift
        self.resolution = resolution
        self.layernorm_before = nn.LayerNorm(dim, eps=cfg.layer_norm_eps)
        self.attention = SwinAttention(dim, heads, window, cfg)
        self.drop_path = DropPath(drop_path)
        self.layernorm_after = nn.LayerNorm(dim, eps=cfg.layer_norm_eps)
        self.intermediate = SwinIntermediate(dim, cfg)
        self.output = SwinOutput(dim, cfg)
        if shift > 0:
            self.register_buffer("attn_mask", shifted_window_mask(h, w, window, shift), persistent=False)
        else:
            self.attn_mask = None

    def forward(self, x):
        h, w = self.resolution
        b, _, c = x.shape
        shortcut = x
        x = self.layernorm_before(x).view(b, h, w, c)
        if self.shift:
            x = torch.roll(x, shifts=(-self.shift, -self.shift), dims=(1, 2))
        windows = window_partition(x, self.window).view(-1, self.window * self.window, c)
        attended = self.attention(windows, self.attn_mask).view(-1, self.window, self.window, c)
        x = window_reverse(attended, self.window, h, w)
        if self.shift:
            x = torch.roll(x, shifts=(self.shift, self.shift), dims=(1, 2))
        x = shortcut + self.drop_path(x.reshape(b, h * w, c))
        return x + self.drop_path(self.output(self.intermediate(self.layernorm_after(x))))


class SwinPatchMerging(nn.Module):
    def __init__(self, resolution, dim, cfg):
        super().__init__()
        self.resolution = resolution
        self.reduction = nn.Linear(4 * dim, 2 * dim, bias=False)
        self.norm = nn.LayerNorm(4 * dim, eps=cfg.layer_norm_eps)

    def forward(self, x):
        h, w = self.resolution
        b, _, c = x.shape
        x = x.view(b, h, w, c)
        x = torch.cat([x[:, 0::2, 0::2], x[:, 1::2, 0::2], x[:, 0::2, 1::2], x[:, 1::2, 1::2]], dim=-1)
        return self.reduction(self.norm(x.view(b, -1, 4 * c)))


class SwinStage(nn.Module):
    def __init__(self, dim, resolution, depth, heads, cfg, drop_paths, downsample: bool):
        super().__init__()
        self.blocks = nn.ModuleList([
            SwinLayer(dim, resolution, heads, 0 if i % 2 == 0 else cfg.window_size // 2, cfg, drop_paths[i])
            for i in range(depth)
        ])
        self.downsample = SwinPatchMerging(resolution, dim, cfg) if downsample else None

    def forward(self, x):
        for block in self.blocks:
            x = block(x)
        if self.downsample is not None:
            x = self.downsample(x)
        return x


class SwinStack(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        grid = cfg.input_side // cfg.patch_size
        total = sum(cfg.depths)
        rates = [cfg.drop_path_rate * i / max(total - 1, 1) for i in range(total)]
        stages = []
        offset = 0
        for i, (depth, heads) in enumerate(zip(cfg.depths, cfg.num_heads)):
            res = grid // 2 ** i
            stages.append(SwinStage(cfg.embed_dim * 2 ** i, (res, res), depth, heads, cfg,
                                    rates[offset:offset + depth], downsample=i < cfg.num_stages - 1))
            offset += depth
        self.layers = nn.ModuleList(stages)

    def forward(self, x):
        for stage in self.layers:
            x = stage(x)
        return x


class SwinEncoder(nn.Module):
    """Image (B, 3, S, S) -> visual token sequence (B, L, hidden_size)."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        cfg.validate()
        self.config = cfg
        self.embeddings = SwinEmbeddings(cfg)
        self.encoder = SwinStack(cfg)
        self.layernorm = nn.LayerNorm(cfg.hidden_size, eps=cfg.layer_norm_eps)

    def forward(self, pixels: torch.Tensor) -> torch.Tensor:
        side = self.config.input_side
        if pixels.shape[-2:] != (side, side):
            raise ValueError(f"encoder expects {side}x{side} images, got {tuple(pixels.shape[-2:])}")
        x, _ = self.embeddings(pixels)
        return self.layernorm(self.encoder(x))
