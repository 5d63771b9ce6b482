"""Causal text decoder with per-block cross-attention (GPT-2 layout).

Parameter names mirror ``GPT2LMHeadModel`` with ``add_cross_attention``.
The projections are ``nn.Linear`` (weight is out x in), the transpose of
GPT-2's ``Conv1D``; :mod:`im2latex.model.pretrained` handles the flip.
The output head is tied to the token embedding.
"""
from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import nn

from .config import DecoderConfig


def _heads(x: torch.Tensor, n_heads: int) -> torch.Tensor:
    b, t, d = x.shape
    return x.view(b, t, n_heads, d // n_heads).transpose(1, 2)


def _merge(x: torch.Tensor) -> torch.Tensor:
    b, h, t, d = x.shape
    return x.transpose(1, 2).reshape(b, t, h * d)


def _attend(q, k, v, dropout: nn.Dropout, causal: bool):
    scores = (q @ k.transpose(-2, -1)) / math.sqrt(q.shape[-1])
    if causal:
        t, s = scores.shape[-2:]
        keep = torch.ones(t, s, dtype=torch.bool, device=scores.device).tril(s - t)
        scores = scores.masked_fill(~keep, torch.finfo(scores.dtype).min)
    return dropout(scores.softmax(dim=-1)) @ v


class GPT2Attention(nn.Module):
    def __init__(self, cfg: DecoderConfig, cross: bool = False):
        super().__init__()
        d = cfg.d_model
        self.n_heads = cfg.n_heads
        self.cross = cross
        if cross:
            self.c_attn = nn.Linear(d, 2 * d)  # keys and values from image tokens
            self.q_attn = nn.Linear(d, d)
        else:
            self.c_attn = nn.Linear(d, 3 * d)
        self.c_proj = nn.Linear(d, d)
        self.attn_dropout = nn.Dropout(cfg.dropout)
        self.resid_dropout = nn.Dropout(cfg.dropout)

    def forward(self, x, context=None):
        if self.cross:
            q = self.q_attn(x)
            k, v = self.c_attn(context).chunk(2, dim=-1)
        else:
            q, k, v = self.c_attn(x).chunk(3, dim=-1)
        out = _attend(_heads(q, self.n_heads), _heads(k, self.n_heads), _heads(v, self.n_heads),
                      self.attn_dropout, causal=not self.cross)
        return self.resid_dropout(self.c_proj(_merge(out)))


class GPT2MLP(nn.Module):
    def __init__(self, cfg: DecoderConfig):
        super().__init__()
        self.c_fc = nn.Linear(cfg.d_model, cfg.mlp_ratio * cfg.d_model)
        self.c_proj = nn.Linear(cfg.mlp_ratio * cfg.d_model, cfg.d_model)
        self.dropout = nn.Dropout(cfg.dropout)

    def forward(self, x):
        return self.dropout(self.c_proj(F.gelu(self.c_fc(x), approximate="tanh")))


class GPT2Block(nn.Module):
    def __init__(self, cfg: DecoderConfig):
        super().__init__()
        d, eps = cfg.d_model, cfg.layer_norm_eps
        self.ln_1 = nn.LayerNorm(d, eps=eps)
        self.attn = GPT2Attention(cfg)
        self.ln_cross_attn = nn.LayerNorm(d, eps=eps)
        self.crossattention = GPT2Attention(cfg, cross=True)
        self.ln_2 = nn.LayerNorm(d, eps=eps)
        self.mlp = GPT2MLP(cfg)

    def forward(self, x, context):
        x = x + self.attn(self.ln_1(x))
        x = x + self.crossattention(self.ln_cross_attn(x), context)
        return x + self.mlp(self.ln_2(x))


class GPT2Transformer(nn.Module):
    def __init__(self, cfg: DecoderConfig):
        super().__init__()
        self.wte = nn.Embedding(cfg.vocab_size, cfg.d_model)
        self.wpe = nn.Embedding(cfg.max_positions, cfg.d_model)
        self.drop = nn.Dropout(cfg.dropout)
        self.h = nn.ModuleList([GPT2Block(cfg) for _ in range(cfg.n_layers)])
        self.ln_f = nn.LayerNorm(cfg.d_model, eps=cfg.layer_norm_eps)

    def forward(self, input_ids, context):
        t = input_ids.shape[1]
        pos = torch.arange(t, device=input_ids.device)
        x = self.drop(self.wte(input_ids) + self.wpe(pos))
        for block in self.h:
            x = block(x, context)
        return self.ln_f(x)


class GPT2Decoder(nn.Module):
    def __init__(self, cfg: DecoderConfig):
        super().__init__()
        cfg.validate()
        self.config = cfg
        self.transformer = GPT2Transformer(cfg)

    def forward(self, input_ids: torch.Tensor, context: torch.Tensor) -> torch.Tensor:
        """Token ids (B, T) and image tokens (B, L, d_model) -> logits (B, T, vocab)."""
        if input_ids.shape[1] > self.config.max_positions:
            raise ValueError(f"sequence length {input_ids.shape[1]} exceeds max_positions {self.config.max_positions}")
        hidden = self.transformer(input_ids, context)
        return hidden @ self.transformer.wte.weight.t()
