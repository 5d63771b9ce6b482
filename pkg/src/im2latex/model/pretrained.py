"""Thin hook for initializing from published Swin / GPT-2 weights.

Downloads need network access to the Hugging Face hub; everything else in
the package works offline with random initialization.
"""
from __future__ import annotations

import logging
import re

import torch

log = logging.getLogger(__name__)

SWIN_REPO = "microsoft/swin-base-patch4-window7-224-in22k"
GPT2_REPO = "gpt2"

# newer transformers releases renamed Swin attention/MLP parameters
_SWIN_RENAMES = [
    (r"\.attention\.q_proj\.", ".attention.self.query."),
    (r"\.attention\.k_proj\.", ".attention.self.key."),
    (r"\.attention\.v_proj\.", ".attention.self.value."),
    (r"\.attention\.o_proj\.", ".attention.output.dense."),
    (r"\.attention\.relative_position_bias\.relative_position_bias_table$",
     ".attention.self.relative_position_bias_table"),
    (r"\.mlp\.fc1\.", ".intermediate.dense."),
    (r"\.mlp\.fc2\.", ".output.dense."),
]
_CONV1D = re.compile(r"\.(c_attn|c_proj|c_fc|q_attn)\.weight$")


def convert_swin_state(state: dict[str, torch.Tensor]) -> dict[str, torch.Tensor]:
    """Hugging Face Swin checkpoint keys -> :class:`SwinEncoder` keys."""
    out = {}
    for key, value in state.items():
        if key.startswith("classifier.") or "relative_position_index" in key or key.startswith("pooler"):
            continue
        key = key.removeprefix("swin.")
        for pattern, repl in _SWIN_RENAMES:
            key = re.sub(pattern, repl, key)
        out[key] = value
    return out


def convert_gpt2_state(state: dict[str, torch.Tensor]) -> dict[str, torch.Tensor]:
    """GPT-2 checkpoint keys -> :class:`GPT2Decoder` keys (Conv1D weights transposed)."""
    out = {}
    for key, value in state.items():
        if key.startswith("lm_head.") or key.endswith((".attn.bias", ".attn.masked_bias")):
            continue
        if not key.startswith("transformer."):
            key = "transformer." + key
        if _CONV1D.search(key):
            value = value.t().contiguous()
        out[key] = value
    return out


def _fetch(repo: str) -> dict[str, torch.Tensor]:
    from huggingface_hub import hf_hub_download
    from safetensors.torch import load_file

    return load_file(hf_hub_download(repo, "model.safetensors"))


def load_into(module: torch.nn.Module, state: dict[str, torch.Tensor], label: str) -> list[str]:
    """Copy matching tensors; returns the names left at their initial values."""
    own = module.state_dict()
    loaded = []
    with torch.no_grad():
        for key, value in state.items():
            if key in own and own[key].shape == value.shape:
                own[key].copy_(value)
                loaded.append(key)
    untouched = sorted(set(own) - set(loaded))
    log.info("%s: loaded %d tensors, %d left at init", label, len(loaded), len(untouched))
    return untouched


def load_pretrained_backbones(model, swin_repo: str = SWIN_REPO, gpt2_repo: str = GPT2_REPO) -> None:
    """Initialize encoder and decoder from the hub; cross-attention stays random."""
    load_into(model.encoder, convert_swin_state(_fetch(swin_repo)), swin_repo)
    load_into(model.decoder, convert_gpt2_state(_fetch(gpt2_repo)), gpt2_repo)
