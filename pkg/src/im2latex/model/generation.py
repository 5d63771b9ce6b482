"""Autoregressive decoding: batched greedy and length-normalized beam search."""
from __future__ import annotations

from dataclasses import dataclass

import torch


@dataclass(frozen=True)
class Strategy:
    kind: str = "greedy"
    beams: int = 1
    length_alpha: float = 0.6

    @classmethod
    def parse(cls, spec: str) -> "Strategy":
        """``"greedy"``, ``"beam"`` (k=4) or ``"beam:K"``."""
        spec = spec.strip().lower()
        if spec == "greedy":
            return cls()
        if spec == "beam":
            return cls("beam", 4)
        if spec.startswith("beam:"):
            k = int(spec.split(":", 1)[1])
            if k < 1:
                raise ValueError("beam width must be >= 1")
            return cls("beam", k)
        raise ValueError(f"unknown decoding strategy {spec!r}")

    def __str__(self) -> str:
        return "greedy" if self.kind == "greedy" else f"beam:{self.beams}"


GREEDY = Strategy()


def length_penalty(length: int, alpha: float) -> float:
    return ((5.0 + length) / 6.0) ** alpha


@torch.no_grad()
def greedy_batch(model, images: torch.Tensor, bos_id: int, eos_id: int, max_len: int) -> list[list[int]]:
    """Greedy decoding for a batch of images; each output starts with BOS and
    ends with EOS unless ``max_len`` was reached first."""
    if max_len < 2:
        raise ValueError("max_len must be >= 2")
    context = model.encode_images(images)
    b = images.shape[0]
    seqs = torch.full((b, 1), bos_id, dtype=torch.long, device=images.device)
    done = torch.zeros(b, dtype=torch.bool, device=images.device)
    while seqs.shape[1] < max_len and not bool(done.all()):
        logits = model.decode(seqs, context)[:, -1]
        nxt = logits.argmax(dim=-1)
        nxt = torch.where(done, torch.full_like(nxt, eos_id), nxt)
        seqs = torch.cat([seqs, nxt[:, None]], dim=1)
        done |= nxt == eos_id
    out = []
    for row in seqs.tolist():
        if eos_id in row[1:]:
            row = row[:row.index(eos_id, 1) + 1]
        out.append(row)
    return out


@torch.no_grad()
def beam_search(model, image: torch.Tensor, bos_id: int, eos_id: int, max_len: int, beams: int = 4,
                alpha: float = 0.6) -> list[int]:
    """Beam search for one image (3, S, S).

    Alive hypotheses are ranked by raw log-probability; finished ones by
    log-probability / ((5 + len) / 6) ** alpha.  Stops once ``beams``
    hypotheses have finished or ``max_len`` is reached.
    """
    if max_len < 2:
        raise ValueError("max_len must be >= 2")
    context = model.encode_images(image[None])
    alive: list[tuple[list[int], float]] = [([bos_id], 0.0)]
    finished: list[tuple[float, list[int]]] = []
    while alive and len(finished) < beams and len(alive[0][0]) < max_len:
        seqs = torch.tensor([s for s, _ in alive], dtype=torch.long, device=image.device)
        logprobs = model.decode(seqs, context.expand(len(alive), -1, -1))[:, -1].float().log_softmax(-1)
        scores = torch.tensor([sc for _, sc in alive], device=image.device)[:, None] + logprobs
        top_scores, top_idx = scores.view(-1).topk(min(2 * beams, scores.numel()))
        vocab = logprobs.shape[-1]
        next_alive = []
        for score, idx in zip(top_scores.tolist(), top_idx.tolist()):
            parent, token = divmod(idx, vocab)
            seq = alive[parent][0] + [token]
            if token == eos_id:
                finished.append((score / length_penalty(len(seq) - 1, alpha), seq))
                if len(finished) >= beams:
                    break
            else:
                next_alive.append((seq, score))
                if len(next_alive) == beams:
                    break
        alive = next_alive
    if finished:
        return max(finished, key=lambda f: f[0])[1]
    return max(alive, key=lambda a: a[1] / length_penalty(len(a[0]) - 1, alpha))[0]


def generate(model, image: torch.Tensor, bos_id: int, eos_id: int, max_len: int,
             strategy: Strategy | str = GREEDY) -> list[int]:
    """Decode one image tensor (3, S, S) into token ids."""
    if isinstance(strategy, str):
        strategy = Strategy.parse(strategy)
    was_training = model.training
    model.eval()
    try:
        if strategy.kind == "greedy":
            return greedy_batch(model, image[None], bos_id, eos_id, max_len)[0]
        return beam_search(model, image, bos_id, eos_id, max_len, strategy.beams, strategy.length_alpha)
    finally:
        model.train(was_training)
