"""Image tensors, LaTeX tokenization and batch collation."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .corpus import FormulaRecord

# Swin backbone published normalization (ImageNet statistics).
IMAGE_MEAN = (0.485, 0.456, 0.406)
IMAGE_STD = (0.229, 0.224, 0.225)
IGNORE_INDEX = -100
DEFAULT_MAX_LEN = 512
SIDE_MULTIPLE = 28  # patch 4 x window 7

VOCAB_FORMAT = "im2latex-bpe/1"
TOY_SPECIALS = ("<pad>", "<s>", "</s>")
GPT2_SPECIAL = "<|endoftext|>"


def preprocess_image(image: np.ndarray, side: int = 224, mean: Sequence[float] = IMAGE_MEAN,
                     std: Sequence[float] = IMAGE_STD) -> torch.Tensor:
    """Pixel grid -> normalized float tensor of shape (3, side, side).

    Grayscale is replicated to three channels and alpha is composited over
    white (rendered formulas are often transparent PNGs).  Integer input is
    scaled by 1/255; float input is taken to be on the same 0..255 scale.
    """
    if side % SIDE_MULTIPLE:
        raise ValueError(f"side must be divisible by {SIDE_MULTIPLE}, got {side}")
    arr = np.asarray(image)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3 or arr.shape[0] == 0 or arr.shape[1] == 0:
        raise ValueError(f"expected a non-empty HxW or HxWxC pixel grid, got shape {arr.shape}")
    x = torch.from_numpy(arr.astype(np.float32) / 255.0)
    channels = x.shape[2]
    if channels == 4:
        alpha = x[:, :, 3:4]
        x = x[:, :, :3] * alpha + (1.0 - alpha)
    elif channels == 2:
        alpha = x[:, :, 1:2]
        x = x[:, :, :1] * alpha + (1.0 - alpha)
    if x.shape[2] == 1:
        x = x.expand(-1, -1, 3)
    x = x.permute(2, 0, 1).unsqueeze(0)
    if x.shape[-2:] != (side, side):
        x = F.interpolate(x, size=(side, side), mode="bilinear", align_corners=False, antialias=True)
    x = x.squeeze(0)
    mean_t = torch.tensor(mean, dtype=torch.float32).view(3, 1, 1)
    std_t = torch.tensor(std, dtype=torch.float32).view(3, 1, 1)
    return (x - mean_t) / std_t


class LatexTokenizer:
    """Byte-level BPE tokenizer with BOS/EOS/PAD bookkeeping.

    Wraps a ``tokenizers.Tokenizer``; the byte-level alphabet guarantees
    every string encodes and decodes losslessly.
    """

    def __init__(self, backend, bos: str, eos: str, pad: str, name: str = "custom"):
        self.backend = backend
        self.name = name
        self.bos_token, self.eos_token, self.pad_token = bos, eos, pad
        self.bos_id = backend.token_to_id(bos)
        self.eos_id = backend.token_to_id(eos)
        self.pad_id = backend.token_to_id(pad)
        if None in (self.bos_id, self.eos_id, self.pad_id):
            raise ValueError("special tokens missing from vocabulary")
        self.truncated = 0

    @property
    def vocab_size(self) -> int:
        return self.backend.get_vocab_size()

    @classmethod
    def train(cls, texts: Iterable[str], num_merges: int = 1024) -> "LatexTokenizer":
        from tokenizers import Tokenizer, decoders, models, pre_tokenizers, trainers

        if not 0 <= num_merges <= 1024:
            raise ValueError("toy vocabularies use at most 1024 merges")
        backend = Tokenizer(models.BPE())
        backend.pre_tokenizer = pre_tokenizers.ByteLevel(add_prefix_space=False)
        backend.decoder = decoders.ByteLevel()
        alphabet = pre_tokenizers.ByteLevel.alphabet()
        trainer = trainers.BpeTrainer(
            vocab_size=len(TOY_SPECIALS) + len(alphabet) + num_merges,
            special_tokens=list(TOY_SPECIALS),
            initial_alphabet=alphabet,
            show_progress=False,
        )
        backend.train_from_iterator(list(texts), trainer)
        return cls(backend, "<s>", "</s>", "<pad>", name="toy-bpe")

    @classmethod
    def gpt2(cls) -> "LatexTokenizer":
        """GPT-2's pretrained vocabulary (downloads from the Hugging Face hub)."""
        from tokenizers import Tokenizer

        backend = Tokenizer.from_pretrained("gpt2")
        return cls(backend, GPT2_SPECIAL, GPT2_SPECIAL, GPT2_SPECIAL, name="gpt2")

    def encode(self, latex: str, max_len: int = DEFAULT_MAX_LEN) -> list[int]:
        if max_len < 2:
            raise ValueError("max_len must leave room for BOS and EOS")
        body = self.backend.encode(latex, add_special_tokens=False).ids
        if len(body) > max_len - 2:
            self.truncated += 1
            body = body[:max_len - 2]
        return [self.bos_id, *body, self.eos_id]

    def decode(self, ids: Sequence[int]) -> str:
        ids = [int(i) for i in ids]
        size = self.vocab_size
        bad = [i for i in ids if not 0 <= i < size]
        if bad:
            raise ValueError(f"token ids outside vocabulary of size {size}: {bad[:5]}")
        if ids and ids[0] == self.bos_id:
            ids = ids[1:]
        if self.eos_id in ids:
            ids = ids[:ids.index(self.eos_id)]
        ids = [i for i in ids if i != self.pad_id]
        return self.backend.decode(ids, skip_special_tokens=False)

    def to_json(self) -> str:
        return json.dumps({
            "format": VOCAB_FORMAT,
            "name": self.name,
            "bos": self.bos_token,
            "eos": self.eos_token,
            "pad": self.pad_token,
            "tokenizer": json.loads(self.backend.to_str()),
        }, ensure_ascii=False)

    @classmethod
    def from_json(cls, text: str) -> "LatexTokenizer":
        from tokenizers import Tokenizer

        doc = json.loads(text)
        if doc.get("format") != VOCAB_FORMAT:
            raise ValueError(f"unsupported vocabulary format {doc.get('format')!r}")
        backend = Tokenizer.from_str(json.dumps(doc["tokenizer"]))
        return cls(backend, doc["bos"], doc["eos"], doc["pad"], name=doc.get("name", "custom"))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "LatexTokenizer":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))


def tokenize(tokenizer: LatexTokenizer, latex: str, max_len: int = DEFAULT_MAX_LEN) -> list[int]:
    return tokenizer.encode(latex, max_len)


def detokenize(tokenizer: LatexTokenizer, ids: Sequence[int]) -> str:
    return tokenizer.decode(ids)


@dataclass
class Batch:
    images: torch.Tensor          # (B, 3, S, S)
    labels: torch.Tensor          # (B, T) token ids, PAD on the right
    label_mask: torch.Tensor      # (B, T) True on real tokens
    loss_labels: torch.Tensor     # labels with IGNORE_INDEX at padding
    ids: list[str] = field(default_factory=list)
    batch_id: str | None = None

    def __len__(self) -> int:
        return self.labels.shape[0]

    def to(self, device) -> "Batch":
        return Batch(self.images.to(device), self.labels.to(device), self.label_mask.to(device),
                     self.loss_labels.to(device), self.ids, self.batch_id)

    def unpadded(self) -> list[list[int]]:
        return [row[mask].tolist() for row, mask in zip(self.labels, self.label_mask)]


def pad_sequences(seqs: Sequence[Sequence[int]], pad_id: int) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    width = max(len(s) for s in seqs)
    labels = torch.full((len(seqs), width), pad_id, dtype=torch.long)
    mask = torch.zeros((len(seqs), width), dtype=torch.bool)
    for r, s in enumerate(seqs):
        labels[r, :len(s)] = torch.as_tensor(list(s), dtype=torch.long)
        mask[r, :len(s)] = True
    loss_labels = labels.masked_fill(~mask, IGNORE_INDEX)
    return labels, mask, loss_labels


class Collator:
    """Turns a list of records into a padded :class:`Batch`.

    Picklable, so it can run inside DataLoader worker processes.
    """

    def __init__(self, tokenizer: LatexTokenizer, side: int = 224, max_len: int = DEFAULT_MAX_LEN,
                 mean: Sequence[float] = IMAGE_MEAN, std: Sequence[float] = IMAGE_STD):
        self.tokenizer = tokenizer
        self.side = side
        self.max_len = max_len
        self.mean = tuple(mean)
        self.std = tuple(std)

    def __getstate__(self):
        state = dict(self.__dict__)
        state["tokenizer"] = self.tokenizer.to_json()
        return state

    def __setstate__(self, state):
        state["tokenizer"] = LatexTokenizer.from_json(state["tokenizer"])
        self.__dict__.update(state)

    def __call__(self, records: Sequence[FormulaRecord]) -> Batch:
        if not records:
            raise ValueError("cannot collate an empty record list")
        images = torch.stack([preprocess_image(r.pixels(), self.side, self.mean, self.std) for r in records])
        seqs = [self.tokenizer.encode(r.latex, self.max_len) for r in records]
        labels, mask, loss_labels = pad_sequences(seqs, self.tokenizer.pad_id)
        return Batch(images, labels, mask, loss_labels, ids=[r.id for r in records])


def collate(records: Sequence[FormulaRecord], tokenizer: LatexTokenizer, max_len: int = DEFAULT_MAX_LEN,
            side: int = 224) -> Batch:
    return Collator(tokenizer, side=side, max_len=max_len)(records)
