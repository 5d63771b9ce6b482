"""Corpus evaluation of a model and the multi-model comparison table.

Prediction and reference files are UTF-8 with one ``id<TAB>latex`` line per item.
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import torch

from .corpus import FormulaRecord
from .gleu import GleuStats, metric_tokens, sentence_stats
from .model.core import teacher_forcing, token_losses
from .model.generation import GREEDY, Strategy, beam_search, greedy_batch
from .preprocessing import Collator


class AlignmentError(ValueError):
    def __init__(self, name: str, missing: list[str], extra: list[str]):
        parts = []
        if missing:
            parts.append(f"missing ids {missing[:20]}")
        if extra:
            parts.append(f"unexpected ids {extra[:20]}")
        super().__init__(f"{name}: " + "; ".join(parts))
        self.missing = missing
        self.extra = extra


@dataclass
class ItemResult:
    id: str
    reference: str
    prediction: str
    match_count: int
    hyp_ngrams: int
    ref_ngrams: int

    @property
    def stats(self) -> GleuStats:
        return GleuStats(self.match_count, self.hyp_ngrams, self.ref_ngrams)

    @property
    def gleu(self) -> float:
        return self.stats.score


@dataclass
class EvalResult:
    mean_loss: float
    gleu: float
    items: list[ItemResult]

    def write_predictions(self, path: str | Path) -> None:
        write_tsv(path, [(it.id, it.prediction) for it in self.items])

    def write_audit(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for it in self.items:
                fh.write(json.dumps({**asdict(it), "gleu": it.gleu}, ensure_ascii=False) + "\n")


def score_items(ids: Sequence[str], predictions: Sequence[str], references: Sequence[str]) -> tuple[float, list[ItemResult]]:
    items = []
    total = GleuStats()
    for i, hyp, ref in zip(ids, predictions, references):
        st = sentence_stats(metric_tokens(hyp), metric_tokens(ref))
        total = total + st
        items.append(ItemResult(i, ref, hyp, st.match_count, st.hyp_ngrams, st.ref_ngrams))
    if not items:
        raise ValueError("nothing to score")
    return total.score, items


@torch.no_grad()
def evaluate_model(model, records: Sequence[FormulaRecord], collator: Collator, strategy: Strategy | str = GREEDY,
                   batch_size: int = 32, gen_max_len: int | None = None, device="cpu",
                   with_loss: bool = True) -> EvalResult:
    """Teacher-forced mean loss and corpus GLEU of generated LaTeX, in record order."""
    if isinstance(strategy, str):
        strategy = Strategy.parse(strategy)
    tok = collator.tokenizer
    gen_max_len = gen_max_len or min(collator.max_len, model.config.decoder.max_positions)
    was_training = model.training
    model.eval()
    loss_sum, n_tokens = 0.0, 0
    predictions: list[str] = []
    try:
        for start in range(0, len(records), batch_size):
            chunk = list(records[start:start + batch_size])
            batch = collator(chunk).to(device)
            if with_loss:
                inputs, targets = teacher_forcing(batch)
                total, n = token_losses(model(batch.images, inputs), targets)
                loss_sum += float(total)
                n_tokens += n
            if strategy.kind == "greedy":
                seqs = greedy_batch(model, batch.images, tok.bos_id, tok.eos_id, gen_max_len)
            else:
                seqs = [beam_search(model, img, tok.bos_id, tok.eos_id, gen_max_len, strategy.beams,
                                    strategy.length_alpha) for img in batch.images]
            predictions.extend(tok.decode(s) for s in seqs)
    finally:
        model.train(was_training)
    score, items = score_items([r.id for r in records], predictions, [r.latex for r in records])
    mean_loss = loss_sum / n_tokens if n_tokens else float("nan")
    return EvalResult(mean_loss, score, items)


# --------------------------------------------------------------------------- files and comparison

def write_tsv(path: str | Path, rows: Sequence[tuple[str, str]]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for rid, text in rows:
            fh.write(f"{rid}\t{' '.join(text.split())}\n")


def read_tsv(path: str | Path) -> dict[str, str]:
    out: dict[str, str] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n").rstrip("\r")
            if not line:
                continue
            rid, sep, text = line.partition("\t")
            if not sep or not rid:
                raise ValueError(f"{path}:{lineno}: expected id<TAB>latex")
            if rid in out:
                raise ValueError(f"{path}:{lineno}: duplicate id {rid!r}")
            out[rid] = text
    return out


@dataclass
class ComparisonRow:
    model_name: str
    gleu: float
    n_items: int


@dataclass
class Comparison:
    rows: list[ComparisonRow]
    items: dict[str, list[ItemResult]]

    def table(self) -> str:
        width = max([len("Model")] + [len(r.model_name) for r in self.rows])
        lines = [f"{'Model':<{width}}  Google BLEU  n_items", f"{'-' * width}  -----------  -------"]
        lines += [f"{r.model_name:<{width}}  {r.gleu:11.4f}  {r.n_items:7d}" for r in self.rows]
        return "\n".join(lines)

    def csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["model", "gleu", "n_items"])
        for r in self.rows:
            writer.writerow([r.model_name, f"{r.gleu:.6f}", r.n_items])
        return buf.getvalue()


def benchmark_compare(prediction_files: Sequence[tuple[str, str | Path]], reference_path: str | Path) -> Comparison:
    """Score each model's prediction file against the references; rows sorted by GLEU, best first."""
    refs = read_tsv(reference_path)
    ids = list(refs)
    rows, per_model = [], {}
    for name, path in prediction_files:
        preds = read_tsv(path)
        missing = [i for i in ids if i not in preds]
        extra = [i for i in preds if i not in refs]
        if missing or extra:
            raise AlignmentError(name, missing, extra)
        score, items = score_items(ids, [preds[i] for i in ids], [refs[i] for i in ids])
        rows.append(ComparisonRow(name, score, len(items)))
        per_model[name] = items
    rows.sort(key=lambda r: (-r.gleu, r.model_name))
    return Comparison(rows, per_model)
