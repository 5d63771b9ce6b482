"""Corpus ingestion: LaTeX cleaning, record filtering and deterministic splits.

On-disk corpus layout::

    <corpus>/index.tsv          id<TAB>relative_image_path<TAB>latex   (UTF-8)
    <corpus>/images/...         8-bit PNG files referenced by the index
    <corpus>/splits/{train,val,test}.txt   optional upstream split, one id per line

The printed profile is cleaned and filtered, then split with :func:`split_dataset`.
The handwritten profile is cleaned only; its split ships with the corpus.
"""
from __future__ import annotations

import json
import logging
import math
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image

log = logging.getLogger(__name__)

PRINTED = "printed"
HANDWRITTEN = "handwritten"
PROFILES = (PRINTED, HANDWRITTEN)

DEFAULT_MAX_CHARS = 200
DEFAULT_MAX_ASPECT = 0.8
DEFAULT_RATIOS = (0.8, 0.1, 0.1)

INDEX_FILE = "index.tsv"
SPLIT_NAMES = ("train", "val", "test")

# Shuffle is Fisher-Yates over raw 64-bit draws of numpy's PCG64 bit generator
# (stable stream per NEP 19); j = raw % (i + 1).
SHUFFLE_ALGORITHM = "fisher-yates/pcg64-raw-mod/v1"


class CorpusFormatError(ValueError):
    """Malformed corpus index or split file."""


class RejectedLatex(ValueError):
    """Raised by :func:`clean_latex` when a formula cannot be kept."""

    def __init__(self, rule: str, message: str = ""):
        super().__init__(message or rule)
        self.rule = rule


@dataclass(frozen=True)
class FormulaRecord:
    id: str
    latex: str
    source: str
    height: int
    width: int
    image: np.ndarray | None = field(default=None, repr=False, compare=False)
    image_path: Path | None = None

    def __post_init__(self):
        if self.height < 1 or self.width < 1:
            raise ValueError(f"record {self.id}: image must be at least 1x1, got {self.height}x{self.width}")

    @classmethod
    def from_array(cls, id: str, image: np.ndarray, latex: str, source: str = PRINTED) -> "FormulaRecord":
        image = np.asarray(image)
        return cls(id=id, latex=latex, source=source, height=image.shape[0], width=image.shape[1], image=image)

    @property
    def aspect(self) -> float:
        return self.height / self.width

    def pixels(self) -> np.ndarray:
        """Pixel grid (H, W) or (H, W, C), loading from disk when not held in memory."""
        if self.image is not None:
            return self.image
        if self.image_path is None:
            raise ValueError(f"record {self.id} has neither pixels nor an image path")
        return read_image(self.image_path)


@dataclass
class CleaningReport:
    input_count: int = 0
    kept: int = 0
    dropped_by_rule: dict[str, int] = field(default_factory=dict)

    def drop(self, rule: str) -> None:
        self.dropped_by_rule[rule] = self.dropped_by_rule.get(rule, 0) + 1

    def reconciles(self) -> bool:
        return self.kept + sum(self.dropped_by_rule.values()) == self.input_count

    def to_json(self) -> str:
        return json.dumps(
            {"input_count": self.input_count, "kept": self.kept,
             "dropped_by_rule": dict(sorted(self.dropped_by_rule.items()))},
            indent=2,
        ) + "\n"


@dataclass
class SplitManifest:
    seed: int | None
    ratios: tuple[float, float, float]
    train_ids: list[str]
    val_ids: list[str]
    test_ids: list[str]
    algorithm: str = SHUFFLE_ALGORITHM

    @property
    def counts(self) -> tuple[int, int, int]:
        return len(self.train_ids), len(self.val_ids), len(self.test_ids)

    def ids(self, split: str) -> list[str]:
        if split not in SPLIT_NAMES:
            raise ValueError(f"unknown split {split!r}; expected one of {SPLIT_NAMES}")
        return getattr(self, f"{split}_ids")

    def to_json(self) -> str:
        doc = {
            "format": "im2latex-split-manifest/1",
            "algorithm": self.algorithm,
            "seed": self.seed,
            "ratios": list(self.ratios),
            "train": self.train_ids,
            "val": self.val_ids,
            "test": self.test_ids,
        }
        return json.dumps(doc, indent=1, ensure_ascii=False) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "SplitManifest":
        doc = json.loads(text)
        try:
            return cls(seed=doc["seed"], ratios=tuple(doc["ratios"]), train_ids=list(doc["train"]),
                       val_ids=list(doc["val"]), test_ids=list(doc["test"]),
                       algorithm=doc.get("algorithm", SHUFFLE_ALGORITHM))
        except KeyError as exc:
            raise CorpusFormatError(f"split manifest is missing field {exc.args[0]!r}") from None

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "SplitManifest":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))


# --------------------------------------------------------------------------- cleaning

_CONTROL_WORD_END = re.compile(r"\\[A-Za-z]+$")
_EQUATION_ENV = re.compile(r"\s*\{equation\*?\}")
_WHITESPACE = re.compile(r"\s+")


def _matching_brace(s: str, start: int) -> int:
    """Index of the brace closing the group opened at ``s[start]``, or -1."""
    depth = 0
    i = start
    while i < len(s):
        c = s[i]
        if c == "\\":
            i += 2
            continue
        if c == "{":
            depth += 1
        elif c == "}":
            depth -= 1
            if depth == 0:
                return i
        i += 1
    return -1


def _read_argument(s: str, k: int) -> tuple[str, int]:
    """Read one TeX argument starting at ``k``; returns (content, end index)."""
    j = k
    while j < len(s) and s[j].isspace():
        j += 1
    if j >= len(s) or s[j] == "}":
        return "", k
    if s[j] == "{":
        end = _matching_brace(s, j)
        if end < 0:
            raise RejectedLatex("unbalanced_braces", f"unterminated argument at offset {j}")
        return s[j + 1:end], end + 1
    if s[j] == "\\":
        m = re.match(r"\\(?:[A-Za-z]+|.)", s[j:], re.DOTALL)
        return m.group(0), j + m.end()
    return s[j], j + 1


def _rewrite_once(s: str) -> str:
    out: list[str] = []
    i, n = 0, len(s)
    while i < n:
        c = s[i]
        if c != "\\":
            out.append(c)
            i += 1
            continue
        k = i + 1
        while k < n and s[k].isascii() and s[k].isalpha():
            k += 1
        if k == i + 1:  # control symbol such as \{ or \\
            out.append(s[i:i + 2])
            i += 2
            continue
        name = s[i + 1:k]
        if name == "tag":
            if k < n and s[k] == "*":
                k += 1
            _, i = _read_argument(s, k)
            out.append(" ")
        elif name == "text":
            content, end = _read_argument(s, k)
            prev = "".join(out[-40:])
            if content[:1].isalpha() and _CONTROL_WORD_END.search(prev):
                out.append(" ")
            out.append(content)
            if end < n and s[end].isalpha() and _CONTROL_WORD_END.search(content):
                out.append(" ")
            i = end
        elif name in ("begin", "end") and (m := _EQUATION_ENV.match(s, k)):
            out.append(" ")
            i = m.end()
        else:
            out.append(s[i:k])
            i = k
    return "".join(out)


def _braces_balanced(s: str) -> bool:
    depth = 0
    i = 0
    while i < len(s):
        c = s[i]
        if c == "\\":
            i += 2
            continue
        if c == "{":
            depth += 1
        elif c == "}":
            depth -= 1
            if depth < 0:
                return False
        i += 1
    return depth == 0


def clean_latex(latex: str) -> str:
    """Strip ``\\tag``, unwrap ``\\text`` and drop equation environments.

    Rewrites run to a fixed point, so the function is idempotent on accepted
    input.  Raises :class:`RejectedLatex` when braces cannot be balanced or
    nothing is left.
    """
    s = latex
    while True:
        rewritten = _WHITESPACE.sub(" ", _rewrite_once(s)).strip()
        if rewritten == s:
            break
        s = rewritten
    if not _braces_balanced(s):
        raise RejectedLatex("unbalanced_braces")
    if "\\tag" in s or "\\begin{equation" in s or "\\end{equation" in s:
        # e.g. "\\tag" spelled via a line break, or \tagged-style macros
        raise RejectedLatex("residual_target")
    if not s:
        raise RejectedLatex("empty_after_cleaning")
    return s


def filter_record(record: FormulaRecord, max_chars: int = DEFAULT_MAX_CHARS,
                  max_aspect: float = DEFAULT_MAX_ASPECT) -> bool:
    return filter_reason(record, max_chars, max_aspect) is None


def filter_reason(record: FormulaRecord, max_chars: int = DEFAULT_MAX_CHARS,
                  max_aspect: float = DEFAULT_MAX_ASPECT) -> str | None:
    """Name of the first filter rule the record violates, or None."""
    if len(record.latex) > max_chars:
        return "max_chars"
    if record.height / record.width > max_aspect:
        return "max_aspect"
    return None


def clean_records(records: Iterable[FormulaRecord], profile: str = PRINTED,
                  max_chars: int = DEFAULT_MAX_CHARS, max_aspect: float = DEFAULT_MAX_ASPECT,
                  report: CleaningReport | None = None) -> tuple[list[FormulaRecord], CleaningReport]:
    """Apply cleaning (and, for the printed profile, filtering) to in-memory records."""
    report = report or CleaningReport()
    kept = []
    for rec in records:
        report.input_count += 1
        try:
            latex = clean_latex(rec.latex)
        except RejectedLatex as exc:
            report.drop(exc.rule)
            continue
        rec = FormulaRecord(id=rec.id, latex=latex, source=rec.source, height=rec.height,
                            width=rec.width, image=rec.image, image_path=rec.image_path)
        if profile == PRINTED:
            reason = filter_reason(rec, max_chars, max_aspect)
            if reason is not None:
                report.drop(reason)
                continue
        kept.append(rec)
    report.kept = len(kept)
    return kept, report


# --------------------------------------------------------------------------- splitting

def _fisher_yates(items: list, seed: int) -> list:
    out = list(items)
    n = len(out)
    if n < 2:
        return out
    raw = np.random.PCG64(seed).random_raw(n - 1)
    draws = [int(r) for r in raw]
    for t, i in enumerate(range(n - 1, 0, -1)):
        j = draws[t] % (i + 1)
        out[i], out[j] = out[j], out[i]
    return out


def split_dataset(ids: Sequence[str], ratios: Sequence[float] = DEFAULT_RATIOS, seed: int = 42) -> SplitManifest:
    """Seeded shuffle, then floor(r_train*N) train, floor(r_val*N) val, remainder test."""
    if len(ids) == 0:
        raise ValueError("cannot split an empty id list")
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must be three non-negative fractions summing to 1, got {list(ratios)}")
    if len(set(ids)) != len(ids):
        raise ValueError("ids must be unique")
    n = len(ids)
    shuffled = _fisher_yates(list(ids), seed)
    # the epsilon absorbs binary rounding of exact products such as 0.1 * N
    n_train = math.floor(ratios[0] * n + 1e-9)
    n_val = min(math.floor(ratios[1] * n + 1e-9), n - n_train)
    return SplitManifest(
        seed=seed,
        ratios=tuple(float(r) for r in ratios),
        train_ids=shuffled[:n_train],
        val_ids=shuffled[n_train:n_train + n_val],
        test_ids=shuffled[n_train + n_val:],
    )


# --------------------------------------------------------------------------- loading

def read_image(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode not in ("L", "RGB", "RGBA"):
            im = im.convert("RGBA" if "A" in im.getbands() else "RGB")
        return np.asarray(im, dtype=np.uint8).copy()


def _probe_image(path: Path) -> tuple[int, int] | None:
    try:
        with Image.open(path) as im:
            im.load()
            return im.height, im.width
    except (OSError, ValueError, SyntaxError):
        return None


def read_index(path: str | Path) -> list[tuple[int, str, str, str]]:
    """Parse ``index.tsv`` into (line number, id, relative path, latex) tuples."""
    rows = []
    seen: set[str] = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n").rstrip("\r")
            if not line.strip():
                continue
            parts = line.split("\t", 2)
            if len(parts) != 3 or not parts[0] or not parts[1]:
                raise CorpusFormatError(f"{path}:{lineno}: expected id<TAB>image<TAB>latex")
            if parts[0] in seen:
                raise CorpusFormatError(f"{path}:{lineno}: duplicate id {parts[0]!r}")
            seen.add(parts[0])
            rows.append((lineno, parts[0], parts[1], parts[2]))
    return rows


def load_corpus(path: str | Path, profile: str = PRINTED, max_chars: int = DEFAULT_MAX_CHARS,
                max_aspect: float = DEFAULT_MAX_ASPECT, workers: int = 8) -> tuple[list[FormulaRecord], CleaningReport]:
    """Load, clean and (printed profile) filter a corpus directory.

    Images are decoded once to validate them; pixels are re-read lazily by
    :meth:`FormulaRecord.pixels` so large corpora stay out of memory.
    """
    if profile not in PROFILES:
        raise ValueError(f"unknown profile {profile!r}; expected one of {PROFILES}")
    root = Path(path)
    report = CleaningReport()
    index = root / INDEX_FILE
    if not index.exists():
        if root.is_dir() and not any(root.iterdir()):
            return [], report
        raise CorpusFormatError(f"{root}: missing {INDEX_FILE}")
    rows = read_index(index)
    paths = [root / rel for _, _, rel, _ in rows]
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        sizes = list(pool.map(_probe_image, paths))

    candidates = []
    for (_, rid, _, latex), img_path, size in zip(rows, paths, sizes):
        if size is None:
            report.input_count += 1
            report.drop("bad_image")
            log.warning("dropping %s: unreadable image %s", rid, img_path)
            continue
        candidates.append(FormulaRecord(id=rid, latex=latex, source=profile, height=size[0],
                                        width=size[1], image_path=img_path))
    records, report = clean_records(candidates, profile, max_chars, max_aspect, report)
    return records, report


def load_split_files(path: str | Path, available: Iterable[str] | None = None) -> SplitManifest | None:
    """Read an upstream split from ``<corpus>/splits``; None when absent.

    When ``available`` is given, ids dropped during cleaning are removed.
    """
    split_dir = Path(path) / "splits"
    if not split_dir.is_dir():
        return None
    keep = set(available) if available is not None else None
    lists = []
    for name in SPLIT_NAMES:
        f = split_dir / f"{name}.txt"
        if not f.exists():
            raise CorpusFormatError(f"{split_dir}: missing {name}.txt")
        ids = [line.strip() for line in f.read_text(encoding="utf-8").splitlines() if line.strip()]
        if keep is not None:
            ids = [i for i in ids if i in keep]
        lists.append(ids)
    overlap = (set(lists[0]) & set(lists[1])) | (set(lists[0]) & set(lists[2])) | (set(lists[1]) & set(lists[2]))
    if overlap:
        raise CorpusFormatError(f"upstream splits overlap on ids: {sorted(overlap)[:10]}")
    total = sum(len(x) for x in lists) or 1
    return SplitManifest(seed=None, ratios=tuple(len(x) / total for x in lists),
                         train_ids=lists[0], val_ids=lists[1], test_ids=lists[2], algorithm="upstream")


def records_by_id(records: Iterable[FormulaRecord]) -> dict[str, FormulaRecord]:
    return {r.id: r for r in records}


def select(records: Iterable[FormulaRecord], ids: Iterable[str]) -> list[FormulaRecord]:
    """Records for ``ids`` in manifest order; unknown ids raise KeyError."""
    table = records_by_id(records)
    missing = [i for i in ids if i not in table]
    if missing:
        raise KeyError(f"manifest ids not present in corpus: {missing[:10]}")
    return [table[i] for i in ids]
