"""Tiny rendered corpora for smoke runs and tests.

``python -m im2latex.synthetic OUT_DIR --n 8`` writes a corpus in the
standard on-disk layout.
"""
from __future__ import annotations

import argparse
import random
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image, ImageDraw, ImageFont

from .corpus import INDEX_FILE

SYMBOLS = ["x", "y", "z", "a", "b", "n", "k", "\\alpha", "\\beta", "\\pi", "1", "2", "3"]
OPERATORS = ["+", "-", "=", "^{2}", "_{i}", "\\cdot"]


def random_formula(rng: random.Random, terms: int = 3) -> str:
    parts = [rng.choice(SYMBOLS)]
    for _ in range(terms - 1):
        parts += [rng.choice(OPERATORS), rng.choice(SYMBOLS)]
    return " ".join(parts)


def render(latex: str, height: int = 32, width: int = 160) -> np.ndarray:
    """Draw the raw LaTeX string as black text on white (grayscale, uint8)."""
    img = Image.new("L", (width, height), 255)
    ImageDraw.Draw(img).text((2, height // 4), latex, fill=0, font=ImageFont.load_default())
    return np.asarray(img)


def write_corpus(root: str | Path, formulas: Sequence[str], height: int = 32, width: int = 160) -> Path:
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    lines = []
    for i, latex in enumerate(formulas):
        rid = f"f{i:05d}"
        rel = f"images/{rid}.png"
        Image.fromarray(render(latex, height, width)).save(root / rel)
        lines.append(f"{rid}\t{rel}\t{latex}\n")
    (root / INDEX_FILE).write_text("".join(lines), encoding="utf-8")
    return root


def distinct_formulas(n: int, seed: int = 0, terms: int = 3) -> list[str]:
    rng = random.Random(seed)
    seen: dict[str, None] = {}
    while len(seen) < n:
        seen.setdefault(random_formula(rng, terms))
    return list(seen)


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    ap.add_argument("out", type=Path)
    ap.add_argument("--n", type=int, default=8)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)
    write_corpus(args.out, distinct_formulas(args.n, args.seed))
    print(f"wrote {args.n} records to {args.out}")


if __name__ == "__main__":
    main()
