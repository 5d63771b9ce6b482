from __future__ import annotations

import numpy as np
import pytest
import torch

from im2latex.corpus import FormulaRecord
from im2latex.model.config import toy_preset
from im2latex.model.core import build_model
from im2latex.preprocessing import Collator, LatexTokenizer
from im2latex.synthetic import distinct_formulas, render

TOY_SIDE = 56

_ACCEPTANCE_LINES: list[str] = []


def record_acceptance(line: str) -> None:
    print(line)
    _ACCEPTANCE_LINES.append(line)


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def formulas() -> list[str]:
    return distinct_formulas(64, seed=3)


@pytest.fixture(scope="session")
def tokenizer(formulas) -> LatexTokenizer:
    return LatexTokenizer.train(formulas, num_merges=64)


def make_records(latex: list[str], prefix: str = "r") -> list[FormulaRecord]:
    return [FormulaRecord.from_array(f"{prefix}{i:04d}", render(s), s) for i, s in enumerate(latex)]


@pytest.fixture(scope="session")
def records(formulas) -> list[FormulaRecord]:
    return make_records(formulas)


@pytest.fixture
def collator(tokenizer) -> Collator:
    return Collator(tokenizer, side=TOY_SIDE, max_len=64)


def toy_model(tokenizer: LatexTokenizer, seed: int = 0):
    return build_model(toy_preset(tokenizer.vocab_size), seed=seed)


@pytest.fixture
def model(tokenizer):
    return toy_model(tokenizer)


@pytest.fixture(autouse=True)
def _full_precision():
    torch.set_float32_matmul_precision("highest")
    yield
    torch.set_float32_matmul_precision("highest")


def rel_diff(a: torch.Tensor, b: torch.Tensor) -> float:
    a, b = a.double(), b.double()
    return float((a - b).norm() / b.norm().clamp_min(1e-30))


def flat_params(model) -> torch.Tensor:
    return torch.cat([p.detach().reshape(-1).double() for p in model.parameters()])


def random_images(n: int, seed: int = 0) -> torch.Tensor:
    g = torch.Generator().manual_seed(seed)
    return torch.randn(n, 3, TOY_SIDE, TOY_SIDE, generator=g)


def gray_image(value: float, h: int = 8, w: int = 8) -> np.ndarray:
    return np.full((h, w), value, dtype=np.float64)
