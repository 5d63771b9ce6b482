import json
import random

import pytest

from im2latex.evaluation import (
    AlignmentError,
    benchmark_compare,
    evaluate_model,
    read_tsv,
    score_items,
    write_tsv,
)
from im2latex.gleu import gleu_corpus, metric_tokens


def test_untrained_model_range_and_determinism(model, collator, records, tmp_path):
    subset = records[:6]
    a = evaluate_model(model, subset, collator, "greedy", batch_size=4, gen_max_len=16)
    b = evaluate_model(model, subset, collator, "greedy", batch_size=3, gen_max_len=16)
    assert 0.0 <= a.gleu <= 1.0 and a.mean_loss > 0
    assert [i.prediction for i in a.items] == [i.prediction for i in b.items]
    assert [i.id for i in a.items] == [r.id for r in subset]
    a.write_audit(tmp_path / "audit.jsonl")
    rows = [json.loads(line) for line in (tmp_path / "audit.jsonl").read_text().splitlines()]
    assert [r["reference"] for r in rows] == [r.latex for r in subset]


def test_beam_strategy_runs(model, collator, records):
    result = evaluate_model(model, records[:2], collator, "beam:2", gen_max_len=8, with_loss=False)
    assert len(result.items) == 2 and 0.0 <= result.gleu <= 1.0


def test_eval_restores_training_mode(model, collator, records):
    model.train()
    evaluate_model(model, records[:1], collator, gen_max_len=4)
    assert model.training


def test_score_items_matches_corpus_gleu():
    hyps, refs = ["x + y", "a b c", ""], ["x + z", "a b c d", "q"]
    score, items = score_items(["1", "2", "3"], hyps, refs)
    assert score == gleu_corpus([(metric_tokens(h), metric_tokens(r)) for h, r in zip(hyps, refs)])
    assert items[1].gleu == 0.6


def test_tsv_round_trip(tmp_path):
    write_tsv(tmp_path / "p.tsv", [("a", "x  +\ty"), ("b", "")])
    assert read_tsv(tmp_path / "p.tsv") == {"a": "x + y", "b": ""}


def test_tsv_rejects_duplicates(tmp_path):
    (tmp_path / "p.tsv").write_text("a\tx\na\ty\n")
    with pytest.raises(ValueError):
        read_tsv(tmp_path / "p.tsv")


@pytest.fixture
def reference(tmp_path, formulas):
    rows = [(f"id{i}", f) for i, f in enumerate(formulas[:20])]
    write_tsv(tmp_path / "ref.tsv", rows)
    return tmp_path / "ref.tsv", rows


def test_compare_identical_and_nonsense(tmp_path, reference):
    ref_path, rows = reference
    rng = random.Random(0)
    write_tsv(tmp_path / "noise.tsv", [(i, " ".join(rng.sample("qwrtpsdfgh", 5))) for i, _ in rows])
    write_tsv(tmp_path / "half.tsv", [(i, t if k % 2 else "z") for k, (i, t) in enumerate(rows)])
    comp = benchmark_compare([("noise", tmp_path / "noise.tsv"), ("perfect", ref_path),
                              ("half", tmp_path / "half.tsv")], ref_path)
    assert [r.model_name for r in comp.rows] == ["perfect", "half", "noise"]
    assert comp.rows[0].gleu == 1.0 and all(r.n_items == 20 for r in comp.rows)
    assert all(0.0 <= r.gleu <= 1.0 for r in comp.rows)
    table = comp.table()
    assert "perfect" in table and "1.0000" in table
    assert comp.csv().splitlines()[0] == "model,gleu,n_items"


def test_compare_recomputes_from_items(tmp_path, reference):
    ref_path, rows = reference
    write_tsv(tmp_path / "p.tsv", [(i, t.replace("x", "y")) for i, t in rows])
    comp = benchmark_compare([("m", tmp_path / "p.tsv")], ref_path)
    refs = dict(rows)
    expected = gleu_corpus([(metric_tokens(t.replace("x", "y")), metric_tokens(refs[i])) for i, t in rows])
    assert comp.rows[0].gleu == expected


def test_compare_misalignment_lists_ids(tmp_path, reference):
    ref_path, rows = reference
    write_tsv(tmp_path / "p.tsv", rows[:-2] + [("extra", "x")])
    with pytest.raises(AlignmentError) as info:
        benchmark_compare([("m", tmp_path / "p.tsv")], ref_path)
    assert set(info.value.missing) == {rows[-1][0], rows[-2][0]} and info.value.extra == ["extra"]
    assert rows[-1][0] in str(info.value)
