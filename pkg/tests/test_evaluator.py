import csv
import json
import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ctd import evaluator as ev
from ctd.encoder import EncoderConfig
from ctd.head import CTDModel
from ctd.text import CorrectionPair, build_vocab

SIX = [
    ("ABX", "ABC", "ABC"),  # fixed
    ("XBC", "ABC", "ABC"),  # fixed
    ("AXC", "ABC", "AXC"),  # missed
    ("DEF", "DEF", "DEF"),
    ("GHI", "GHI", "GHI"),
    ("JKL", "JKL", "JKZ"),  # corrupted
]


def brute_force(records):
    tp = fp = fn = tn = 0
    for src, gold, out in records:
        positive = any(a != b for a, b in zip(src, gold))
        exact = all(a == b for a, b in zip(out, gold))
        if positive and exact:
            tp += 1
        elif positive:
            fn += 1
        elif exact:
            tn += 1
        else:
            fp += 1
    return tp, fp, fn, tn


def test_six_record_example():
    r = ev.sentence_metrics(SIX)
    assert (r.tp, r.fn, r.fp, r.tn) == (2, 1, 1, 2)
    assert r.precision == 2 / 3 and r.recall == 2 / 3 and r.f1 == 2 / 3
    assert r.accuracy == 4 / 6
    assert r.summary() == {"accuracy": 66.7, "precision": 66.7, "recall": 66.7, "f1": 66.7}


def test_perfect_and_copy_models():
    recs = [("ABX", "ABC"), ("DEF", "DEF"), ("XY", "XZ"), ("Q", "Q")]
    perfect = ev.sentence_metrics([(s, g, g) for s, g in recs])
    assert perfect.f1 == perfect.accuracy == 1.0
    copy = ev.sentence_metrics([(s, g, s) for s, g in recs])
    assert copy.tp == copy.fp == 0 and copy.precision == copy.recall == copy.f1 == 0.0
    assert copy.accuracy == 0.5


def test_length_mismatch_is_an_error():
    with pytest.raises(ValueError, match="record 1"):
        ev.sentence_metrics([("A", "A", "A"), ("AB", "AB", "A")])


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(st.integers(1, 4), st.integers(0, 2**16)), max_size=12))
def test_matches_brute_force(specs):
    records = []
    for n, seed in specs:
        rng = np.random.default_rng(seed)
        src, gold, out = ("".join(rng.choice(list("ab"), n)) for _ in range(3))
        records.append((src, gold, out))
    r = ev.sentence_metrics(records)
    assert (r.tp, r.fp, r.fn, r.tn) == brute_force(records)
    assert r.total == len(records)
    if r.tp == 0:
        assert r.f1 == 0.0


def test_token_metrics_hand_case():
    src = "ABXDEYGHIJ"
    gold = "ABCDEFGHIJ"
    out = "ABCDEYGHIZ"
    t = ev.token_metrics([(src, gold, out)])
    assert t.correction_rate == 0.5
    assert t.false_change_rate == 1 / 8
    assert t.detection_rate == 0.5
    copy = ev.token_metrics([(src, gold, src)])
    assert copy.correction_rate == 0.0 and copy.false_change_rate == 0.0
    perfect = ev.token_metrics([(src, gold, gold)])
    assert perfect.correction_rate == 1.0 and perfect.false_change_rate == 0.0


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.01, 100.0))
def test_cosine_matrix_properties(seed, scale):
    rows = np.random.default_rng(seed).standard_normal((6, 5))
    s = ev.cosine_matrix(rows)
    assert np.array_equal(s, s.T)
    np.testing.assert_allclose(np.diag(s), 1.0, atol=1e-6)
    assert s.min() >= -1.0 and s.max() <= 1.0
    np.testing.assert_allclose(ev.cosine_matrix(rows * scale), s, atol=1e-12)


def test_cosine_matrix_zero_row(caplog):
    rows = np.array([[1.0, 0.0], [0.0, 0.0], [1.0, 1.0]])
    with caplog.at_level(logging.WARNING):
        s = ev.cosine_matrix(rows)
    assert "zero-norm" in caplog.text
    assert s[1].tolist() == [0.0, 0.0, 0.0]


def test_context_alignment():
    sm = ev.SimilarityMatrix(list("abc"), np.array([[1, 0.5, 0.1], [0.5, 1, 0.3], [0.1, 0.3, 1]]))
    assert sm.context_alignment(0) == pytest.approx(0.3)
    assert sm.context_alignment(1) == pytest.approx(0.4)


@pytest.fixture(scope="module")
def tiny_model():
    vocab = build_vocab(["今天老师在学校写作业"])
    cfg = EncoderConfig(vocab_size=len(vocab), d=8, layers=1, heads=2, d_ff=8, max_len=16)
    return CTDModel.init(cfg, vocab, "ctd", np.random.default_rng(0))


def test_similarity_matrix_on_model(tiny_model, tmp_path):
    sm = ev.similarity_matrix("今天老师在学校", tiny_model)
    assert sm.labels == list("今天老师在学校")
    assert sm.values.shape == (7, 7)
    assert np.array_equal(sm.values, sm.values.T)
    np.testing.assert_allclose(np.diag(sm.values), 1.0, atol=1e-6)
    sm.to_csv(tmp_path / "sim.csv")
    rows = list(csv.reader(open(tmp_path / "sim.csv", encoding="utf-8")))
    assert len(rows) == 8 and rows[0][1:] == sm.labels


def test_similarity_contrast_skips_clean(tiny_model):
    pairs = [CorrectionPair("今天老师在学校", "今天老师在学校"), CorrectionPair("今天老诗在学校", "今天老师在学校")]
    c = ev.similarity_contrast(pairs, tiny_model)
    assert c.n_pairs == 1 and len(c.error_scores) == 1


def test_emit_report_formats(tmp_path):
    r = ev.sentence_metrics(SIX)
    ev.emit_report(r, tmp_path / "r.json")
    again = ev.load_report(tmp_path / "r.json")
    assert again == r
    assert json.loads((tmp_path / "r.json").read_text())["summary"]["f1"] == 66.7
    ev.emit_report(r, tmp_path / "r.csv", fmt="csv")
    assert len((tmp_path / "r.csv").read_text(encoding="utf-8").splitlines()) == 7
    ev.emit_report(r, tmp_path / "r.md", fmt="markdown-table", name="CTD")
    md = (tmp_path / "r.md").read_text()
    assert "| Model | Acc.(%) | Prec.(%) | Rec.(%) | F1.(%) |" in md
    assert "| CTD | 66.7 | 66.7 | 66.7 | 66.7 |" in md
    first = (tmp_path / "r.json").read_bytes()
    ev.emit_report(r, tmp_path / "r.json")
    assert (tmp_path / "r.json").read_bytes() == first
    with pytest.raises(ValueError):
        ev.emit_report(r, tmp_path / "r.xml", fmt="xml")
