import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from vacs.data import Corpus, LabeledSentence
from vacs.metrics import (avg_cmi, burstiness, cmi, format_table, length_histogram, m_index,
                          report, span_entropy)


def sent(labels):
    return LabeledSentence([f"w{i}" for i in range(len(labels))], list(labels))


def corpus(*label_seqs):
    return Corpus([sent(y) for y in label_seqs])


def test_cmi_examples():
    assert cmi(sent("sssss")) == 0.0
    assert cmi(sent("sstt")) == pytest.approx(0.375, abs=1e-12)
    assert cmi(sent("stst")) == pytest.approx(0.625, abs=1e-12)


def test_avg_cmi_examples():
    assert avg_cmi(corpus("sstt")) == cmi(sent("sstt"))
    assert avg_cmi(corpus("ssss", "sstt")) == pytest.approx(0.1875, abs=1e-12)


def test_m_index_examples():
    assert m_index(corpus("ssss")) == 0.0
    assert m_index(corpus("sstt")) == pytest.approx(1.0, abs=1e-12)
    assert m_index(corpus("ssst")) == pytest.approx(0.6, abs=1e-12)


def test_burstiness_examples():
    assert burstiness(corpus("st", "ts")) == pytest.approx(-1.0)
    # spans [1, 2, 3]
    assert burstiness(corpus("sttsss")) == pytest.approx(-0.42020, abs=1e-5)
    # spans [1, 1, 4]
    assert burstiness(corpus("s", "t", "ssss")) == pytest.approx(-0.17157, abs=1e-5)


def test_span_entropy_examples():
    assert span_entropy(corpus("ssttss")) == 0.0
    assert span_entropy(corpus("stss", "tt")) == pytest.approx(1.0, abs=1e-12)   # {1,1,2,2}
    assert span_entropy(corpus("sts", "ttt")) == pytest.approx(0.81128, abs=1e-5)  # {1,1,1,3}


def test_length_histogram():
    h = length_histogram(corpus("s" * 7))
    assert h.mean == 7 and h.max == 7
    h = length_histogram(corpus("s" * 10, "t" * 20))
    assert h.mean == 15
    c = corpus("ss", "s", "sts", "tt")
    assert length_histogram(c).total == len(c)


labels_st = st.lists(st.sampled_from("st"), min_size=1, max_size=25)
corpora_st = st.lists(labels_st, min_size=1, max_size=20)


@settings(max_examples=100, deadline=None)
@given(corpora_st)
def test_metrics_match_brute_force(seqs):
    c = corpus(*seqs)
    for s, y in zip(c, seqs):
        assert abs(cmi(s) - oracles.cmi(y)) <= 1e-9
    assert abs(m_index(c) - oracles.m_index(seqs)) <= 1e-9
    assert abs(burstiness(c) - oracles.burstiness(seqs)) <= 1e-9
    assert abs(span_entropy(c) - oracles.span_entropy(seqs)) <= 1e-9


def _swap(y):
    return ["t" if a == "s" else "s" for a in y]


@settings(max_examples=100, deadline=None)
@given(corpora_st)
def test_label_swap_invariance(seqs):
    a, b = corpus(*seqs), corpus(*[_swap(y) for y in seqs])
    for s1, s2 in zip(a, b):
        assert cmi(s1) == pytest.approx(cmi(s2), abs=1e-15)
    assert m_index(a) == pytest.approx(m_index(b), abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(corpora_st, st.integers(1, 25), st.sampled_from("st"))
def test_adding_low_cmi_sentence_does_not_raise_mean(seqs, n, lang):
    c = corpus(*seqs)
    before = avg_cmi(c)
    mono = sent(lang * n)
    if cmi(mono) < before:
        assert avg_cmi(Corpus(c.sentences + [mono])) <= before


@settings(max_examples=100, deadline=None)
@given(corpora_st)
def test_metric_ranges(seqs):
    r = report(corpus(*seqs))
    assert 0 <= r.avg_cmi < 1
    assert 0 <= r.m_index <= 1 + 1e-12
    assert -1 <= r.burstiness < 1
    assert r.span_entropy >= 0


def test_report_record_and_table():
    r = report(corpus("sstt", "ssss"))
    rec = r.to_record()
    assert rec["tokens"] == {"s": 6, "t": 2} and rec["length"]["mean"] == 4
    table = format_table([("train", r), ("gen", report(corpus("stst")))], reference="train")
    lines = table.splitlines()
    assert "Avg CMI" in lines[0] and "Span Entropy" in lines[0]
    assert "+0.438" in lines[3]  # 0.625 - 0.1875
    assert np.isfinite(r.burstiness)
