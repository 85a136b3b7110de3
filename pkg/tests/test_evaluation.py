import json
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from clinconcept.errors import TagParseError, ValidationError
from clinconcept.evaluation import (ClassCounts, EvalReport, LabeledSentence, Span, bio_to_spans,
                                    evaluate_spans, format_report, is_bio_valid, load_spans,
                                    read_conll, read_standoff, repair_bio, spans_to_bio,
                                    write_conll, write_standoff)

tag_lists = st.lists(st.sampled_from(oracles.TAGS), max_size=15)


def triples(spans):
    return {(s.start_token, s.end_token, s.concept_class) for s in spans}


def S(start, end, cls, doc="d", sent=0):
    return Span(doc, sent, start, end, cls)


# ---------------------------------------------------------------- BIO <-> spans

def test_bio_to_spans_examples():
    assert triples(bio_to_spans(["B-problem", "I-problem", "O", "B-test"])) == {(0, 1, "problem"), (3, 3, "test")}
    assert triples(bio_to_spans(["O", "I-test"])) == {(1, 1, "test")}
    assert bio_to_spans(["O", "O", "O"]) == []


def test_bio_to_spans_class_switch_inside_run():
    assert triples(bio_to_spans(["B-problem", "I-test", "I-test"])) == {(0, 0, "problem"), (1, 2, "test")}


def test_bio_to_spans_unknown_tag():
    with pytest.raises(TagParseError):
        bio_to_spans(["O", "B-drug"])


@given(tag_lists)
def test_bio_to_spans_matches_oracle(tags):
    assert triples(bio_to_spans(tags)) == oracles.spans_from_tags(tags)


def test_spans_to_bio_examples():
    assert spans_to_bio([S(0, 1, "problem")], 3) == ["B-problem", "I-problem", "O"]
    assert spans_to_bio([], 2) == ["O", "O"]


def test_spans_to_bio_rejects_overlap_and_bounds():
    with pytest.raises(ValidationError):
        spans_to_bio([S(0, 2, "test"), S(2, 3, "problem")], 5)
    with pytest.raises(ValidationError):
        spans_to_bio([S(3, 5, "test")], 5)


@settings(max_examples=200)
@given(st.integers(0, 2**31), st.integers(0, 20))
def test_span_round_trip(seed, length):
    spans = [S(a, b, c) for a, b, c in oracles.random_spans(np.random.default_rng(seed), length)]
    tags = spans_to_bio(spans, length)
    assert is_bio_valid(tags)
    assert sorted(bio_to_spans(tags, "d", 0)) == sorted(spans)


@given(tag_lists)
def test_tag_round_trip_on_valid_sequences(tags):
    tags = repair_bio(tags)
    assert spans_to_bio(bio_to_spans(tags), len(tags)) == tags


def test_repair_rule():
    assert repair_bio(["O", "I-test", "I-test", "I-problem"]) == ["O", "B-test", "I-test", "B-problem"]
    assert not is_bio_valid(["I-test"])
    assert is_bio_valid(["B-test", "I-test", "O"])


@given(tag_lists)
def test_repair_preserves_spans(tags):
    assert triples(bio_to_spans(repair_bio(tags))) == triples(bio_to_spans(tags))


# ---------------------------------------------------------------- scoring

GOLD = [S(0, 1, "problem"), S(3, 3, "test"), S(5, 6, "treatment"), S(8, 8, "problem")]
PRED = [S(0, 1, "problem"), S(3, 3, "problem"), S(5, 6, "treatment")]


def test_hand_counted_example_exact():
    o = evaluate_spans(GOLD, PRED).overall
    assert o.exact() == (Fraction(2, 3), Fraction(1, 2), Fraction(4, 7))
    assert abs(o.f1 - 0.5714285714) < 1e-9


def test_identity_and_empty_prediction():
    o = evaluate_spans(GOLD, GOLD).overall
    assert (o.precision, o.recall, o.f1) == (1.0, 1.0, 1.0)
    o = evaluate_spans(GOLD, []).overall
    assert (o.precision, o.recall, o.f1) == (0.0, 0.0, 0.0)


def test_duplicates_rejected():
    with pytest.raises(ValidationError):
        evaluate_spans(GOLD + [GOLD[0]], PRED)
    with pytest.raises(ValidationError):
        evaluate_spans(GOLD, PRED + [PRED[0]])


def test_sentence_and_document_are_part_of_the_match():
    assert evaluate_spans([S(0, 0, "test", "a", 0)], [S(0, 0, "test", "a", 1)]).overall.true_positives == 0
    assert evaluate_spans([S(0, 0, "test", "a", 0)], [S(0, 0, "test", "b", 0)]).overall.true_positives == 0


span_sets = st.sets(st.tuples(st.integers(0, 3), st.integers(0, 6), st.integers(0, 3),
                              st.sampled_from(["problem", "treatment", "test"])), max_size=12)


@given(span_sets, span_sets, st.randoms())
def test_scoring_properties(gold_raw, pred_raw, rnd):
    gold = [S(a, a + w, c, sent=s) for s, a, w, c in gold_raw]
    pred = [S(a, a + w, c, sent=s) for s, a, w, c in pred_raw]
    gold, pred = list(dict.fromkeys(gold)), list(dict.fromkeys(pred))
    rep = evaluate_spans(gold, pred)
    o = rep.overall
    tp, p, r, f = oracles.prf(gold, pred)
    assert (o.true_positives, o.precision, o.recall) == (tp, p, r)
    assert abs(o.f1 - f) < 1e-12
    assert o.true_positives == sum(c.true_positives for c in rep.per_class.values())
    assert o.predicted_count == sum(c.predicted_count for c in rep.per_class.values())
    assert o.gold_count == sum(c.gold_count for c in rep.per_class.values())
    swapped = evaluate_spans(pred, gold).overall
    assert (swapped.precision, swapped.recall) == (o.recall, o.precision)
    rnd.shuffle(gold)
    rnd.shuffle(pred)
    assert evaluate_spans(gold, pred).overall.f1 == o.f1


# ---------------------------------------------------------------- report

def test_report_row_format():
    rep = EvalReport({"problem": ClassCounts(8934, 10000, 10167)})
    text, payload = format_report(rep)
    assert "89.34  87.87  88.60" in text
    assert payload["overall"]["true_positives"] == 8934


def test_zero_report():
    text, payload = format_report(evaluate_spans([], []))
    assert "0.00   0.00   0.00" in text
    assert payload["overall"]["f1"] == 0.0


def test_text_and_json_agree():
    text, payload = format_report(evaluate_spans(GOLD, PRED))
    payload = json.loads(json.dumps(payload))
    rows = {line.split()[0]: line.split()[1:] for line in text.splitlines()[2:] if not line.startswith("-")}
    for name in ("problem", "treatment", "test", "overall"):
        d = payload["overall"] if name == "overall" else payload["classes"][name]
        p, r, f, tp, npred, ngold = rows[name]
        assert float(p) == round(100 * d["precision"], 2)
        assert float(r) == round(100 * d["recall"], 2)
        assert float(f) == round(100 * d["f1"], 2)
        assert (int(tp), int(npred), int(ngold)) == (d["true_positives"], d["predicted_count"], d["gold_count"])


# ---------------------------------------------------------------- files

def test_conll_round_trip(tmp_path):
    sents = [LabeledSentence("doc1", 0, ["Pt", "has", "chest", "pain"], ["O", "O", "B-problem", "I-problem"]),
             LabeledSentence("doc1", 1, ["ok"], ["O"]),
             LabeledSentence("doc2", 0, ["EKG", "done"], ["B-test", "O"])]
    path = tmp_path / "x.conll"
    with open(path, "w") as fh:
        write_conll(fh, sents)
    assert read_conll(path) == sents


def test_conll_repairs_and_reports_line(tmp_path):
    path = tmp_path / "x.conll"
    path.write_text("a\tO\nb\tI-test\n\nc\tB-tst\n")
    with pytest.raises(TagParseError) as err:
        read_conll(path)
    assert err.value.line == 4
    path.write_text("a\tO\nb\tI-test\n")
    assert read_conll(path)[0].tags == ["O", "B-test"]


def test_standoff_round_trip_and_autodetect(tmp_path):
    path = tmp_path / "gold.tsv"
    with open(path, "w") as fh:
        write_standoff(fh, GOLD)
    assert read_standoff(path) == GOLD
    assert load_spans(path) == GOLD
