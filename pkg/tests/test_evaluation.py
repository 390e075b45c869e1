import pytest

from parsestrat.evaluation import (
    F1Report, SegmentationMismatch, SurprisalTable, YieldMismatch, corpus_f1, labeled_f1,
    labeled_spans, phrasal_surprisal,
)
from parsestrat.models import LstmLm, lm_nll, seed_model
from parsestrat.treebank import parse_tree


def test_phrasal_sum():
    table = phrasal_surprisal([1.5, 2.0, 0.5], [2, 1])
    assert [r.surprisal for r in table] == [3.5, 0.5]


def test_one_subword_per_segment_identity():
    vals = [0.25, 1.0, 3.5]
    assert [r.surprisal for r in phrasal_surprisal(vals, [1, 1, 1])] == vals


def test_unk_flag_propagates():
    t = phrasal_surprisal([1.0, 2.0], [1, 1], ["a", "b"], ["x", "y"], [False, True])
    assert [r.unk for r in t] == [False, True]


def test_segmentation_mismatch():
    with pytest.raises(SegmentationMismatch):
        phrasal_surprisal([1.0, 2.0], [1, 2])
    with pytest.raises(SegmentationMismatch):
        phrasal_surprisal([1.0], [1, 0])


def test_sentence_total_matches_lm():
    m = LstmLm(9, dim=6, num_layers=1)
    seed_model(m, 2)
    m.eval()
    ids = [1, 4, 4, 0, 8, 2]
    surps, total = lm_nll(m, ids, eos=False)
    table = phrasal_surprisal(surps, [2, 1, 3])
    assert sum(r.surprisal for r in table) == pytest.approx(total, abs=1e-12)


def test_table_csv_round_trip(tmp_path):
    t = phrasal_surprisal([1.5, 2.0, 0.1], [2, 1], ["s-0", "s-1"], ["ab", "c"], [True, False])
    t.write_csv(tmp_path / "t.csv")
    assert SurprisalTable.read_csv(tmp_path / "t.csv").rows == t.rows


def test_f1_identity():
    t = parse_tree("(S (NP a b) (VP c (PP d)))")
    r = labeled_f1(t, t)
    assert (r.precision, r.recall, r.f1) == (1.0, 1.0, 1.0)


def test_f1_swapped_labels():
    r = labeled_f1(parse_tree("(S (A a) (B b))"), parse_tree("(S (B a) (A b))"))
    assert r.matched == 1
    assert r.precision == pytest.approx(1 / 3, abs=1e-12)
    assert r.recall == pytest.approx(1 / 3, abs=1e-12)
    assert r.f1 == pytest.approx(1 / 3, abs=1e-12)


def test_f1_flat_prediction():
    gold = parse_tree("(S (X (Y a b) c) d)")
    r = labeled_f1(gold, parse_tree("(S a b c d)"))
    assert r.recall == pytest.approx(1 / 3, abs=1e-12)
    assert r.precision == 1.0


def test_f1_symmetry():
    a = parse_tree("(S (X a b) (Y c d) e)")
    b = parse_tree("(S (X a b c) (Z d e))")
    ab, ba = labeled_f1(a, b), labeled_f1(b, a)
    assert (ab.precision, ab.recall, ab.f1) == (ba.recall, ba.precision, ba.f1)


def test_yield_mismatch():
    with pytest.raises(YieldMismatch):
        labeled_f1(parse_tree("(S a b)"), parse_tree("(S a c)"))


def test_unary_spans_counted_as_multiset():
    spans = labeled_spans(parse_tree("(S (S a))"))
    assert spans[("S", 0, 1)] == 2


def test_corpus_f1_pools_counts():
    pairs = [
        (parse_tree("(S (A a) (B b))"), parse_tree("(S (B a) (A b))")),
        (parse_tree("(S a)"), parse_tree("(S a)")),
    ]
    r = corpus_f1(pairs)
    assert (r.matched, r.gold, r.predicted) == (2, 4, 4)
    assert r.f1 == pytest.approx(0.5, abs=1e-12)
    assert [s["f1"] for s in r.sentences] == pytest.approx([1 / 3, 1.0], abs=1e-12)
    assert '"f1": 0.5' in r.to_json()
