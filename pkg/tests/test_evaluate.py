from __future__ import annotations

import pytest
from helpers import BUNDLE, text_graph
from hypothesis import given
from hypothesis import strategies as st
from strategies import NAMES, graphs

from ctigraph.evaluate import (
    CategoryScore,
    GoldAnnotation,
    MatchConfig,
    UnlabeledQuestion,
    annotation_from_graph,
    gain_report,
    load_gold,
    match_entities,
    question_distribution,
    score,
    score_annotations,
)
from ctigraph.graph import from_json


def ents(*names):
    return GoldAnnotation(entities=tuple((n, "malware") for n in names))


def oracle_prf(tp, n_pred, n_gold):
    p = tp / n_pred if n_pred else 0.0
    r = tp / n_gold if n_gold else 0.0
    return p, r, (2 * p * r / (p + r) if p + r else 0.0)


def test_four_gold_five_pred_three_matched():
    gold = ents("Stuxnet", "dropper", "main module", "PLC")
    pred = ents("stuxnet", "Dropper", "main  module", "lsass.exe", "ntdll.dll")
    s = score_annotations(pred, gold).entity
    assert (s.tp, s.fp, s.fn) == (3, 2, 1)
    p, r, f = oracle_prf(3, 5, 4)
    assert (s.precision, s.recall, s.f1) == pytest.approx((p, r, f))
    assert s.precision == pytest.approx(0.6, abs=1e-4)
    assert s.recall == pytest.approx(0.75, abs=1e-4)
    assert s.f1 == pytest.approx(0.6667, abs=1e-4)


def test_identity_and_empty_prediction():
    gold = load_gold(BUNDLE / "gold.json")
    same = score_annotations(gold, gold)
    for c in ("entity", "relation", "technique"):
        s = getattr(same, c)
        assert (s.precision, s.recall, s.f1) == (1.0, 1.0, 1.0)
    empty = score_annotations(GoldAnnotation(), gold)
    for c in ("entity", "relation", "technique"):
        s = getattr(empty, c)
        assert (s.precision, s.recall, s.f1) == (0.0, 0.0, 0.0)


def test_relations_need_matched_endpoints_and_similar_labels():
    gold = GoldAnnotation((("Stuxnet", ""), ("dropper", "")), (("Stuxnet", "install", "dropper"),))
    assert score_annotations(GoldAnnotation(gold.entities, (("stuxnet", "Install", "dropper"),)), gold).relation.tp == 1
    assert score_annotations(GoldAnnotation(gold.entities, (("stuxnet", "delete", "dropper"),)), gold).relation.tp == 0
    assert score_annotations(GoldAnnotation((("Stuxnet", ""),), (("stuxnet", "install", "dropper"),)), gold).relation.tp == 0


def test_fuzzy_threshold():
    assert match_entities(["Stuxnet worm"], ["stuxnet"], MatchConfig(0.5)) == [("Stuxnet worm", "stuxnet", 0.5)]
    assert match_entities(["Stuxnet worm"], ["stuxnet"]) == []
    with pytest.raises(ValueError):
        MatchConfig(1.5)


def test_gold_validation():
    with pytest.raises(ValueError):
        GoldAnnotation(techniques=("TX1",))
    with pytest.raises(ValueError):
        GoldAnnotation(entities=(("  ", "x"),))


def test_fixture_scores_improve_after_integration():
    mm = from_json((BUNDLE / "golden" / "graph.mm.json").read_bytes())
    gold = load_gold(BUNDLE / "gold.json")
    before, after = score(text_graph(), gold), score(mm, gold)
    assert after.technique.f1 > before.technique.f1
    assert after.entity.recall > before.entity.recall
    assert "technique" in after.table()


def test_gain_report_counts():
    mm = from_json((BUNDLE / "golden" / "graph.mm.json").read_bytes())
    g = gain_report(text_graph(), mm)
    assert g.counts == (3, 4, 3)
    assert set(g.added_techniques) == {"T1003", "T1107", "T1546"}


@pytest.mark.parametrize("counts, expected", [
    ((602, 536, 143), (0.4699, 0.4185, 0.1116)),
    ((1, 1, 2), (0.25, 0.25, 0.5)),
])
def test_question_distribution_proportions(counts, expected):
    labels = ["direct_correlation"] * counts[0] + ["answer_oriented"] * counts[1] + ["non_related"] * counts[2]
    d = question_distribution(labels)
    assert d.total == sum(counts)
    for k, e in zip(("direct_correlation", "answer_oriented", "non_related"), expected):
        assert d.proportions[k] == pytest.approx(e, abs=1e-4)
    assert sum(d.proportions.values()) == pytest.approx(1.0)


def test_question_distribution_errors():
    with pytest.raises(UnlabeledQuestion):
        question_distribution(["direct_correlation", None])
    with pytest.raises(ValueError):
        question_distribution([])


@given(st.lists(st.sampled_from(NAMES), unique=True, max_size=8), st.lists(st.sampled_from(NAMES), unique=True, max_size=8))
def test_swapping_sides_swaps_precision_and_recall(a, b):
    x, y = score_annotations(ents(*a), ents(*b)).entity, score_annotations(ents(*b), ents(*a)).entity
    assert (x.tp, x.fp, x.fn) == (y.tp, y.fn, y.fp)
    assert x.f1 == pytest.approx(y.f1)


@given(graphs())
def test_graph_scores_perfectly_against_itself(g):
    s = score(g, annotation_from_graph(g))
    assert s.entity.f1 == 1.0
    assert s.relation.recall == (1.0 if g.events or g.supplementary else 0.0)
    assert s.technique.f1 == (1.0 if g.techniques() else 0.0)


def test_category_score_zero_division():
    assert CategoryScore(0, 0, 0).f1 == 0.0
