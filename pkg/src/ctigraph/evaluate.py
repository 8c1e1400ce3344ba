"""Scoring predicted graphs against gold annotations.

Entities match one-to-one by normalized-name similarity (token-set Jaccard,
greedy highest-first). Relations count only when both endpoints matched and
the labels are similar enough. Techniques compare by exact id.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

from .catalog import is_technique_id
from .graph import AttackGraph, GainReport, diff_graphs
from .text import jaccard, normalize_name

CATEGORIES = ("entity", "relation", "technique")


@dataclass(frozen=True)
class GoldAnnotation:
    entities: tuple[tuple[str, str], ...] = ()
    relations: tuple[tuple[str, str, str], ...] = ()
    techniques: tuple[str, ...] = ()

    def __post_init__(self):
        for name, _ in self.entities:
            if not name.strip():
                raise ValueError("gold entity name is empty")
        for s, r, o in self.relations:
            if not (s.strip() and r.strip() and o.strip()):
                raise ValueError("gold relation has an empty field")
        for t in self.techniques:
            if not is_technique_id(t):
                raise ValueError(f"malformed technique id {t!r} in gold")

    @classmethod
    def from_dict(cls, doc: dict) -> "GoldAnnotation":
        return cls(
            tuple((e["name"], e.get("type", "")) for e in doc.get("entities", [])),
            tuple((r["subject"], r["relation"], r["object"]) for r in doc.get("relations", [])),
            tuple(doc.get("techniques", [])),
        )

    def to_dict(self) -> dict:
        return {
            "entities": [{"name": n, "type": t} for n, t in self.entities],
            "relations": [{"subject": s, "relation": r, "object": o} for s, r, o in self.relations],
            "techniques": list(self.techniques),
        }


def load_gold(path: str | Path) -> GoldAnnotation:
    return GoldAnnotation.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def annotation_from_graph(g: AttackGraph) -> GoldAnnotation:
    """View a graph in the gold format, so either side of a comparison can be a graph."""
    rels = [(g.name_of(ev.subject), ev.action, g.name_of(ev.object)) for ev in g.events]
    rels += [(g.name_of(r.subject), r.relation, g.name_of(r.object)) for r in g.supplementary]
    return GoldAnnotation(
        tuple((e.name, e.entity_type) for e in g.entities),
        tuple(rels),
        tuple(sorted(g.techniques())),
    )


@dataclass(frozen=True)
class MatchConfig:
    fuzzy_threshold: float = 0.85

    def __post_init__(self):
        if not 0.0 <= self.fuzzy_threshold <= 1.0:
            raise ValueError("fuzzy_threshold must lie in [0, 1]")


def similarity(a: str, b: str) -> float:
    if normalize_name(a) == normalize_name(b):
        return 1.0
    return jaccard(a, b)


def _greedy(pairs: list[tuple[float, str, str]]) -> list[tuple[str, str, float]]:
    # the sort key is symmetric in (pred, gold), so swapping the sides yields the mirrored matching
    pairs.sort(key=lambda p: (-p[0], min(p[1], p[2]), max(p[1], p[2]), p[1]))
    used_p, used_g, out = set(), set(), []
    for sim, p, g in pairs:
        if p in used_p or g in used_g:
            continue
        used_p.add(p)
        used_g.add(g)
        out.append((p, g, sim))
    return out


def _unique(names: Iterable[str]) -> dict[str, str]:
    out: dict[str, str] = {}
    for n in names:
        out.setdefault(normalize_name(n), n)
    return out


def match_entities(pred: Iterable[str], gold: Iterable[str], cfg: MatchConfig = MatchConfig()) -> list[tuple[str, str, float]]:
    """One-to-one (pred, gold, similarity) matches; names compared after normalization."""
    p_names, g_names = _unique(pred), _unique(gold)
    pairs = []
    for pk, pn in p_names.items():
        for gk, gn in g_names.items():
            sim = similarity(pn, gn)
            if sim >= cfg.fuzzy_threshold:
                pairs.append((sim, pk, gk))
    return [(p_names[p], g_names[g], s) for p, g, s in _greedy(pairs)]


@dataclass(frozen=True)
class CategoryScore:
    tp: int
    fp: int
    fn: int

    @property
    def precision(self) -> float:
        return self.tp / (self.tp + self.fp) if self.tp + self.fp else 0.0

    @property
    def recall(self) -> float:
        return self.tp / (self.tp + self.fn) if self.tp + self.fn else 0.0

    @property
    def f1(self) -> float:
        p, r = self.precision, self.recall
        return 2 * p * r / (p + r) if p + r else 0.0

    def to_dict(self) -> dict:
        return {"tp": self.tp, "fp": self.fp, "fn": self.fn,
                "precision": round(self.precision, 4), "recall": round(self.recall, 4), "f1": round(self.f1, 4)}


@dataclass(frozen=True)
class MetricReport:
    entity: CategoryScore
    relation: CategoryScore
    technique: CategoryScore

    def to_dict(self) -> dict:
        return {c: getattr(self, c).to_dict() for c in CATEGORIES}

    def table(self) -> str:
        rows = [f"{'category':<10} {'tp':>4} {'fp':>4} {'fn':>4} {'precision':>9} {'recall':>7} {'f1':>7}"]
        for c in CATEGORIES:
            s = getattr(self, c)
            rows.append(f"{c:<10} {s.tp:>4} {s.fp:>4} {s.fn:>4} {s.precision:>9.4f} {s.recall:>7.4f} {s.f1:>7.4f}")
        return "\n".join(rows)


def score_annotations(pred: GoldAnnotation, gold: GoldAnnotation, cfg: MatchConfig = MatchConfig()) -> MetricReport:
    p_ents = _unique(n for n, _ in pred.entities)
    g_ents = _unique(n for n, _ in gold.entities)
    ent_matches = match_entities(p_ents.values(), g_ents.values(), cfg)
    entity = CategoryScore(len(ent_matches), len(p_ents) - len(ent_matches), len(g_ents) - len(ent_matches))

    to_gold = {normalize_name(p): normalize_name(g) for p, g, _ in ent_matches}
    p_rels = {tuple(normalize_name(x) for x in r): r for r in pred.relations}
    g_rels = {tuple(normalize_name(x) for x in r): r for r in gold.relations}
    pairs = []
    for pk, (ps, pr, po) in p_rels.items():
        gs, go = to_gold.get(pk[0]), to_gold.get(pk[2])
        if gs is None or go is None:
            continue
        for gk, (_, gr, _) in g_rels.items():
            if gk[0] == gs and gk[2] == go:
                sim = similarity(pr, gr)
                if sim >= cfg.fuzzy_threshold:
                    pairs.append((sim, "|".join(pk), "|".join(gk)))
    rel_tp = len(_greedy(pairs))
    relation = CategoryScore(rel_tp, len(p_rels) - rel_tp, len(g_rels) - rel_tp)

    pt, gt = set(pred.techniques), set(gold.techniques)
    technique = CategoryScore(len(pt & gt), len(pt - gt), len(gt - pt))
    return MetricReport(entity, relation, technique)


def score(pred_graph: AttackGraph, gold: GoldAnnotation, cfg: MatchConfig = MatchConfig()) -> MetricReport:
    return score_annotations(annotation_from_graph(pred_graph), gold, cfg)


def gain_report(text_graph: AttackGraph, mm_graph: AttackGraph) -> GainReport:
    """Entity, relation and technique increments of the multimodal graph."""
    return diff_graphs(text_graph, mm_graph)


def gain_table(report: GainReport) -> str:
    e, r, t = report.counts
    lines = [f"{'dimension':<10} {'added':>5}", f"{'entity':<10} {e:>5}", f"{'relation':<10} {r:>5}", f"{'technique':<10} {t:>5}"]
    return "\n".join(lines)


QUESTION_LABELS = ("direct_correlation", "answer_oriented", "non_related")


class UnlabeledQuestion(ValueError):
    pass


@dataclass(frozen=True)
class QuestionDistribution:
    counts: dict[str, int] = field(default_factory=dict)

    @property
    def total(self) -> int:
        return sum(self.counts.values())

    @property
    def proportions(self) -> dict[str, float]:
        return {k: self.counts[k] / self.total for k in QUESTION_LABELS}

    def to_dict(self) -> dict:
        return {
            "counts": dict(self.counts),
            "total": self.total,
            "proportions": {k: round(v, 4) for k, v in self.proportions.items()},
        }

    def table(self) -> str:
        head = f"{'scheme':<11}" + "".join(f"{k:>20}" for k in QUESTION_LABELS)
        prop = f"{'proportion':<11}" + "".join(f"{self.proportions[k]:>20.4f}" for k in QUESTION_LABELS)
        size = f"{'size':<11}" + "".join(f"{self.counts[k]:>20d}" for k in QUESTION_LABELS)
        return "\n".join([head, prop, size])


def question_distribution(labels: Iterable) -> QuestionDistribution:
    """Counts and proportions per filter label.

    Accepts label strings or objects with a ``filter_label`` attribute.
    """
    counts: Counter[str] = Counter()
    for item in labels:
        label = getattr(item, "filter_label", item)
        label = getattr(label, "value", label)
        if label not in QUESTION_LABELS:
            raise UnlabeledQuestion(f"question without a valid filter label: {item!r}")
        counts[label] += 1
    if not counts:
        raise ValueError("no questions: proportions are undefined")
    return QuestionDistribution({k: counts.get(k, 0) for k in QUESTION_LABELS})
