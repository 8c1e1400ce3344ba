"""Independent oracles: what graph operations should produce, computed without the library's own helpers."""

from __future__ import annotations

from ctigraph.graph import AttackGraph, DeltaKind, GraphDelta


def norm(s: str) -> str:
    return " ".join(s.casefold().split())


def relation_set(g: AttackGraph) -> set[tuple[str, str, str]]:
    names = {e.id: e.name for e in g.entities}
    links = [(ev.subject, ev.action, ev.object) for ev in g.events] + [(r.subject, r.relation, r.object) for r in g.supplementary]
    return {(norm(names[s]), norm(a), norm(names[o])) for s, a, o in links}


def expected_contribution(before: AttackGraph, d: GraphDelta) -> tuple[set, set, set]:
    """What a successfully applied delta adds, computed from its payload alone."""
    techs_before = {t for ev in before.events for t in ev.techniques}
    if d.kind is DeltaKind.TECHNIQUE_ADDITION:
        ids = {s.split(" - ")[0].strip() for s in d.new_techniques}
        return set(), set(), ids - techs_before
    rel = d.relationship
    link = (norm(rel.subject), norm(rel.relation), norm(rel.object))
    rels = {link} - relation_set(before)
    ents = {(norm(d.new_node.id), norm(d.new_node.type))} if d.kind is DeltaKind.NODE_EXTENSION else set()
    return ents, rels, set()
