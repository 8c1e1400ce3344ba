"""Attack-graph data model.

A graph holds entities, timestamped atomic events
``(subject, action, object, timestamp, techniques)`` and supplementary
non-verbal relations. Graph values are immutable: :func:`apply_delta`
returns a new graph. Collections are kept in canonical order, so two graphs
built from the same elements in any order compare equal.
"""

from __future__ import annotations

import dataclasses
import html
import json
from dataclasses import dataclass, field
from enum import Enum
from typing import Any

import jsonschema

from .catalog import TechniqueCatalog, is_technique_id, parse_technique_string, UnparseableTechnique
from .text import normalize_name

PROVENANCES = ("text", "image", "merged")


class DeltaKind(str, Enum):
    NODE_EXTENSION = "node_extension"
    RELATION_UPDATE = "relation_update"
    TECHNIQUE_ADDITION = "technique_addition"


# -- domain types ------------------------------------------------------------


@dataclass(frozen=True)
class Entity:
    id: str
    name: str
    entity_type: str
    description: str | None = None
    provenance: str = "text"

    @property
    def key(self) -> tuple[str, str]:
        """Identity for dedup and diffing: normalized name plus type."""
        return normalize_name(self.name), normalize_name(self.entity_type)


@dataclass(frozen=True)
class AtomicEvent:
    subject: str
    action: str
    object: str
    timestamp: int
    techniques: tuple[str, ...] = ()
    provenance: str = "text"

    def __post_init__(self):
        object.__setattr__(self, "techniques", tuple(self.techniques))

    def sort_key(self):
        return (self.timestamp, self.subject, self.action, self.object, self.techniques, self.provenance)


@dataclass(frozen=True)
class SupplementaryRelation:
    subject: str
    relation: str
    object: str
    provenance: str = "text"

    def sort_key(self):
        return (self.subject, self.relation, self.object, self.provenance)


@dataclass(frozen=True)
class AttackGraph:
    report_id: str
    entities: tuple[Entity, ...] = ()
    events: tuple[AtomicEvent, ...] = ()
    supplementary: tuple[SupplementaryRelation, ...] = ()
    metadata: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "entities", tuple(sorted(self.entities, key=lambda e: (e.id, e.name, e.entity_type))))
        object.__setattr__(self, "events", tuple(sorted(self.events, key=AtomicEvent.sort_key)))
        object.__setattr__(self, "supplementary", tuple(sorted(self.supplementary, key=SupplementaryRelation.sort_key)))
        object.__setattr__(self, "metadata", dict(sorted(self.metadata.items())))

    def entity(self, entity_id: str) -> Entity | None:
        for e in self.entities:
            if e.id == entity_id:
                return e
        return None

    def name_of(self, entity_id: str) -> str:
        e = self.entity(entity_id)
        return e.name if e else entity_id

    def resolve(self, ref: str, type_hint: str = "") -> Entity | None:
        """Find an entity by id, falling back to normalized name.

        Several name matches prefer one of ``type_hint``, then the lowest id.
        """
        exact = self.entity(ref)
        if exact is not None:
            return exact
        key = normalize_name(ref)
        hits = [e for e in self.entities if normalize_name(e.name) == key]
        if not hits:
            return None
        if type_hint:
            typed = [e for e in hits if normalize_name(e.entity_type) == normalize_name(type_hint)]
            hits = typed or hits
        return hits[0]

    def techniques(self) -> set[str]:
        return {t for ev in self.events for t in ev.techniques}

    def max_timestamp(self) -> int:
        return max((ev.timestamp for ev in self.events), default=-1)


@dataclass(frozen=True)
class NewNode:
    id: str
    type: str
    description: str = ""


@dataclass(frozen=True)
class Relationship:
    subject: str
    relation: str
    object: str
    subject_type: str = ""
    object_type: str = ""


@dataclass(frozen=True)
class TargetRelationship:
    subject: str
    relation: str
    object: str


@dataclass(frozen=True)
class DeltaSource:
    image_id: str
    question_id: str


@dataclass(frozen=True)
class GraphDelta:
    """One proposed enhancement of a graph.

    ``as_event`` routes a new link to a timed event (True) or a supplementary
    relation (False); ``None`` means the kind default: node extensions link
    through supplementary relations, relation updates through events.
    """

    kind: DeltaKind
    description: str
    new_node: NewNode | None = None
    relationship: Relationship | None = None
    target: TargetRelationship | None = None
    new_techniques: tuple[str, ...] = ()
    replace_existing: bool = False
    as_event: bool | None = None
    source: DeltaSource | None = None

    def __post_init__(self):
        object.__setattr__(self, "kind", DeltaKind(self.kind))
        object.__setattr__(self, "new_techniques", tuple(self.new_techniques))

    @property
    def links_as_event(self) -> bool:
        if self.as_event is not None:
            return self.as_event
        return self.kind is DeltaKind.RELATION_UPDATE

    def problems(self) -> list[str]:
        out = []
        if not self.description.strip():
            out.append("description is empty")
        has = {
            "new_node": self.new_node is not None,
            "relationship": self.relationship is not None,
            "target_relationship": self.target is not None,
            "new_techniques": bool(self.new_techniques),
        }
        wanted = {
            DeltaKind.NODE_EXTENSION: {"new_node", "relationship"},
            DeltaKind.RELATION_UPDATE: {"relationship"},
            DeltaKind.TECHNIQUE_ADDITION: {"target_relationship", "new_techniques"},
        }[self.kind]
        for name, present in has.items():
            if present and name not in wanted:
                out.append(f"{self.kind.value} must not carry {name}")
            if not present and name in wanted:
                out.append(f"{self.kind.value} requires {name}")
        if self.new_node is not None and not (self.new_node.id.strip() and self.new_node.type.strip()):
            out.append("new_node needs id and type")
        for rel in (self.relationship, self.target):
            if rel is not None and not (rel.subject.strip() and rel.relation.strip() and rel.object.strip()):
                out.append("relationship needs subject, relation and object")
        for s in self.new_techniques:
            try:
                technique_id_of(s)
            except UnparseableTechnique:
                out.append(f"unparseable technique {s!r}")
        return out

    def technique_ids(self) -> tuple[str, ...]:
        seen: list[str] = []
        for s in self.new_techniques:
            tid = technique_id_of(s)
            if tid not in seen:
                seen.append(tid)
        return tuple(seen)

    def identity(self) -> tuple:
        """Kind plus normalized payload; description and source excluded."""
        n = normalize_name
        node = (n(self.new_node.id), n(self.new_node.type)) if self.new_node else None
        rel = (n(self.relationship.subject), n(self.relationship.relation), n(self.relationship.object)) if self.relationship else None
        tgt = (n(self.target.subject), n(self.target.relation), n(self.target.object)) if self.target else None
        techs = tuple(sorted(self.technique_ids())) if not self.problems() else self.new_techniques
        return (self.kind.value, node, rel, tgt, techs, self.replace_existing, self.links_as_event)

    def to_wire(self) -> dict[str, Any]:
        out: dict[str, Any] = {"type": self.kind.value, "description": self.description}
        if self.new_node is not None:
            out["new_node"] = {
                "id": self.new_node.id,
                "type": self.new_node.type,
                "properties": {"description": self.new_node.description},
            }
        if self.relationship is not None:
            r = self.relationship
            out["relationship"] = {
                "subject": r.subject,
                "subject_type": r.subject_type,
                "relation": r.relation,
                "object": r.object,
                "object_type": r.object_type,
            }
        if self.kind is DeltaKind.RELATION_UPDATE:
            out["replace_existing"] = self.replace_existing
        if self.target is not None:
            out["target_relationship"] = {"subject": self.target.subject, "relation": self.target.relation, "object": self.target.object}
        if self.kind is DeltaKind.TECHNIQUE_ADDITION:
            out["new_techniques"] = list(self.new_techniques)
        if self.as_event is not None:
            out["as_event"] = self.as_event
        if self.source is not None:
            out["source"] = {"image_id": self.source.image_id, "question_id": self.source.question_id}
        return out


def technique_id_of(s: str) -> str:
    """Accept ``"T1055 - Process Injection"`` or a bare ``"T1055"``."""
    bare = s.strip()
    if is_technique_id(bare):
        return bare
    return parse_technique_string(s)[0]


# -- wire parsing for deltas ---------------------------------------------------

_KIND_ALIASES = {
    "node_extension": DeltaKind.NODE_EXTENSION,
    "new_node_addition": DeltaKind.NODE_EXTENSION,
    "node_addition": DeltaKind.NODE_EXTENSION,
    "relation_update": DeltaKind.RELATION_UPDATE,
    "new_relationship_addition": DeltaKind.RELATION_UPDATE,
    "relationship_addition": DeltaKind.RELATION_UPDATE,
    "relationship_update": DeltaKind.RELATION_UPDATE,
    "technique_addition": DeltaKind.TECHNIQUE_ADDITION,
}


class DeltaFormatError(ValueError):
    pass


def _fold(obj: Any) -> dict[str, Any]:
    # "SubjectType", "subject_type" and "subject-type" all fold to "subjecttype"
    if not isinstance(obj, dict):
        raise DeltaFormatError(f"expected an object, got {type(obj).__name__}")
    return {str(k).replace("_", "").replace("-", "").lower(): v for k, v in obj.items()}


def _text(d: dict[str, Any], key: str, default: str = "") -> str:
    v = d.get(key, default)
    if v is None:
        return default
    if isinstance(v, (dict, list)):
        raise DeltaFormatError(f"field {key!r} must be a string")
    return str(v).strip()


def delta_from_wire(obj: Any) -> GraphDelta:
    """Parse one delta object; accepts the lower-snake and CamelCase key styles."""
    d = _fold(obj)
    kind = _KIND_ALIASES.get(_text(d, "type").lower().replace(" ", "_").replace("-", "_"))
    if kind is None:
        raise DeltaFormatError(f"unknown delta type {d.get('type')!r}")
    new_node = relationship = target = None
    techniques: tuple[str, ...] = ()
    if "newnode" in d:
        nn = _fold(d["newnode"])
        props = _fold(nn.get("properties") or {})
        new_node = NewNode(_text(nn, "id") or _text(nn, "name"), _text(nn, "type"), _text(props, "description") or _text(nn, "description"))
    if "relationship" in d:
        r = _fold(d["relationship"])
        relationship = Relationship(
            _text(r, "subject"), _text(r, "relation"), _text(r, "object"), _text(r, "subjecttype"), _text(r, "objecttype")
        )
    if "targetrelationship" in d:
        t = _fold(d["targetrelationship"])
        target = TargetRelationship(_text(t, "subject"), _text(t, "relation"), _text(t, "object"))
    if "newtechniques" in d:
        raw = d["newtechniques"]
        if isinstance(raw, str):
            raw = [raw]
        if not isinstance(raw, list) or not all(isinstance(x, str) for x in raw):
            raise DeltaFormatError("new_techniques must be a list of strings")
        techniques = tuple(x.strip() for x in raw)
    source = None
    if isinstance(d.get("source"), dict):
        s = _fold(d["source"])
        source = DeltaSource(_text(s, "imageid"), _text(s, "questionid"))
    as_event = d.get("asevent")
    delta = GraphDelta(
        kind=kind,
        description=_text(d, "description"),
        new_node=new_node,
        relationship=relationship,
        target=target,
        new_techniques=techniques,
        replace_existing=bool(d.get("replaceexisting", False)),
        as_event=as_event if isinstance(as_event, bool) else None,
        source=source,
    )
    problems = delta.problems()
    if problems:
        raise DeltaFormatError("; ".join(problems))
    return delta


# -- validation --------------------------------------------------------------


@dataclass(frozen=True)
class Violation:
    rule: str
    element: str
    message: str


def validate_graph(g: AttackGraph) -> list[Violation]:
    out: list[Violation] = []
    ids: set[str] = set()
    for e in g.entities:
        where = f"entity {e.id!r}"
        if e.id in ids:
            out.append(Violation("duplicate-entity-id", where, "entity id used more than once"))
        ids.add(e.id)
        if not e.name.strip():
            out.append(Violation("empty-name", where, "entity name is empty"))
        if not e.entity_type.strip():
            out.append(Violation("empty-type", where, "entity type is empty"))
        if e.provenance not in PROVENANCES:
            out.append(Violation("bad-provenance", where, f"unknown provenance {e.provenance!r}"))

    seen_events: set[tuple] = set()
    for i, ev in enumerate(g.events):
        where = f"event[{i}] ({ev.subject}, {ev.action}, {ev.object}, {ev.timestamp})"
        for end in (ev.subject, ev.object):
            if end not in ids:
                out.append(Violation("dangling-endpoint", where, f"unknown entity id {end!r}"))
        if not ev.action.strip():
            out.append(Violation("empty-action", where, "action is empty"))
        if ev.timestamp < 0:
            out.append(Violation("negative-timestamp", where, "timestamp must be >= 0"))
        for t in ev.techniques:
            if not is_technique_id(t):
                out.append(Violation("bad-technique-id", where, f"malformed technique id {t!r}"))
        if ev.provenance not in PROVENANCES:
            out.append(Violation("bad-provenance", where, f"unknown provenance {ev.provenance!r}"))
        key = (ev.subject, normalize_name(ev.action), ev.object, ev.timestamp)
        if key in seen_events:
            out.append(Violation("duplicate-event", where, "same (subject, action, object, timestamp) as an earlier event"))
        seen_events.add(key)

    for i, rel in enumerate(g.supplementary):
        where = f"supplementary[{i}] ({rel.subject}, {rel.relation}, {rel.object})"
        for end in (rel.subject, rel.object):
            if end not in ids:
                out.append(Violation("dangling-endpoint", where, f"unknown entity id {end!r}"))
        if not rel.relation.strip():
            out.append(Violation("empty-relation", where, "relation is empty"))
        if rel.provenance not in PROVENANCES:
            out.append(Violation("bad-provenance", where, f"unknown provenance {rel.provenance!r}"))
    return out


# -- delta application -------------------------------------------------------


class DeltaRejected(ValueError):
    """A delta that cannot be applied. ``reason`` is a stable short code."""

    def __init__(self, reason: str, message: str):
        super().__init__(f"{reason}: {message}")
        self.reason = reason


def _require(g: AttackGraph, ref: str, type_hint: str = "") -> Entity:
    e = g.resolve(ref, type_hint)
    if e is None:
        raise DeltaRejected("target-not-found", f"no entity matches {ref!r}")
    return e


def _matching_events(g: AttackGraph, subject: str, obj: str, action: str | None = None) -> list[AtomicEvent]:
    out = [ev for ev in g.events if ev.subject == subject and ev.object == obj]
    if action is not None:
        out = [ev for ev in out if normalize_name(ev.action) == normalize_name(action)]
    return sorted(out, key=AtomicEvent.sort_key)


def _add_link(g: AttackGraph, subject: str, label: str, obj: str, as_event: bool) -> tuple[AttackGraph, bool]:
    if as_event:
        if _matching_events(g, subject, obj, label):
            return g, False
        ev = AtomicEvent(subject, label, obj, g.max_timestamp() + 1, (), "image")
        return dataclasses.replace(g, events=g.events + (ev,)), True
    for rel in g.supplementary:
        if rel.subject == subject and rel.object == obj and normalize_name(rel.relation) == normalize_name(label):
            return g, False
    rel = SupplementaryRelation(subject, label, obj, "image")
    return dataclasses.replace(g, supplementary=g.supplementary + (rel,)), True


def _apply_node_extension(g: AttackGraph, d: GraphDelta) -> tuple[AttackGraph, bool]:
    nn, rel = d.new_node, d.relationship
    new_key = normalize_name(nn.id)
    subject_is_new = normalize_name(rel.subject) == new_key
    object_is_new = normalize_name(rel.object) == new_key
    if subject_is_new == object_is_new:
        raise DeltaRejected("invalid-delta", "relationship must link the new node to exactly one existing entity")
    other = _require(g, rel.object if subject_is_new else rel.subject, rel.object_type if subject_is_new else rel.subject_type)

    candidate = Entity(nn.id, nn.id, nn.type, nn.description or None, "image")
    clash = g.entity(nn.id) or next((e for e in g.entities if e.key == candidate.key), None)
    if clash is not None:
        if clash.provenance == "image" and clash.key == candidate.key:
            # re-application: the link decides whether anything is left to do
            s, o = (clash.id, other.id) if subject_is_new else (other.id, clash.id)
            _, changed = _add_link(g, s, rel.relation, o, d.links_as_event)
            if not changed:
                return g, False
        raise DeltaRejected("duplicate-node-id", f"entity {nn.id!r} already exists")

    g = dataclasses.replace(g, entities=g.entities + (candidate,))
    s, o = (candidate.id, other.id) if subject_is_new else (other.id, candidate.id)
    g, _ = _add_link(g, s, rel.relation, o, d.links_as_event)
    return g, True


def _apply_relation_update(g: AttackGraph, d: GraphDelta) -> tuple[AttackGraph, bool]:
    rel = d.relationship
    s = _require(g, rel.subject, rel.subject_type)
    o = _require(g, rel.object, rel.object_type)
    if not d.replace_existing:
        return _add_link(g, s.id, rel.relation, o.id, d.links_as_event)

    events = _matching_events(g, s.id, o.id)
    if events:
        old = events[0]
        if normalize_name(old.action) == normalize_name(rel.relation):
            return g, False
        new = dataclasses.replace(old, action=rel.relation, provenance="merged")
        new_key = (new.subject, normalize_name(new.action), new.object, new.timestamp)
        if any(ev is not old and (ev.subject, normalize_name(ev.action), ev.object, ev.timestamp) == new_key for ev in g.events):
            raise DeltaRejected("duplicate-event", "replacement collides with an existing event")
        rest = tuple(ev for ev in g.events if ev is not old)
        meta = dict(g.metadata)
        meta[f"replaced:{s.id}|{o.id}|{old.timestamp}"] = old.action
        return dataclasses.replace(g, events=rest + (new,), metadata=meta), True

    sups = sorted((r for r in g.supplementary if r.subject == s.id and r.object == o.id), key=SupplementaryRelation.sort_key)
    if not sups:
        raise DeltaRejected("target-not-found", f"no relation between {rel.subject!r} and {rel.object!r} to replace")
    old_rel = sups[0]
    if normalize_name(old_rel.relation) == normalize_name(rel.relation):
        return g, False
    rest = tuple(r for r in g.supplementary if r is not old_rel)
    meta = dict(g.metadata)
    meta[f"replaced:{s.id}|{o.id}|supplementary"] = old_rel.relation
    new_rel = dataclasses.replace(old_rel, relation=rel.relation, provenance="merged")
    return dataclasses.replace(g, supplementary=rest + (new_rel,), metadata=meta), True


def _apply_technique_addition(g: AttackGraph, d: GraphDelta, catalog: TechniqueCatalog) -> tuple[AttackGraph, bool]:
    ids = d.technique_ids()
    unknown = [t for t in ids if t not in catalog]
    if unknown:
        raise DeltaRejected("unknown-technique-id", f"not in catalog: {', '.join(unknown)}")
    t = d.target
    s = _require(g, t.subject)
    o = _require(g, t.object)
    events = _matching_events(g, s.id, o.id, t.relation)
    if not events:
        raise DeltaRejected("target-not-found", f"no event ({t.subject}, {t.relation}, {t.object})")
    ev = events[0]
    fresh = tuple(x for x in ids if x not in ev.techniques)
    if not fresh:
        return g, False
    new = dataclasses.replace(ev, techniques=ev.techniques + fresh)
    rest = tuple(x for x in g.events if x is not ev)
    return dataclasses.replace(g, events=rest + (new,)), True


def apply_delta(g: AttackGraph, d: GraphDelta, catalog: TechniqueCatalog) -> tuple[AttackGraph, bool]:
    """Apply ``d`` to ``g``.

    Returns the new graph and whether anything changed; an already-applied
    delta returns ``(g, False)``. Raises :class:`DeltaRejected` otherwise.
    """
    problems = d.problems()
    if problems:
        raise DeltaRejected("invalid-delta", "; ".join(problems))
    if d.kind is DeltaKind.NODE_EXTENSION:
        return _apply_node_extension(g, d)
    if d.kind is DeltaKind.RELATION_UPDATE:
        return _apply_relation_update(g, d)
    return _apply_technique_addition(g, d, catalog)


# -- diffing -----------------------------------------------------------------


@dataclass(frozen=True)
class GainReport:
    added_entities: tuple[tuple[str, str], ...]
    added_relations: tuple[tuple[str, str, str], ...]
    added_techniques: tuple[str, ...]

    @property
    def counts(self) -> tuple[int, int, int]:
        return len(self.added_entities), len(self.added_relations), len(self.added_techniques)

    def to_dict(self) -> dict[str, Any]:
        e, r, t = self.counts
        return {
            "added_entities": e,
            "added_relations": r,
            "added_techniques": t,
            "entities": [{"name": n, "type": ty} for n, ty in self.added_entities],
            "relations": [{"subject": s, "relation": rel, "object": o} for s, rel, o in self.added_relations],
            "techniques": list(self.added_techniques),
        }


def relation_tuples(g: AttackGraph) -> dict[tuple[str, str, str], tuple[str, str, str]]:
    """Normalized (subject, label, object) -> display tuple, over events and supplementary links."""
    out: dict[tuple[str, str, str], tuple[str, str, str]] = {}
    links = [(ev.subject, ev.action, ev.object) for ev in g.events]
    links += [(r.subject, r.relation, r.object) for r in g.supplementary]
    for s, label, o in links:
        disp = (g.name_of(s), label, g.name_of(o))
        out.setdefault(tuple(normalize_name(x) for x in disp), disp)
    return out


class ReportMismatch(ValueError):
    pass


def diff_graphs(text_g: AttackGraph, mm_g: AttackGraph) -> GainReport:
    if text_g.report_id != mm_g.report_id:
        raise ReportMismatch(f"report ids differ: {text_g.report_id!r} vs {mm_g.report_id!r}")
    base_keys = {e.key for e in text_g.entities}
    ents: dict[tuple[str, str], tuple[str, str]] = {}
    for e in mm_g.entities:
        if e.key not in base_keys:
            ents.setdefault(e.key, (e.name, e.entity_type))
    base_rel = relation_tuples(text_g)
    rels = {k: v for k, v in relation_tuples(mm_g).items() if k not in base_rel}
    techs = mm_g.techniques() - text_g.techniques()
    return GainReport(
        tuple(ents[k] for k in sorted(ents)),
        tuple(rels[k] for k in sorted(rels)),
        tuple(sorted(techs)),
    )


# -- serialization -----------------------------------------------------------

GRAPH_SCHEMA: dict[str, Any] = {
    "type": "object",
    "required": ["report_id", "entities", "events", "supplementary", "metadata"],
    "additionalProperties": False,
    "properties": {
        "report_id": {"type": "string"},
        "entities": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["id", "name", "entity_type"],
                "additionalProperties": False,
                "properties": {
                    "id": {"type": "string"},
                    "name": {"type": "string"},
                    "entity_type": {"type": "string"},
                    "description": {"type": ["string", "null"]},
                    "provenance": {"enum": list(PROVENANCES)},
                },
            },
        },
        "events": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["subject", "action", "object", "timestamp"],
                "additionalProperties": False,
                "properties": {
                    "subject": {"type": "string"},
                    "action": {"type": "string"},
                    "object": {"type": "string"},
                    "timestamp": {"type": "integer", "minimum": 0},
                    "techniques": {"type": "array", "items": {"type": "string"}},
                    "provenance": {"enum": list(PROVENANCES)},
                },
            },
        },
        "supplementary": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["subject", "relation", "object"],
                "additionalProperties": False,
                "properties": {
                    "subject": {"type": "string"},
                    "relation": {"type": "string"},
                    "object": {"type": "string"},
                    "provenance": {"enum": list(PROVENANCES)},
                },
            },
        },
        "metadata": {"type": "object", "additionalProperties": {"type": "string"}},
    },
}


class GraphSchemaError(ValueError):
    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


def to_dict(g: AttackGraph) -> dict[str, Any]:
    return {
        "report_id": g.report_id,
        "entities": [
            {"id": e.id, "name": e.name, "entity_type": e.entity_type, "description": e.description, "provenance": e.provenance}
            for e in g.entities
        ],
        "events": [
            {
                "subject": ev.subject,
                "action": ev.action,
                "object": ev.object,
                "timestamp": ev.timestamp,
                "techniques": list(ev.techniques),
                "provenance": ev.provenance,
            }
            for ev in g.events
        ],
        "supplementary": [
            {"subject": r.subject, "relation": r.relation, "object": r.object, "provenance": r.provenance}
            for r in g.supplementary
        ],
        "metadata": dict(g.metadata),
    }


def canonical_dumps(obj: Any) -> bytes:
    """The one JSON layout used for every persisted artifact."""
    return (json.dumps(obj, sort_keys=True, indent=2, ensure_ascii=False) + "\n").encode("utf-8")


def to_canonical_json(g: AttackGraph) -> bytes:
    return canonical_dumps(to_dict(g))


def from_dict(doc: Any) -> AttackGraph:
    try:
        jsonschema.validate(doc, GRAPH_SCHEMA)
    except jsonschema.ValidationError as err:
        raise GraphSchemaError(err.json_path, err.message) from None
    return AttackGraph(
        report_id=doc["report_id"],
        entities=tuple(
            Entity(e["id"], e["name"], e["entity_type"], e.get("description"), e.get("provenance", "text")) for e in doc["entities"]
        ),
        events=tuple(
            AtomicEvent(ev["subject"], ev["action"], ev["object"], ev["timestamp"], tuple(ev.get("techniques", ())), ev.get("provenance", "text"))
            for ev in doc["events"]
        ),
        supplementary=tuple(
            SupplementaryRelation(r["subject"], r["relation"], r["object"], r.get("provenance", "text")) for r in doc["supplementary"]
        ),
        metadata=dict(doc["metadata"]),
    )


def from_json(data: bytes | str) -> AttackGraph:
    try:
        doc = json.loads(data)
    except json.JSONDecodeError as err:
        raise GraphSchemaError("$", f"not valid JSON ({err.msg} at line {err.lineno})") from None
    return from_dict(doc)


# -- text summaries and export -----------------------------------------------


def triplet_listing(g: AttackGraph) -> str:
    """One line per event and supplementary link, in timestamp order."""
    lines = []
    for ev in g.events:
        techs = f" [{', '.join(ev.techniques)}]" if ev.techniques else ""
        lines.append(f"t={ev.timestamp}: {g.name_of(ev.subject)} -> {ev.action} -> {g.name_of(ev.object)}{techs}")
    for r in g.supplementary:
        lines.append(f"link: {g.name_of(r.subject)} -> {r.relation} -> {g.name_of(r.object)}")
    return "\n".join(lines)


def _dot_quote(s: str) -> str:
    return '"' + s.replace("\\", "\\\\").replace('"', '\\"').replace("\n", "\\n") + '"'


def export_dot(g: AttackGraph) -> str:
    lines = [f"digraph {_dot_quote(g.report_id)} {{", "  rankdir=LR;", "  node [shape=box, style=rounded];"]
    for e in g.entities:
        label = f"{e.name}\n({e.entity_type})"
        attrs = [f"label={_dot_quote(label)}"]
        if e.provenance != "text":
            attrs.append('color="#c0392b"')
        lines.append(f"  {_dot_quote(e.id)} [{', '.join(attrs)}];")
    for ev in g.events:
        attrs = [f"label={_dot_quote(ev.action)}"]
        if ev.techniques:
            attrs.append(f"tooltip={_dot_quote(', '.join(ev.techniques))}")
        if ev.provenance != "text":
            attrs.append('color="#c0392b"')
        lines.append(f"  {_dot_quote(ev.subject)} -> {_dot_quote(ev.object)} [{', '.join(attrs)}];")
    for r in g.supplementary:
        attrs = [f"label={_dot_quote(r.relation)}", "style=dashed"]
        if r.provenance != "text":
            attrs.append('color="#c0392b"')
        lines.append(f"  {_dot_quote(r.subject)} -> {_dot_quote(r.object)} [{', '.join(attrs)}];")
    lines.append("}")
    return "\n".join(lines) + "\n"


_HTML_TEMPLATE = """<!DOCTYPE html>
<html lang="en">
<head>
<meta charset="utf-8">
<title>{title}</title>
<style>
body {{ font-family: sans-serif; margin: 1em; }}
svg {{ border: 1px solid #ccc; }}
.image {{ fill: #f5b7b1; }} .text {{ fill: #d6eaf8; }} .merged {{ fill: #f9e79f; }}
table {{ border-collapse: collapse; margin-top: 1em; }} td, th {{ border: 1px solid #ccc; padding: 2px 6px; }}
</style>
</head>
<body>
<h1>{title}</h1>
<svg id="graph" width="900" height="700"></svg>
<h2>Entities</h2>
<ul>
{entity_items}
</ul>
<h2>Events</h2>
<table><tr><th>t</th><th>subject</th><th>action</th><th>object</th><th>techniques</th></tr>
{event_rows}
</table>
<script type="application/json" id="graph-data">{data}</script>
<script>
(function () {{
  var g = JSON.parse(document.getElementById("graph-data").textContent);
  var svg = document.getElementById("graph"), ns = "http://www.w3.org/2000/svg";
  var w = 900, h = 700, cx = w / 2, cy = h / 2, r = Math.min(w, h) / 2 - 80, pos = {{}};
  g.entities.forEach(function (e, i) {{
    var a = 2 * Math.PI * i / Math.max(g.entities.length, 1);
    pos[e.id] = [cx + r * Math.cos(a), cy + r * Math.sin(a)];
  }});
  function el(tag, attrs, text) {{
    var n = document.createElementNS(ns, tag);
    for (var k in attrs) n.setAttribute(k, attrs[k]);
    if (text !== undefined) n.textContent = text;
    svg.appendChild(n);
    return n;
  }}
  function edge(s, o, label, dashed, tip) {{
    var p = pos[s], q = pos[o];
    if (!p || !q) return;
    var line = el("line", {{x1: p[0], y1: p[1], x2: q[0], y2: q[1], stroke: "#555", "stroke-dasharray": dashed ? "4 3" : ""}});
    if (tip) el("title", {{}}, tip);
    el("text", {{x: (p[0] + q[0]) / 2, y: (p[1] + q[1]) / 2, "font-size": 10, fill: "#333"}}, label);
  }}
  g.events.forEach(function (ev) {{ edge(ev.subject, ev.object, ev.action, false, ev.techniques.join(", ")); }});
  g.supplementary.forEach(function (rel) {{ edge(rel.subject, rel.object, rel.relation, true, ""); }});
  g.entities.forEach(function (e) {{
    var p = pos[e.id];
    el("circle", {{cx: p[0], cy: p[1], r: 18, "class": e.provenance, stroke: "#333"}});
    el("text", {{x: p[0] + 20, y: p[1] + 4, "font-size": 12}}, e.name);
  }});
}})();
</script>
</body>
</html>
"""


def export_html(g: AttackGraph) -> str:
    """Single-file page: embedded graph data plus an inline SVG renderer."""
    data = json.dumps(to_dict(g), sort_keys=True, ensure_ascii=False).replace("</", "<\\/")
    esc = html.escape
    entity_items = "\n".join(f"<li>{esc(e.name)} <small>({esc(e.entity_type)}, {e.provenance})</small></li>" for e in g.entities)
    event_rows = "\n".join(
        f"<tr><td>{ev.timestamp}</td><td>{esc(g.name_of(ev.subject))}</td><td>{esc(ev.action)}</td>"
        f"<td>{esc(g.name_of(ev.object))}</td><td>{esc(', '.join(ev.techniques))}</td></tr>"
        for ev in g.events
    )
    return _HTML_TEMPLATE.format(title=esc(g.report_id), entity_items=entity_items, event_rows=event_rows, data=data)
