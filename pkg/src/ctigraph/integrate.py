"""Turning verified answers into graph deltas and applying them.

Each accepted question/answer pair becomes an enhancement reference. One
model call per reference proposes deltas, which are then applied serially in
(image_id, question_id) order.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import re
from dataclasses import dataclass, field
from importlib import resources
from typing import Iterable, Sequence

from . import prompts
from .brainstorm import FilterLabel, Question
from .catalog import TechniqueCatalog
from .corpus import ImageType, ThreatImage
from .extract import Answer
from .gateway import Gateway, GatewayError, build_request
from .graph import (
    AttackGraph,
    DeltaFormatError,
    DeltaRejected,
    DeltaSource,
    GraphDelta,
    apply_delta,
    delta_from_wire,
    triplet_listing,
)
from .text import collapse, normalize_label, normalize_name
from .verify import POSITIVE_LEVELS, Level

log = logging.getLogger(__name__)

REFERENCE_TEMPLATE = "This is the {aspect} of the {image_topic} as follows: {answer_text}"
CANDIDATE_LABELS = frozenset({FilterLabel.DIRECT_CORRELATION, FilterLabel.ANSWER_ORIENTED})

_TYPE_TOPICS = {
    ImageType.ATTACK_FLOW: "attack flow diagram",
    ImageType.MALWARE_CODE: "malware code snippet",
    ImageType.TOOL_SCREENSHOT: "application tool screenshot",
    ImageType.DATA_TABLE: "threat data table",
    ImageType.CHART: "threat data chart",
    ImageType.FILE_PATHS: "file path listing",
    ImageType.DESCRIPTIVE: "descriptive threat image",
}

_FRAME = re.compile(
    r"^(?:what|which|where|how|who|when|why)(?:\s+(?:is|are|was|were|does|do|did|can|could|might|may|kind of|kinds of))?\s+",
    re.IGNORECASE,
)
_IMAGE_TAIL = re.compile(
    r"(?:\s+(?:involved|shown|depicted|exhibited|highlighted|present|displayed|visible|contained|reflected))?"
    r"\s+(?:of|in|on|by|from|within|for)\s+(?:the|this)\s+(?:image|picture|figure|screenshot)\b.*$",
    re.IGNORECASE,
)
_FENCE = re.compile(r"^```[a-zA-Z]*\s*|\s*```$")


class PreconditionError(ValueError):
    pass


@dataclass(frozen=True)
class EnhancementReference:
    image_id: str
    image_topic: str
    question_id: str
    aspect: str
    answer_text: str

    @property
    def formatted(self) -> str:
        return REFERENCE_TEMPLATE.format(aspect=self.aspect, image_topic=self.image_topic, answer_text=self.answer_text)

    def to_dict(self) -> dict:
        return {"image_id": self.image_id, "question_id": self.question_id, "image_topic": self.image_topic,
                "aspect": self.aspect, "answer_text": self.answer_text, "formatted": self.formatted}


def question_aspect(text: str) -> str:
    """Strip the interrogative frame: "What is the main content of the image?" -> "main content"."""
    s = collapse(text).rstrip("?.! ")
    s = _FRAME.sub("", s)
    s = _IMAGE_TAIL.sub("", s)
    s = re.sub(r"^(?:the|a|an)\s+", "", s, flags=re.IGNORECASE).strip()
    return s.lower() or "content"


def model_aspect(question: Question, gateway: Gateway) -> str:
    """Model-assisted aspect phrase, falling back to deterministic stripping."""
    fallback = question_aspect(question.text)
    try:
        reply = collapse(gateway.complete(build_request(prompts.ASPECT, [question.text]))).strip(" .\"'").lower()
    except GatewayError as err:
        log.warning("aspect naming failed for %s (%s)", question.id, err)
        return fallback
    return reply if reply and len(reply.split()) <= 8 else fallback


def image_topic(image: ThreatImage, main_content: str | None = None, gateway: Gateway | None = None) -> str:
    """Short topic phrase; model-assisted when a gateway is given, else the type's stock phrase."""
    fallback = _TYPE_TOPICS.get(image.image_type, "threat image")
    if gateway is None:
        return fallback
    body = f"Image type: {image.image_type.label if image.image_type else 'unknown'}"
    if main_content:
        body += f"\nMain content: {main_content}"
    try:
        reply = collapse(gateway.complete(build_request(prompts.TOPIC, [image.part(), body])))
    except GatewayError as err:
        log.warning("topic naming failed for %s (%s); using %r", image.id, err, fallback)
        return fallback
    reply = reply.strip(" .\"'").lower()
    return reply if reply and len(reply.split()) <= 8 else fallback


def build_reference(image: ThreatImage, question: Question, answer: Answer, *, topic: str | None = None, aspect: str | None = None,
                    accept_levels: frozenset[Level] = POSITIVE_LEVELS, require_verified: bool = True) -> EnhancementReference:
    """Render one accepted pair. ``require_verified=False`` serves the no-verify ablation."""
    if answer.question_id != question.id:
        raise PreconditionError(f"answer {answer.question_id} does not belong to question {question.id}")
    if require_verified:
        if answer.quality is None or answer.quality.level not in accept_levels:
            level = answer.quality.level.value if answer.quality else "unassessed"
            raise PreconditionError(f"answer to {question.id} is {level}, not accepted")
        if question.filter_label not in CANDIDATE_LABELS:
            raise PreconditionError(f"question {question.id} is not in the candidate set")
    return EnhancementReference(image.id, topic or image_topic(image), question.id,
                                aspect or question_aspect(question.text), answer.text)


def load_vocabulary() -> list[str]:
    return json.loads(resources.files("ctigraph.data").joinpath("ontology.json").read_text("utf-8"))


@dataclass(frozen=True)
class ProposalResult:
    deltas: tuple[GraphDelta, ...] = ()
    warnings: tuple[str, ...] = ()
    error: str | None = None


def _is_no_match(text: str) -> bool:
    return normalize_label(text) in ("no match", "nomatch")


def parse_proposal(reply: str, source: DeltaSource | None = None) -> ProposalResult:
    """Parse a JSON array (or single object) of wire deltas; "No Match" means none."""
    text = _FENCE.sub("", reply.strip()).strip()
    if not text or _is_no_match(text):
        return ProposalResult()
    start = min((i for i in (text.find("["), text.find("{")) if i >= 0), default=-1)
    if start < 0:
        return ProposalResult(error=f"no JSON in response: {text[:80]!r}")
    end = max(text.rfind("]"), text.rfind("}"))
    try:
        doc = json.loads(text[start:end + 1])
    except json.JSONDecodeError as err:
        return ProposalResult(error=f"unparseable response: {err}")
    items = doc if isinstance(doc, list) else [doc]
    deltas, warnings = [], []
    for i, item in enumerate(items):
        try:
            d = delta_from_wire(item)
        except DeltaFormatError as err:
            warnings.append(f"item {i} dropped: {err}")
            log.warning("delta item %d dropped: %s", i, err)
            continue
        deltas.append(dataclasses.replace(d, source=source) if source is not None else d)
    return ProposalResult(tuple(deltas), tuple(warnings))


def propose_deltas(reference: EnhancementReference, graph: AttackGraph, vocabulary: Sequence[str],
                   catalog: TechniqueCatalog, gateway: Gateway) -> ProposalResult:
    body = "\n".join([
        f"Threat enhancement reference: {reference.formatted}",
        "Existing triplets (subject, relation, object):",
        triplet_listing(graph),
        f"Entity types: {', '.join(vocabulary)}",
        "Techniques:",
        *catalog.listing(),
    ])
    reply = gateway.complete(build_request(prompts.PROPOSE_DELTAS, [body]))
    result = parse_proposal(reply, DeltaSource(reference.image_id, reference.question_id))
    if result.error:
        log.error("proposal for %s/%s: %s", reference.image_id, reference.question_id, result.error)
    return result


@dataclass(frozen=True)
class Rejected:
    delta: GraphDelta
    reason: str
    message: str = ""

    def to_dict(self) -> dict:
        return {"delta": self.delta.to_wire(), "reason": self.reason, "message": self.message}


@dataclass(frozen=True)
class IntegrationResult:
    graph: AttackGraph
    applied: tuple[GraphDelta, ...] = ()
    rejected: tuple[Rejected, ...] = ()
    warnings: tuple[str, ...] = field(default_factory=tuple)

    def to_dict(self) -> dict:
        return {
            "applied": [d.to_wire() for d in self.applied],
            "rejected": [r.to_dict() for r in self.rejected],
            "warnings": list(self.warnings),
        }


def apply_all(graph: AttackGraph, deltas: Iterable[GraphDelta], catalog: TechniqueCatalog,
              seen: set | None = None) -> IntegrationResult:
    """Apply in the given order, suppressing repeats by delta identity.

    ``seen`` carries identities across calls and is updated in place.
    """
    seen = set() if seen is None else seen
    applied: list[GraphDelta] = []
    rejected: list[Rejected] = []
    for d in deltas:
        ident = d.identity()
        if ident in seen:
            rejected.append(Rejected(d, "duplicate", "same delta already applied"))
            continue
        try:
            graph, changed = apply_delta(graph, d, catalog)
        except DeltaRejected as err:
            rejected.append(Rejected(d, err.reason, str(err)))
            continue
        seen.add(ident)
        if changed:
            applied.append(d)
        else:
            rejected.append(Rejected(d, "no-change", "graph already contains this content"))
    return IntegrationResult(graph, tuple(applied), tuple(rejected))


def integrate_all(graph: AttackGraph, references: Iterable[EnhancementReference], catalog: TechniqueCatalog,
                  gateway: Gateway, vocabulary: Sequence[str] | None = None) -> IntegrationResult:
    """Propose and apply deltas for every reference, in (image_id, question_id) order.

    Proposals see the graph as it stands after the previous reference.
    Nothing here is fatal: failures end up in ``rejected`` or ``warnings``.
    """
    vocab = list(vocabulary) if vocabulary is not None else load_vocabulary()
    applied: list[GraphDelta] = []
    rejected: list[Rejected] = []
    warnings: list[str] = []
    seen: set = set()
    for ref in sorted(references, key=lambda r: (r.image_id, r.question_id)):
        where = f"{ref.image_id}/{ref.question_id}"
        try:
            proposal = propose_deltas(ref, graph, vocab, catalog, gateway)
        except GatewayError as err:
            warnings.append(f"{where}: proposal failed: {err}")
            continue
        warnings.extend(f"{where}: {w}" for w in proposal.warnings)
        if proposal.error:
            warnings.append(f"{where}: {proposal.error}")
        step = apply_all(graph, proposal.deltas, catalog, seen)
        graph = step.graph
        applied.extend(step.applied)
        rejected.extend(step.rejected)
    return IntegrationResult(graph, tuple(applied), tuple(rejected), tuple(warnings))


def candidate_pairs(questions: Iterable[Question], answers: dict[str, Answer], *,
                    accept_levels: frozenset[Level] = POSITIVE_LEVELS, require_verified: bool = True) -> list[tuple[Question, Answer]]:
    """Question/answer pairs that may feed integration, in question-id order."""
    out = []
    for q in sorted(questions, key=lambda q: (q.image_id, q.id)):
        a = answers.get(q.id)
        if a is None:
            continue
        if require_verified and (q.filter_label not in CANDIDATE_LABELS or a.quality is None
                                 or a.quality.level not in accept_levels):
            continue
        out.append((q, a))
    return out


def main_content_answer(questions: Iterable[Question], answers: dict[str, Answer]) -> str | None:
    for q in questions:
        if normalize_name(question_aspect(q.text)).startswith("main content") and q.id in answers:
            return answers[q.id].text
    return None
