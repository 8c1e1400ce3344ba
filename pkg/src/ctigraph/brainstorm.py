"""Question pools per threat image.

General questions start from the leading questions of the image's type;
task-specific ones start from a summary of the text-based attack graph.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import re
from dataclasses import dataclass
from enum import Enum
from importlib import resources
from itertools import combinations
from pathlib import Path
from typing import Iterable, Sequence

from . import prompts
from .corpus import ContextPair, ImageType, ThreatImage
from .gateway import Gateway, build_request
from .text import jaccard, normalize_question

log = logging.getLogger(__name__)

DEFAULT_QUESTION_CAP = 40

_LIST_MARKER = re.compile(r"^\s*(?:[-*•]+|\d+[.)]|\(\d+\)|Q\d+[:.])\s*")
_TEMPLATE = re.compile(r"^(what|where)\b.*\b(image|picture)\b", re.IGNORECASE)


class QuestionKind(str, Enum):
    GENERAL = "general"
    TASK_SPECIFIC = "task_specific"


class FilterLabel(str, Enum):
    DIRECT_CORRELATION = "direct_correlation"
    ANSWER_ORIENTED = "answer_oriented"
    NON_RELATED = "non_related"


@dataclass(frozen=True)
class Question:
    id: str
    image_id: str
    text: str
    kind: QuestionKind
    filter_label: FilterLabel | None = None

    def labeled(self, label: FilterLabel | None) -> "Question":
        return dataclasses.replace(self, filter_label=label)

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "image_id": self.image_id,
            "text": self.text,
            "kind": self.kind.value,
            "filter_label": self.filter_label.value if self.filter_label else None,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Question":
        label = d.get("filter_label")
        return cls(d["id"], d["image_id"], d["text"], QuestionKind(d["kind"]), FilterLabel(label) if label else None)


@dataclass(frozen=True)
class QuestionPool:
    image_id: str
    questions: tuple[Question, ...] = ()

    def __len__(self) -> int:
        return len(self.questions)

    def __iter__(self):
        return iter(self.questions)


class LeadingQuestionBank(dict):
    """image type -> seed question texts."""

    def __init__(self, mapping: dict):
        super().__init__({ImageType(k): list(v) for k, v in mapping.items()})
        missing = [t.value for t in ImageType if t not in self]
        if missing:
            raise ValueError(f"leading-question bank lacks image types: {', '.join(missing)}")

    @classmethod
    def load(cls, path: str | Path | None = None) -> "LeadingQuestionBank":
        if path is None:
            text = resources.files("ctigraph.data").joinpath("leading_questions.json").read_text("utf-8")
        else:
            text = Path(path).read_text(encoding="utf-8")
        return cls(json.loads(text))


def seed_questions(image: ThreatImage, bank: LeadingQuestionBank) -> list[Question]:
    return [
        Question(f"{image.id}-s{i}", image.id, text, QuestionKind.GENERAL)
        for i, text in enumerate(bank[image.image_type])
    ]


def parse_questions(reply: str, *, exclude: Iterable[str] = ()) -> list[str]:
    """One question per line; lines not ending in '?' are dropped, duplicates removed."""
    seen = {normalize_question(t) for t in exclude}
    out = []
    for line in reply.splitlines():
        text = _LIST_MARKER.sub("", line).strip().strip('"').strip()
        if not text.endswith("?"):
            continue
        key = normalize_question(text)
        if not key or key in seen:
            continue
        seen.add(key)
        if not _TEMPLATE.match(text):
            log.info("question departs from the What/Where ... image template: %r", text)
        out.append(text)
    return out


def _context_block(contexts: ContextPair) -> str:
    return f"Image-Aware-Context: {contexts.image_aware}\nGlobal-Context: {contexts.global_context}"


def generate_general_questions(image: ThreatImage, bank: LeadingQuestionBank, contexts: ContextPair,
                               gateway: Gateway) -> list[Question]:
    if image.image_type is None or image.image_type not in bank:
        raise ValueError(f"image {image.id} has no classified type in the bank")
    seeds = bank[image.image_type]
    listing = "\n".join(f"- {q}" for q in seeds)
    req = build_request(prompts.GENERATE_QUESTIONS, [
        image.part(),
        f"Image type: {image.image_type.label}\nExisting questions:\n{listing}\n{_context_block(contexts)}",
    ])
    texts = parse_questions(gateway.complete(req), exclude=seeds)
    if not texts:
        log.warning("no general questions parsed for image %s", image.id)
    return [Question(f"{image.id}-g{i}", image.id, t, QuestionKind.GENERAL) for i, t in enumerate(texts)]


def generate_task_questions(image: ThreatImage, graph_summary: str, contexts: ContextPair,
                            gateway: Gateway) -> list[Question]:
    if not graph_summary.strip():
        raise ValueError("task-specific questions need a non-empty attack-graph summary")
    req = build_request(prompts.GENERATE_TASK_QUESTIONS, [
        image.part(),
        f"Attack graph from the report text:\n{graph_summary}\n{_context_block(contexts)}",
    ])
    texts = parse_questions(gateway.complete(req))
    if not texts:
        log.warning("no task-specific questions parsed for image %s", image.id)
    return [Question(f"{image.id}-t{i}", image.id, t, QuestionKind.TASK_SPECIFIC) for i, t in enumerate(texts)]


def build_pool(general: Sequence[Question], task_specific: Sequence[Question], cap: int = DEFAULT_QUESTION_CAP) -> QuestionPool:
    """Concatenate, dedup by normalized text and assign ids ``q-<image>-<nn>``."""
    image_ids = {q.image_id for q in (*general, *task_specific)}
    if len(image_ids) > 1:
        raise ValueError(f"questions from several images: {sorted(image_ids)}")
    if not image_ids:
        return QuestionPool("")
    image_id = image_ids.pop()
    seen: set[str] = set()
    out: list[Question] = []
    for q in (*general, *task_specific):
        key = normalize_question(q.text)
        if key in seen:
            continue
        if len(out) >= cap:
            log.warning("question cap %d reached for image %s", cap, image_id)
            break
        seen.add(key)
        out.append(dataclasses.replace(q, id=f"q-{image_id}-{len(out):02d}"))
    return QuestionPool(image_id, tuple(out))


class UndefinedMetric(ValueError):
    pass


def pool_monotonicity(pool: QuestionPool | Iterable[Question | str]) -> float:
    """Mean pairwise token-set Jaccard similarity of the questions.

    1.0 means all questions are identical (no diversity); 0.0 means no two
    questions share a token.
    """
    texts = [normalize_question(q if isinstance(q, str) else q.text) for q in pool]
    if len(texts) < 2:
        raise UndefinedMetric("monotonicity needs at least two questions")
    sims = [jaccard(a, b) for a, b in combinations(texts, 2)]
    # fsum is exactly rounded, which keeps the mean independent of question order
    return math.fsum(sims) / len(sims)
