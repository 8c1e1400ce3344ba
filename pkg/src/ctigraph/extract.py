"""Answering pooled questions against an image and its two contexts."""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass
from typing import TYPE_CHECKING

from . import prompts
from .brainstorm import Question
from .corpus import ContextPair, ThreatImage
from .gateway import CHARS_PER_TOKEN, DEFAULT_MAX_TOKENS, Gateway, GatewayError, build_request

if TYPE_CHECKING:
    from .verify import QualityAssessment

log = logging.getLogger(__name__)

ANSWER_CHAR_BUDGET = DEFAULT_MAX_TOKENS * CHARS_PER_TOKEN

_TERMINATORS = ".!?"
_OPEN_QUOTES = {'"': '"', "“": "”", "«": "»"}
_WEAK_OPENERS = {"it", "this", "that", "they", "these", "those", "yes", "no", "there", "he", "she"}


class EmptyResponse(GatewayError):
    pass


@dataclass(frozen=True)
class HistoryEntry:
    round: int
    text: str
    quality: "QualityAssessment | None" = None
    suggestion: str | None = None


@dataclass(frozen=True)
class Answer:
    question_id: str
    text: str
    round: int = 1
    quality: "QualityAssessment | None" = None
    history: tuple[HistoryEntry, ...] = ()
    aborted: bool = False

    def __post_init__(self):
        if not self.history:
            object.__setattr__(self, "history", (HistoryEntry(self.round, self.text, self.quality),))

    def assessed(self, quality: "QualityAssessment", suggestion: str | None = None) -> "Answer":
        """Attach an assessment to the current round."""
        last = dataclasses.replace(self.history[-1], quality=quality, suggestion=suggestion)
        return dataclasses.replace(self, quality=quality, history=self.history[:-1] + (last,))

    def next_round(self, text: str) -> "Answer":
        r = self.round + 1
        return dataclasses.replace(self, text=text, round=r, quality=None, history=self.history + (HistoryEntry(r, text),))

    def with_feedback(self, suggestion: str) -> "Answer":
        last = dataclasses.replace(self.history[-1], suggestion=suggestion)
        return dataclasses.replace(self, history=self.history[:-1] + (last,))

    def to_dict(self) -> dict:
        return {
            "question_id": self.question_id,
            "text": self.text,
            "round": self.round,
            "level": self.quality.level.value if self.quality else None,
            "aborted": self.aborted,
            "history": [
                {
                    "round": h.round,
                    "text": h.text,
                    "quality": h.quality.to_dict() if h.quality else None,
                    "suggestion": h.suggestion,
                }
                for h in self.history
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Answer":
        from .verify import QualityAssessment

        history = tuple(
            HistoryEntry(h["round"], h["text"], QualityAssessment.from_dict(h["quality"]) if h.get("quality") else None, h.get("suggestion"))
            for h in d["history"]
        )
        quality = history[-1].quality if history else None
        return cls(d["question_id"], d["text"], d["round"], quality, history, d.get("aborted", False))


def _first_sentence(text: str) -> tuple[str, str]:
    """Split after the first terminator that sits outside quotes and ends a word run."""
    closing: str | None = None
    for i, ch in enumerate(text):
        if closing is not None:
            if ch == closing:
                closing = None
            continue
        if ch in _OPEN_QUOTES:
            closing = _OPEN_QUOTES[ch]
            continue
        if ch in _TERMINATORS:
            j = i + 1
            while j < len(text) and text[j] in _TERMINATORS + "\"'”’)":
                j += 1
            if j == len(text) or text[j].isspace():
                return text[:j].strip(), text[j:].strip()
    return text.strip(), ""


def enforce_answer_constraints(text: str, budget: int = ANSWER_CHAR_BUDGET) -> tuple[str, list[str]]:
    """Reduce a reply to one sentence within ``budget`` characters.

    Returns the normalized text and the list of rule violations found. The
    topic-phrase check is advisory only.
    """
    violations: list[str] = []
    sentence, rest = _first_sentence(" ".join(text.split()))
    if rest:
        violations.append("multi-sentence")
    terminated = bool(sentence) and (sentence[-1] in _TERMINATORS or sentence.endswith(("\"", "”", "'", "’", ")")))
    if len(sentence) + (0 if terminated else 1) > budget:
        cut = sentence[: budget - 1]
        space = cut.rfind(" ")
        sentence = (cut[:space] if space > budget // 2 else cut).rstrip(" ,;:") + "."
        violations.append("truncated")
    elif sentence and not terminated:
        sentence += "."
        violations.append("missing-terminator")
    first = sentence.split(" ", 1)[0].strip(",.;:").lower() if sentence else ""
    if first in _WEAK_OPENERS:
        log.info("answer may lack a topic phrase: %r", sentence[:60])
        violations.append("missing-topic-phrase")
    return sentence, violations


def answer_prompt(question: Question, contexts: ContextPair | None, *, image_context: bool = True,
                  global_context: bool = True) -> str:
    lines = [f"Question: {question.text}"]
    if contexts is not None and image_context and contexts.image_aware:
        lines.append(f"Image-Aware-Context: {contexts.image_aware}")
    if contexts is not None and global_context and contexts.global_context:
        lines.append(f"Global-Context: {contexts.global_context}")
    return "\n".join(lines)


def answer_question(question: Question, image: ThreatImage, contexts: ContextPair | None, gateway: Gateway, *,
                    image_context: bool = True, global_context: bool = True) -> Answer:
    """First-round answer. The context switches reproduce the without-context ablations."""
    req = build_request(prompts.ANSWER, [image.part(), answer_prompt(question, contexts, image_context=image_context,
                                                                     global_context=global_context)])
    reply = gateway.complete(req)
    if not reply.strip():
        raise EmptyResponse(f"empty answer for question {question.id}")
    text, violations = enforce_answer_constraints(reply)
    if violations:
        log.info("answer to %s normalized: %s", question.id, ", ".join(violations))
    return Answer(question.id, text)
