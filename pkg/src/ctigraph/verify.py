"""Question filtering, answer assessment and iterative answer refinement.

Two refinement paradigms are supported:

* ``a_iteration``: the model comments on the latest answer, then rewrites
  that answer using the comments.
* ``q_led``: the model writes a parsing guide for the image, then answers
  the question afresh following the guide.

Every evaluation call sees only the question, the answer and the image,
never the conversation so far.
"""

from __future__ import annotations

import logging
import re
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Sequence

from . import prompts
from .brainstorm import FilterLabel, Question
from .corpus import ContextPair, ThreatImage
from .extract import Answer, answer_prompt, enforce_answer_constraints
from .gateway import Gateway, GatewayError, TextPart, build_request
from .text import normalize_label

log = logging.getLogger(__name__)

DEFAULT_FAILING_PHRASES = ("unknown", "no details", "not mentioned", "cannot be determined", "unclear")
DIMENSIONS = ("accuracy", "consistency", "completeness", "relevance")


class Level(str, Enum):
    EXCELLENT = "excellent"
    GOOD = "good"
    SATISFACTORY = "satisfactory"
    FAILING = "failing"


POSITIVE_LEVELS = frozenset({Level.EXCELLENT, Level.GOOD})


class Paradigm(str, Enum):
    Q_LED = "q_led"
    A_ITERATION = "a_iteration"


@dataclass(frozen=True)
class QualityAssessment:
    level: Level
    dimension_scores: dict[str, int] | None = None
    comment: str | None = None
    suggestion: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "level", Level(self.level))
        if self.dimension_scores is not None:
            for k, v in self.dimension_scores.items():
                if k not in DIMENSIONS or not 1 <= v <= 5:
                    raise ValueError(f"bad dimension score {k}={v}")

    def to_dict(self) -> dict:
        return {"level": self.level.value, "dimension_scores": self.dimension_scores,
                "comment": self.comment, "suggestion": self.suggestion}

    @classmethod
    def from_dict(cls, d: dict) -> "QualityAssessment":
        return cls(Level(d["level"]), d.get("dimension_scores"), d.get("comment"), d.get("suggestion"))


@dataclass(frozen=True)
class RefinementConfig:
    paradigm: Paradigm = Paradigm.Q_LED
    max_rounds: int = 4
    accept_levels: frozenset[Level] = POSITIVE_LEVELS

    def __post_init__(self):
        object.__setattr__(self, "paradigm", Paradigm(self.paradigm))
        object.__setattr__(self, "accept_levels", frozenset(Level(x) for x in self.accept_levels))
        if self.max_rounds < 1:
            raise ValueError("max_rounds must be >= 1")
        if not self.accept_levels:
            raise ValueError("accept_levels must not be empty")


class PreconditionError(ValueError):
    pass


def lexical_failing_check(text: str, phrases: Sequence[str] = DEFAULT_FAILING_PHRASES) -> bool:
    low = text.lower()
    return any(p.lower() in low for p in phrases)


def parse_level(reply: str) -> Level | None:
    for word in normalize_label(reply).split():
        try:
            return Level(word)
        except ValueError:
            continue
    return None


_SCORE_LINE = re.compile(r"(accuracy|consistency|completeness|relevance)\D{0,10}([1-5])", re.IGNORECASE)


def parse_dimension_scores(reply: str) -> dict[str, int] | None:
    found = {m.group(1).lower(): int(m.group(2)) for m in _SCORE_LINE.finditer(reply)}
    return found if set(found) == set(DIMENSIONS) else None


def _eval_parts(answer: Answer, question: Question | None, image: ThreatImage) -> list:
    q = f"Question: {question.text}\n" if question is not None else ""
    return [image.part(), f"{q}Description: {answer.text}"]


def assess_answer(answer: Answer, image: ThreatImage, gateway: Gateway, *, question: Question | None = None,
                  phrases: Sequence[str] = DEFAULT_FAILING_PHRASES, score_dimensions: bool = False) -> QualityAssessment:
    """Rate one answer. Hedged answers fail without any model call."""
    if lexical_failing_check(answer.text, phrases):
        return QualityAssessment(Level.FAILING)
    parts = _eval_parts(answer, question, image)
    level = parse_level(gateway.complete(build_request(prompts.EVALUATE, parts)))
    if level is None:
        level = parse_level(gateway.complete(build_request(prompts.EVALUATE, parts + [TextPart(prompts.EVALUATE_RETRY)])))
    if level is None:
        log.warning("unparseable rating for %s twice; treating as satisfactory", answer.question_id)
        level = Level.SATISFACTORY
    scores = None
    if score_dimensions:
        scores = parse_dimension_scores(gateway.complete(build_request(prompts.SCORE_DIMENSIONS, parts)))
        if scores is None:
            log.warning("unparseable dimension scores for %s", answer.question_id)
    return QualityAssessment(level, scores)


def _affirmative(reply: str) -> bool:
    words = normalize_label(reply).split()
    return bool(words) and words[0] in ("yes", "true", "relevant", "affirmative", "useful")


def filter_question_direct(question: Question, graph_summary: str, gateway: Gateway) -> FilterLabel | None:
    """``direct_correlation`` when the wording is judged relevant; otherwise ``None`` (deferred)."""
    req = build_request(prompts.FILTER_DIRECT, [f"Attack graph summary:\n{graph_summary}\nQuestion: {question.text}"])
    try:
        reply = gateway.complete(req)
    except GatewayError as err:
        log.warning("direct filter failed for %s (%s); deferring", question.id, err)
        return None
    return FilterLabel.DIRECT_CORRELATION if _affirmative(reply) else None


def filter_question_answer_oriented(question: Question, answer: Answer | None, gateway: Gateway) -> FilterLabel:
    if answer is None:
        return FilterLabel.NON_RELATED
    req = build_request(prompts.FILTER_ANSWER, [f"Question: {question.text}\nAnswer: {answer.text}"])
    try:
        reply = gateway.complete(req)
    except GatewayError as err:
        log.warning("answer-oriented filter failed for %s (%s); excluding", question.id, err)
        return FilterLabel.NON_RELATED
    return FilterLabel.ANSWER_ORIENTED if _affirmative(reply) else FilterLabel.NON_RELATED


def filter_questions(questions: Iterable[Question], answers: dict[str, Answer], graph_summary: str,
                     gateway: Gateway) -> list[Question]:
    """Run both capture modes; every question comes back labeled."""
    out = []
    for q in questions:
        label = filter_question_direct(q, graph_summary, gateway)
        if label is None:
            label = filter_question_answer_oriented(q, answers.get(q.id), gateway)
        out.append(q.labeled(label))
    return out


def _feedback(answer: Answer, question: Question, image: ThreatImage, paradigm: Paradigm, gateway: Gateway) -> str:
    system = prompts.COMMENT if paradigm is Paradigm.A_ITERATION else prompts.SUGGEST
    reply = gateway.complete(build_request(system, _eval_parts(answer, question, image))).strip()
    if not reply:
        raise GatewayError("empty feedback")
    return reply


def _reanswer(answer: Answer, feedback: str, question: Question, image: ThreatImage, contexts: ContextPair | None,
              paradigm: Paradigm, gateway: Gateway) -> str:
    if paradigm is Paradigm.A_ITERATION:
        system = prompts.REANSWER.format(rule2=prompts.REANSWER_ITERATE[0], rule3=prompts.REANSWER_ITERATE[1])
        body = f"{answer_prompt(question, contexts)}\nPrevious answer: {answer.text}\nOptimization comments: {feedback}"
    else:
        system = prompts.REANSWER.format(rule2=prompts.REANSWER_GUIDED[0], rule3=prompts.REANSWER_GUIDED[1])
        body = f"{answer_prompt(question, contexts)}\nSuggestions: {feedback}"
    reply = gateway.complete(build_request(system, [image.part(), body]))
    if not reply.strip():
        raise GatewayError("empty refined answer")
    return enforce_answer_constraints(reply)[0]


def refine_answer(answer: Answer, question: Question, image: ThreatImage, contexts: ContextPair | None,
                  config: RefinementConfig, gateway: Gateway, *, phrases: Sequence[str] = DEFAULT_FAILING_PHRASES,
                  score_dimensions: bool = False) -> Answer:
    """Refine until the level is accepted or ``max_rounds`` is reached.

    The result is the latest round, not the best one. A gateway failure stops
    the loop and returns the latest state with ``aborted`` set.
    """
    if answer.quality is None:
        raise PreconditionError(f"answer {answer.question_id} has not been assessed")
    if answer.quality.level in config.accept_levels:
        raise PreconditionError(f"answer {answer.question_id} is already {answer.quality.level.value}")
    current = answer
    while current.quality.level not in config.accept_levels and current.round < config.max_rounds:
        try:
            fb = _feedback(current, question, image, config.paradigm, gateway)
            if config.paradigm is Paradigm.A_ITERATION:
                quality = QualityAssessment(current.quality.level, current.quality.dimension_scores, comment=fb)
            else:
                quality = QualityAssessment(current.quality.level, current.quality.dimension_scores, suggestion=fb)
            current = current.assessed(quality, suggestion=fb)
            text = _reanswer(current, fb, question, image, contexts, config.paradigm, gateway)
            nxt = current.next_round(text)
            current = nxt.assessed(assess_answer(nxt, image, gateway, question=question, phrases=phrases,
                                                 score_dimensions=score_dimensions))
        except GatewayError as err:
            log.warning("refinement of %s aborted at round %d: %s", answer.question_id, current.round, err)
            if current.quality is None:
                # the new round was created but never rated; fall back to the last rated one
                current = Answer(current.question_id, current.history[-2].text, current.round - 1,
                                 current.history[-2].quality, current.history[:-1])
            return Answer(current.question_id, current.text, current.round, current.quality, current.history, aborted=True)
    return current


def verify_answer(answer: Answer, question: Question, image: ThreatImage, contexts: ContextPair | None,
                  config: RefinementConfig, gateway: Gateway, **kw) -> Answer:
    """Assess, and refine when the level is not accepted."""
    rated = answer.assessed(assess_answer(answer, image, gateway, question=question, phrases=kw.get("phrases", DEFAULT_FAILING_PHRASES),
                                          score_dimensions=kw.get("score_dimensions", False)))
    if rated.quality.level in config.accept_levels or config.max_rounds == 1:
        return rated
    return refine_answer(rated, question, image, contexts, config, gateway, **kw)


@dataclass(frozen=True)
class RoundStats:
    counts: dict[str, int] = field(default_factory=dict)

    @property
    def total(self) -> int:
        return sum(self.counts.values())

    @property
    def fractions(self) -> dict[str, float]:
        return {k: v / self.total for k, v in self.counts.items()} if self.total else {}

    @property
    def positive_fraction(self) -> float:
        if not self.total:
            return 0.0
        return sum(self.counts[l.value] for l in POSITIVE_LEVELS) / self.total

    def to_dict(self) -> dict:
        return {"counts": dict(self.counts), "total": self.total, "positive_fraction": round(self.positive_fraction, 4)}


def quality_distribution(answers: Iterable[Answer], group_by_round: bool = True) -> dict:
    """Level counts per refinement round (or of final answers), with the positive share.

    Positive means excellent or good. An answer is counted at every round it
    has a rated history entry for.
    """
    tallies: dict = {}
    for a in answers:
        entries = a.history if group_by_round else a.history[-1:]
        for h in entries:
            if h.quality is None:
                continue
            key = h.round if group_by_round else "final"
            tallies.setdefault(key, Counter())[h.quality.level.value] += 1
    return {k: RoundStats({l.value: c.get(l.value, 0) for l in Level}) for k, c in sorted(tallies.items(), key=lambda kv: str(kv[0]).zfill(4))}
