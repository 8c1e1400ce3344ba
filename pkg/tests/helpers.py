"""Loaders for the recorded Stuxnet fixture shared by several test modules."""

from __future__ import annotations

import json
from pathlib import Path

from ctigraph.gateway import ReplayGateway, TranscriptStore
from ctigraph.graph import AttackGraph, from_json
from ctigraph.integrate import EnhancementReference

BUNDLE = Path(__file__).resolve().parent / "fixtures" / "stuxnet_bundle"


def text_graph() -> AttackGraph:
    return from_json((BUNDLE / "graph.text.json").read_bytes())


def case_study_references() -> list[EnhancementReference]:
    rows = json.loads((BUNDLE / "case_study.json").read_text(encoding="utf-8"))
    return [EnhancementReference(r["image_id"], r["image_topic"], r["question_id"], r["aspect"], r["answer_text"])
            for r in rows]


def case_study_gateway() -> ReplayGateway:
    return ReplayGateway(TranscriptStore(BUNDLE / "case_study.jsonl"))
