"""Normalization and similarity helpers shared across the pipeline."""

from __future__ import annotations

import re
import string

_WS = re.compile(r"\s+")
_TOKEN = re.compile(r"[0-9a-z]+")
_PUNCT_TABLE = str.maketrans({c: " " for c in string.punctuation})


def collapse(text: str) -> str:
    return _WS.sub(" ", text).strip()


def normalize_name(text: str) -> str:
    """Case-fold and collapse whitespace. Used for entity identity."""
    return collapse(text.casefold())


def normalize_label(text: str) -> str:
    """Case-fold, strip punctuation, collapse whitespace."""
    return collapse(text.casefold().translate(_PUNCT_TABLE))


def normalize_question(text: str) -> str:
    return normalize_name(text).rstrip("?.!;: ")


def tokens(text: str) -> frozenset[str]:
    return frozenset(_TOKEN.findall(text.casefold()))


def jaccard(a: str, b: str) -> float:
    """Token-set Jaccard similarity. Two token-less strings count as identical."""
    ta, tb = tokens(a), tokens(b)
    if not ta and not tb:
        return 1.0 if normalize_label(a) == normalize_label(b) else 0.0
    return len(ta & tb) / len(ta | tb)
