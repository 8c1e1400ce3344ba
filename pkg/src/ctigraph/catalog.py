"""ATT&CK technique dictionary: loading, lookup and technique-string parsing."""

from __future__ import annotations

import difflib
import json
import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from .text import normalize_label

TECHNIQUE_ID = re.compile(r"T\d{4}(?:\.\d{3})?")
_TECHNIQUE_STRING = re.compile(r"^\s*(T\d{4}(?:\.\d{3})?)\s*-\s*(\S.*?)\s*$")

DEFAULT_FUZZY_THRESHOLD = 0.85


class CatalogError(ValueError):
    pass


class MalformedTechniqueId(CatalogError):
    pass


class DuplicateTechniqueId(CatalogError):
    pass


class UnparseableTechnique(ValueError):
    def __init__(self, original: str):
        super().__init__(f"cannot parse technique string {original!r}")
        self.original = original


def is_technique_id(value: str) -> bool:
    return TECHNIQUE_ID.fullmatch(value) is not None


@dataclass(frozen=True)
class Technique:
    id: str
    name: str
    tactic: str = ""


@dataclass(frozen=True)
class TechniqueCatalog:
    techniques: dict[str, Technique]
    by_name: dict[str, str] = field(default_factory=dict)

    @classmethod
    def from_techniques(cls, techniques) -> "TechniqueCatalog":
        by_id: dict[str, Technique] = {}
        by_name: dict[str, str] = {}
        for t in techniques:
            if not is_technique_id(t.id):
                raise MalformedTechniqueId(f"malformed technique id {t.id!r}")
            if t.id in by_id:
                raise DuplicateTechniqueId(f"duplicate technique id {t.id!r}")
            by_id[t.id] = t
            # first id wins for a shared name; ids stay authoritative
            by_name.setdefault(normalize_label(t.name), t.id)
        return cls(by_id, by_name)

    def __len__(self) -> int:
        return len(self.techniques)

    def __contains__(self, technique_id: str) -> bool:
        return technique_id in self.techniques

    def __iter__(self):
        return iter(sorted(self.techniques.values(), key=lambda t: t.id))

    def get(self, technique_id: str) -> Technique | None:
        return self.techniques.get(technique_id)

    def listing(self) -> list[str]:
        return [f"{t.id} - {t.name}" for t in self]


def load_catalog(path: str | Path) -> TechniqueCatalog:
    """Load a JSON array of ``{id, name, tactic}`` rows."""
    rows = json.loads(Path(path).read_text(encoding="utf-8"))
    return _from_rows(rows, str(path))


def default_catalog() -> TechniqueCatalog:
    """The ATT&CK subset shipped with the package."""
    text = resources.files("ctigraph.data").joinpath("attack_techniques.json").read_text("utf-8")
    return _from_rows(json.loads(text), "attack_techniques.json")


def _from_rows(rows, origin: str) -> TechniqueCatalog:
    if not isinstance(rows, list):
        raise CatalogError(f"{origin}: expected a JSON array of techniques")
    techniques = []
    for i, row in enumerate(rows):
        if not isinstance(row, dict) or "id" not in row or "name" not in row:
            raise CatalogError(f"{origin}[{i}]: row needs 'id' and 'name'")
        techniques.append(Technique(str(row["id"]).strip(), str(row["name"]).strip(), str(row.get("tactic", ""))))
    return TechniqueCatalog.from_techniques(techniques)


def lookup(catalog: TechniqueCatalog, query: str, threshold: float = DEFAULT_FUZZY_THRESHOLD) -> Technique | None:
    """Resolve an id or a name.

    Order: exact id, normalized-name exact match, then the best fuzzy name
    match whose similarity reaches ``threshold``. Ties go to the lower id.
    """
    q = query.strip()
    if q.upper() in catalog.techniques:
        return catalog.techniques[q.upper()]
    key = normalize_label(q)
    if not key:
        return None
    if key in catalog.by_name:
        return catalog.techniques[catalog.by_name[key]]
    best: tuple[float, str] | None = None
    for name, tid in catalog.by_name.items():
        ratio = difflib.SequenceMatcher(None, key, name).ratio()
        if ratio >= threshold and (best is None or ratio > best[0] or (ratio == best[0] and tid < best[1])):
            best = (ratio, tid)
    return catalog.techniques[best[1]] if best else None


def parse_technique_string(s: str) -> tuple[str, str]:
    """Split ``"T1003 - OS Credential Dumping"`` into id and name."""
    m = _TECHNIQUE_STRING.match(s)
    if not m:
        raise UnparseableTechnique(s)
    return m.group(1), m.group(2)
