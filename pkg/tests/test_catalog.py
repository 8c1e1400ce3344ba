from __future__ import annotations

import json

import pytest
from hypothesis import given
from hypothesis import strategies as st

from ctigraph.catalog import (
    DuplicateTechniqueId,
    MalformedTechniqueId,
    Technique,
    TechniqueCatalog,
    UnparseableTechnique,
    default_catalog,
    load_catalog,
    lookup,
    parse_technique_string,
)
from ctigraph.text import jaccard, normalize_label, normalize_name, normalize_question, tokens


def _write(tmp_path, rows):
    p = tmp_path / "catalog.json"
    p.write_text(json.dumps(rows), encoding="utf-8")
    return p


def test_load_three_rows(tmp_path):
    rows = [{"id": "T1003", "name": "OS Credential Dumping"}, {"id": "T1055", "name": "Process Injection"},
            {"id": "T1204.002", "name": "User Execution", "tactic": "execution"}]
    cat = load_catalog(_write(tmp_path, rows))
    assert len(cat) == 3
    assert lookup(cat, "T1204.002").name == "User Execution"
    assert cat.listing()[0] == "T1003 - OS Credential Dumping"


def test_load_rejects_malformed_and_duplicate_ids(tmp_path):
    with pytest.raises(MalformedTechniqueId):
        load_catalog(_write(tmp_path, [{"id": "TX999", "name": "x"}]))
    with pytest.raises(DuplicateTechniqueId):
        load_catalog(_write(tmp_path, [{"id": "T1003", "name": "a"}, {"id": "T1003", "name": "b"}]))


def test_lookup_by_id_name_and_fuzzy():
    cat = default_catalog()
    assert lookup(cat, "T1055").name == "Process Injection"
    assert lookup(cat, "t1055").id == "T1055"
    assert lookup(cat, "  PROCESS   injection ").id == "T1055"
    assert lookup(cat, "Proces Injection").id == "T1055"
    assert lookup(cat, "zzz nonsense") is None
    assert lookup(cat, "Proces Injection", threshold=1.0) is None


def test_default_catalog_carries_case_study_ids():
    cat = default_catalog()
    for tid in ("T1003", "T1055", "T1091", "T1107", "T1546", "T1574", "T1204.002"):
        assert tid in cat


@pytest.mark.parametrize("s, expected", [
    ("T1003 - OS Credential Dumping", ("T1003", "OS Credential Dumping")),
    ("T1546 - Event Triggered Execution", ("T1546", "Event Triggered Execution")),
    ("T1204.002 - User Execution - Malicious File", ("T1204.002", "User Execution - Malicious File")),
])
def test_parse_technique_string(s, expected):
    assert parse_technique_string(s) == expected


@pytest.mark.parametrize("s", ["no-dash", "T10 - short", "T1003 -  ", "Process Injection - T1055"])
def test_parse_technique_string_errors_keep_original(s):
    with pytest.raises(UnparseableTechnique) as err:
        parse_technique_string(s)
    assert err.value.original == s


def test_every_catalog_entry_looks_itself_up():
    cat = default_catalog()
    for t in cat:
        assert lookup(cat, t.id) == t


@given(st.text(min_size=1, max_size=30), st.floats(0.5, 1.0))
def test_fuzzy_lookup_never_below_threshold(query, threshold):
    import difflib

    cat = TechniqueCatalog.from_techniques([Technique("T1055", "Process Injection"), Technique("T1003", "OS Credential Dumping")])
    hit = lookup(cat, query, threshold)
    if hit is not None and query.strip().upper() != hit.id and normalize_label(query) != normalize_label(hit.name):
        assert difflib.SequenceMatcher(None, normalize_label(query), normalize_label(hit.name)).ratio() >= threshold


def test_normalizers():
    assert normalize_name("  Stuxnet\tWorm ") == "stuxnet worm"
    assert normalize_label("C&C-Server!") == "c c server"
    assert normalize_question("What is it?  ") == "what is it"
    assert tokens("explorer.exe, Explorer") == {"explorer", "exe"}


def test_jaccard_hand_values():
    # {stuxnet, worm} vs {stuxnet}: 1 shared of 2
    assert jaccard("Stuxnet worm", "stuxnet") == 0.5
    assert jaccard("a b c", "b c d") == 2 / 4
    assert jaccard("", "") == 1.0
    assert jaccard("?!", "...") == 1.0
    assert jaccard("", "x") == 0.0
