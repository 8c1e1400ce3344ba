"""Regenerate the Stuxnet fixture bundle, its transcripts and golden outputs.

Usage: python3 scripts/build_fixture.py [--bundle tests/fixtures/stuxnet_bundle]

Writes report.json, text.md, graph.text.json, gold.json and the images, then
runs the pipeline in record mode against the rule-based stand-in model
(tests/fixtures/stuxnet_model.py). Outputs:

* transcripts.jsonl: every gateway exchange of the full run
* case_study.jsonl: the three technique references fed to integration alone
* golden/graph.mm.json: the multimodal graph the replay run must reproduce
"""

from __future__ import annotations

import argparse
import shutil
import sys
import tempfile
from pathlib import Path

from PIL import Image, ImageDraw

ROOT = Path(__file__).resolve().parents[1]
sys.path.insert(0, str(ROOT / "tests" / "fixtures"))

from stuxnet_model import StuxnetModel  # noqa: E402

from ctigraph.catalog import default_catalog  # noqa: E402
from ctigraph.gateway import RecordingGateway, ScriptedGateway, TranscriptStore  # noqa: E402
from ctigraph.graph import AtomicEvent, AttackGraph, Entity, canonical_dumps, to_canonical_json  # noqa: E402
from ctigraph.integrate import EnhancementReference, integrate_all  # noqa: E402
from ctigraph.pipeline import PipelineConfig, run_pipeline  # noqa: E402

TEXT = """# Stuxnet: a worm aimed at industrial control systems

Stuxnet is a worm that targets Siemens industrial control systems. The attackers developed capabilities
over several years before the first samples were found on machines in Iran.

The infection starts from a removable drive. Stuxnet spreads through a malicious .LNK file on the drive,
and opening the folder is enough to trigger the exploit.

![img-flow]

Once running, Stuxnet installs a dropper. The dropper injects the main module into a trusted process and
hides its files with a rootkit driver.

![img-code]

The main module connects to a C&C server over HTTP to receive updates, and it modifies the code running
on the PLC so that centrifuges spin outside their safe range.

![img-table]

![img-logo]

Operators saw normal values on their screens while the equipment was being damaged.
"""

ENTITIES = [
    ("attackers", "attackers", "threat-actor"),
    ("capabilities", "capabilities", "attack-pattern"),
    ("stuxnet", "Stuxnet", "malware"),
    ("drive", "removable drive", "infrastructure"),
    ("lnk", "malicious .LNK file", "file"),
    ("dropper", "dropper", "malware"),
    ("main-module", "main module", "malware"),
    ("cc", "C&C server", "infrastructure"),
    ("plc", "PLC", "infrastructure"),
]
EVENTS = [
    ("attackers", "develop", "capabilities", 0, ()),
    ("stuxnet", "spread via", "drive", 1, ("T1091",)),
    ("stuxnet", "exploit", "lnk", 2, ()),
    ("stuxnet", "install", "dropper", 3, ("T1574",)),
    ("dropper", "inject", "main-module", 4, ("T1055",)),
    ("main-module", "connect to", "cc", 5, ()),
    ("main-module", "modify", "plc", 6, ()),
]

GOLD = {
    "entities": [{"name": n, "type": t} for _, n, t in ENTITIES]
    + [{"name": "lsass.exe", "type": "process"}, {"name": "ntdll.dll", "type": "file"}],
    "relations": [
        {"subject": "attackers", "relation": "develop", "object": "capabilities"},
        {"subject": "Stuxnet", "relation": "spread via", "object": "removable drive"},
        {"subject": "Stuxnet", "relation": "install", "object": "dropper"},
        {"subject": "dropper", "relation": "inject", "object": "main module"},
        {"subject": "main module", "relation": "inject into", "object": "lsass.exe"},
        {"subject": "main module", "relation": "connect to", "object": "C&C server"},
        {"subject": "main module", "relation": "modify", "object": "PLC"},
    ],
    "techniques": ["T1003", "T1055", "T1091", "T1107", "T1546", "T1574"],
}

CASE_STUDY = [
    EnhancementReference("img-flow", "Stuxnet attack flowchart", "q-img-flow-02", "possible attack techniques",
                         "The flowchart depicts the main module reading credentials from lsass.exe memory, "
                         "which is OS Credential Dumping (T1003)."),
    EnhancementReference("img-code", "Stuxnet hooking code", "q-img-code-02", "possible attack techniques",
                         "The code hooks ntdll.dll functions such as ZwMapViewOfSection, a Function hooking technique (T1107)."),
    EnhancementReference("img-table", "registry persistence table", "q-img-table-02", "possible attack techniques",
                         "The table lists registry values that launch the main module on system events, "
                         "which is Event Triggered Execution (T1546)."),
]


def text_graph() -> AttackGraph:
    return AttackGraph(
        "stuxnet-2010",
        tuple(Entity(i, n, t) for i, n, t in ENTITIES),
        tuple(AtomicEvent(s, a, o, ts, techs) for s, a, o, ts, techs in EVENTS),
    )


def _boxes(draw: ImageDraw.ImageDraw, labels: list[str], y: int) -> None:
    x = 10
    for label in labels:
        draw.rectangle([x, y, x + 90, y + 40], outline="black", width=2)
        draw.text((x + 6, y + 14), label, fill="black")
        if x > 10:
            draw.line([x - 20, y + 20, x, y + 20], fill="black", width=2)
        x += 110


def draw_images(bundle: Path) -> None:
    flow = Image.new("RGB", (340, 200), "white")
    d = ImageDraw.Draw(flow)
    _boxes(d, ["USB .LNK", "dropper", "main module"], 30)
    _boxes(d, ["lsass.exe", "C&C", "PLC"], 120)
    flow.save(bundle / "flow.png", optimize=False)

    code = Image.new("RGB", (360, 180), (30, 30, 30))
    d = ImageDraw.Draw(code)
    for i, line in enumerate([
        "hook(ntdll, \"ZwMapViewOfSection\", my_map);",
        "hook(ntdll, \"ZwCreateSection\", my_create);",
        "hook(ntdll, \"ZwOpenFile\", my_open);",
        "load_module(\"main.dll\");",
    ]):
        d.text((10, 20 + 30 * i), line, fill=(200, 230, 200))
    code.save(bundle / "code.jpg", quality=90)

    table = Image.new("RGB", (320, 140), "white")
    d = ImageDraw.Draw(table)
    rows = [("key", "value"), ("MrxCls", "ImagePath"), ("MrxNet", "ImagePath")]
    for r, (k, v) in enumerate(rows):
        d.rectangle([10, 10 + 40 * r, 160, 50 + 40 * r], outline="black")
        d.rectangle([160, 10 + 40 * r, 310, 50 + 40 * r], outline="black")
        d.text((16, 24 + 40 * r), k, fill="black")
        d.text((166, 24 + 40 * r), v, fill="black")
    table.save(bundle / "table.png", optimize=False)

    Image.new("RGB", (10, 10), "red").save(bundle / "logo.png")


def write_bundle(bundle: Path) -> None:
    bundle.mkdir(parents=True, exist_ok=True)
    draw_images(bundle)
    (bundle / "text.md").write_text(TEXT, encoding="utf-8")
    (bundle / "graph.text.json").write_bytes(to_canonical_json(text_graph()))
    (bundle / "gold.json").write_bytes(canonical_dumps(GOLD))
    manifest = {
        "report_id": "stuxnet-2010",
        "text": "text.md",
        "graph": "graph.text.json",
        "gold": "gold.json",
        "images": [
            {"id": "img-flow", "file": "flow.png"},
            {"id": "img-code", "file": "code.jpg"},
            {"id": "img-table", "file": "table.png"},
            {"id": "img-logo", "file": "logo.png"},
        ],
    }
    (bundle / "report.json").write_bytes(canonical_dumps(manifest))


def record(bundle: Path) -> None:
    model = StuxnetModel(bundle)
    transcripts = bundle / "transcripts.jsonl"
    transcripts.unlink(missing_ok=True)
    # serial recording keeps the transcript line order stable across rebuilds
    config = PipelineConfig.load(None, env={}, gateway={"mode": "record", "transcripts": str(transcripts), "concurrency": 1})
    with tempfile.TemporaryDirectory() as tmp:
        inner = RecordingGateway(ScriptedGateway(model), TranscriptStore(transcripts))
        result = run_pipeline(bundle, tmp, config, gateway=inner)
        golden = bundle / "golden"
        golden.mkdir(exist_ok=True)
        for name in ("graph.mm.json", "questions.json", "answers.json", "deltas.json"):
            shutil.copy(Path(tmp) / name, golden / name)
    print(f"recorded {len(TranscriptStore(transcripts))} exchanges; gain {result.report['gain']['added_techniques']} techniques")

    case = bundle / "case_study.jsonl"
    case.unlink(missing_ok=True)
    gw = RecordingGateway(ScriptedGateway(model), TranscriptStore(case))
    out = integrate_all(text_graph(), CASE_STUDY, default_catalog(), gw)
    print(f"case study: {len(out.applied)} applied, {len(out.rejected)} rejected")
    (bundle / "case_study.json").write_bytes(canonical_dumps([r.to_dict() for r in CASE_STUDY]))


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--bundle", default=str(ROOT / "tests" / "fixtures" / "stuxnet_bundle"))
    args = ap.parse_args()
    bundle = Path(args.bundle)
    write_bundle(bundle)
    record(bundle)


if __name__ == "__main__":
    main()
