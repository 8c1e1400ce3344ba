"""Rule-based stand-in for a vision-language model, used to record the fixture transcripts.

Requests are routed on their system prompt; images are recognised by
content hash. Every reply is a pure function of the request, so recording
twice yields identical transcripts.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

from ctigraph import prompts
from ctigraph.gateway import ChatRequest, ImagePart, TextPart

TOPICS = {
    "img-flow": "Stuxnet attack flowchart",
    "img-code": "Stuxnet hooking code",
    "img-table": "registry persistence table",
}
TYPE_REPLIES = {
    "img-flow": "Attack Flow or Intelligence Structure",
    "img-code": "Malware Code",
    "img-table": "Data Table",
}
GENERAL = {
    "img-flow": [
        "1. What is the main content of the image?",
        "2. Which process does the dropper inject into according to the image?",
        "Here are some more questions:",
        "3. Where does the attack flow in the image start?",
    ],
    "img-code": [
        "- What is the possible function of the Code in the image?",
        "- Which API functions are hooked by the code in the image?",
    ],
    "img-table": [
        "* Which registry keys are listed in the image?",
        "* What is the main content of the image?",
    ],
}
TASK = {
    "img-flow": ["What role does the removable drive play in the Stuxnet infection shown in the image?"],
    "img-code": ["How does the Stuxnet dropper use the code in the image?"],
    "img-table": ["Which Stuxnet component does the table in the image belong to?"],
}

# (image, question substring) -> first-round answer
ANSWERS = {
    ("img-flow", "main content"): "The flowchart shows Stuxnet spreading from a removable drive through a malicious .LNK file "
                                   "to the dropper, which loads the main module into lsass.exe.",
    ("img-flow", "attack techniques"): "The flowchart depicts the main module reading credentials from lsass.exe memory, "
                                       "which is OS Credential Dumping (T1003).",
    ("img-flow", "sequential relationship"): "The processes run in order.",
    ("img-flow", "inject into"): "The dropper injects the main module into lsass.exe.",
    ("img-flow", "removable drive"): "The removable drive carries the malicious .LNK file that starts the Stuxnet infection.",
    ("img-flow", "targets"): "The targets are Siemens PLC controllers in industrial networks.",
    ("img-code", "attack techniques"): "The code hooks ntdll.dll functions such as ZwMapViewOfSection, "
                                       "a Function hooking technique (T1107).",
    ("img-code", "main content"): "The code shows the Stuxnet dropper patching ntdll.dll exports to load the main module.",
    ("img-code", "hooked"): "The code hooks ZwMapViewOfSection, ZwCreateSection and ZwOpenFile in ntdll.dll.",
    ("img-code", "variables"): "The variables are unknown.",
    ("img-table", "attack techniques"): "The table lists registry values that launch the main module on system events, "
                                        "which is Event Triggered Execution (T1546).",
    ("img-table", "component"): "The component is not mentioned in the table.",
    ("img-table", "registry keys"): "The table lists the MrxCls and MrxNet service keys under HKLM\\SYSTEM.",
}
DEFAULT_ANSWER = "The image shows a generic illustration with a company banner."

REFINED = {
    "The processes run in order.": "The dropper runs first, then the main module is injected into lsass.exe and contacts "
                                   "the C&C server.",
    "The component is not mentioned in the table.": "The table belongs to the persistence logic of the Stuxnet main module.",
    "The variables are unknown.": "The code declares a hook table and a pointer to the original ZwMapViewOfSection.",
}

DIRECT_KEYWORDS = ("technique", "code", "malicious", "attack", "process", "registry", "stuxnet", "hooked", "api")
USEFUL_KEYWORDS = ("stuxnet", "lsass", "dropper", "ntdll", "registry", "plc", "c&c", "t1")

_NODE_LSASS = {
    "type": "node_extension",
    "description": "The flowchart names the process the main module is loaded into.",
    "new_node": {"id": "lsass.exe", "type": "process", "properties": {"description": "Local Security Authority process"}},
    "relationship": {"subject": "main module", "subject_type": "malware", "relation": "inject into",
                     "object": "lsass.exe", "object_type": "process"},
}
_REL_LOAD = {
    "type": "relation_update",
    "description": "The flowchart shows the dropper loading the main module.",
    "relationship": {"subject": "dropper", "subject_type": "malware", "relation": "load",
                     "object": "main module", "object_type": "malware"},
    "replace_existing": False,
}
_NODE_NTDLL = {
    "type": "node_extension",
    "description": "The code patches ntdll.dll.",
    "new_node": {"id": "ntdll.dll", "type": "file", "properties": {"description": "Windows native API library"}},
    "relationship": {"subject": "dropper", "subject_type": "malware", "relation": "hook",
                     "object": "ntdll.dll", "object_type": "file"},
}
_NODE_MRXCLS = {
    "type": "node_extension",
    "description": "The table names the service key used for persistence.",
    "new_node": {"id": "MrxCls service key", "type": "registry-key", "properties": {"description": "HKLM\\SYSTEM service entry"}},
    "relationship": {"subject": "main module", "subject_type": "malware", "relation": "register",
                     "object": "MrxCls service key", "object_type": "registry-key"},
}


def _technique(subject: str, relation: str, obj: str, technique: str) -> dict:
    return {
        "type": "technique_addition",
        "description": f"The image evidences {technique}.",
        "target_relationship": {"subject": subject, "relation": relation, "object": obj},
        "new_techniques": [technique],
    }


TECHNIQUE_DELTAS = {
    "T1003": _technique("Stuxnet", "install", "dropper", "T1003 - OS Credential Dumping"),
    "T1107": _technique("dropper", "inject", "main module", "T1107 - Function hooking"),
    "T1546": _technique("main module", "connect to", "C&C server", "T1546 - Event Triggered Execution"),
}


def _system(req: ChatRequest) -> str:
    first = req.messages[0]
    return first.parts[0].text if first.role == "system" else ""


def _user_text(req: ChatRequest) -> str:
    return "\n".join(p.text for p in req.messages[-1].parts if isinstance(p, TextPart))


def _field(text: str, label: str) -> str:
    for line in text.splitlines():
        if line.startswith(label):
            return line[len(label):].strip()
    return ""


def _answer_for(image: str, question: str) -> str:
    q = question.lower()
    for (img, key), answer in ANSWERS.items():
        if img == image and key in q:
            return answer
    return DEFAULT_ANSWER


def _summary(text: str) -> str:
    words = " ".join(text.split()).split(" ")
    return "Abstract: " + " ".join(words[:40]).rstrip(".,;") + "."


def _proposal(reference: str) -> str:
    ref = reference.lower()
    if "t1003" in ref:
        items = [TECHNIQUE_DELTAS["T1003"]]
    elif "t1107" in ref:
        items = [TECHNIQUE_DELTAS["T1107"]]
    elif "t1546" in ref:
        items = [TECHNIQUE_DELTAS["T1546"], {"type": "technique_addition", "description": "malformed: no target"}]
    elif "main content" in ref and "flowchart" in ref:
        items = [_NODE_LSASS, _REL_LOAD]
    elif "inject" in ref and "lsass" in ref:
        items = [_NODE_LSASS]
    elif "ntdll" in ref and "hooks zwmapviewofsection" in ref:
        items = [_NODE_NTDLL]
    elif "mrxcls" in ref:
        items = [_NODE_MRXCLS]
    else:
        return "No Match"
    return "```json\n" + json.dumps(items, indent=1) + "\n```"


class StuxnetModel:
    """Callable responder for :class:`ctigraph.gateway.ScriptedGateway`."""

    def __init__(self, bundle_dir: str | Path):
        self.images: dict[str, str] = {}
        manifest = json.loads((Path(bundle_dir) / "report.json").read_text(encoding="utf-8"))
        for row in manifest["images"]:
            digest = hashlib.sha256((Path(bundle_dir) / row["file"]).read_bytes()).hexdigest()
            self.images[digest] = row["id"]

    def _image(self, req: ChatRequest) -> str:
        for m in req.messages:
            for p in m.parts:
                if isinstance(p, ImagePart):
                    return self.images.get(p.sha256, "unknown")
        return ""

    def __call__(self, req: ChatRequest) -> str:
        system, text, image = _system(req), _user_text(req), self._image(req)
        if system in (prompts.SUMMARIZE_CONTEXT, prompts.SUMMARIZE_REPORT, prompts.COMBINE_SUMMARIES):
            return _summary(text)
        if system == prompts.PREFILTER:
            return "keep"
        if system.startswith(prompts.CLASSIFY.split("{")[0]):
            return TYPE_REPLIES.get(image, "Descriptive Image")
        if system == prompts.GENERATE_QUESTIONS:
            return "\n".join(GENERAL.get(image, []))
        if system == prompts.GENERATE_TASK_QUESTIONS:
            return "\n".join(TASK.get(image, []))
        if system == prompts.ANSWER:
            return _answer_for(image, _field(text, "Question:"))
        if system == prompts.EVALUATE:
            answer = _field(text, "Description:")
            if "(T1" in answer or answer in REFINED.values():
                return "excellent"
            if answer == "The processes run in order.":
                return "Rating: satisfactory"
            if answer == DEFAULT_ANSWER:
                return "failing"
            return "good"
        if system in (prompts.COMMENT, prompts.SUGGEST):
            return "Name the concrete processes, files and their order instead of a generic statement."
        if system.startswith(prompts.REANSWER.split("{")[0]):
            previous = _field(text, "Previous answer:")
            if previous:
                return REFINED.get(previous, previous)
            return REFINED.get(_answer_for(image, _field(text, "Question:")), DEFAULT_ANSWER)
        if system == prompts.FILTER_DIRECT:
            q = _field(text, "Question:").lower()
            return "yes" if any(k in q for k in DIRECT_KEYWORDS) else "no"
        if system == prompts.FILTER_ANSWER:
            a = _field(text, "Answer:").lower()
            return "yes" if any(k in a for k in USEFUL_KEYWORDS) else "no"
        if system == prompts.TOPIC:
            return TOPICS.get(image, "threat image")
        if system == prompts.ASPECT:
            return "content"
        if system == prompts.PROPOSE_DELTAS:
            return _proposal(_field(text, "Threat enhancement reference:"))
        if system == prompts.SCORE_DIMENSIONS:
            return "accuracy: 4\nconsistency: 4\ncompleteness: 3\nrelevance: 5"
        raise ValueError(f"stand-in model has no rule for system prompt {system[:60]!r}")
