"""Report bundles: loading, image pre-filtering and parsing-support contexts.

Bundle layout::

    report.json        {"report_id", "text", "images": [{"id", "file", "image_type"?}], "graph"?, "gold"?}
    text.md            report text; images are anchored by a line ``![image-id]``
    images/*.png|jpg
    graph.text.json    optional text-only attack graph (canonical graph JSON)
    gold.json          optional gold annotation
"""

from __future__ import annotations

import dataclasses
import json
import logging
import re
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

from PIL import Image

from . import prompts
from .evaluate import GoldAnnotation, load_gold
from .gateway import SUMMARY_MAX_TOKENS, Gateway, GatewayError, ImagePart, build_request
from .graph import AttackGraph, from_json
from .text import normalize_label

log = logging.getLogger(__name__)

ANCHOR = re.compile(r"^[ \t]*!\[([^\]\n]+)\][ \t]*$", re.MULTILINE)
_PARAGRAPH_BREAK = re.compile(r"\n[ \t]*\n")

IMAGE_CONTEXT_BUDGET = 1200
GLOBAL_CONTEXT_BUDGET = 2000
GATEWAY_INPUT_BUDGET = 6000


class BundleError(ValueError):
    pass


class MissingManifest(BundleError):
    pass


class UnresolvedAnchor(BundleError):
    def __init__(self, anchor: str, why: str):
        super().__init__(f"anchor ![{anchor}] {why}")
        self.anchor = anchor


class UndecodableImage(BundleError):
    pass


class EmptyReport(BundleError):
    pass


class ImageType(str, Enum):
    ATTACK_FLOW = "attack-flow"
    MALWARE_CODE = "malware-code"
    TOOL_SCREENSHOT = "application-tool-screenshot"
    DATA_TABLE = "data-table"
    CHART = "chart-data-visualization"
    FILE_PATHS = "file-paths-names"
    DESCRIPTIVE = "descriptive-content-explanation"

    @property
    def label(self) -> str:
        return _LABELS[self]


_LABELS = {
    ImageType.ATTACK_FLOW: "Attack Flow or Intelligence Structure",
    ImageType.MALWARE_CODE: "Malware Code",
    ImageType.TOOL_SCREENSHOT: "Application Tool Screenshot",
    ImageType.DATA_TABLE: "Data Table",
    ImageType.CHART: "Charts and Data Visualization",
    ImageType.FILE_PATHS: "File Paths and Names",
    ImageType.DESCRIPTIVE: "Descriptive Image and Content Explanation",
}

# strong phrases first; the weak single words only count when nothing strong matched
_STRONG = {
    ImageType.ATTACK_FLOW: ["attack flow", "intelligence structure", "flowchart", "flow diagram"],
    ImageType.MALWARE_CODE: ["malware code", "source code", "code snippet"],
    ImageType.TOOL_SCREENSHOT: ["application tool screenshot", "tool screenshot", "application screenshot"],
    ImageType.DATA_TABLE: ["data table"],
    ImageType.CHART: ["charts and data visualization", "data visualization", "chart"],
    ImageType.FILE_PATHS: ["file paths and names", "file paths", "file names", "file path"],
    ImageType.DESCRIPTIVE: ["descriptive image", "content explanation", "descriptive"],
}
_WEAK = {
    ImageType.MALWARE_CODE: ["code"],
    ImageType.TOOL_SCREENSHOT: ["screenshot"],
    ImageType.DATA_TABLE: ["table"],
    ImageType.FILE_PATHS: ["paths"],
}


@dataclass(frozen=True)
class ThreatImage:
    id: str
    file: Path
    media_type: str
    image_type: ImageType | None = None
    anchor_offset: int | None = None

    @property
    def mime(self) -> str:
        return f"image/{self.media_type}"

    def part(self) -> ImagePart:
        return ImagePart(self.mime, self.file.read_bytes())


@dataclass(frozen=True)
class ReportBundle:
    root: Path
    report_id: str
    text: str
    images: tuple[ThreatImage, ...]
    text_graph: AttackGraph | None = None
    gold: GoldAnnotation | None = None

    def image(self, image_id: str) -> ThreatImage:
        for im in self.images:
            if im.id == image_id:
                return im
        raise KeyError(image_id)


@dataclass(frozen=True)
class ContextPair:
    image_aware: str
    global_context: str


def sniff_media_type(head: bytes) -> str | None:
    if head.startswith(b"\x89PNG\r\n\x1a\n"):
        return "png"
    if head.startswith(b"\xff\xd8\xff"):
        return "jpeg"
    return None


def load_bundle(path: str | Path) -> ReportBundle:
    root = Path(path)
    manifest_path = root / "report.json"
    if not manifest_path.is_file():
        raise MissingManifest(f"{root}: no report.json")
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as err:
        raise BundleError(f"{manifest_path}: {err}") from None
    for key in ("report_id", "text", "images"):
        if key not in manifest:
            raise BundleError(f"{manifest_path}: missing key {key!r}")
    text = (root / manifest["text"]).read_text(encoding="utf-8")

    declared: dict[str, dict] = {}
    for row in manifest["images"]:
        if row["id"] in declared:
            raise BundleError(f"duplicate image id {row['id']!r}")
        declared[row["id"]] = row

    offsets: dict[str, int] = {}
    for m in ANCHOR.finditer(text):
        anchor = m.group(1).strip()
        if anchor not in declared:
            raise UnresolvedAnchor(anchor, "does not name a declared image")
        if not (root / declared[anchor]["file"]).is_file():
            raise UnresolvedAnchor(anchor, f"points to missing file {declared[anchor]['file']}")
        if anchor in offsets:
            log.warning("image %s is anchored more than once; using the first anchor", anchor)
            continue
        offsets[anchor] = m.start()

    images = []
    for image_id, row in declared.items():
        file = root / row["file"]
        if not file.is_file():
            raise UndecodableImage(f"image {image_id}: file {row['file']} not found")
        with file.open("rb") as fh:
            media = sniff_media_type(fh.read(16))
        if media is None:
            raise UndecodableImage(f"image {image_id}: {row['file']} is neither PNG nor JPEG")
        image_type = ImageType(row["image_type"]) if row.get("image_type") else None
        images.append(ThreatImage(image_id, file, media, image_type, offsets.get(image_id)))

    text_graph = None
    if manifest.get("graph"):
        text_graph = from_json((root / manifest["graph"]).read_bytes())
    gold = None
    if manifest.get("gold") and (root / manifest["gold"]).is_file():
        gold = load_gold(root / manifest["gold"])
    return ReportBundle(root, str(manifest["report_id"]), text, tuple(images), text_graph, gold)


# -- pre-filter --------------------------------------------------------------


@dataclass(frozen=True)
class PrefilterRules:
    min_width: int = 64
    min_height: int = 64
    model_rules: bool = False


@dataclass(frozen=True)
class Rejection:
    image: ThreatImage
    rule: str
    detail: str


@dataclass(frozen=True)
class PrefilterResult:
    kept: tuple[ThreatImage, ...]
    rejected: tuple[Rejection, ...]


def _deterministic_rejection(image: ThreatImage, rules: PrefilterRules) -> Rejection | None:
    try:
        with Image.open(image.file) as im:
            width, height = im.size
            if width < rules.min_width or height < rules.min_height:
                return Rejection(image, "d", f"{width}x{height} below {rules.min_width}x{rules.min_height}")
            im.load()
    except Exception as err:  # PIL raises a mix of OSError/SyntaxError/ValueError on bad data
        return Rejection(image, "e", f"decode failed: {err}")
    return None


def _model_rejection(image: ThreatImage, gateway: Gateway) -> Rejection | None:
    req = build_request(prompts.PREFILTER, [image.part(), f"Image id: {image.id}"])
    try:
        reply = gateway.complete(req)
    except GatewayError as err:
        log.warning("model pre-filter failed for %s (%s); keeping image", image.id, err)
        return None
    words = normalize_label(reply).split()
    if words[:1] == ["reject"]:
        rule = words[1] if len(words) > 1 and words[1] in ("a", "b", "c") else "c"
        return Rejection(image, rule, f"model: {reply.strip()[:120]}")
    return None


def prefilter_images(bundle: ReportBundle, rules: PrefilterRules = PrefilterRules(), gateway: Gateway | None = None) -> PrefilterResult:
    """Deterministic rules (d, e) always; model rules (a-c) when enabled and a gateway is given."""
    kept, rejected = [], []
    for image in bundle.images:
        rej = _deterministic_rejection(image, rules)
        if rej is None and rules.model_rules and gateway is not None:
            rej = _model_rejection(image, gateway)
        if rej is None:
            kept.append(image)
        else:
            rejected.append(rej)
    return PrefilterResult(tuple(kept), tuple(rejected))


# -- contexts ----------------------------------------------------------------


def truncate(text: str, budget: int) -> str:
    if len(text) <= budget:
        return text
    cut = text[:budget]
    space = cut.rfind(" ")
    return (cut[:space] if space > budget // 2 else cut).rstrip()


def strip_anchors(text: str) -> str:
    return ANCHOR.sub("", text)


def paragraphs(text: str) -> tuple[list[str], dict[str, int]]:
    """Blank-line separated paragraphs with anchor lines removed.

    Also returns the paragraph index each anchored image belongs to. An anchor
    standing alone attaches to the paragraph before it (or after it, at the
    start of the report).
    """
    paras: list[str] = []
    anchors: dict[str, int] = {}
    pending: list[str] = []
    for block in _PARAGRAPH_BREAK.split(text):
        ids = [m.group(1).strip() for m in ANCHOR.finditer(block)]
        body = "\n".join(line for line in strip_anchors(block).splitlines() if line.strip()).strip()
        if body:
            paras.append(body)
            for image_id in pending + ids:
                anchors.setdefault(image_id, len(paras) - 1)
            pending = []
        elif ids:
            if paras:
                for image_id in ids:
                    anchors.setdefault(image_id, len(paras) - 1)
            else:
                pending.extend(ids)
    return paras, anchors


def context_window(bundle: ReportBundle, image: ThreatImage) -> str:
    paras, anchors = paragraphs(bundle.text)
    if image.id not in anchors:
        return ""
    i = anchors[image.id]
    return "\n\n".join(paras[max(i - 1, 0) : i + 2])


def _summarize(gateway: Gateway, system: str, text: str) -> str:
    reply = gateway.complete(build_request(system, [text], max_tokens=SUMMARY_MAX_TOKENS)).strip()
    if not reply:
        raise GatewayError("empty summary")
    return reply


def image_aware_context(bundle: ReportBundle, image: ThreatImage, gateway: Gateway | None = None,
                        budget: int = IMAGE_CONTEXT_BUDGET) -> str:
    window = context_window(bundle, image)
    if not window:
        log.warning("image %s has no anchor; image-aware context is empty", image.id)
        return ""
    if gateway is not None:
        try:
            return truncate(_summarize(gateway, prompts.SUMMARIZE_CONTEXT, truncate(window, GATEWAY_INPUT_BUDGET)), budget)
        except GatewayError as err:
            log.warning("context summary for %s failed (%s); using the raw window", image.id, err)
    return truncate(window, budget)


def _chunks(paras: list[str], limit: int) -> list[str]:
    out, cur = [], ""
    for p in paras:
        p = truncate(p, limit)
        if cur and len(cur) + 2 + len(p) > limit:
            out.append(cur)
            cur = p
        else:
            cur = f"{cur}\n\n{p}" if cur else p
    if cur:
        out.append(cur)
    return out


def global_context(bundle: ReportBundle, gateway: Gateway | None = None, budget: int = GLOBAL_CONTEXT_BUDGET,
                   input_budget: int = GATEWAY_INPUT_BUDGET) -> str:
    paras, _ = paragraphs(bundle.text)
    if not paras:
        raise EmptyReport(f"report {bundle.report_id} has no text")
    raw = "\n\n".join(paras)
    if gateway is not None:
        try:
            parts = [_summarize(gateway, prompts.SUMMARIZE_REPORT, chunk) for chunk in _chunks(paras, input_budget)]
            summary = parts[0] if len(parts) == 1 else _summarize(gateway, prompts.COMBINE_SUMMARIES, "\n\n".join(parts))
            return truncate(summary, budget)
        except GatewayError as err:
            log.warning("report abstract failed (%s); using the raw text", err)
    return truncate(raw, budget)


def derive_contexts(bundle: ReportBundle, image: ThreatImage, gateway: Gateway | None = None, *,
                    global_text: str | None = None, image_budget: int = IMAGE_CONTEXT_BUDGET,
                    global_budget: int = GLOBAL_CONTEXT_BUDGET) -> ContextPair:
    overall = global_text if global_text is not None else global_context(bundle, gateway, global_budget)
    local = image_aware_context(bundle, image, gateway, image_budget) or truncate(overall, image_budget)
    return ContextPair(local, overall)


# -- classification ----------------------------------------------------------


def parse_image_type(reply: str) -> ImageType | None:
    text = f" {normalize_label(reply)} "
    for table in (_STRONG, _WEAK):
        best: tuple[int, ImageType] | None = None
        for image_type, phrases in table.items():
            for phrase in phrases:
                pos = text.find(f" {phrase} ")
                if pos >= 0 and (best is None or pos < best[0]):
                    best = (pos, image_type)
        if best:
            return best[1]
    for image_type in ImageType:
        if image_type.value in reply.lower():
            return image_type
    return None


def classify_image_type(image: ThreatImage, contexts: ContextPair, gateway: Gateway) -> ImageType:
    types = "\n".join(f"- {t.label}" for t in ImageType)
    req = build_request(
        prompts.CLASSIFY.format(types=types),
        [image.part(), f"Image-Aware-Context: {contexts.image_aware}\nGlobal-Context: {contexts.global_context}"],
    )
    try:
        reply = gateway.complete(req)
    except GatewayError as err:
        log.warning("classification of %s failed (%s); using %s", image.id, err, ImageType.DESCRIPTIVE.value)
        return ImageType.DESCRIPTIVE
    found = parse_image_type(reply)
    if found is None:
        log.warning("unparseable image type %r for %s; using %s", reply[:60], image.id, ImageType.DESCRIPTIVE.value)
        return ImageType.DESCRIPTIVE
    return found


def with_type(image: ThreatImage, image_type: ImageType) -> ThreatImage:
    return dataclasses.replace(image, image_type=image_type)
