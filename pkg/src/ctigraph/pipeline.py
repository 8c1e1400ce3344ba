"""End-to-end orchestration with staged JSON artifacts.

Stages run globally in order (prefilter, contexts, brainstorm, extract,
verify, integrate, export); within a stage, images are processed in parallel
up to the gateway concurrency cap and results are collected in image order,
so replay runs are byte-deterministic.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import os
import tempfile
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Sequence

from .brainstorm import (
    DEFAULT_QUESTION_CAP,
    LeadingQuestionBank,
    Question,
    build_pool,
    generate_general_questions,
    generate_task_questions,
    seed_questions,
)
from .catalog import TechniqueCatalog, default_catalog, load_catalog
from .corpus import (
    GATEWAY_INPUT_BUDGET,
    GLOBAL_CONTEXT_BUDGET,
    IMAGE_CONTEXT_BUDGET,
    BundleError,
    ContextPair,
    PrefilterRules,
    ReportBundle,
    ThreatImage,
    classify_image_type,
    derive_contexts,
    global_context,
    load_bundle,
    prefilter_images,
    with_type,
)
from .evaluate import MatchConfig
from .extract import Answer, EmptyResponse, answer_question
from .gateway import (
    DEFAULT_MAX_TOKENS,
    AuthFailure,
    DEFAULT_SEED,
    DEFAULT_TEMPERATURE,
    ChatRequest,
    Gateway,
    GatewayError,
    HttpGateway,
    RecordingGateway,
    ReplayGateway,
    TranscriptStore,
)
from .graph import (
    AttackGraph,
    canonical_dumps,
    diff_graphs,
    export_dot,
    export_html,
    to_canonical_json,
    triplet_listing,
    validate_graph,
)
from .integrate import build_reference, candidate_pairs, image_topic, integrate_all, main_content_answer, model_aspect
from .verify import DEFAULT_FAILING_PHRASES, Level, RefinementConfig, filter_questions, verify_answer

log = logging.getLogger(__name__)

MODES = ("live", "replay", "record")
ENV_ENDPOINT = "CTIGRAPH_ENDPOINT"
ENV_API_KEY = "CTIGRAPH_API_KEY"
ENV_MODEL = "CTIGRAPH_MODEL"


class ConfigError(ValueError):
    pass


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage} failed: {cause}")
        self.stage = stage
        self.cause = cause


class InvalidOutput(RuntimeError):
    pass


@dataclass(frozen=True)
class GatewayConfig:
    mode: str = "replay"
    endpoint: str = ""
    model: str = "default"
    temperature: float = DEFAULT_TEMPERATURE
    seed: int = DEFAULT_SEED
    max_tokens: int = DEFAULT_MAX_TOKENS
    concurrency: int = 4
    max_attempts: int = 4
    backoff: float = 0.5
    timeout: float = 60.0
    transcripts: str | None = None


@dataclass(frozen=True)
class Ablation:
    image_context: bool = True
    global_context: bool = True
    brainstorm: bool = True
    verify: bool = True


@dataclass(frozen=True)
class PipelineConfig:
    gateway: GatewayConfig = field(default_factory=GatewayConfig)
    refinement: RefinementConfig = field(default_factory=RefinementConfig)
    failing_phrases: tuple[str, ...] = DEFAULT_FAILING_PHRASES
    image_context_budget: int = IMAGE_CONTEXT_BUDGET
    global_context_budget: int = GLOBAL_CONTEXT_BUDGET
    gateway_input_budget: int = GATEWAY_INPUT_BUDGET
    match: MatchConfig = field(default_factory=MatchConfig)
    prefilter: PrefilterRules = field(default_factory=PrefilterRules)
    question_cap: int = DEFAULT_QUESTION_CAP
    score_dimensions: bool = False
    model_topics: bool = True
    model_aspects: bool = False
    catalog: str | None = None
    leading_questions: str | None = None
    ablation: Ablation = field(default_factory=Ablation)

    def __post_init__(self):
        if self.gateway.mode not in MODES:
            raise ConfigError(f"mode must be one of {', '.join(MODES)}, got {self.gateway.mode!r}")
        if self.gateway.mode in ("replay", "record") and not self.gateway.transcripts:
            raise ConfigError(f"{self.gateway.mode} mode needs a transcripts path")
        if self.gateway.concurrency < 1:
            raise ConfigError("concurrency must be >= 1")

    @classmethod
    def from_dict(cls, doc: dict, env: dict | None = None) -> "PipelineConfig":
        """Nested JSON layout mirroring the dataclasses; env vars override the endpoint and model."""
        env = os.environ if env is None else env
        doc = dict(doc)
        try:
            gw = dict(doc.pop("gateway", {}))
            if env.get(ENV_ENDPOINT):
                gw["endpoint"] = env[ENV_ENDPOINT]
            if env.get(ENV_MODEL):
                gw["model"] = env[ENV_MODEL]
            ref = dict(doc.pop("refinement", {}))
            if "accept_levels" in ref:
                ref["accept_levels"] = frozenset(Level(x) for x in ref["accept_levels"])
            return cls(
                gateway=GatewayConfig(**gw),
                refinement=RefinementConfig(**ref),
                match=MatchConfig(**doc.pop("match", {})),
                prefilter=PrefilterRules(**doc.pop("prefilter", {})),
                ablation=Ablation(**doc.pop("ablation", {})),
                failing_phrases=tuple(doc.pop("failing_phrases", DEFAULT_FAILING_PHRASES)),
                **doc,
            )
        except ConfigError:
            raise
        except (TypeError, ValueError) as err:
            raise ConfigError(f"bad configuration: {err}") from None

    @classmethod
    def load(cls, path: str | Path | None, env: dict | None = None, **overrides: Any) -> "PipelineConfig":
        doc: dict = {}
        if path is not None:
            try:
                doc = json.loads(Path(path).read_text(encoding="utf-8"))
            except FileNotFoundError:
                raise ConfigError(f"config file {path} not found") from None
            except json.JSONDecodeError as err:
                raise ConfigError(f"config file {path}: {err}") from None
        env = os.environ if env is None else env
        gw = dict(doc.get("gateway", {}))
        # precedence: command-line overrides, then environment, then the file
        gw.update({k: env[v] for k, v in (("endpoint", ENV_ENDPOINT), ("model", ENV_MODEL)) if env.get(v)})
        gw.update({k: v for k, v in overrides.pop("gateway", {}).items() if v is not None})
        doc["gateway"] = gw
        abl = dict(doc.get("ablation", {}))
        abl.update(overrides.pop("ablation", {}))
        doc["ablation"] = abl
        doc.update({k: v for k, v in overrides.items() if v is not None})
        return cls.from_dict(doc, env={})

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["refinement"] = {
            "paradigm": self.refinement.paradigm.value,
            "max_rounds": self.refinement.max_rounds,
            "accept_levels": sorted(l.value for l in self.refinement.accept_levels),
        }
        out["failing_phrases"] = list(self.failing_phrases)
        return out


class ConfiguredGateway:
    """Stamps the configured model parameters on every request and counts calls."""

    def __init__(self, inner: Gateway, cfg: GatewayConfig):
        self.inner = inner
        self.cfg = cfg
        self.calls = 0
        self._lock = threading.Lock()

    def complete(self, req: ChatRequest) -> str:
        scale = self.cfg.max_tokens / DEFAULT_MAX_TOKENS
        req = dataclasses.replace(req, model=self.cfg.model, temperature=self.cfg.temperature, seed=self.cfg.seed,
                                  max_tokens=max(1, round(req.max_tokens * scale)))
        with self._lock:
            self.calls += 1
        return self.inner.complete(req)


def make_gateway(cfg: GatewayConfig, env: dict | None = None, inner: Gateway | None = None) -> Gateway:
    """Build the mode's gateway. ``inner`` replaces the HTTP client (record mode, tests)."""
    env = os.environ if env is None else env
    if cfg.mode == "replay":
        path = Path(cfg.transcripts)
        if not path.is_file():
            raise ConfigError(f"transcripts file {path} not found")
        return ReplayGateway(TranscriptStore(path))
    if inner is None:
        if not cfg.endpoint:
            raise ConfigError(f"{cfg.mode} mode needs an endpoint (config or {ENV_ENDPOINT})")
        key = env.get(ENV_API_KEY)
        if not key:
            raise ConfigError(f"{cfg.mode} mode needs an API key in {ENV_API_KEY}")
        inner = HttpGateway(cfg.endpoint, key, max_attempts=cfg.max_attempts, backoff=cfg.backoff,
                            timeout=cfg.timeout, concurrency=cfg.concurrency)
    if cfg.mode == "record":
        return RecordingGateway(inner, TranscriptStore(cfg.transcripts))
    return inner


def write_atomic(path: Path, data: bytes | str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(data, str):
        data = data.encode("utf-8")
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


@dataclass
class RunState:
    bundle: ReportBundle
    text_graph: AttackGraph
    images: list[ThreatImage] = field(default_factory=list)
    rejected_images: list[dict] = field(default_factory=list)
    contexts: dict[str, ContextPair] = field(default_factory=dict)
    pools: dict[str, tuple[Question, ...]] = field(default_factory=dict)
    answers: dict[str, Answer] = field(default_factory=dict)
    warnings: list[str] = field(default_factory=list)
    timings: dict[str, float] = field(default_factory=dict)


@dataclass(frozen=True)
class RunResult:
    out_dir: Path
    graph: AttackGraph
    report: dict


def questions_doc(state: RunState) -> dict:
    return {
        "report_id": state.bundle.report_id,
        "images": [
            {
                "id": im.id,
                "image_type": im.image_type.value if im.image_type else None,
                "questions": [q.to_dict() for q in state.pools.get(im.id, ())],
            }
            for im in state.images
        ],
        "rejected_images": state.rejected_images,
    }


def answers_doc(state: RunState) -> dict:
    return {"report_id": state.bundle.report_id, "answers": [state.answers[k].to_dict() for k in sorted(state.answers)]}


class Pipeline:
    def __init__(self, config: PipelineConfig, gateway: Gateway, *, catalog: TechniqueCatalog | None = None,
                 bank: LeadingQuestionBank | None = None):
        self.config = config
        self.gateway = ConfiguredGateway(gateway, config.gateway)
        self.catalog = catalog or (load_catalog(config.catalog) if config.catalog else default_catalog())
        self.bank = bank or LeadingQuestionBank.load(config.leading_questions)

    def _map(self, fn: Callable, items: Sequence) -> list:
        if self.config.gateway.concurrency == 1 or len(items) < 2:
            return [fn(x) for x in items]
        with ThreadPoolExecutor(max_workers=self.config.gateway.concurrency) as pool:
            return list(pool.map(fn, items))

    def _stage(self, state: RunState, name: str, fn: Callable[[RunState], None]) -> None:
        start = time.perf_counter()
        log.info("stage %s", name)
        try:
            fn(state)
        except Exception as err:
            raise StageError(name, err) from err
        state.timings[name] = round(time.perf_counter() - start, 4)

    # -- stages ------------------------------------------------------------

    def prefilter(self, state: RunState) -> None:
        result = prefilter_images(state.bundle, self.config.prefilter, self.gateway)
        state.images = list(result.kept)
        state.rejected_images = [{"id": r.image.id, "rule": r.rule, "detail": r.detail} for r in result.rejected]

    def contexts(self, state: RunState) -> None:
        abl, cfg = self.config.ablation, self.config
        overall = global_context(state.bundle, self.gateway, cfg.global_context_budget, cfg.gateway_input_budget) \
            if abl.global_context else ""

        def one(image: ThreatImage) -> tuple[ThreatImage, ContextPair]:
            pair = derive_contexts(state.bundle, image, self.gateway if abl.image_context else None, global_text=overall,
                                   image_budget=cfg.image_context_budget, global_budget=cfg.global_context_budget)
            if not abl.image_context:
                pair = ContextPair("", pair.global_context)
            image = with_type(image, image.image_type or classify_image_type(image, pair, self.gateway))
            return image, pair

        results = self._map(one, state.images)
        state.images = [im for im, _ in results]
        state.contexts = {im.id: pair for im, pair in results}

    def brainstorm(self, state: RunState) -> None:
        summary = triplet_listing(state.text_graph)

        def one(image: ThreatImage) -> tuple[Question, ...]:
            seeds = seed_questions(image, self.bank)
            if not self.config.ablation.brainstorm:
                return build_pool(seeds, [], self.config.question_cap).questions
            pair = state.contexts[image.id]
            general = generate_general_questions(image, self.bank, pair, self.gateway)
            task = generate_task_questions(image, summary, pair, self.gateway) if summary.strip() else []
            return build_pool(seeds + general, task, self.config.question_cap).questions

        state.pools = dict(zip((im.id for im in state.images), self._map(one, state.images)))

    def extract(self, state: RunState) -> None:
        abl = self.config.ablation

        def one(image: ThreatImage) -> tuple[list[Answer], list[str]]:
            out, warns = [], []
            for q in state.pools[image.id]:
                try:
                    out.append(answer_question(q, image, state.contexts[image.id], self.gateway,
                                               image_context=abl.image_context, global_context=abl.global_context))
                except EmptyResponse as err:
                    warns.append(str(err))
                except AuthFailure:
                    raise
                except GatewayError as err:
                    warns.append(f"answering {q.id} failed: {err}")
            return out, warns

        state.answers = {}
        for batch, warns in self._map(one, state.images):
            state.answers.update((a.question_id, a) for a in batch)
            state.warnings.extend(warns)

    def verify(self, state: RunState) -> None:
        if not self.config.ablation.verify:
            return
        summary = triplet_listing(state.text_graph)
        cfg = self.config

        def one(image: ThreatImage) -> tuple[tuple[Question, ...], list[Answer], list[str]]:
            labeled = tuple(filter_questions(state.pools[image.id], state.answers, summary, self.gateway))
            verified, warns = [], []
            for q in labeled:
                a = state.answers.get(q.id)
                if a is None or q.filter_label.value == "non_related":
                    continue
                try:
                    verified.append(verify_answer(a, q, image, state.contexts[image.id], cfg.refinement, self.gateway,
                                                  phrases=cfg.failing_phrases, score_dimensions=cfg.score_dimensions))
                except AuthFailure:
                    raise
                except GatewayError as err:
                    # left unassessed, so it cannot feed integration
                    warns.append(f"assessing {q.id} failed: {err}")
            return labeled, verified, warns

        for image, (labeled, verified, warns) in zip(state.images, self._map(one, state.images)):
            state.pools[image.id] = labeled
            state.warnings.extend(warns)
            for a in verified:
                state.answers[a.question_id] = a
                if a.aborted:
                    state.warnings.append(f"refinement of {a.question_id} aborted at round {a.round}")

    def integrate(self, state: RunState):
        cfg = self.config
        references = []
        for image in state.images:
            pool = state.pools[image.id]
            pairs = candidate_pairs(pool, state.answers, accept_levels=cfg.refinement.accept_levels,
                                    require_verified=cfg.ablation.verify)
            if not pairs:
                continue
            topic = image_topic(image, main_content_answer(pool, state.answers), self.gateway if cfg.model_topics else None)
            for q, a in pairs:
                aspect = model_aspect(q, self.gateway) if cfg.model_aspects else None
                references.append(build_reference(image, q, a, topic=topic, aspect=aspect,
                                                  accept_levels=cfg.refinement.accept_levels,
                                                  require_verified=cfg.ablation.verify))
        result = integrate_all(state.text_graph, references, self.catalog, self.gateway)
        state.warnings.extend(result.warnings)
        return references, result

    # -- driver --------------------------------------------------------------

    def run(self, bundle_path: str | Path, out_dir: str | Path) -> RunResult:
        out = Path(out_dir)
        bundle = load_bundle(bundle_path)
        if bundle.text_graph is None:
            raise BundleError(f"bundle {bundle_path} has no text-based graph (report.json 'graph')")
        problems = validate_graph(bundle.text_graph)
        if problems:
            raise InvalidOutput("text graph invalid: " + "; ".join(f"{v.rule} {v.element}" for v in problems))
        out.mkdir(parents=True, exist_ok=True)
        state = RunState(bundle, bundle.text_graph)
        write_atomic(out / "graph.text.json", to_canonical_json(bundle.text_graph))

        self._stage(state, "prefilter", self.prefilter)
        self._stage(state, "contexts", self.contexts)
        self._stage(state, "brainstorm", self.brainstorm)
        write_atomic(out / "questions.json", canonical_dumps(questions_doc(state)))
        self._stage(state, "extract", self.extract)
        write_atomic(out / "answers.json", canonical_dumps(answers_doc(state)))
        self._stage(state, "verify", self.verify)
        write_atomic(out / "questions.json", canonical_dumps(questions_doc(state)))
        write_atomic(out / "answers.json", canonical_dumps(answers_doc(state)))

        box: dict = {}
        self._stage(state, "integrate", lambda s: box.update(zip(("refs", "result"), self.integrate(s))))
        references, result = box["refs"], box["result"]
        deltas = {"report_id": bundle.report_id, "references": [r.to_dict() for r in references], **result.to_dict()}
        write_atomic(out / "deltas.json", canonical_dumps(deltas))

        graph = result.graph
        problems = validate_graph(graph)
        if problems:
            raise InvalidOutput("multimodal graph invalid: " + "; ".join(f"{v.rule} {v.element}" for v in problems))
        start = time.perf_counter()
        write_atomic(out / "graph.mm.json", to_canonical_json(graph))
        write_atomic(out / "graph.mm.dot", export_dot(graph))
        write_atomic(out / "graph.mm.html", export_html(graph))
        state.timings["export"] = round(time.perf_counter() - start, 4)

        report = {
            "report_id": bundle.report_id,
            "mode": self.config.gateway.mode,
            "config": self.config.to_dict(),
            "counts": {
                "images": len(bundle.images),
                "images_kept": len(state.images),
                "questions": sum(len(p) for p in state.pools.values()),
                "answers": len(state.answers),
                "references": len(references),
                "deltas_applied": len(result.applied),
                "deltas_rejected": len(result.rejected),
                "gateway_calls": self.gateway.calls,
            },
            "gain": diff_graphs(bundle.text_graph, graph).to_dict(),
            "timings": state.timings,
            "warnings": state.warnings,
        }
        write_atomic(out / "run-report.json", canonical_dumps(report))
        return RunResult(out, graph, report)


def run_pipeline(bundle_path: str | Path, out_dir: str | Path, config: PipelineConfig, gateway: Gateway | None = None,
                 **kw) -> RunResult:
    """Programmatic entry point; ``gateway`` defaults to the one the config's mode describes."""
    gw = gateway if gateway is not None else make_gateway(config.gateway)
    return Pipeline(config, gw, **kw).run(bundle_path, out_dir)
