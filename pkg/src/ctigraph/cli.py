"""Command-line interface: ``ctigraph run|eval|report|validate|export``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .brainstorm import Question, UndefinedMetric, pool_monotonicity
from .corpus import BundleError, PrefilterRules, load_bundle, prefilter_images
from .evaluate import MatchConfig, UnlabeledQuestion, load_gold, question_distribution, score
from .extract import Answer
from .gateway import GatewayError, TranscriptError
from .graph import GraphSchemaError, canonical_dumps, diff_graphs, export_dot, export_html, from_json, to_canonical_json, validate_graph
from .pipeline import ConfigError, InvalidOutput, PipelineConfig, StageError, run_pipeline, write_atomic
from .verify import quality_distribution

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_INPUT = 4
EXIT_GATEWAY = 5
EXIT_VALIDATION = 6

log = logging.getLogger("ctigraph")


class MissingArtifact(FileNotFoundError):
    pass


def _load_graph(path: str | Path):
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"graph file {p} not found")
    return from_json(p.read_bytes())


def _emit(text: str, out: str | None) -> None:
    if out:
        write_atomic(Path(out), text if text.endswith("\n") else text + "\n")
    else:
        print(text)


def cmd_run(args: argparse.Namespace) -> int:
    overrides = {
        "gateway": {"mode": args.mode, "transcripts": args.transcripts, "endpoint": args.endpoint, "model": args.model,
                    "concurrency": args.concurrency},
        "ablation": {k: False for k, flag in (("image_context", args.no_image_context), ("global_context", args.no_global_context),
                                              ("brainstorm", args.no_brainstorm), ("verify", args.no_verify)) if flag},
    }
    config = PipelineConfig.load(args.config, **overrides)
    result = run_pipeline(args.bundle, args.out, config)
    e, r, t = diff_graphs(_load_graph(Path(args.out) / "graph.text.json"), result.graph).counts
    print(f"wrote {result.out_dir}: +{e} entities, +{r} relations, +{t} techniques")
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    graph = _load_graph(args.graph)
    if not Path(args.gold).is_file():
        raise FileNotFoundError(f"gold file {args.gold} not found")
    report = score(graph, load_gold(args.gold), MatchConfig(args.threshold))
    if args.json:
        write_atomic(Path(args.json), canonical_dumps(report.to_dict()))
    print(report.table())
    return EXIT_OK


def _artifact(run_dir: Path, name: str) -> Path:
    p = run_dir / name
    if not p.is_file():
        raise MissingArtifact(f"run directory {run_dir} lacks {name}")
    return p


def build_report(run_dir: str | Path) -> dict:
    """Statistics from the staged artifacts alone; no gateway involved."""
    run_dir = Path(run_dir)
    qdoc = json.loads(_artifact(run_dir, "questions.json").read_text(encoding="utf-8"))
    adoc = json.loads(_artifact(run_dir, "answers.json").read_text(encoding="utf-8"))
    text_g = _load_graph(_artifact(run_dir, "graph.text.json"))
    mm_g = _load_graph(_artifact(run_dir, "graph.mm.json"))

    questions = [Question.from_dict(q) for im in qdoc["images"] for q in im["questions"]]
    answers = [Answer.from_dict(a) for a in adoc["answers"]]
    try:
        distribution = question_distribution(questions).to_dict()
    except (UnlabeledQuestion, ValueError) as err:
        distribution = {"unavailable": str(err)}
    mono = {}
    for im in qdoc["images"]:
        try:
            mono[im["id"]] = round(pool_monotonicity([q["text"] for q in im["questions"]]), 4)
        except UndefinedMetric:
            mono[im["id"]] = None
    quality = {str(k): v.to_dict() for k, v in quality_distribution(answers).items()}
    return {
        "question_distribution": distribution,
        "monotonicity": mono,
        "quality_by_round": quality,
        "gain": diff_graphs(text_g, mm_g).to_dict(),
    }


def format_report(rep: dict) -> str:
    lines = ["question distribution"]
    dist = rep["question_distribution"]
    if "unavailable" in dist:
        lines.append(f"  unavailable: {dist['unavailable']}")
    else:
        for label, count in dist["counts"].items():
            lines.append(f"  {label:<20} {count:>5} {dist['proportions'][label]:>8.4f}")
        lines.append(f"  {'total':<20} {dist['total']:>5}")
    lines.append("monotonicity per image")
    for image_id, value in rep["monotonicity"].items():
        lines.append(f"  {image_id:<20} {'n/a' if value is None else format(value, '.4f'):>8}")
    lines.append("quality by round")
    for rnd, stats in rep["quality_by_round"].items():
        counts = " ".join(f"{k}={v}" for k, v in stats["counts"].items())
        lines.append(f"  round {rnd:<4} {counts}  positive={stats['positive_fraction']:.4f}")
    lines.append("gain over the text graph")
    for key in ("added_entities", "added_relations", "added_techniques"):
        lines.append(f"  {key:<20} {rep['gain'][key]:>5}")
    return "\n".join(lines)


def cmd_report(args: argparse.Namespace) -> int:
    rep = build_report(args.run_dir)
    if args.json:
        write_atomic(Path(args.json), canonical_dumps(rep))
    print(format_report(rep))
    return EXIT_OK


def cmd_validate(args: argparse.Namespace) -> int:
    path = Path(args.path)
    if path.is_file():
        graph, rejections = _load_graph(path), []
    else:
        bundle = load_bundle(path)
        graph = bundle.text_graph
        rejections = prefilter_images(bundle, PrefilterRules()).rejected
        for r in rejections:
            print(f"image {r.image.id}: would be dropped by rule {r.rule} ({r.detail})")
    violations = validate_graph(graph) if graph is not None else []
    for v in violations:
        print(f"{v.rule}: {v.element}: {v.message}")
    if violations:
        return EXIT_VALIDATION
    print("ok")
    return EXIT_OK


def cmd_export(args: argparse.Namespace) -> int:
    graph = _load_graph(args.graph)
    render = {"dot": export_dot, "html": export_html, "json": lambda g: to_canonical_json(g).decode("utf-8")}[args.format]
    _emit(render(graph), args.out)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ctigraph", description="Multimodal attack-graph enhancement for CTI reports.")
    p.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run the full pipeline on a report bundle")
    run.add_argument("bundle", help="bundle directory holding report.json")
    run.add_argument("-o", "--out", required=True, help="output directory for staged artifacts")
    run.add_argument("-c", "--config", help="JSON configuration file")
    run.add_argument("--mode", choices=("live", "replay", "record"), help="gateway mode (default from config: replay)")
    run.add_argument("--transcripts", help="transcript JSONL file for replay/record")
    run.add_argument("--endpoint", help="OpenAI-compatible base URL (env CTIGRAPH_ENDPOINT)")
    run.add_argument("--model", help="model name (env CTIGRAPH_MODEL)")
    run.add_argument("--concurrency", type=int, help="maximum in-flight gateway calls")
    run.add_argument("--no-image-context", action="store_true", help="answer without the image-aware context")
    run.add_argument("--no-global-context", action="store_true", help="answer without the global context")
    run.add_argument("--no-brainstorm", action="store_true", help="use the leading questions only")
    run.add_argument("--no-verify", action="store_true", help="skip question filtering and answer refinement")
    run.set_defaults(func=cmd_run)

    ev = sub.add_parser("eval", help="score a graph against a gold annotation")
    ev.add_argument("graph")
    ev.add_argument("gold")
    ev.add_argument("--threshold", type=float, default=MatchConfig().fuzzy_threshold, help="fuzzy match threshold")
    ev.add_argument("--json", help="also write the report as JSON to this path")
    ev.set_defaults(func=cmd_eval)

    rp = sub.add_parser("report", help="statistics over a finished run directory")
    rp.add_argument("run_dir")
    rp.add_argument("--json", help="also write the statistics as JSON to this path")
    rp.set_defaults(func=cmd_report)

    va = sub.add_parser("validate", help="check a bundle directory or a graph JSON file")
    va.add_argument("path")
    va.set_defaults(func=cmd_validate)

    ex = sub.add_parser("export", help="render a graph JSON file")
    ex.add_argument("graph")
    ex.add_argument("--format", required=True, choices=("dot", "html", "json"))
    ex.add_argument("-o", "--out", help="output file (default stdout)")
    ex.set_defaults(func=cmd_export)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=(logging.WARNING, logging.INFO, logging.DEBUG)[min(args.verbose, 2)],
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except StageError as err:
        cause = err.cause
        print(f"error: {err}", file=sys.stderr)
        if isinstance(cause, (GatewayError, TranscriptError)):
            return EXIT_GATEWAY
        if isinstance(cause, (BundleError, FileNotFoundError)):
            return EXIT_INPUT
        if isinstance(cause, (InvalidOutput, GraphSchemaError)):
            return EXIT_VALIDATION
        raise
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except (GatewayError, TranscriptError) as err:
        print(f"gateway error: {err}", file=sys.stderr)
        return EXIT_GATEWAY
    except (InvalidOutput, GraphSchemaError) as err:
        print(f"validation error: {err}", file=sys.stderr)
        return EXIT_VALIDATION
    except (BundleError, FileNotFoundError, json.JSONDecodeError, KeyError) as err:
        print(f"input error: {err}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
