from __future__ import annotations

import json
import shutil

import pytest

from ctigraph.cli import EXIT_CONFIG, EXIT_GATEWAY, EXIT_INPUT, EXIT_OK, EXIT_USAGE, EXIT_VALIDATION, build_report, main
from ctigraph.gateway import RecordingGateway, ScriptedGateway, TranscriptStore
from ctigraph.pipeline import PipelineConfig, run_pipeline

ARTIFACTS = ("graph.mm.json", "questions.json", "answers.json", "deltas.json")


@pytest.fixture
def run_dir(tmp_path, bundle_dir):
    out = tmp_path / "run"
    assert main(["run", str(bundle_dir), "-o", str(out), "--transcripts", str(bundle_dir / "transcripts.jsonl")]) == EXIT_OK
    return out


def test_replay_run_matches_golden(run_dir, bundle_dir):
    for name in ARTIFACTS:
        assert (run_dir / name).read_bytes() == (bundle_dir / "golden" / name).read_bytes(), name


def test_run_prints_gain(tmp_path, bundle_dir, capsys):
    main(["run", str(bundle_dir), "-o", str(tmp_path / "o"), "--transcripts", str(bundle_dir / "transcripts.jsonl")])
    assert "+3 entities, +4 relations, +3 techniques" in capsys.readouterr().out


def test_replay_is_independent_of_concurrency(tmp_path, bundle_dir, run_dir):
    out = tmp_path / "serial"
    assert main(["run", str(bundle_dir), "-o", str(out), "--concurrency", "1",
                 "--transcripts", str(bundle_dir / "transcripts.jsonl")]) == EXIT_OK
    for name in ARTIFACTS:
        assert (out / name).read_bytes() == (run_dir / name).read_bytes()


def test_usage_errors():
    assert main([]) == EXIT_USAGE
    assert main(["run"]) == EXIT_USAGE
    assert main(["export", "g.json", "--format", "svg"]) == EXIT_USAGE
    assert main(["--help"]) == EXIT_OK


def test_live_without_key_is_a_config_error(tmp_path, bundle_dir, monkeypatch, capsys):
    monkeypatch.delenv("CTIGRAPH_API_KEY", raising=False)
    code = main(["run", str(bundle_dir), "-o", str(tmp_path / "o"), "--mode", "live", "--endpoint", "http://127.0.0.1:9"])
    assert code == EXIT_CONFIG
    assert "CTIGRAPH_API_KEY" in capsys.readouterr().err


def test_replay_without_transcripts_is_a_config_error(tmp_path, bundle_dir):
    assert main(["run", str(bundle_dir), "-o", str(tmp_path / "o")]) == EXIT_CONFIG
    assert main(["run", str(bundle_dir), "-o", str(tmp_path / "o"), "--transcripts", str(tmp_path / "nope")]) == EXIT_CONFIG


def test_missing_bundle_is_an_input_error(tmp_path):
    (tmp_path / "t.jsonl").write_text("")
    assert main(["run", str(tmp_path / "nope"), "-o", str(tmp_path / "o"), "--transcripts", str(tmp_path / "t.jsonl")]) == EXIT_INPUT


def test_ablation_on_old_transcripts_misses_with_digest(tmp_path, bundle_dir, capsys):
    code = main(["run", str(bundle_dir), "-o", str(tmp_path / "o"), "--no-global-context",
                 "--transcripts", str(bundle_dir / "transcripts.jsonl")])
    assert code == EXIT_GATEWAY
    err = capsys.readouterr().err
    assert "no transcript entry for digest" in err


def test_record_mode_writes_one_line_per_distinct_request(tmp_path, bundle_dir, stuxnet_model):
    path = tmp_path / "t.jsonl"
    inner = ScriptedGateway(stuxnet_model)
    cfg = PipelineConfig.load(None, env={}, gateway={"mode": "record", "transcripts": str(path)})
    run_pipeline(bundle_dir, tmp_path / "o", cfg, gateway=RecordingGateway(inner, TranscriptStore(path)))
    lines = path.read_text().splitlines()
    assert len(lines) == len({r.digest for r in inner.requests})
    assert len(lines) == len(TranscriptStore(bundle_dir / "transcripts.jsonl"))


def test_report(run_dir, tmp_path, capsys):
    out = tmp_path / "rep.json"
    assert main(["report", str(run_dir), "--json", str(out)]) == EXIT_OK
    text = capsys.readouterr().out
    assert "question distribution" in text and "quality by round" in text
    rep = json.loads(out.read_text())
    assert rep == build_report(run_dir)
    assert rep["gain"]["added_techniques"] == 3
    assert sum(rep["question_distribution"]["counts"].values()) == rep["question_distribution"]["total"]
    assert all(v is None or 0.0 <= v <= 1.0 for v in rep["monotonicity"].values())


def test_report_without_answers_is_an_input_error(run_dir, capsys):
    (run_dir / "answers.json").unlink()
    assert main(["report", str(run_dir)]) == EXIT_INPUT
    assert "answers.json" in capsys.readouterr().err


def test_report_on_unlabeled_questions_says_unavailable(run_dir, capsys):
    doc = json.loads((run_dir / "questions.json").read_text())
    for im in doc["images"]:
        for q in im["questions"]:
            q["filter_label"] = None
    (run_dir / "questions.json").write_text(json.dumps(doc))
    assert main(["report", str(run_dir)]) == EXIT_OK
    assert "unavailable" in capsys.readouterr().out


def test_eval(run_dir, bundle_dir, tmp_path, capsys):
    out = tmp_path / "m.json"
    assert main(["eval", str(run_dir / "graph.mm.json"), str(bundle_dir / "gold.json"), "--json", str(out)]) == EXIT_OK
    assert "technique" in capsys.readouterr().out
    assert json.loads(out.read_text())["technique"]["recall"] == 1.0
    assert main(["eval", str(run_dir / "graph.mm.json"), str(tmp_path / "none.json")]) == EXIT_INPUT


def test_validate(bundle_dir, tmp_path, capsys):
    assert main(["validate", str(bundle_dir)]) == EXIT_OK
    assert "img-logo: would be dropped by rule d" in capsys.readouterr().out
    doc = json.loads((bundle_dir / "graph.text.json").read_text())
    doc["events"][0]["subject"] = "ghost"
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps(doc))
    assert main(["validate", str(bad)]) == EXIT_VALIDATION
    doc["events"][0]["timestamp"] = "soon"
    bad.write_text(json.dumps(doc))
    assert main(["validate", str(bad)]) == EXIT_VALIDATION


@pytest.mark.parametrize("fmt, marker", [("dot", "digraph"), ("html", "<svg"), ("json", '"report_id"')])
def test_export_formats(run_dir, tmp_path, fmt, marker):
    out = tmp_path / f"g.{fmt}"
    assert main(["export", str(run_dir / "graph.mm.json"), "--format", fmt, "-o", str(out)]) == EXIT_OK
    assert marker in out.read_text()


def test_export_json_is_canonical(run_dir, tmp_path):
    out = tmp_path / "g.json"
    main(["export", str(run_dir / "graph.mm.json"), "--format", "json", "-o", str(out)])
    assert out.read_bytes() == (run_dir / "graph.mm.json").read_bytes()


def test_export_missing_graph(tmp_path):
    assert main(["export", str(tmp_path / "none.json"), "--format", "dot"]) == EXIT_INPUT


def test_config_file_flag(tmp_path, bundle_dir):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"gateway": {"mode": "replay", "transcripts": str(bundle_dir / "transcripts.jsonl")}}))
    assert main(["run", str(bundle_dir), "-o", str(tmp_path / "o"), "-c", str(cfg)]) == EXIT_OK
    cfg.write_text(json.dumps({"gateway": {"mode": "replay"}, "unknown_key": 1}))
    assert main(["run", str(bundle_dir), "-o", str(tmp_path / "o2"), "-c", str(cfg)]) == EXIT_CONFIG


def test_bundle_without_text_graph(tmp_path, bundle_dir):
    copy = tmp_path / "b"
    shutil.copytree(bundle_dir, copy)
    manifest = json.loads((copy / "report.json").read_text())
    del manifest["graph"]
    (copy / "report.json").write_text(json.dumps(manifest))
    code = main(["run", str(copy), "-o", str(tmp_path / "o"), "--transcripts", str(bundle_dir / "transcripts.jsonl")])
    assert code == EXIT_INPUT
