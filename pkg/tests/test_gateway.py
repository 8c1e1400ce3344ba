from __future__ import annotations

import json
import shutil
import socket

import pytest

from stub_server import StubServer, ok

from ctigraph.corpus import load_bundle
from ctigraph.gateway import (
    AuthFailure,
    ChatRequest,
    DigestConflict,
    ExhaustedRetries,
    GatewayError,
    HttpGateway,
    ImagePart,
    MalformedResponse,
    Message,
    RecordingGateway,
    ReplayGateway,
    ScriptedGateway,
    TextPart,
    TranscriptMiss,
    TranscriptStore,
    build_request,
)


def req(text="What is shown?", temperature=0.7, image=b"\x89PNG\r\n\x1a\nfake"):
    return build_request("You describe images.", [ImagePart("image/png", image), text], temperature=temperature)


def test_http_success_and_wire_shape():
    with StubServer([ok("a flowchart")]) as srv:
        gw = HttpGateway(srv.url, "k-123", backoff=0)
        assert gw.complete(req()) == "a flowchart"
    sent = srv.received[0]
    assert sent["path"] == "/v1/chat/completions"
    assert sent["auth"] == "Bearer k-123"
    body = sent["body"]
    assert body["seed"] == 20240607 and body["temperature"] == 0.7 and body["stream"] is False
    assert body["messages"][0] == {"role": "system", "content": "You describe images."}
    url = body["messages"][1]["content"][0]["image_url"]["url"]
    assert url.startswith("data:image/png;base64,")


def test_429_twice_then_200_after_three_attempts():
    sleeps = []
    with StubServer([(429, {}), (429, {}), ok("fine")]) as srv:
        gw = HttpGateway(srv.url, "k", backoff=0.1, sleep=sleeps.append)
        assert gw.complete(req()) == "fine"
    assert gw.attempts == 3
    assert sleeps == [0.1, 0.2]


def test_5xx_exhausts_retries():
    with StubServer([(503, {})] * 3) as srv:
        gw = HttpGateway(srv.url, "k", max_attempts=3, backoff=0, sleep=lambda s: None)
        with pytest.raises(ExhaustedRetries):
            gw.complete(req())
    assert len(srv.received) == 3


def test_auth_rejection_is_not_retried():
    with StubServer([(401, {}), ok("never")]) as srv:
        gw = HttpGateway(srv.url, "bad", backoff=0)
        with pytest.raises(AuthFailure):
            gw.complete(req())
    assert len(srv.received) == 1


def test_missing_credential_fails_before_network(monkeypatch):
    def no_network(*a, **k):
        raise AssertionError("network touched")

    monkeypatch.setattr(socket, "create_connection", no_network)
    with pytest.raises(AuthFailure):
        HttpGateway("http://127.0.0.1:9/v1", None)
    with pytest.raises(AuthFailure):
        HttpGateway("http://127.0.0.1:9/v1", "")


@pytest.mark.parametrize("body", [b"not json", {"choices": []}, {"choices": [{"message": {}}]}])
def test_malformed_response(body):
    with StubServer([(200, body)]) as srv:
        with pytest.raises(MalformedResponse):
            HttpGateway(srv.url, "k", backoff=0).complete(req())


def test_other_4xx_is_a_gateway_error():
    with StubServer([(400, {"error": "bad"})]) as srv:
        with pytest.raises(GatewayError):
            HttpGateway(srv.url, "k", backoff=0).complete(req())
    assert len(srv.received) == 1


def test_overlong_response_is_truncated_to_cap():
    r = build_request("s", ["q"], max_tokens=2)
    with StubServer([ok("x" * 100)]) as srv:
        assert HttpGateway(srv.url, "k").complete(r) == "x" * 8


# -- requests and digests -----------------------------------------------------


def test_request_validation():
    with pytest.raises(ValueError):
        ChatRequest((Message("system", (TextPart("s"),)),))
    with pytest.raises(ValueError):
        ChatRequest((Message("user", (TextPart("q"),)),), max_tokens=0)
    with pytest.raises(ValueError):
        ChatRequest((Message("system", (ImagePart("image/png", b"x"),)), Message("user", (TextPart("q"),))))
    with pytest.raises(ValueError):
        ChatRequest((Message("tool", (TextPart("q"),)),))


def test_digest_sensitivity():
    base = req()
    assert base.digest == req().digest
    assert base.digest != req(temperature=0.2).digest
    assert base.digest != req(text="What else?").digest
    assert base.digest != req(image=b"\x89PNG\r\n\x1a\nother").digest


def test_renamed_identical_image_hits_the_same_entry(tmp_path, bundle_dir):
    copy = tmp_path / "bundle"
    shutil.copytree(bundle_dir, copy)
    (copy / "flow.png").rename(copy / "renamed.png")
    manifest = json.loads((copy / "report.json").read_text())
    for row in manifest["images"]:
        if row["file"] == "flow.png":
            row["file"] = "renamed.png"
    (copy / "report.json").write_text(json.dumps(manifest))
    a = build_request("s", [load_bundle(bundle_dir).image("img-flow").part(), "q"])
    b = build_request("s", [load_bundle(copy).image("img-flow").part(), "q"])
    assert a.digest == b.digest


# -- transcripts ----------------------------------------------------------------


def test_replay_hit_and_miss_names_digest(tmp_path):
    store = TranscriptStore(tmp_path / "t.jsonl")
    store.add(req().digest, "stored")
    gw = ReplayGateway(TranscriptStore(tmp_path / "t.jsonl"))
    assert gw.complete(req()) == "stored"
    other = req(temperature=0.1)
    with pytest.raises(TranscriptMiss) as err:
        gw.complete(other)
    assert err.value.digest == other.digest
    assert other.digest in str(err.value)


def test_replay_never_opens_a_socket(tmp_path, monkeypatch):
    store = TranscriptStore()
    store.add(req().digest, "x")

    def no_network(*a, **k):
        raise AssertionError("network touched")

    monkeypatch.setattr(socket.socket, "connect", no_network)
    gw = ReplayGateway(store)
    assert gw.complete(req()) == "x"
    with pytest.raises(TranscriptMiss):
        gw.complete(req("other"))


def test_record_is_idempotent_and_detects_conflicts(tmp_path):
    path = tmp_path / "t.jsonl"
    gw = RecordingGateway(ScriptedGateway(lambda r: "same"), TranscriptStore(path))
    gw.complete(req())
    gw.complete(req())
    assert len(path.read_text().splitlines()) == 1
    store = TranscriptStore(path)
    assert store.add(req().digest, "same") is False
    with pytest.raises(DigestConflict):
        store.add(req().digest, "different")
    path.write_text(path.read_text() + json.dumps({"digest": req().digest, "response": "other"}) + "\n")
    with pytest.raises(DigestConflict):
        TranscriptStore(path)


def test_record_then_replay_verbatim_over_http(tmp_path):
    texts = ["  spaced\n reply  ", "ünïcode ✓", '{"json": [1, 2]}']
    path = tmp_path / "t.jsonl"
    requests = [req(f"question {i}") for i in range(3)]
    with StubServer([ok(t) for t in texts]) as srv:
        rec = RecordingGateway(HttpGateway(srv.url, "k", backoff=0), TranscriptStore(path))
        live = [rec.complete(r) for r in requests]
    replay = ReplayGateway(TranscriptStore(path))
    assert live == texts
    assert [replay.complete(r) for r in requests] == texts


def test_scripted_sequence_exhausts():
    gw = ScriptedGateway(["one"])
    assert gw.complete(req()) == "one"
    with pytest.raises(GatewayError):
        gw.complete(req())
    assert gw.calls == 2
