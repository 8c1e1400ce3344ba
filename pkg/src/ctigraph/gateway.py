"""Chat-with-vision client for an OpenAI-compatible endpoint, with transcripts.

Every gateway exposes ``complete(request) -> str``. :class:`HttpGateway`
talks to a live server; :class:`ReplayGateway` answers from a recorded
:class:`TranscriptStore` and never touches the network;
:class:`RecordingGateway` wraps another gateway and appends each exchange
to a store.
"""

from __future__ import annotations

import base64
import hashlib
import json
import logging
import socket
import threading
import time
import urllib.error
import urllib.request
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Protocol, Union

log = logging.getLogger(__name__)

DEFAULT_TEMPERATURE = 0.7
DEFAULT_SEED = 20240607
DEFAULT_MAX_TOKENS = 512
SUMMARY_MAX_TOKENS = 1024
CHARS_PER_TOKEN = 4

ROLES = ("system", "user", "assistant")


class GatewayError(RuntimeError):
    pass


class AuthFailure(GatewayError):
    pass


class ExhaustedRetries(GatewayError):
    pass


class MalformedResponse(GatewayError):
    pass


class TranscriptError(RuntimeError):
    """Replay-store problems. Deliberately not a GatewayError, so stage
    fallbacks that tolerate a flaky model never mask a stale transcript."""


class TranscriptMiss(TranscriptError):
    def __init__(self, digest: str, summary: str):
        super().__init__(f"no transcript entry for digest {digest} ({summary})")
        self.digest = digest


class DigestConflict(TranscriptError):
    pass


@dataclass(frozen=True)
class TextPart:
    text: str


@dataclass(frozen=True)
class ImagePart:
    media_type: str
    data: bytes = field(repr=False)

    @property
    def sha256(self) -> str:
        return hashlib.sha256(self.data).hexdigest()

    def data_url(self) -> str:
        return f"data:{self.media_type};base64,{base64.b64encode(self.data).decode('ascii')}"


Part = Union[TextPart, ImagePart]


@dataclass(frozen=True)
class Message:
    role: str
    parts: tuple[Part, ...]

    def __post_init__(self):
        object.__setattr__(self, "parts", tuple(self.parts))


@dataclass(frozen=True)
class ChatRequest:
    messages: tuple[Message, ...]
    model: str = "default"
    temperature: float = DEFAULT_TEMPERATURE
    seed: int = DEFAULT_SEED
    max_tokens: int = DEFAULT_MAX_TOKENS

    def __post_init__(self):
        object.__setattr__(self, "messages", tuple(self.messages))
        if self.max_tokens < 1:
            raise ValueError("max_tokens must be >= 1")
        if not any(m.role == "user" for m in self.messages):
            raise ValueError("a request needs at least one user message")
        for m in self.messages:
            if m.role not in ROLES:
                raise ValueError(f"unknown role {m.role!r}")
            if m.role != "user" and any(isinstance(p, ImagePart) for p in m.parts):
                raise ValueError("image parts are only allowed in user messages")

    def canonical(self) -> dict:
        """Content that identifies the request; image bytes enter as hashes."""
        msgs = []
        for m in self.messages:
            parts = [
                {"type": "text", "text": p.text} if isinstance(p, TextPart) else {"type": "image", "sha256": p.sha256}
                for p in m.parts
            ]
            msgs.append({"role": m.role, "parts": parts})
        return {
            "model": self.model,
            "messages": msgs,
            "temperature": repr(float(self.temperature)),
            "seed": self.seed,
            "max_tokens": self.max_tokens,
        }

    @property
    def digest(self) -> str:
        blob = json.dumps(self.canonical(), sort_keys=True, separators=(",", ":"), ensure_ascii=False)
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()

    def summary(self) -> str:
        texts = [p.text for m in self.messages if m.role == "user" for p in m.parts if isinstance(p, TextPart)]
        first = texts[0].splitlines()[0][:80] if texts and texts[0] else ""
        images = sum(isinstance(p, ImagePart) for m in self.messages for p in m.parts)
        return f"model={self.model} messages={len(self.messages)} images={images} first={first!r}"

    def to_wire(self) -> dict:
        msgs = []
        for m in self.messages:
            if m.role != "user" and all(isinstance(p, TextPart) for p in m.parts):
                msgs.append({"role": m.role, "content": "".join(p.text for p in m.parts)})
                continue
            content = []
            for p in m.parts:
                if isinstance(p, TextPart):
                    content.append({"type": "text", "text": p.text})
                else:
                    content.append({"type": "image_url", "image_url": {"url": p.data_url()}})
            msgs.append({"role": m.role, "content": content})
        return {
            "model": self.model,
            "messages": msgs,
            "temperature": self.temperature,
            "seed": self.seed,
            "max_tokens": self.max_tokens,
            "stream": False,
        }


def build_request(system: str, user: Iterable[Part | str], *, model: str = "default", temperature: float = DEFAULT_TEMPERATURE,
                  seed: int = DEFAULT_SEED, max_tokens: int = DEFAULT_MAX_TOKENS) -> ChatRequest:
    parts = tuple(TextPart(p) if isinstance(p, str) else p for p in user)
    messages = [Message("system", (TextPart(system),))] if system else []
    messages.append(Message("user", parts))
    return ChatRequest(tuple(messages), model=model, temperature=temperature, seed=seed, max_tokens=max_tokens)


class Gateway(Protocol):
    def complete(self, req: ChatRequest) -> str: ...


# -- live HTTP ---------------------------------------------------------------

# (url, headers, body, timeout) -> (status, response body)
Transport = Callable[[str, dict, bytes, float], "tuple[int, bytes]"]


def urllib_transport(url: str, headers: dict, body: bytes, timeout: float) -> tuple[int, bytes]:
    req = urllib.request.Request(url, data=body, headers=headers, method="POST")
    try:
        with urllib.request.urlopen(req, timeout=timeout) as resp:
            return resp.status, resp.read()
    except urllib.error.HTTPError as err:
        return err.code, err.read()


class HttpGateway:
    """POSTs chat completions; retries timeouts, 429 and 5xx with exponential backoff."""

    def __init__(self, endpoint: str, api_key: str | None, *, transport: Transport | None = None, max_attempts: int = 4,
                 backoff: float = 0.5, timeout: float = 120.0, concurrency: int = 4,
                 sleep: Callable[[float], None] = time.sleep):
        if not api_key:
            raise AuthFailure("no API key configured")
        if not endpoint:
            raise GatewayError("no endpoint configured")
        self.url = endpoint.rstrip("/")
        if not self.url.endswith("/chat/completions"):
            self.url += "/chat/completions"
        self.api_key = api_key
        self.transport = transport or urllib_transport
        self.max_attempts = max_attempts
        self.backoff = backoff
        self.timeout = timeout
        self.sleep = sleep
        self._slots = threading.BoundedSemaphore(concurrency)
        self.attempts = 0

    def complete(self, req: ChatRequest) -> str:
        body = json.dumps(req.to_wire()).encode("utf-8")
        headers = {"Content-Type": "application/json", "Authorization": f"Bearer {self.api_key}"}
        last = "no attempt made"
        for attempt in range(1, self.max_attempts + 1):
            with self._slots:
                self.attempts += 1
                try:
                    status, payload = self.transport(self.url, headers, body, self.timeout)
                except (socket.timeout, TimeoutError, urllib.error.URLError, ConnectionError) as err:
                    status, payload, last = None, b"", f"transport error: {err}"
            if status is not None:
                if status in (401, 403):
                    raise AuthFailure(f"server rejected credentials (HTTP {status})")
                if status == 200:
                    return self._parse(payload, req)
                last = f"HTTP {status}"
                if status != 429 and status < 500:
                    raise GatewayError(f"request failed with {last}: {payload[:200]!r}")
            if attempt < self.max_attempts:
                delay = self.backoff * 2 ** (attempt - 1)
                log.warning("gateway attempt %d failed (%s); retrying in %.2fs", attempt, last, delay)
                self.sleep(delay)
        raise ExhaustedRetries(f"gave up after {self.max_attempts} attempts: {last}")

    def _parse(self, payload: bytes, req: ChatRequest) -> str:
        try:
            doc = json.loads(payload)
            text = doc["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as err:
            raise MalformedResponse(f"unexpected response shape: {err!r}") from None
        if isinstance(text, list):
            text = "".join(p.get("text", "") for p in text if isinstance(p, dict))
        if not isinstance(text, str):
            raise MalformedResponse("message content is not text")
        budget = req.max_tokens * CHARS_PER_TOKEN
        if len(text) > budget:
            # server ignored the output cap
            log.warning("response of %d chars exceeds the %d-token cap; truncating", len(text), req.max_tokens)
            text = text[:budget]
        return text


# -- transcripts -------------------------------------------------------------


class TranscriptStore:
    """Digest -> response map persisted as append-only JSON lines."""

    def __init__(self, path: str | Path | None = None):
        self.path = Path(path) if path is not None else None
        self.entries: dict[str, str] = {}
        self._lock = threading.Lock()
        if self.path is not None and self.path.exists():
            with self.path.open(encoding="utf-8") as fh:
                for n, line in enumerate(fh, 1):
                    if not line.strip():
                        continue
                    row = json.loads(line)
                    self._put(row["digest"], row["response"], where=f"{self.path}:{n}")

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, digest: str) -> bool:
        return digest in self.entries

    def get(self, digest: str) -> str | None:
        return self.entries.get(digest)

    def _put(self, digest: str, response: str, where: str = "") -> bool:
        known = self.entries.get(digest)
        if known is not None:
            if known != response:
                raise DigestConflict(f"digest {digest} already recorded with a different response {where}".strip())
            return False
        self.entries[digest] = response
        return True

    def add(self, digest: str, response: str) -> bool:
        """Store one entry; returns False when it was already present."""
        with self._lock:
            fresh = self._put(digest, response)
            if fresh and self.path is not None:
                self.path.parent.mkdir(parents=True, exist_ok=True)
                with self.path.open("a", encoding="utf-8") as fh:
                    fh.write(json.dumps({"digest": digest, "response": response}, ensure_ascii=False) + "\n")
            return fresh


def complete_replay(req: ChatRequest, store: TranscriptStore) -> str:
    hit = store.get(req.digest)
    if hit is None:
        raise TranscriptMiss(req.digest, req.summary())
    return hit


def record(req: ChatRequest, resp: str, store: TranscriptStore) -> TranscriptStore:
    store.add(req.digest, resp)
    return store


class ReplayGateway:
    def __init__(self, store: TranscriptStore):
        self.store = store
        self.calls = 0

    def complete(self, req: ChatRequest) -> str:
        self.calls += 1
        return complete_replay(req, self.store)


class RecordingGateway:
    def __init__(self, inner: Gateway, store: TranscriptStore):
        self.inner = inner
        self.store = store
        self.calls = 0

    def complete(self, req: ChatRequest) -> str:
        self.calls += 1
        resp = self.inner.complete(req)
        record(req, resp, self.store)
        return resp


class ScriptedGateway:
    """Offline stand-in model.

    ``responder`` is either a callable ``request -> str`` or a sequence of
    responses returned in order. Each call is kept in ``requests``.
    """

    def __init__(self, responder: Callable[[ChatRequest], str] | Iterable[str]):
        if callable(responder):
            self._fn = responder
        else:
            queue = list(responder)

            def pop(_req: ChatRequest) -> str:
                if not queue:
                    raise GatewayError("scripted responses exhausted")
                return queue.pop(0)

            self._fn = pop
        self.requests: list[ChatRequest] = []
        self._lock = threading.Lock()

    @property
    def calls(self) -> int:
        return len(self.requests)

    def complete(self, req: ChatRequest) -> str:
        with self._lock:
            self.requests.append(req)
            return self._fn(req)


def request_text(req: ChatRequest) -> str:
    """All text of a request, system prompt included."""
    return "\n".join(p.text for m in req.messages for p in m.parts if isinstance(p, TextPart))
