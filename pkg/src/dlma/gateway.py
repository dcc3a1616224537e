"""Uniform chat-completion interface with live and scripted-replay modes.

Every prompted step in the engine routes through `Gateway.complete`, and
every completion is journaled with its tag, messages, and token counts.
Nothing else in the engine is allowed to touch the network.

Scripted mode replays a transcript: line-delimited JSON records of
`{"tag": ..., "text": ...}`, consumed FIFO per tag. Exhausting a tag is an
error — entries are never recycled, so a fixture that under-provisions a
tag fails loudly. Token counts in scripted mode use whitespace
tokenization, which is cheap and fully deterministic.
"""

from __future__ import annotations

import json
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

from .config import ProviderConfig
from .errors import ConfigError, EmptyResponse, GatewayError, TranscriptExhausted, TransportError
from .journal import Journal

Message = tuple[str, str]  # (role, text)


def count_tokens(text: str) -> int:
    """Whitespace token count used for scripted-mode accounting."""
    return len(text.split())


@dataclass(frozen=True)
class ChatRequest:
    tag: str
    messages: tuple[Message, ...]
    temperature: float = 0.3
    max_output_tokens: int = 2048

    def validate(self) -> None:
        if not self.tag:
            raise GatewayError("request tag must be non-empty")
        if not self.messages:
            raise GatewayError("request needs at least one message")
        t = self.temperature
        if not (t == t and 0.0 <= t <= 2.0):  # NaN fails the self-equality check
            raise GatewayError(f"temperature must be finite in [0, 2], got {t}")
        if self.max_output_tokens <= 0:
            raise GatewayError("max_output_tokens must be positive")


@dataclass(frozen=True)
class ChatResponse:
    text: str
    prompt_tokens: int
    completion_tokens: int
    latency_s: float


class Transcript:
    """FIFO-per-tag store of scripted responses."""

    def __init__(self, entries: list[tuple[str, str]]):
        self._queues: dict[str, list[str]] = {}
        for tag, text in entries:
            self._queues.setdefault(tag, []).append(text)
        self._lock = threading.Lock()

    @classmethod
    def from_path(cls, path: str | Path) -> "Transcript":
        entries = []
        for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                entries.append((rec["tag"], rec["text"]))
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise ConfigError(f"{path}:{lineno}: bad transcript record") from exc
        return cls(entries)

    def pop(self, tag: str) -> str:
        with self._lock:
            queue = self._queues.get(tag)
            if not queue:
                raise TranscriptExhausted(f"no scripted entries left for tag {tag!r}")
            return queue.pop(0)

    def remaining(self, tag: str) -> int:
        with self._lock:
            return len(self._queues.get(tag, []))


def write_transcript(entries: list[tuple[str, str]], path: str | Path) -> None:
    lines = [json.dumps({"tag": tag, "text": text}, ensure_ascii=True) for tag, text in entries]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def transcript_from_journal(events) -> list[tuple[str, str]]:
    """Extract (tag, text) pairs from provider.call events, in call order."""
    return [
        (ev.payload["tag"], ev.payload["text"])
        for ev in events
        if ev.type == "provider.call"
    ]


@dataclass
class LiveEndpoint:
    """Plain chat-completion wire contract over HTTP; no vendor extras."""

    endpoint: str
    model: str
    api_key: str = ""
    max_retries: int = 3
    backoff_s: tuple[float, ...] = (1.0, 2.0, 4.0)
    timeout_s: float = 120.0
    post: Callable = None  # injectable for tests; defaults to requests.post
    sleep: Callable[[float], None] = time.sleep

    def __post_init__(self):
        if self.post is None:
            import requests

            self.post = requests.post

    def call(self, request: ChatRequest) -> tuple[str, int, int]:
        body = {
            "model": self.model,
            "messages": [{"role": r, "content": t} for r, t in request.messages],
            "temperature": request.temperature,
            "max_tokens": request.max_output_tokens,
        }
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        last_error: Exception | None = None
        for attempt in range(self.max_retries):
            try:
                resp = self.post(self.endpoint, json=body, headers=headers,
                                 timeout=self.timeout_s)
                if getattr(resp, "status_code", 200) >= 500:
                    raise TransportError(f"server error {resp.status_code}")
                data = resp.json()
                text = data["choices"][0]["message"]["content"]
                usage = data.get("usage", {})
                ptok = int(usage.get("prompt_tokens",
                                     sum(count_tokens(t) for _, t in request.messages)))
                ctok = int(usage.get("completion_tokens", count_tokens(text)))
                return text, ptok, ctok
            except TransportError as exc:
                last_error = exc
            except Exception as exc:  # connection/timeout/parse errors
                last_error = exc
            if attempt < self.max_retries - 1:
                idx = min(attempt, len(self.backoff_s) - 1)
                self.sleep(self.backoff_s[idx])
        raise TransportError(
            f"provider call failed after {self.max_retries} attempts: {last_error}"
        )


class Gateway:
    """Chat-completion front end; journals every call.

    Exactly one source must be configured: a `Transcript` (scripted mode),
    a `LiveEndpoint` (live mode), or a `responder` callable used by fixture
    generators and tests (`responder(tag, messages) -> text`).
    """

    def __init__(
        self,
        journal: Journal,
        *,
        transcript: Transcript | None = None,
        live: LiveEndpoint | None = None,
        responder: Callable[[str, tuple[Message, ...]], str] | None = None,
        temperature: float = 0.3,
        max_output_tokens: int = 2048,
    ):
        sources = [s for s in (transcript, live, responder) if s is not None]
        if len(sources) != 1:
            raise ConfigError("gateway needs exactly one provider mode")
        self._journal = journal
        self._transcript = transcript
        self._live = live
        self._responder = responder
        self.temperature = temperature
        self.max_output_tokens = max_output_tokens

    @classmethod
    def from_config(cls, cfg: ProviderConfig, journal: Journal) -> "Gateway":
        if cfg.mode == "scripted":
            return cls(
                journal,
                transcript=Transcript.from_path(cfg.transcript_path),
                temperature=cfg.temperature,
                max_output_tokens=cfg.max_output_tokens,
            )
        import os

        live = LiveEndpoint(
            endpoint=cfg.endpoint,
            model=cfg.model,
            api_key=os.environ.get(cfg.api_key_env, ""),
            max_retries=cfg.max_retries,
        )
        return cls(journal, live=live, temperature=cfg.temperature,
                   max_output_tokens=cfg.max_output_tokens)

    def ask(self, tag: str, messages: list[Message]) -> str:
        """Convenience wrapper: build a request with gateway defaults."""
        req = ChatRequest(tag, tuple(messages), self.temperature, self.max_output_tokens)
        return self.complete(req).text

    def complete(self, request: ChatRequest) -> ChatResponse:
        request.validate()
        measured = {"latency_s": 0.0}

        def compute():
            started = time.monotonic()
            if self._transcript is not None:
                text = self._transcript.pop(request.tag)
                ptok = sum(count_tokens(t) for _, t in request.messages)
                ctok = count_tokens(text)
                latency = 0.0
            elif self._responder is not None:
                text = self._responder(request.tag, request.messages)
                ptok = sum(count_tokens(t) for _, t in request.messages)
                ctok = count_tokens(text)
                latency = 0.0
            else:
                text, ptok, ctok = self._live.call(request)
                latency = time.monotonic() - started
            measured["latency_s"] = latency
            if not text.strip():
                raise EmptyResponse(f"empty response for tag {request.tag!r}")
            payload = {
                "tag": request.tag,
                "messages": [[r, t] for r, t in request.messages],
                "text": text,
                "prompt_tokens": ptok,
                "completion_tokens": ctok,
            }
            return payload, {"latency_s": latency}

        def on_replay(payload):
            # Keep scripted cursors aligned during resume: the stored call
            # consumes its transcript entry, which must match byte-for-byte.
            if self._transcript is not None:
                text = self._transcript.pop(payload["tag"])
                if text != payload["text"]:
                    raise TranscriptExhausted(
                        f"transcript drift for tag {payload['tag']!r} during replay"
                    )

        payload = self._journal.record("provider.call", compute, on_replay=on_replay)
        return ChatResponse(
            text=payload["text"],
            prompt_tokens=payload["prompt_tokens"],
            completion_tokens=payload["completion_tokens"],
            latency_s=measured["latency_s"],
        )
