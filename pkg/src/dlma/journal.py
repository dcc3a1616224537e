"""Append-only run journal: the single source of truth for a run.

Every provider call, random draw, tool execution, compile, revision, and
metric goes through `Journal.record`. Records carry a gapless sequence
number and a checksum over their deterministic content; wall-clock data
lives in a separate volatile section that is excluded from checksums and
from byte-level run comparisons.

Resume works by replay: the pipeline re-executes from the top, and
`record` serves back stored payloads for positions that already exist in
the journal instead of performing the effect again. Once the stored prefix
is exhausted, recording switches to normal append mode, so a truncated
journal continues exactly where it stopped.
"""

from __future__ import annotations

import hashlib
import json
import random
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Iterable

from .errors import JournalCorrupt

# Keys that may differ between two otherwise identical runs.
VOLATILE_KEYS = ("ts", "latency_s", "duration_s", "wall_s", "raw_log")


def canonical_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, ensure_ascii=True, separators=(",", ":"))


def _checksum(seq: int, etype: str, payload: dict[str, Any]) -> str:
    blob = f"{seq}|{etype}|{canonical_json(payload)}"
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


@dataclass(frozen=True)
class Event:
    seq: int
    type: str
    payload: dict[str, Any]
    volatile: dict[str, Any]
    checksum: str

    def to_line(self) -> str:
        return canonical_json({
            "seq": self.seq,
            "type": self.type,
            "payload": self.payload,
            "v": self.volatile,
            "c": self.checksum,
        })

    @classmethod
    def from_line(cls, line: str, lineno: int) -> "Event":
        try:
            raw = json.loads(line)
        except json.JSONDecodeError as exc:
            raise JournalCorrupt(f"line {lineno}: not valid JSON") from exc
        try:
            ev = cls(raw["seq"], raw["type"], raw["payload"], raw.get("v", {}), raw["c"])
        except (KeyError, TypeError) as exc:
            raise JournalCorrupt(f"line {lineno}: missing journal fields") from exc
        if _checksum(ev.seq, ev.type, ev.payload) != ev.checksum:
            raise JournalCorrupt(f"line {lineno}: checksum mismatch (seq {ev.seq})")
        return ev


def read_events(path: str | Path) -> list[Event]:
    """Load and verify a journal file: checksums valid, sequence gapless."""
    events: list[Event] = []
    text = Path(path).read_text(encoding="utf-8")
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        ev = Event.from_line(line, lineno)
        if ev.seq != len(events) + 1:
            raise JournalCorrupt(
                f"line {lineno}: sequence gap (expected {len(events) + 1}, got {ev.seq})"
            )
        events.append(ev)
    return events


def canonical_lines(path: str | Path) -> list[str]:
    """Journal content with volatile fields stripped, for byte comparisons."""
    out = []
    for ev in read_events(path):
        out.append(canonical_json({
            "seq": ev.seq, "type": ev.type, "payload": ev.payload, "c": ev.checksum,
        }))
    return out


class Journal:
    """Cursor-driven journal with append and replay modes.

    `record(type, compute)` either appends a fresh event (executing
    `compute`) or, while a loaded prefix remains, replays the stored event
    at the cursor. `compute` returns the payload dict, or a
    (payload, volatile) pair when it has wall-clock data to attach.
    """

    def __init__(self, path: str | Path, events: list[Event] | None = None):
        self.path = Path(path)
        self._events: list[Event] = events or []
        self._loaded = len(self._events)   # prefix available for replay
        self._cursor = 0
        self._lock = threading.Lock()
        self._fh = None

    @classmethod
    def create(cls, path: str | Path) -> "Journal":
        path = Path(path)
        if path.exists():
            raise JournalCorrupt(f"journal already exists: {path}")
        path.parent.mkdir(parents=True, exist_ok=True)
        path.touch()
        return cls(path)

    @classmethod
    def open_for_resume(cls, path: str | Path) -> "Journal":
        return cls(path, events=read_events(path))

    # -- recording ----------------------------------------------------

    def record(
        self,
        etype: str,
        compute: Callable[[], Any],
        *,
        reexecute_on_replay: bool = False,
        verify_on_replay: bool = False,
        on_replay: Callable[[dict[str, Any]], None] | None = None,
    ) -> dict[str, Any]:
        with self._lock:
            if self._cursor < self._loaded:
                return self._replay(etype, compute, reexecute_on_replay,
                                    verify_on_replay, on_replay)
            return self._append(etype, compute)

    def _replay(self, etype, compute, reexecute, verify, on_replay):
        ev = self._events[self._cursor]
        if ev.type != etype:
            raise JournalCorrupt(
                f"replay divergence at seq {ev.seq}: journal has {ev.type!r}, "
                f"pipeline asked for {etype!r}"
            )
        self._cursor += 1
        if reexecute:
            recomputed = _split_payload(compute())[0]
            if verify and canonical_json(recomputed) != canonical_json(ev.payload):
                raise JournalCorrupt(
                    f"replay divergence at seq {ev.seq} ({etype}): "
                    f"recomputed payload differs from journal"
                )
        if on_replay is not None:
            on_replay(ev.payload)
        return ev.payload

    def _append(self, etype, compute):
        payload, volatile = _split_payload(compute())
        volatile = dict(volatile)
        volatile.setdefault("ts", time.time())
        seq = len(self._events) + 1
        ev = Event(seq, etype, payload, volatile, _checksum(seq, etype, payload))
        self._events.append(ev)
        if self._fh is None:
            self._fh = self.path.open("a", encoding="utf-8")
        self._fh.write(ev.to_line() + "\n")
        self._fh.flush()
        return payload

    def mark(self, etype: str, payload: dict[str, Any]) -> dict[str, Any]:
        """Record a pure marker event (payload already computed)."""
        return self.record(etype, lambda: payload)

    # -- inspection ---------------------------------------------------

    @property
    def events(self) -> list[Event]:
        return list(self._events)

    @property
    def replaying(self) -> bool:
        return self._cursor < self._loaded

    def find(self, etype: str) -> list[Event]:
        return [ev for ev in self._events if ev.type == etype]

    def last(self, etype: str) -> Event | None:
        for ev in reversed(self._events):
            if ev.type == etype:
                return ev
        return None

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None


def _split_payload(result: Any) -> tuple[dict[str, Any], dict[str, Any]]:
    if isinstance(result, tuple):
        payload, volatile = result
        return payload, volatile or {}
    return result, {}


class JournaledRandom:
    """Seeded PRNG whose every draw is journaled with its counter.

    On replay the draw is recomputed from the same seed and checked against
    the stored value, so nondeterminism between a run and its resume is
    detected instead of silently diverging.
    """

    def __init__(self, seed: int, journal: Journal):
        self._rng = random.Random(seed)
        self._journal = journal
        self._counter = 0

    def _draw(self, purpose: str, fn: Callable[[], Any]) -> Any:
        self._counter += 1
        counter = self._counter

        def compute():
            return {"purpose": purpose, "counter": counter, "value": fn()}

        payload = self._journal.record(
            "rng.draw", compute, reexecute_on_replay=True, verify_on_replay=True
        )
        return payload["value"]

    def uniform(self, purpose: str) -> float:
        return self._draw(purpose, self._rng.random)

    def index(self, purpose: str, n: int) -> int:
        if n < 1:
            raise ValueError("index draw needs n >= 1")
        return self._draw(purpose, lambda: self._rng.randrange(n))

    def categorical(self, purpose: str, probs: dict[str, float]) -> str:
        """One draw from a categorical distribution.

        Keys are taken in sorted order so the mapping from the uniform draw
        to an outcome does not depend on dict construction order (configs
        round-trip through YAML, which sorts keys).
        """
        u = self.uniform(purpose)
        acc = 0.0
        keys = sorted(probs)
        for key in keys:
            acc += probs[key]
            if u < acc:
                return key
        return keys[-1]


def usage_totals(events: Iterable[Event]) -> tuple[int, float]:
    """Total prompt+completion tokens and wall seconds for a journal.

    Wall time spans the run.start and run.end events when both exist,
    otherwise the first and last event timestamps.
    """
    total = 0
    start_ts = end_ts = None
    first_ts = last_ts = None
    for ev in events:
        ts = ev.volatile.get("ts")
        if ts is not None:
            first_ts = ts if first_ts is None else first_ts
            last_ts = ts
        if ev.type == "provider.call":
            p = ev.payload
            try:
                total += int(p["prompt_tokens"]) + int(p["completion_tokens"])
            except (KeyError, TypeError, ValueError) as exc:
                raise JournalCorrupt(f"malformed provider.call at seq {ev.seq}") from exc
        elif ev.type == "run.start":
            start_ts = ts
        elif ev.type == "run.end":
            end_ts = ts
    if start_ts is not None and end_ts is not None:
        wall = max(0.0, end_ts - start_ts)
    elif first_ts is not None and last_ts is not None:
        wall = max(0.0, last_ts - first_ts)
    else:
        wall = 0.0
    return total, wall


def token_split(events: Iterable[Event]) -> dict[str, int]:
    """Token totals keyed by component prefix of the call tag."""
    split = {"leader": 0, "follower": 0, "other": 0}
    for ev in events:
        if ev.type != "provider.call":
            continue
        tag = ev.payload.get("tag", "")
        tokens = int(ev.payload["prompt_tokens"]) + int(ev.payload["completion_tokens"])
        if tag.startswith("leader."):
            split["leader"] += tokens
        elif tag.startswith("follower."):
            split["follower"] += tokens
        else:
            split["other"] += tokens
    return split
