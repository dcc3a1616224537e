"""Query formulation and reference search with an offline fixture corpus.

Offline ranking is deliberately simple: the overlap score of a query and a
document is the number of distinct lowercased terms shared between the
query text and the document's title plus abstract. Ties break by ascending
document id. That makes search a pure function of (query, corpus, k),
which is what the replay tests need. Live mode delegates ranking to the
remote service and only normalizes the response shape.

Corpus fixture format, one document per file::

    id: ssm-interp-2025
    title: Probing Token Interactions In State Space Models
    abstract: One line describing the paper.
    ---
    body line 1
    body line 2
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

from .config import RetrievalConfig
from .errors import ConfigError, EmptyResponse, ParseError, TransportError
from .gateway import Gateway
from .journal import Journal

QUERY_ORIGINS = ("involvement", "improvement", "follower_external")


@dataclass(frozen=True)
class Query:
    text: str
    origin: str

    def __post_init__(self):
        if not self.text.strip():
            raise ValueError("query text must be non-empty")
        if self.origin not in QUERY_ORIGINS:
            raise ValueError(f"unknown query origin {self.origin!r}")


@dataclass
class PaperRef:
    id: str
    title: str
    abstract: str
    body_lines: tuple[str, ...] = ()
    body_excerpts: list[tuple[int, int, str]] = field(default_factory=list)

    def excerpt(self, line_start: int, line_end: int) -> str:
        """Verbatim lines [line_start, line_end], 1-indexed inclusive."""
        if not (1 <= line_start <= line_end <= len(self.body_lines)):
            raise ValueError(
                f"span ({line_start}, {line_end}) outside body of {self.id!r} "
                f"({len(self.body_lines)} lines)"
            )
        return "\n".join(self.body_lines[line_start - 1:line_end])

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "title": self.title,
            "abstract": self.abstract,
            "body_lines": list(self.body_lines),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "PaperRef":
        return cls(data["id"], data["title"], data["abstract"],
                   tuple(data.get("body_lines", [])))


def parse_corpus_file(path: Path) -> PaperRef:
    text = path.read_text(encoding="utf-8")
    header, sep, body = text.partition("\n---\n")
    if not sep:
        raise ConfigError(f"{path}: missing '---' header separator")
    fields = {}
    for line in header.splitlines():
        key, colon, value = line.partition(":")
        if colon:
            fields[key.strip()] = value.strip()
    for required in ("id", "title", "abstract"):
        if not fields.get(required):
            raise ConfigError(f"{path}: corpus header missing {required!r}")
    body_lines = tuple(body.rstrip("\n").splitlines())
    return PaperRef(fields["id"], fields["title"], fields["abstract"], body_lines)


def load_corpus(corpus_dir: str | Path) -> list[PaperRef]:
    paths = sorted(Path(corpus_dir).glob("*.txt"))
    refs = [parse_corpus_file(p) for p in paths]
    seen = set()
    for ref in refs:
        if ref.id in seen:
            raise ConfigError(f"duplicate corpus id {ref.id!r}")
        seen.add(ref.id)
    return refs


_TERM_RE = re.compile(r"[a-z0-9]+")


def _terms(text: str) -> set[str]:
    return set(_TERM_RE.findall(text.lower()))


def overlap_score(query_text: str, ref: PaperRef) -> int:
    return len(_terms(query_text) & _terms(ref.title + " " + ref.abstract))


def rank_corpus(query: Query, corpus: list[PaperRef], k: int) -> list[PaperRef]:
    """Pure top-k ranking over the fixture corpus."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if not corpus:
        raise ConfigError("reference corpus is empty")
    scored = sorted(corpus, key=lambda r: (-overlap_score(query.text, r), r.id))
    return scored[:k]


_QUERY_LINE_RE = re.compile(r"^QUERY:\s*(.+?)\s*$", re.MULTILINE)


def parse_query_lines(text: str, origin: str, q_max: int) -> list[Query]:
    found = _QUERY_LINE_RE.findall(text)
    if not found:
        raise ParseError("no QUERY lines in model response")
    return [Query(q, origin) for q in found[:q_max]]


class Retriever:
    """Search client: fixture corpus or a live HTTP search endpoint."""

    def __init__(
        self,
        cfg: RetrievalConfig,
        journal: Journal,
        *,
        corpus: list[PaperRef] | None = None,
        http_get: Callable | None = None,
    ):
        self.cfg = cfg
        self._journal = journal
        if cfg.mode == "fixture":
            self._corpus = corpus if corpus is not None else load_corpus(cfg.corpus_dir)
        else:
            self._corpus = corpus or []
        if http_get is None and cfg.mode == "live":
            import requests

            http_get = requests.get
        self._http_get = http_get

    def formulate(self, gateway: Gateway, tag: str, context: str, origin: str,
                  q_max: int = 3) -> list[Query]:
        """Prompt for search queries; one re-prompt if the output is unusable."""
        if not context.strip():
            raise ValueError("query formulation context must be non-empty")
        prompt = (
            "Formulate search queries for references relevant to the text below.\n"
            f"Reply with 1 to {q_max} lines, each formatted exactly as 'QUERY: <terms>'.\n\n"
            + context
        )
        try:
            text = gateway.ask(tag, [("user", prompt)])
            return parse_query_lines(text, origin, q_max)
        except (ParseError, EmptyResponse):
            retry = gateway.ask(tag, [
                ("user", prompt),
                ("user", "Your previous reply had no QUERY lines. "
                         "Reply only with 'QUERY: <terms>' lines."),
            ])
            return parse_query_lines(retry, origin, q_max)

    def search(self, query: Query, k: int | None = None) -> list[PaperRef]:
        k = self.cfg.k if k is None else k
        if k < 1:
            raise ValueError("k must be >= 1")

        def compute():
            refs = self._execute(query, k)
            return {
                "query": query.text,
                "origin": query.origin,
                "k": k,
                "refs": [r.to_dict() for r in refs],
            }

        payload = self._journal.record("retrieval.search", compute)
        return [PaperRef.from_dict(d) for d in payload["refs"]]

    def _execute(self, query: Query, k: int) -> list[PaperRef]:
        if self.cfg.mode == "fixture":
            return rank_corpus(query, self._corpus, k)
        try:
            resp = self._http_get(self.cfg.endpoint,
                                  params={"query": query.text, "k": k}, timeout=60)
            data = resp.json()
        except Exception as exc:
            raise TransportError(f"reference search failed: {exc}") from exc
        refs = []
        for item in data[:k]:
            refs.append(PaperRef(
                id=str(item["id"]),
                title=item.get("title", ""),
                abstract=item.get("abstract", ""),
                body_lines=tuple(item.get("body_lines", [])),
            ))
        return refs
