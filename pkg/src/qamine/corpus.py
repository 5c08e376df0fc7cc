"""Domain corpus construction from a user topic.

Pipeline: expand the topic into hypothetical Wikipedia titles with the model,
search Wikipedia for real titles, filter them for relevance with the model,
fetch plain-text extracts for the accepted titles, and write a corpus_jsonl
file plus a manifest. Fetched extracts are cached on disk keyed by normalized
title, so a warm re-run touches no network for articles.
"""

from __future__ import annotations

import hashlib
import json
import logging
import re
import threading
import time
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Protocol

import httpx

from .docmodel import Document, normalize_text
from .errors import ParseError, QamineError, StageError, WikiError
from .jsonio import write_jsonl
from .prompting import PromptRegistry, default_registry
from .provider import ChatProvider, user_request

logger = logging.getLogger(__name__)

EXPAND_TEMPERATURE = 0.7
FILTER_TEMPERATURE = 0.0
DEFAULT_PER_QUERY_LIMIT = 5
DEFAULT_FILTER_BATCH = 20


@dataclass(frozen=True)
class TopicSpec:
    topic: str
    extra_keywords: tuple[str, ...] = ()

    def __post_init__(self):
        if not self.topic.strip():
            raise ValueError("topic must be non-empty")


@dataclass(frozen=True)
class CandidateTitle:
    title: str
    origin: str  # "hypothetical_expansion" | "user_keyword"
    search_rank: int


@dataclass
class CorpusManifest:
    topic: str
    accepted_titles: list[str] = field(default_factory=list)
    rejected_titles: list[str] = field(default_factory=list)
    fetched_doc_ids: list[str] = field(default_factory=list)
    started_at: str = ""
    finished_at: str = ""

    def to_dict(self) -> dict:
        return {
            "topic": self.topic,
            "accepted_titles": self.accepted_titles,
            "rejected_titles": self.rejected_titles,
            "fetched_doc_ids": self.fetched_doc_ids,
            "started_at": self.started_at,
            "finished_at": self.finished_at,
        }


def parse_title_array(text: str) -> list[str]:
    """Extract the first balanced [...] region of quoted, comma-separated strings.

    Accepts single or double quotes with backslash escapes, tolerates a
    trailing comma, and allows an empty array.
    """
    start = text.find("[")
    if start < 0:
        raise ParseError("no bracketed array in model output", raw=text)
    items: list[str] = []
    i = start + 1
    n = len(text)
    current: str | None = None
    item_done = False
    while i < n:
        ch = text[i]
        if current is None and not item_done:
            if ch in "\"'":
                quote = ch
                buf: list[str] = []
                i += 1
                closed = False
                while i < n:
                    c = text[i]
                    if c == "\\" and i + 1 < n:
                        buf.append(text[i + 1])
                        i += 2
                        continue
                    if c == quote:
                        closed = True
                        break
                    buf.append(c)
                    i += 1
                if not closed:
                    raise ParseError("unterminated quote in title array", raw=text)
                current = "".join(buf).strip()
                item_done = True
            elif ch == "]":
                return items
            elif ch.isspace() or ch == ",":
                pass
            else:
                raise ParseError(f"unquoted content in title array at offset {i}", raw=text)
        else:
            if ch == ",":
                if current is not None:
                    items.append(current)
                current = None
                item_done = False
            elif ch == "]":
                if current is not None:
                    items.append(current)
                return items
            elif not ch.isspace():
                raise ParseError(f"unexpected character {ch!r} after quoted title", raw=text)
        i += 1
    raise ParseError("unterminated title array", raw=text)


def _dedupe_preserving_first(titles: list[str]) -> list[str]:
    seen: set[str] = set()
    out = []
    for title in titles:
        key = title.strip().lower()
        if not key or key in seen:
            continue
        seen.add(key)
        out.append(title.strip())
    return out


def expand_topic(provider: ChatProvider, spec: TopicSpec, *, model_id: str,
                 registry: PromptRegistry | None = None) -> list[str]:
    """Hypothetical Wikipedia titles for the topic, plus user keywords, deduped."""
    reg = registry or default_registry()
    prompt = reg.render("corpus_titles", {"topic": spec.topic})
    resp = provider.complete(user_request(
        model_id, prompt, temperature=EXPAND_TEMPERATURE, request_tag="expand_topic"))
    titles = parse_title_array(resp.content)
    return _dedupe_preserving_first(titles + list(spec.extra_keywords))


@dataclass(frozen=True)
class WikiPage:
    title: str
    text: str = ""
    is_disambiguation: bool = False
    missing: bool = False


class WikiClient(Protocol):
    def search(self, query: str, limit: int) -> list[str]: ...

    def fetch(self, title: str) -> WikiPage: ...


class LiveWikiClient:
    """English Wikipedia action API client with a polite rate limit."""

    def __init__(self, base_url: str = "https://en.wikipedia.org/w/api.php",
                 rate_per_sec: float = 10.0, timeout_s: float = 30.0, max_attempts: int = 3):
        self.base_url = base_url
        self.min_interval = 1.0 / rate_per_sec if rate_per_sec > 0 else 0.0
        self.max_attempts = max_attempts
        self._client = httpx.Client(timeout=timeout_s, headers={"User-Agent": "qamine/0.1"})
        self._lock = threading.Lock()
        self._last_request = 0.0

    def _throttle(self) -> None:
        with self._lock:
            wait = self._last_request + self.min_interval - time.monotonic()
            if wait > 0:
                time.sleep(wait)
            self._last_request = time.monotonic()

    def _get(self, params: dict) -> dict:
        params = dict(params, format="json")
        last: Exception | None = None
        for _ in range(self.max_attempts):
            self._throttle()
            try:
                resp = self._client.get(self.base_url, params=params)
                if resp.status_code >= 500 or resp.status_code == 429:
                    last = WikiError(f"HTTP {resp.status_code}")
                    continue
                if resp.status_code >= 400:
                    raise WikiError(f"HTTP {resp.status_code}: {resp.text[:200]}")
                return resp.json()
            except httpx.HTTPError as exc:
                last = exc
        raise WikiError(f"wikipedia request failed after {self.max_attempts} attempts: {last}")

    def search(self, query: str, limit: int) -> list[str]:
        data = self._get({"action": "query", "list": "search", "srsearch": query, "srlimit": limit})
        try:
            return [hit["title"] for hit in data["query"]["search"]]
        except (KeyError, TypeError) as exc:
            raise WikiError(f"unexpected search payload: {exc}") from exc

    def fetch(self, title: str) -> WikiPage:
        data = self._get({
            "action": "query",
            "prop": "extracts|pageprops",
            "explaintext": 1,
            "redirects": 1,
            "titles": title,
            "ppprop": "disambiguation",
        })
        try:
            pages = data["query"]["pages"]
            page = next(iter(pages.values()))
        except (KeyError, StopIteration, TypeError, AttributeError) as exc:
            raise WikiError(f"unexpected fetch payload: {exc}") from exc
        if "missing" in page:
            return WikiPage(title=title, missing=True)
        return WikiPage(
            title=page.get("title", title),
            text=page.get("extract", ""),
            is_disambiguation="disambiguation" in page.get("pageprops", {}),
        )


class FixtureWikiClient:
    """In-memory client for tests and offline runs; counts every call.

    pages maps title -> {"text": ..., "disambiguation": bool} or
    {"redirect": "Target Title"}. Unknown titles are missing pages.
    """

    def __init__(self, search_results: dict[str, list[str]] | None = None,
                 pages: dict[str, dict] | None = None,
                 failing_queries: set[str] | None = None):
        self.search_results = search_results or {}
        self.pages = pages or {}
        self.failing_queries = failing_queries or set()
        self.search_calls = 0
        self.fetch_calls = 0

    def search(self, query: str, limit: int) -> list[str]:
        self.search_calls += 1
        if query in self.failing_queries:
            raise WikiError(f"scripted search failure for {query!r}")
        return list(self.search_results.get(query, []))[:limit]

    def fetch(self, title: str) -> WikiPage:
        self.fetch_calls += 1
        entry = self.pages.get(title)
        if entry is None:
            return WikiPage(title=title, missing=True)
        if "redirect" in entry:
            target = entry["redirect"]
            resolved = self.pages.get(target)
            if resolved is None:
                return WikiPage(title=target, missing=True)
            return WikiPage(title=target, text=resolved.get("text", ""),
                            is_disambiguation=resolved.get("disambiguation", False))
        return WikiPage(title=title, text=entry.get("text", ""),
                        is_disambiguation=entry.get("disambiguation", False))


def search_titles(wiki: WikiClient, queries: list[str],
                  per_query_limit: int = DEFAULT_PER_QUERY_LIMIT, *,
                  user_keywords: frozenset[str] = frozenset()) -> list[CandidateTitle]:
    """Top search results per query as CandidateTitles, deduped case-insensitively.

    A failing query is logged and skipped; only all queries failing is an
    error. user_keywords holds the lowercased queries that came from the user
    rather than from topic expansion, for origin bookkeeping.
    """
    by_key: dict[str, CandidateTitle] = {}
    failures = 0
    for query in queries:
        try:
            results = wiki.search(query, per_query_limit)
        except WikiError as exc:
            logger.warning("search failed for query %r: %s", query, exc)
            failures += 1
            continue
        origin = "user_keyword" if query.strip().lower() in user_keywords else "hypothetical_expansion"
        for rank, title in enumerate(results):
            key = title.strip().lower()
            existing = by_key.get(key)
            if existing is None:
                by_key[key] = CandidateTitle(title.strip(), origin, rank)
            elif rank < existing.search_rank:
                by_key[key] = CandidateTitle(existing.title, existing.origin, rank)
    if queries and failures == len(queries):
        raise QamineError("all search queries failed")
    return list(by_key.values())


def filter_relevant(provider: ChatProvider, topic: str, titles: list[str],
                    batch_size: int = DEFAULT_FILTER_BATCH, *, model_id: str,
                    registry: PromptRegistry | None = None) -> tuple[list[str], list[str]]:
    """Split titles into (accepted, rejected) using the relevance filter prompt.

    A returned title counts only if it exactly matches (case-insensitively) a
    title in its batch; hallucinated titles are discarded with a warning. A
    batch whose reply cannot be parsed is retried once, then rejected.
    """
    if not titles:
        raise QamineError("filter_relevant: no titles to filter")
    reg = registry or default_registry()
    accepted: list[str] = []
    rejected: list[str] = []
    for b, start in enumerate(range(0, len(titles), batch_size)):
        batch = titles[start : start + batch_size]
        prompt = reg.render("corpus_filter", {
            "topic": topic,
            "titles": "\n".join(f"- {t}" for t in batch),
        })
        related: list[str] | None = None
        for attempt in ("", ":retry"):
            resp = provider.complete(user_request(
                model_id, prompt, temperature=FILTER_TEMPERATURE,
                request_tag=f"filter:{b}{attempt}"))
            try:
                related = parse_title_array(resp.content)
                break
            except ParseError as exc:
                logger.warning("filter batch %d reply unparseable%s: %s", b, attempt, exc)
        if related is None:
            logger.warning("filter batch %d rejected after retry: unparseable reply", b)
            rejected.extend(batch)
            continue
        batch_by_key = {t.strip().lower(): t for t in batch}
        chosen: set[str] = set()
        for title in related:
            match = batch_by_key.get(title.strip().lower())
            if match is None:
                logger.warning("filter returned title not in batch, discarding: %r", title)
            else:
                chosen.add(match)
        for title in batch:
            (accepted if title in chosen else rejected).append(title)
    return accepted, rejected


def _cache_key(title: str) -> str:
    normalized = re.sub(r"[_\s]+", " ", title).strip().lower()
    return hashlib.sha1(normalized.encode("utf-8")).hexdigest()


def _cache_path(cache_dir: Path, title: str) -> Path:
    return cache_dir / "wiki" / f"{_cache_key(title)}.txt"


def _cache_write(path: Path, page: WikiPage) -> None:
    status = "missing" if page.missing else ("disambiguation" if page.is_disambiguation else "article")
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(f"{page.title}\n{status}\n\n{page.text}", encoding="utf-8", newline="\n")


def _cache_read(path: Path) -> WikiPage | None:
    if not path.exists():
        return None
    raw = path.read_text(encoding="utf-8")
    head, _, text = raw.partition("\n\n")
    lines = head.split("\n")
    if len(lines) < 2:
        return None
    title, status = lines[0], lines[1]
    return WikiPage(title=title, text=text,
                    is_disambiguation=status == "disambiguation",
                    missing=status == "missing")


def fetch_articles(wiki: WikiClient, titles: list[str], *, cache_dir: str | Path,
                   topic: str | None = None) -> list[Document]:
    """Fetch plain-text extracts for accepted titles, resolving redirects,
    skipping missing/disambiguation pages, and caching results on disk."""
    cache_dir = Path(cache_dir)
    docs: list[Document] = []
    seen_ids: set[str] = set()
    for title in titles:
        path = _cache_path(cache_dir, title)
        page = _cache_read(path)
        if page is None:
            try:
                page = wiki.fetch(title)
            except WikiError as exc:
                logger.warning("fetch failed for %r, skipping: %s", title, exc)
                continue
            _cache_write(path, page)
        if page.missing:
            logger.warning("page %r missing, skipping", title)
            continue
        if page.is_disambiguation:
            logger.warning("page %r skipped: disambiguation", title)
            continue
        if page.title in seen_ids:
            continue
        text = normalize_text(page.text)
        if not text:
            logger.warning("page %r has empty extract, skipping", title)
            continue
        seen_ids.add(page.title)
        docs.append(Document(doc_id=page.title, title=page.title, text=text,
                             source="wikipedia", topic=topic))
    if not docs:
        raise QamineError("no relevant articles could be fetched")
    return docs


def _utc_now() -> str:
    return datetime.now(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


def build_corpus(provider: ChatProvider, wiki: WikiClient, spec: TopicSpec, *,
                 out_dir: str | Path, cache_dir: str | Path | None = None, model_id: str,
                 per_query_limit: int = DEFAULT_PER_QUERY_LIMIT,
                 batch_size: int = DEFAULT_FILTER_BATCH,
                 registry: PromptRegistry | None = None,
                 clock=_utc_now) -> tuple[Path, CorpusManifest]:
    """Run the full corpus pipeline; returns (corpus_jsonl path, manifest)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cache_dir = Path(cache_dir) if cache_dir is not None else out_dir / "cache"
    manifest = CorpusManifest(topic=spec.topic, started_at=clock())

    def stage(name, fn, *args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except QamineError as exc:
            raise StageError(name, exc) from exc

    queries = stage("expand", expand_topic, provider, spec, model_id=model_id, registry=registry)
    keywords = frozenset(k.strip().lower() for k in spec.extra_keywords)
    candidates = stage("search", search_titles, wiki, queries, per_query_limit,
                       user_keywords=keywords)
    titles = [c.title for c in candidates]
    if not titles:
        raise StageError("search", QamineError("no titles found for topic"))
    accepted, rejected = stage("filter", filter_relevant, provider, spec.topic, titles,
                               batch_size, model_id=model_id, registry=registry)
    manifest.accepted_titles = accepted
    manifest.rejected_titles = rejected
    if not accepted:
        raise StageError("filter", QamineError("no relevant articles"))
    docs = stage("fetch", fetch_articles, wiki, accepted, cache_dir=cache_dir, topic=spec.topic)
    manifest.fetched_doc_ids = [d.doc_id for d in docs]

    corpus_path = out_dir / "corpus.jsonl"
    write_jsonl(corpus_path, (
        {"id": d.doc_id, "title": d.title, "text": d.text, "source": d.source, "topic": d.topic}
        for d in docs
    ))
    manifest.finished_at = clock()
    (out_dir / "manifest.json").write_text(
        json.dumps(manifest.to_dict(), ensure_ascii=False, indent=2) + "\n", encoding="utf-8")
    return corpus_path, manifest
