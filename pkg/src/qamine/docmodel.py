"""Documents, sentence segmentation, and sentence-aligned passage chunking.

Every downstream stage addresses text through this model: a Document holds
normalized plain text, SentenceSpans are offset ranges into that text, and
Passages are sentence-aligned chunks that fit a word budget.

Offsets are Python string indices (code points). Spans cover the sentences;
the gaps between consecutive spans contain only whitespace, so the original
text is always recoverable from spans plus gaps.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ChunkingError, FormatError
from .jsonio import read_jsonl

SOURCES = ("wikipedia", "beir", "user_file")

# Words per passage; approximates a 2048-token model context minus prompt
# overhead without depending on any tokenizer.
DEFAULT_WORD_BUDGET = 900

_TERMINALS = ".!?"
_CLOSING_QUOTES = "\"')]»”’"
_OPENING_QUOTES = "\"'([«“‘"

# Splits after these are suppressed even when followed by a capital/digit.
_ABBREVIATIONS = frozenset(
    {"dr.", "mr.", "mrs.", "ms.", "st.", "etc.", "e.g.", "i.e.", "vs.", "fig.", "eq.", "no."}
)

_BLANK_RUN_RE = re.compile(r"\n{4,}")


def normalize_text(text: str) -> str:
    """Normalize whitespace: CRLF->LF, strip trailing spaces per line, cap blank runs at two lines, trim the ends."""
    t = text.replace("\r\n", "\n").replace("\r", "\n")
    t = "\n".join(line.rstrip() for line in t.split("\n"))
    t = _BLANK_RUN_RE.sub("\n\n\n", t)
    return t.strip()


@dataclass(frozen=True)
class Document:
    doc_id: str
    title: str
    text: str
    source: str = "user_file"
    topic: str | None = None

    def __post_init__(self):
        if not self.doc_id:
            raise ValueError("doc_id must be non-empty")
        if not self.text.strip():
            raise ValueError(f"document {self.doc_id!r} has empty text")
        if self.source not in SOURCES:
            raise ValueError(f"document {self.doc_id!r} has unknown source {self.source!r}")


@dataclass(frozen=True)
class SentenceSpan:
    index: int
    start: int
    end: int

    def __post_init__(self):
        if self.index < 0 or self.start < 0 or self.start >= self.end:
            raise ValueError(f"invalid span index={self.index} [{self.start}, {self.end})")


@dataclass(frozen=True)
class Passage:
    doc_id: str
    chunk_index: int
    text: str
    sentence_spans: tuple[SentenceSpan, ...] = field(default_factory=tuple)

    def sentence_text(self, index: int) -> str:
        span = self.sentence_spans[index]
        return self.text[span.start : span.end]


def _is_abbreviation(text: str, dot: int) -> bool:
    j = dot - 1
    while j >= 0 and (text[j].isalpha() or text[j] == "."):
        j -= 1
    token = text[j + 1 : dot + 1].lower()
    return token in _ABBREVIATIONS


def _is_initial(text: str, dot: int) -> bool:
    # A single letter directly before the period: personal initials, "p.m.", "U.S."
    j = dot - 1
    while j >= 0 and text[j].isalpha():
        j -= 1
    run = dot - 1 - j
    return run == 1


def segment_sentences(text: str) -> list[SentenceSpan]:
    """Split text into sentence spans.

    Rules: a run of terminal punctuation (. ! ?), plus any closing quotes or
    brackets, ends a sentence when followed by whitespace and an uppercase
    letter, digit, or opening quote. A lone period does not split after a
    known abbreviation, after a single-letter token (initials), or between
    digits (decimals). A blank line always ends the current sentence, even
    without terminal punctuation. Deterministic; empty input gives [].
    """
    spans: list[SentenceSpan] = []
    n = len(text)
    i = 0
    start = -1
    last_end = 0
    index = 0
    while i < n:
        ch = text[i]
        if start < 0:
            if not ch.isspace():
                start = i
                last_end = i + 1
            i += 1
            continue
        if not ch.isspace():
            last_end = i + 1
        if ch in _TERMINALS:
            j = i
            while j + 1 < n and text[j + 1] in _TERMINALS:
                j += 1
            k = j
            while k + 1 < n and text[k + 1] in _CLOSING_QUOTES:
                k += 1
            m = k + 1
            saw_ws = False
            while m < n and text[m].isspace():
                saw_ws = True
                m += 1
            boundary = False
            if m < n and saw_ws:
                nxt = text[m]
                if nxt.isupper() or nxt.isdigit() or nxt in _OPENING_QUOTES:
                    boundary = True
                    if j == i and ch == ".":
                        if _is_abbreviation(text, i) or _is_initial(text, i):
                            boundary = False
                        elif i > 0 and text[i - 1].isdigit() and nxt.isdigit():
                            boundary = False
            if boundary:
                spans.append(SentenceSpan(index, start, k + 1))
                index += 1
                start = -1
                i = m
            else:
                last_end = k + 1
                i = k + 1
            continue
        if ch == "\n":
            m = i
            newlines = 0
            while m < n and text[m].isspace():
                if text[m] == "\n":
                    newlines += 1
                m += 1
            if newlines >= 2:
                spans.append(SentenceSpan(index, start, last_end))
                index += 1
                start = -1
            i = m
            continue
        i += 1
    if start >= 0:
        spans.append(SentenceSpan(index, start, last_end))
    return spans


def _require_str(obj: dict, key: str, path: str, line: int) -> str:
    value = obj.get(key)
    if not isinstance(value, str) or not value.strip():
        raise FormatError(f"missing or empty field {key!r}", path=path, line=line)
    return value


def load_documents(path: str | Path, fmt: str = "corpus_jsonl") -> list[Document]:
    """Load a corpus file in corpus_jsonl or beir_jsonl format, in file order."""
    if fmt not in ("corpus_jsonl", "beir_jsonl"):
        raise ValueError(f"unknown corpus format {fmt!r}")
    p = str(path)
    docs: list[Document] = []
    seen: set[str] = set()
    for line_no, obj in read_jsonl(path):
        if fmt == "beir_jsonl":
            doc_id = _require_str(obj, "_id", p, line_no)
            title = obj.get("title") or ""
            text = _require_str(obj, "text", p, line_no)
            source = "beir"
            topic = None
        else:
            doc_id = _require_str(obj, "id", p, line_no)
            title = obj.get("title") or ""
            text = _require_str(obj, "text", p, line_no)
            source = obj.get("source") or "user_file"
            if source not in SOURCES:
                raise FormatError(f"invalid field 'source': {source!r}", path=p, line=line_no)
            topic = obj.get("topic")
        if doc_id in seen:
            raise FormatError(f"duplicate doc_id {doc_id!r}", path=p, line=line_no)
        seen.add(doc_id)
        text = normalize_text(text)
        if not text:
            raise FormatError("field 'text' is empty after normalization", path=p, line=line_no)
        docs.append(Document(doc_id=doc_id, title=title, text=text, source=source, topic=topic))
    return docs


def word_count(text: str) -> int:
    return len(text.split())


def chunk_document(doc: Document, budget: int = DEFAULT_WORD_BUDGET) -> list[Passage]:
    """Chunk a document into passages of at most `budget` words, splitting only at sentence boundaries."""
    spans = segment_sentences(doc.text)
    if not spans:
        return []
    counts = []
    for span in spans:
        w = word_count(doc.text[span.start : span.end])
        if w > budget:
            raise ChunkingError(
                f"sentence {span.index} of document {doc.doc_id!r} has {w} words, over the {budget}-word budget"
            )
        counts.append(w)

    passages: list[Passage] = []
    group: list[SentenceSpan] = []
    group_words = 0

    def close_group():
        nonlocal group, group_words
        base = group[0].start
        text = doc.text[base : group[-1].end]
        local = tuple(
            SentenceSpan(i, s.start - base, s.end - base) for i, s in enumerate(group)
        )
        passages.append(Passage(doc.doc_id, len(passages), text, local))
        group = []
        group_words = 0

    for span, w in zip(spans, counts):
        if group and group_words + w > budget:
            close_group()
        group.append(span)
        group_words += w
    if group:
        close_group()
    return passages


def chunk_corpus(docs: list[Document], budget: int = DEFAULT_WORD_BUDGET) -> list[Passage]:
    """Chunk every document, preserving document order."""
    out: list[Passage] = []
    for doc in docs:
        out.extend(chunk_document(doc, budget))
    return out
