"""Sentence-level QA knowledge mining.

Three related jobs live here:

* seed generation: the three-step strong-model procedure (significance
  analysis, question proposal, answer generation) over sampled passages,
  skipping the question/answer steps whenever the analysis says "No";
* fine-tune emission: turning seed instances into behavior-cloning examples
  under the simplified miner prompt;
* corpus mining: iterating every sentence of every passage with the
  simplified prompt (chain-of-thought mode) or the direct QA prompt
  (baseline mode), with record-and-continue parse handling, self-containment
  linting, and exact-duplicate removal.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Iterable

from .dataset import TrainingExample, Turn
from .docmodel import Document, Passage, chunk_corpus
from .errors import ParseError, ProviderError, QamineError, StageError
from .prompting import PROMPT_VERSION, PromptRegistry, default_registry
from .provider import ChatProvider, user_request
from .rng import SplitMix64

GENERATION_TEMPERATURE = 0.7
MODES = ("cot", "baseline")

EPOCH_TIMESTAMP = "1970-01-01T00:00:00Z"  # used for deterministic (mock) runs

_QUESTION_RE = re.compile(r"^Question:", re.M)
_ANSWER_RE = re.compile(r"^Answer:", re.M)
_SKIP_RE = re.compile(r"^Skip:", re.M)

_LEAD_QUOTES = "\"'“”‘’"
_LEAD_SEPARATORS = " \t.,:;!?-" + _LEAD_QUOTES

# Context-dependent phrase families; "the report" subsumes the in/from forms.
LINT_PHRASES = (
    "from the document",
    "the report",
    "in this context",
    "the passage",
    "the text above",
    "as mentioned above",
)


@dataclass(frozen=True)
class Decision:
    kind: str  # "important" | "skip"
    text: str  # analysis when important, skip reason otherwise

    def __post_init__(self):
        if self.kind not in ("important", "skip"):
            raise ValueError(f"invalid decision kind {self.kind!r}")
        if self.kind == "skip" and not self.text:
            raise ValueError("skip decision needs a reason")
        if self.kind == "important" and re.match(r"no\b", self.text, re.I):
            raise ValueError("important decision text must not begin with 'No'")


@dataclass(frozen=True)
class SeedInstance:
    doc_id: str
    chunk_index: int
    sentence_index: int
    sentence_text: str
    passage_text: str
    decision: Decision
    question: str | None
    answer: str | None
    model_id: str
    prompt_version: int
    created_at: str
    raw_analysis: str
    raw_question: str = ""
    raw_answer: str = ""

    def __post_init__(self):
        important = self.decision.kind == "important"
        has_qa = bool(self.question) and bool(self.answer)
        if important != has_qa:
            raise ValueError(
                f"seed {self.doc_id}:{self.chunk_index}:{self.sentence_index}: "
                "question/answer present iff the decision is 'important'"
            )


@dataclass(frozen=True)
class MinedRecord:
    doc_id: str
    chunk_index: int
    sentence_index: int
    sentence_text: str
    mode: str
    decision: Decision
    question: str | None
    answer: str | None
    raw_output: str
    lint_violations: tuple[str, ...]
    model_id: str
    prompt_version: int

    @property
    def important(self) -> bool:
        return self.decision.kind == "important"


def _strip_lead(text: str) -> str:
    return text.lstrip(_LEAD_SEPARATORS)


def parse_decision(text: str) -> Decision:
    """Parse a significance analysis into an important/skip decision.

    Case-insensitive "Yes"/"No" prefix after stripping whitespace and quotes;
    the remainder becomes the analysis (or the skip reason).
    """
    s = text.strip().lstrip(_LEAD_QUOTES + " \t")
    low = s.lower()
    if low.startswith("yes") and (len(s) == 3 or not s[3].isalnum()):
        return Decision("important", _strip_lead(s[3:]).strip())
    if low.startswith("no") and (len(s) == 2 or not s[2].isalnum()):
        reason = _strip_lead(s[2:]).strip()
        return Decision("skip", reason or "unspecified")
    raise ParseError(f"analysis has neither Yes nor No prefix: {text[:80]!r}", raw=text)


def parse_miner_output(text: str, mode: str) -> tuple[Decision, str | None, str | None]:
    """Parse miner model output into (decision, question, answer).

    cot mode: either a "No,"-prefixed skip, or analysis text followed by
    line-anchored "Question:" and "Answer:" markers. baseline mode: either a
    "Skip:" reason or a "Question:"/"Answer:" pair. Markers are
    case-sensitive and anchored at line start; the answer runs to the end of
    the text.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    s = text.strip()
    if mode == "cot":
        low = s.lstrip(_LEAD_QUOTES + " \t").lower()
        if low.startswith("no") and (len(low) == 2 or not low[2].isalnum()):
            reason = _strip_lead(s.lstrip(_LEAD_QUOTES + " \t")[2:]).strip()
            return Decision("skip", reason or "unspecified"), None, None
        mq = _QUESTION_RE.search(s)
        if not mq:
            raise ParseError("no 'Question:' marker in chain-of-thought output", raw=text)
        analysis = s[: mq.start()].strip()
        if not analysis:
            raise ParseError("empty analysis before 'Question:'", raw=text)
        rest = s[mq.end():]
        ma = _ANSWER_RE.search(rest)
        if not ma:
            raise ParseError("'Question:' without 'Answer:' marker", raw=text)
        question = rest[: ma.start()].strip()
        answer = rest[ma.end():].strip()
        if not question or not answer:
            raise ParseError("empty question or answer", raw=text)
        return Decision("important", analysis), question, answer

    ms = _SKIP_RE.search(s)
    mq = _QUESTION_RE.search(s)
    if ms and (not mq or ms.start() < mq.start()):
        reason = s[ms.end():].strip()
        return Decision("skip", reason or "unspecified"), None, None
    if mq:
        rest = s[mq.end():]
        ma = _ANSWER_RE.search(rest)
        if not ma:
            raise ParseError("'Question:' without 'Answer:' marker", raw=text)
        question = rest[: ma.start()].strip()
        answer = rest[ma.end():].strip()
        if not question or not answer:
            raise ParseError("empty question or answer", raw=text)
        return Decision("important", ""), question, answer
    raise ParseError("no 'Skip:'/'Question:'/'Answer:' markers in baseline output", raw=text)


def lint_self_contained(question: str, answer: str | None = None) -> list[str]:
    """Flag context-dependent phrases; one "field:phrase" entry per occurrence."""
    violations: list[str] = []
    for field_name, value in (("question", question), ("answer", answer or "")):
        low = value.lower()
        for phrase in LINT_PHRASES:
            start = 0
            while True:
                pos = low.find(phrase, start)
                if pos < 0:
                    break
                violations.append(f"{field_name}:{phrase}")
                start = pos + len(phrase)
    return violations


def generate_seed_instance(
    provider: ChatProvider,
    passage: Passage,
    sentence_index: int,
    *,
    model_id: str,
    registry: PromptRegistry | None = None,
    created_at: str = EPOCH_TIMESTAMP,
) -> SeedInstance:
    """Run the three-step seed procedure for one highlighted sentence.

    A "No" analysis returns immediately after a single model call; otherwise
    the question and answer steps follow, each seeing the previous step's
    output.
    """
    reg = registry or default_registry()
    sentence = passage.sentence_text(sentence_index)
    tag = f"{passage.doc_id}:{passage.chunk_index}:{sentence_index}"

    def call(step: str, template: str, bindings: dict[str, str]) -> str:
        prompt = reg.render(template, bindings)
        try:
            resp = provider.complete(user_request(
                model_id, prompt,
                temperature=GENERATION_TEMPERATURE,
                request_tag=f"{tag}:{step}",
            ))
        except ProviderError as exc:
            raise StageError(f"seed:{step}:{tag}", exc) from exc
        return resp.content

    raw_analysis = call("analysis", "seed_analysis",
                        {"document": passage.text, "sentence": sentence})
    decision = parse_decision(raw_analysis)

    base = dict(
        doc_id=passage.doc_id,
        chunk_index=passage.chunk_index,
        sentence_index=sentence_index,
        sentence_text=sentence,
        passage_text=passage.text,
        decision=decision,
        model_id=model_id,
        prompt_version=PROMPT_VERSION,
        created_at=created_at,
        raw_analysis=raw_analysis,
    )
    if decision.kind == "skip":
        return SeedInstance(question=None, answer=None, **base)

    raw_question = call("question", "seed_question",
                        {"document": passage.text, "sentence": sentence, "analysis": decision.text})
    question = raw_question.strip()
    if not question:
        raise ParseError(f"empty question for {tag}", raw=raw_question)
    raw_answer = call("answer", "seed_answer",
                      {"document": passage.text, "question": question})
    answer = raw_answer.strip()
    if not answer:
        raise ParseError(f"empty answer for {tag}", raw=raw_answer)
    return SeedInstance(question=question, answer=answer,
                        raw_question=raw_question, raw_answer=raw_answer, **base)


@dataclass(frozen=True)
class SeedSample:
    source: str
    passage: Passage
    sentence_index: int


def sample_seed_passages(
    wiki_docs: list[Document],
    beir_corpora: dict[str, list[Document]],
    *,
    n_wiki: int = 300,
    n_per_beir: int = 50,
    seed: int = 0,
    budget: int = 900,
) -> list[SeedSample]:
    """Draw the seed recipe: n_wiki passages from the Wikipedia-format corpus
    plus n_per_beir from each BEIR-format corpus, one focal sentence each."""
    rng = SplitMix64(seed)
    samples: list[SeedSample] = []

    def draw(docs: list[Document], n: int, source: str) -> None:
        passages = chunk_corpus(docs, budget)
        if len(passages) < n:
            raise QamineError(f"source {source!r}: requested {n} passages, corpus has {len(passages)}")
        for idx in rng.sample_indices(len(passages), n):
            passage = passages[idx]
            sentence_index = rng.next_below(len(passage.sentence_spans))
            samples.append(SeedSample(source, passage, sentence_index))

    draw(wiki_docs, n_wiki, "wikipedia")
    for name, docs in beir_corpora.items():
        draw(docs, n_per_beir, name)
    return samples


def generate_seeds(
    provider: ChatProvider,
    samples: list[SeedSample],
    *,
    model_id: str,
    registry: PromptRegistry | None = None,
    created_at: str = EPOCH_TIMESTAMP,
) -> list[SeedInstance]:
    return [
        generate_seed_instance(provider, s.passage, s.sentence_index,
                               model_id=model_id, registry=registry, created_at=created_at)
        for s in samples
    ]


def emit_finetune_examples(
    seeds: Iterable[SeedInstance],
    *,
    strict: bool = False,
    registry: PromptRegistry | None = None,
) -> list[TrainingExample]:
    """Behavior-cloning examples: simplified prompt in, analysis/QA or skip out.

    With strict=True, important seeds whose question or answer trips the
    self-containment lint are dropped instead of emitted.
    """
    reg = registry or default_registry()
    examples: list[TrainingExample] = []
    for seed in seeds:
        prompt = reg.render("miner_simplified",
                            {"document": seed.passage_text, "sentence": seed.sentence_text})
        if seed.decision.kind == "important":
            if strict and lint_self_contained(seed.question or "", seed.answer):
                continue
            target = f"{seed.decision.text}\n\nQuestion: {seed.question}\nAnswer: {seed.answer}"
        else:
            target = f"No, {seed.decision.text}"
        examples.append(TrainingExample(
            source_type="miner_sft",
            turns=(Turn("user", prompt), Turn("assistant", target)),
            template_name="conv_llminer",
            origin_ref=f"{seed.doc_id}:{seed.chunk_index}:{seed.sentence_index}",
        ))
    return examples


def mine_corpus(
    provider: ChatProvider,
    passages: list[Passage],
    mode: str = "cot",
    *,
    model_id: str,
    registry: PromptRegistry | None = None,
) -> list[MinedRecord]:
    """Mine every sentence of every passage; exactly one record per sentence.

    Provider calls fan out up to the provider's in-flight bound; records come
    back in (doc_id, chunk_index, sentence_index) order. Unparseable or
    failed responses become skip records (reason prefixed "parse_error:" or
    "provider_error:") rather than aborting the run.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    reg = registry or default_registry()
    template = "miner_simplified" if mode == "cot" else "baseline_miner_simplified"

    work = []
    for passage in passages:
        for span in passage.sentence_spans:
            work.append((passage, span.index))
    work.sort(key=lambda item: (item[0].doc_id, item[0].chunk_index, item[1]))

    requests = []
    for passage, sentence_index in work:
        prompt = reg.render(template, {
            "document": passage.text,
            "sentence": passage.sentence_text(sentence_index),
        })
        requests.append(user_request(
            model_id, prompt,
            temperature=GENERATION_TEMPERATURE,
            request_tag=f"{passage.doc_id}:{passage.chunk_index}:{sentence_index}",
        ))

    responses = provider.complete_batch(requests)

    records: list[MinedRecord] = []
    for (passage, sentence_index), resp in zip(work, responses):
        question = answer = None
        lint: tuple[str, ...] = ()
        if not resp.ok:
            decision = Decision("skip", f"provider_error: {resp.error}")
            raw = resp.error or ""
        else:
            raw = resp.content
            try:
                decision, question, answer = parse_miner_output(resp.content, mode)
            except ParseError as exc:
                decision = Decision("skip", f"parse_error: {exc}")
            else:
                if question is not None:
                    lint = tuple(lint_self_contained(question, answer))
        records.append(MinedRecord(
            doc_id=passage.doc_id,
            chunk_index=passage.chunk_index,
            sentence_index=sentence_index,
            sentence_text=passage.sentence_text(sentence_index),
            mode=mode,
            decision=decision,
            question=question,
            answer=answer,
            raw_output=raw,
            lint_violations=lint,
            model_id=model_id,
            prompt_version=PROMPT_VERSION,
        ))
    return records


def _normalize_qa(text: str) -> str:
    collapsed = re.sub(r"\s+", " ", text.strip().lower())
    return collapsed.rstrip(".!?").strip()


def dedupe_records(records: list[MinedRecord]) -> list[MinedRecord]:
    """Drop exact-duplicate (normalized question, normalized answer) pairs, keeping the first."""
    seen: set[tuple[str, str]] = set()
    out: list[MinedRecord] = []
    for record in records:
        if record.important and record.question and record.answer:
            key = (_normalize_qa(record.question), _normalize_qa(record.answer))
            if key in seen:
                continue
            seen.add(key)
        out.append(record)
    return out


# --- JSONL row mapping -----------------------------------------------------

def mined_record_to_row(record: MinedRecord) -> dict:
    return {
        "doc_id": record.doc_id,
        "chunk_index": record.chunk_index,
        "sentence_index": record.sentence_index,
        "sentence": record.sentence_text,
        "mode": record.mode,
        "decision": record.decision.kind,
        "analysis": record.decision.text if record.important else "",
        "question": record.question,
        "answer": record.answer,
        "skip_reason": "" if record.important else record.decision.text,
        "lint": list(record.lint_violations),
        "raw_output": record.raw_output,
        "model_id": record.model_id,
        "prompt_version": record.prompt_version,
    }


def row_to_mined_record(row: dict) -> MinedRecord:
    important = row["decision"] == "important"
    decision = Decision("important", row.get("analysis") or "") if important else \
        Decision("skip", row.get("skip_reason") or "unspecified")
    return MinedRecord(
        doc_id=row["doc_id"],
        chunk_index=row["chunk_index"],
        sentence_index=row["sentence_index"],
        sentence_text=row["sentence"],
        mode=row["mode"],
        decision=decision,
        question=row.get("question"),
        answer=row.get("answer"),
        raw_output=row.get("raw_output", ""),
        lint_violations=tuple(row.get("lint") or ()),
        model_id=row.get("model_id", ""),
        prompt_version=row.get("prompt_version", PROMPT_VERSION),
    )


def seed_to_row(seed: SeedInstance) -> dict:
    important = seed.decision.kind == "important"
    return {
        "doc_id": seed.doc_id,
        "chunk_index": seed.chunk_index,
        "sentence_index": seed.sentence_index,
        "sentence": seed.sentence_text,
        "passage_text": seed.passage_text,
        "decision": seed.decision.kind,
        "analysis": seed.decision.text if important else "",
        "question": seed.question,
        "answer": seed.answer,
        "skip_reason": "" if important else seed.decision.text,
        "raw_analysis": seed.raw_analysis,
        "raw_question": seed.raw_question,
        "raw_answer": seed.raw_answer,
        "model_id": seed.model_id,
        "prompt_version": seed.prompt_version,
        "created_at": seed.created_at,
    }


def row_to_seed(row: dict) -> SeedInstance:
    important = row["decision"] == "important"
    decision = Decision("important", row.get("analysis") or "") if important else \
        Decision("skip", row.get("skip_reason") or "unspecified")
    return SeedInstance(
        doc_id=row["doc_id"],
        chunk_index=row["chunk_index"],
        sentence_index=row["sentence_index"],
        sentence_text=row["sentence"],
        passage_text=row["passage_text"],
        decision=decision,
        question=row.get("question"),
        answer=row.get("answer"),
        model_id=row.get("model_id", ""),
        prompt_version=row.get("prompt_version", PROMPT_VERSION),
        created_at=row.get("created_at", EPOCH_TIMESTAMP),
        raw_analysis=row.get("raw_analysis", ""),
        raw_question=row.get("raw_question", ""),
        raw_answer=row.get("raw_answer", ""),
    )
