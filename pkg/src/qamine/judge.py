"""Judge-based evaluation of chatbot responses against reference answers.

Each case renders the judge prompt with the question, the human reference
answer, and the model response under test; the judge replies with an
explanation and a 1-5 rating. Ratings aggregate to a mean and a normalized
score (mean x 20, so a perfect 5.0 maps to 100). Verdict parsing is tolerant
of the output shapes strong models actually produce (markdown decorations,
"4 - Mostly Correct" suffixes, restated ratings); the last rating line wins.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass
from pathlib import Path

from .errors import FormatError, ParseError, QamineError
from .jsonio import read_jsonl
from .prompting import PromptRegistry, default_registry
from .provider import ChatProvider, user_request

logger = logging.getLogger(__name__)

JUDGE_TEMPERATURE = 0.0

_RATING_LINE_RE = re.compile(r"^[\s>*_#]*rating[\s*_]*:\s*(.*)$", re.I | re.M)
_EXPLANATION_RE = re.compile(r"[\s>*_#]*explanation[\s*_]*:\s*", re.I)
_INT_RE = re.compile(r"\d+")


@dataclass(frozen=True)
class TestCase:
    __test__ = False  # keep pytest from collecting this dataclass

    case_id: str
    topic: str
    question: str
    reference_answer: str

    def __post_init__(self):
        if not self.question or not self.reference_answer:
            raise ValueError(f"case {self.case_id!r}: question and reference_answer must be non-empty")


@dataclass(frozen=True)
class JudgeVerdict:
    case_id: str
    explanation: str
    rating: int
    raw_output: str

    def __post_init__(self):
        if self.rating not in (1, 2, 3, 4, 5):
            raise ValueError(f"rating must be in 1..5, got {self.rating}")


@dataclass(frozen=True)
class EvalReport:
    topic: str
    n_cases: int
    mean_rating: float
    normalized_score: float
    histogram: dict[int, int]
    failures: tuple[str, ...]

    def to_dict(self) -> dict:
        return {
            "topic": self.topic,
            "n_cases": self.n_cases,
            "mean_rating": self.mean_rating,
            "normalized_score": self.normalized_score,
            "histogram": {str(k): self.histogram.get(k, 0) for k in range(1, 6)},
            "failures": list(self.failures),
        }


def load_testset(path: str | Path) -> list[TestCase]:
    """Load testset.jsonl (case_id, topic, question, reference_answer), in order."""
    cases: list[TestCase] = []
    seen: set[str] = set()
    for line_no, row in read_jsonl(path):
        for field_name in ("case_id", "topic", "question", "reference_answer"):
            if not row.get(field_name):
                raise FormatError(f"missing field {field_name!r}", path=str(path), line=line_no)
        case_id = str(row["case_id"])
        if case_id in seen:
            raise FormatError(f"duplicate case_id {case_id!r}", path=str(path), line=line_no)
        seen.add(case_id)
        cases.append(TestCase(case_id, row["topic"], row["question"], row["reference_answer"]))
    return cases


def parse_verdict(case_id: str, raw: str) -> JudgeVerdict:
    """Parse a judge reply: the last "Rating:" line (leading integer, 1-5)
    plus the "Explanation:" block before it."""
    matches = list(_RATING_LINE_RE.finditer(raw))
    if not matches:
        raise ParseError(f"case {case_id}: no rating line in judge output", raw=raw)
    last = matches[-1]
    digits = _INT_RE.search(last.group(1))
    if not digits:
        raise ParseError(f"case {case_id}: rating line has no integer", raw=raw)
    rating = int(digits.group(0))
    if rating not in (1, 2, 3, 4, 5):
        raise ParseError(f"case {case_id}: rating {rating} out of range 1..5", raw=raw)

    head = raw[: last.start()]
    marker = _EXPLANATION_RE.search(head)
    explanation = head[marker.end():] if marker else head
    return JudgeVerdict(case_id=case_id, explanation=explanation.strip(),
                        rating=rating, raw_output=raw)


def judge_one(provider: ChatProvider, case: TestCase, response: str, *,
              model_id: str, registry: PromptRegistry | None = None) -> JudgeVerdict:
    if not response:
        raise QamineError(f"case {case.case_id}: empty response under evaluation")
    reg = registry or default_registry()
    prompt = reg.render("judge", {
        "question": case.question,
        "answer": case.reference_answer,
        "llm_response": response,
    })
    resp = provider.complete(user_request(
        model_id, prompt, temperature=JUDGE_TEMPERATURE, request_tag=case.case_id))
    return parse_verdict(case.case_id, resp.content)


def evaluate(provider: ChatProvider, cases: list[TestCase], responses: dict[str, str], *,
             model_id: str, registry: PromptRegistry | None = None,
             ) -> tuple[EvalReport, list[JudgeVerdict]]:
    """Judge every case (parallel up to the provider bound) and aggregate.

    Unparseable or failed judgments are recorded as failures and excluded
    from the mean; verdicts come back sorted by case_id so the report is
    independent of judging parallelism.
    """
    missing = [c.case_id for c in cases if not responses.get(c.case_id)]
    if missing:
        raise QamineError(f"missing responses for case(s): {', '.join(sorted(missing))}")
    reg = registry or default_registry()

    requests = [
        user_request(
            model_id,
            reg.render("judge", {
                "question": case.question,
                "answer": case.reference_answer,
                "llm_response": responses[case.case_id],
            }),
            temperature=JUDGE_TEMPERATURE,
            request_tag=case.case_id,
        )
        for case in cases
    ]
    replies = provider.complete_batch(requests)

    verdicts: list[JudgeVerdict] = []
    failures: list[str] = []
    for case, reply in zip(cases, replies):
        if not reply.ok:
            logger.warning("judge call failed for case %s: %s", case.case_id, reply.error)
            failures.append(case.case_id)
            continue
        try:
            verdicts.append(parse_verdict(case.case_id, reply.content))
        except ParseError as exc:
            logger.warning("unparseable judge output for case %s: %s", case.case_id, exc)
            failures.append(case.case_id)
    if not verdicts:
        raise QamineError("no successful judge verdicts")

    verdicts.sort(key=lambda v: v.case_id)
    failures.sort()
    histogram = {r: 0 for r in range(1, 6)}
    for verdict in verdicts:
        histogram[verdict.rating] += 1
    mean = sum(v.rating for v in verdicts) / len(verdicts)
    topics = {c.topic for c in cases}
    report = EvalReport(
        topic=topics.pop() if len(topics) == 1 else "mixed",
        n_cases=len(cases),
        mean_rating=mean,
        normalized_score=mean * 20.0,
        histogram=histogram,
        failures=tuple(failures),
    )
    return report, verdicts


def collect_responses(provider: ChatProvider, cases: list[TestCase], *,
                      model_id: str, temperature: float = 0.0) -> dict[str, str]:
    """Ask the model under test to answer every question; case_id -> response."""
    requests = [
        user_request(model_id, case.question, temperature=temperature, request_tag=case.case_id)
        for case in cases
    ]
    replies = provider.complete_batch(requests)
    out: dict[str, str] = {}
    for case, reply in zip(cases, replies):
        if not reply.ok:
            logger.warning("response collection failed for case %s: %s", case.case_id, reply.error)
            continue
        out[case.case_id] = reply.content
    return out


def verdict_to_row(verdict: JudgeVerdict) -> dict:
    return {
        "case_id": verdict.case_id,
        "explanation": verdict.explanation,
        "rating": verdict.rating,
        "raw_output": verdict.raw_output,
    }
