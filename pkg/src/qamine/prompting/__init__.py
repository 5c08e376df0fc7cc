"""Prompt template registry.

Each template lives as a golden file in templates/{template_id}.txt and is
loaded verbatim; placeholders use single curly braces ({document}, {topic},
...) with doubled braces as the escape for a literal brace. Rendering is a
single pass, so braces inside binding values are never re-expanded.

PROMPT_VERSION identifies the transcription of the template files and is
stamped into every mined record for provenance.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

from ..errors import QamineError

PROMPT_VERSION = 1

TEMPLATE_IDS = (
    "seed_analysis",
    "seed_question",
    "seed_answer",
    "miner_simplified",
    "baseline_seed",
    "baseline_miner_simplified",
    "corpus_titles",
    "corpus_filter",
    "judge",
)

_PLACEHOLDER_RE = re.compile(r"\{\{|\}\}|\{([a-z_]+)\}")


class TemplateError(QamineError):
    """Missing template, missing binding, or extra binding."""


@dataclass(frozen=True)
class PromptTemplate:
    template_id: str
    body: str
    required_placeholders: frozenset[str]

    def render(self, bindings: dict[str, str]) -> str:
        missing = self.required_placeholders - bindings.keys()
        if missing:
            raise TemplateError(
                f"template {self.template_id!r} missing binding(s): {', '.join(sorted(missing))}"
            )
        extra = bindings.keys() - self.required_placeholders
        if extra:
            raise TemplateError(
                f"template {self.template_id!r} got extra binding(s): {', '.join(sorted(extra))}"
            )

        def _sub(match: re.Match) -> str:
            token = match.group(0)
            if token == "{{":
                return "{"
            if token == "}}":
                return "}"
            return bindings[match.group(1)]

        return _PLACEHOLDER_RE.sub(_sub, self.body)


def _placeholders(body: str) -> frozenset[str]:
    names = set()
    for match in _PLACEHOLDER_RE.finditer(body):
        if match.group(1):
            names.add(match.group(1))
    return frozenset(names)


class PromptRegistry:
    """All nine templates, loaded once from a directory of golden files."""

    def __init__(self, templates: dict[str, PromptTemplate]):
        missing = set(TEMPLATE_IDS) - templates.keys()
        if missing:
            raise TemplateError(f"registry missing template(s): {', '.join(sorted(missing))}")
        self._templates = templates

    @classmethod
    def from_dir(cls, directory: str | Path) -> "PromptRegistry":
        directory = Path(directory)
        templates = {}
        for tid in TEMPLATE_IDS:
            path = directory / f"{tid}.txt"
            if not path.exists():
                raise TemplateError(f"template file not found: {path}")
            body = path.read_text(encoding="utf-8")
            templates[tid] = PromptTemplate(tid, body, _placeholders(body))
        return cls(templates)

    @classmethod
    def bundled(cls) -> "PromptRegistry":
        root = resources.files(__package__) / "templates"
        templates = {}
        for tid in TEMPLATE_IDS:
            body = (root / f"{tid}.txt").read_text(encoding="utf-8")
            templates[tid] = PromptTemplate(tid, body, _placeholders(body))
        return cls(templates)

    def get(self, template_id: str) -> PromptTemplate:
        try:
            return self._templates[template_id]
        except KeyError:
            raise TemplateError(f"unknown template id {template_id!r}") from None

    def render(self, template_id: str, bindings: dict[str, str]) -> str:
        return self.get(template_id).render(bindings)

    def list_templates(self) -> list[tuple[str, frozenset[str]]]:
        return [(tid, self._templates[tid].required_placeholders) for tid in TEMPLATE_IDS]


_default: PromptRegistry | None = None


def default_registry() -> PromptRegistry:
    global _default
    if _default is None:
        _default = PromptRegistry.bundled()
    return _default


def render(template_id: str, bindings: dict[str, str]) -> str:
    return default_registry().render(template_id, bindings)


def list_templates() -> list[tuple[str, frozenset[str]]]:
    return default_registry().list_templates()
