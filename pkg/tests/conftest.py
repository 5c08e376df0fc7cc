from __future__ import annotations

import json
import random
from pathlib import Path

import pytest

FIXTURES = Path(__file__).parent / "fixtures"

_WORDS = (
    "engine steam boiler piston valve pressure cylinder crank wheel torque "
    "inventor patent factory railway coal iron design trial output history "
    "survey model method result figure sample theory signal margin detail"
).split()


def random_sentence(rng: random.Random, min_words: int = 4, max_words: int = 12) -> str:
    words = [rng.choice(_WORDS) for _ in range(rng.randint(min_words, max_words))]
    words[0] = words[0].capitalize()
    return " ".join(words) + rng.choice([".", ".", ".", "?", "!"])


def random_doc_text(rng: random.Random, n_sentences: int) -> str:
    parts = []
    for i in range(n_sentences):
        parts.append(random_sentence(rng))
        parts.append("\n\n" if rng.random() < 0.15 and i < n_sentences - 1 else " ")
    return "".join(parts).strip()


@pytest.fixture
def sentence_fixture() -> list[dict]:
    return json.loads((FIXTURES / "sentences.json").read_text(encoding="utf-8"))
