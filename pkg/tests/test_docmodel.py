from __future__ import annotations

import random

import pytest

from qamine.docmodel import (
    Document,
    chunk_document,
    load_documents,
    normalize_text,
    segment_sentences,
    word_count,
)
from qamine.errors import ChunkingError, FormatError

from conftest import random_doc_text


def spans_to_texts(text, spans):
    return [text[s.start : s.end] for s in spans]


class TestSegmentation:
    def test_single_sentence(self):
        spans = segment_sentences("The cat sat.")
        assert len(spans) == 1
        assert (spans[0].start, spans[0].end) == (0, 12)

    def test_empty_input(self):
        assert segment_sentences("") == []
        assert segment_sentences("   \n\n  ") == []

    def test_hand_segmented_fixture(self, sentence_fixture):
        total = 0
        for case in sentence_fixture:
            spans = segment_sentences(case["text"])
            assert spans_to_texts(case["text"], spans) == case["sentences"], case["text"]
            total += len(case["sentences"])
        assert total >= 50

    def test_round_trip_gaps_whitespace_only(self, sentence_fixture):
        rng = random.Random(7)
        texts = [case["text"] for case in sentence_fixture]
        texts += [random_doc_text(rng, rng.randint(1, 20)) for _ in range(50)]
        for text in texts:
            spans = segment_sentences(text)
            cursor = 0
            rebuilt = []
            for s in spans:
                gap = text[cursor : s.start]
                assert gap.strip() == "", f"non-whitespace gap {gap!r} in {text!r}"
                rebuilt.append(gap)
                rebuilt.append(text[s.start : s.end])
                cursor = s.end
            rebuilt.append(text[cursor:])
            assert text[cursor:].strip() == ""
            assert "".join(rebuilt) == text

    def test_spans_ordered_nonoverlapping(self, sentence_fixture):
        for case in sentence_fixture:
            spans = segment_sentences(case["text"])
            for i, s in enumerate(spans):
                assert s.index == i
                assert s.start < s.end
                if i:
                    assert s.start >= spans[i - 1].end

    def test_deterministic(self):
        text = "Dr. Smith arrived. He left. Then what?"
        assert segment_sentences(text) == segment_sentences(text)


class TestNormalize:
    def test_crlf_and_trailing_spaces(self):
        assert normalize_text("a  \r\nb\r") == "a\nb"

    def test_blank_line_collapse(self):
        assert normalize_text("a\n\n\n\n\n\nb") == "a\n\n\nb"
        assert normalize_text("a\n\n\nb") == "a\n\n\nb"

    def test_idempotent(self):
        messy = "x  \r\n\n\n\n\n y\r\n"
        once = normalize_text(messy)
        assert normalize_text(once) == once


class TestLoadDocuments:
    def test_corpus_jsonl_order(self, tmp_path):
        p = tmp_path / "c.jsonl"
        p.write_text(
            '{"id":"a","title":"A","text":"First doc. More."}\n'
            '{"id":"b","title":"B","text":"Second doc.","source":"wikipedia","topic":"t"}\n',
            encoding="utf-8",
        )
        docs = load_documents(p)
        assert [d.doc_id for d in docs] == ["a", "b"]
        assert docs[0].source == "user_file"
        assert docs[1].source == "wikipedia"
        assert docs[1].topic == "t"

    def test_duplicate_id_named(self, tmp_path):
        p = tmp_path / "c.jsonl"
        rows = [f'{{"id":"w{i}","title":"","text":"Text {i}."}}' for i in range(1, 8)]
        rows[2] = '{"id":"w1","title":"","text":"Dup."}'
        p.write_text("\n".join(rows) + "\n", encoding="utf-8")
        with pytest.raises(FormatError, match="'w1'"):
            load_documents(p)

    def test_malformed_line_names_line_and_field(self, tmp_path):
        p = tmp_path / "c.jsonl"
        p.write_text('{"id":"a","title":"","text":"Ok."}\n{"id":"b","title":""}\n', encoding="utf-8")
        with pytest.raises(FormatError, match="2.*'text'"):
            load_documents(p)

    def test_beir_field_mapping(self, tmp_path):
        # BEIR corpus.jsonl convention: _id / title / text (+ metadata, ignored).
        p = tmp_path / "b.jsonl"
        p.write_text(
            '{"_id": "MED-10", "title": "Statin Use and Cancer", '
            '"text": "Recent studies have suggested that statins may alter cancer risk.", '
            '"metadata": {"url": "http://example.org/MED-10"}}\n',
            encoding="utf-8",
        )
        docs = load_documents(p, fmt="beir_jsonl")
        assert docs[0].doc_id == "MED-10"
        assert docs[0].source == "beir"
        assert docs[0].title.startswith("Statin")

    def test_bad_json_names_line(self, tmp_path):
        p = tmp_path / "c.jsonl"
        p.write_text('{"id":"a","title":"","text":"Ok."}\nnot json\n', encoding="utf-8")
        with pytest.raises(FormatError, match=":2"):
            load_documents(p)


class TestChunking:
    def make_doc(self, text):
        return Document(doc_id="d", title="", text=text)

    def test_whole_doc_fits(self):
        doc = self.make_doc("One two. Three four. Five six.")
        passages = chunk_document(doc, budget=100)
        assert len(passages) == 1
        assert passages[0].text == doc.text
        assert len(passages[0].sentence_spans) == 3

    def test_equal_split(self):
        doc = self.make_doc("Aa bb cc. Dd ee ff. Gg hh ii. Jj kk ll.")
        passages = chunk_document(doc, budget=6)
        assert [len(p.sentence_spans) for p in passages] == [2, 2]
        assert [p.chunk_index for p in passages] == [0, 1]

    def test_oversized_sentence_named(self):
        doc = self.make_doc("Short one. Word " + " ".join(["word"] * 30) + " end.")
        with pytest.raises(ChunkingError, match="sentence 1 of document 'd'"):
            chunk_document(doc, budget=10)

    def test_round_trip_random_docs(self):
        rng = random.Random(13)
        for _ in range(100):
            text = random_doc_text(rng, rng.randint(1, 30))
            doc = self.make_doc(text)
            budget = rng.randint(15, 120)
            try:
                passages = chunk_document(doc, budget)
            except ChunkingError:
                continue
            n_sentences = len(segment_sentences(doc.text))
            assert sum(len(p.sentence_spans) for p in passages) == n_sentences
            assert all(word_count(p.text) <= budget for p in passages)
            cursor = 0
            for p in passages:
                pos = doc.text.find(p.text, cursor)
                assert pos >= 0
                assert doc.text[cursor:pos].strip() == ""
                cursor = pos + len(p.text)
            assert doc.text[cursor:].strip() == ""
            for p in passages:
                for i, s in enumerate(p.sentence_spans):
                    assert s.index == i
                    assert p.sentence_text(i) == p.text[s.start : s.end]

    def test_chunking_deterministic(self):
        rng = random.Random(5)
        doc = self.make_doc(random_doc_text(rng, 25))
        assert chunk_document(doc, 40) == chunk_document(doc, 40)
