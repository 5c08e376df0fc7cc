from __future__ import annotations

import pytest

from qamine.corpus import (
    CandidateTitle,
    FixtureWikiClient,
    TopicSpec,
    build_corpus,
    expand_topic,
    fetch_articles,
    filter_relevant,
    parse_title_array,
    search_titles,
)
from qamine.errors import ParseError, QamineError, StageError
from qamine.provider import make_mock

TOPIC = "History of Steam Engine"


def steam_fixture():
    search = {
        "Steam power": ["Steam engine", "Steam power during the Industrial Revolution"],
        "Watt engine": ["James Watt", "Watt steam engine"],
        "Steam locomotive history": ["Steam locomotive"],
    }
    pages = {
        "Steam engine": {"text": "A steam engine is a heat engine. It performs mechanical work using steam."},
        "James Watt": {"text": "James Watt was an inventor. He improved the Newcomen engine."},
        "Watt steam engine": {"text": "The Watt steam engine was an early steam engine. It was a defining development."},
        "Steam locomotive": {"text": "A steam locomotive is a locomotive. It is powered by a steam engine."},
        "Steam power during the Industrial Revolution": {"disambiguation": True, "text": "May refer to:"},
    }
    return FixtureWikiClient(search_results=search, pages=pages)


def expansion_mock(extra_rules=()):
    rules = list(extra_rules) + [
        {"contains": "hypothetical Wikipedia titles",
         "content": 'Output: ["Steam power", "Watt engine", "Steam locomotive history"]'},
        {"contains": "searched document titles",
         "content": 'Related titles: ["Steam engine", "James Watt", "Watt steam engine", '
                     '"Steam locomotive", "Steam power during the Industrial Revolution"]'},
    ]
    return make_mock(rules)


class TestParseTitleArray:
    # quote/escape behaviors enumerated as a fixture table
    CASES = [
        ('Output: ["A","B"]', ["A", "B"]),
        ("['A', 'B']", ["A", "B"]),
        ('["It\'s AGI"]', ["It's AGI"]),
        ("['It\\'s AGI']", ["It's AGI"]),
        ('["He said \\"hi\\""]', ['He said "hi"']),
        ("[]", []),
        ("[ ]", []),
        ('["A"] and later ["B"]', ["A"]),
        ('[ "A" ,  "B" ]', ["A", "B"]),
        ('["A","B",]', ["A", "B"]),
        ('[\n  "A",\n  "B"\n]', ["A", "B"]),
        ('Sure! A python array ["Only title"]', ["Only title"]),
    ]

    @pytest.mark.parametrize("text,expected", CASES)
    def test_fixture_table(self, text, expected):
        assert parse_title_array(text) == expected

    @pytest.mark.parametrize("text", ["no list here", '["A"', '["A]', '["A" "B"]', "[bare, words]"])
    def test_errors(self, text):
        with pytest.raises(ParseError):
            parse_title_array(text)


class TestExpandTopic:
    def test_parse_and_append_keywords(self):
        mock = make_mock([{"content": '["History of AGI", "AGI safety"]'}])
        spec = TopicSpec("AGI", extra_keywords=("Turing test",))
        assert expand_topic(mock, spec, model_id="m") == ["History of AGI", "AGI safety", "Turing test"]

    def test_case_insensitive_dedupe(self):
        mock = make_mock([{"content": "['A', 'A', 'a']"}])
        assert expand_topic(mock, TopicSpec("t"), model_id="m") == ["A"]

    def test_unparseable_reply(self):
        mock = make_mock([{"content": "no list here"}])
        with pytest.raises(ParseError):
            expand_topic(mock, TopicSpec("t"), model_id="m")


class TestSearchTitles:
    def test_ranks_assigned(self):
        wiki = steam_fixture()
        out = search_titles(wiki, ["Steam power"], 5)
        assert [c.title for c in out] == ["Steam engine", "Steam power during the Industrial Revolution"]
        assert [c.search_rank for c in out] == [0, 1]

    def test_case_insensitive_dedupe_keeps_best_rank(self):
        wiki = FixtureWikiClient(search_results={
            "q1": ["AGI", "Other"],
            "q2": ["agi"],
        })
        out = search_titles(wiki, ["q1", "q2"], 5)
        titles = {c.title.lower(): c for c in out}
        assert len(out) == 2
        assert titles["agi"].search_rank == 0

    def test_failing_query_skipped(self):
        wiki = FixtureWikiClient(
            search_results={"ok1": ["A"], "ok2": ["B"]},
            failing_queries={"boom"},
        )
        out = search_titles(wiki, ["ok1", "boom", "ok2"], 5)
        assert [c.title for c in out] == ["A", "B"]

    def test_all_queries_failed(self):
        wiki = FixtureWikiClient(failing_queries={"a", "b"})
        with pytest.raises(QamineError):
            search_titles(wiki, ["a", "b"], 5)

    def test_per_query_limit(self):
        wiki = FixtureWikiClient(search_results={"q": ["A", "B", "C", "D"]})
        assert len(search_titles(wiki, ["q"], 2)) == 2

    def test_user_keyword_origin(self):
        wiki = FixtureWikiClient(search_results={"Turing test": ["Turing test"]})
        [candidate] = search_titles(wiki, ["Turing test"], 5, user_keywords=frozenset({"turing test"}))
        assert candidate.origin == "user_keyword"


class TestFilterRelevant:
    def test_accept_and_reject(self):
        mock = make_mock([{"content": 'Related titles: ["A", "C"]'}])
        accepted, rejected = filter_relevant(mock, "t", ["A", "B", "C"], model_id="m")
        assert accepted == ["A", "C"]
        assert rejected == ["B"]

    def test_hallucinated_title_discarded(self):
        mock = make_mock([{"content": 'Related titles: ["A", "Z"]'}])
        accepted, rejected = filter_relevant(mock, "t", ["A", "B"], model_id="m")
        assert accepted == ["A"]
        assert "Z" not in accepted + rejected

    def test_empty_acceptance(self):
        mock = make_mock([{"content": "Related titles: []"}])
        accepted, rejected = filter_relevant(mock, "t", ["A", "B"], model_id="m")
        assert accepted == []
        assert rejected == ["A", "B"]

    def test_case_insensitive_match_keeps_batch_casing(self):
        mock = make_mock([{"content": 'Related titles: ["james watt"]'}])
        accepted, _ = filter_relevant(mock, "t", ["James Watt"], model_id="m")
        assert accepted == ["James Watt"]

    def test_parse_failure_retried_once_then_rejected(self):
        mock = make_mock([
            {"tag": "filter:0", "content": "garbage with no array"},
            {"tag": "filter:0:retry", "content": "still garbage"},
        ])
        accepted, rejected = filter_relevant(mock, "t", ["A", "B"], model_id="m")
        assert accepted == []
        assert rejected == ["A", "B"]
        assert mock.call_count == 2

    def test_parse_failure_then_retry_success(self):
        mock = make_mock([
            {"tag": "filter:0", "content": "garbage"},
            {"tag": "filter:0:retry", "content": '["A"]'},
        ])
        accepted, rejected = filter_relevant(mock, "t", ["A", "B"], model_id="m")
        assert accepted == ["A"]
        assert rejected == ["B"]

    def test_batching(self):
        mock = make_mock([
            {"tag": "filter:0", "content": '["A"]'},
            {"tag": "filter:1", "content": '["C"]'},
        ])
        accepted, rejected = filter_relevant(mock, "t", ["A", "B", "C"], batch_size=2, model_id="m")
        assert accepted == ["A", "C"]
        assert rejected == ["B"]


class TestFetchArticles:
    def test_fetch_and_cache(self, tmp_path):
        wiki = steam_fixture()
        docs = fetch_articles(wiki, ["Steam engine"], cache_dir=tmp_path)
        assert len(docs) == 1
        assert docs[0].source == "wikipedia"
        assert wiki.fetch_calls == 1
        again = fetch_articles(wiki, ["Steam engine"], cache_dir=tmp_path)
        assert wiki.fetch_calls == 1  # warm cache
        assert again == docs

    def test_redirect_resolved_and_deduped(self, tmp_path):
        wiki = steam_fixture()
        wiki.pages["AGI"] = {"redirect": "Steam engine"}
        docs = fetch_articles(wiki, ["AGI", "Steam engine"], cache_dir=tmp_path)
        assert [d.doc_id for d in docs] == ["Steam engine"]

    def test_disambiguation_skipped(self, tmp_path):
        wiki = steam_fixture()
        docs = fetch_articles(
            wiki, ["Steam power during the Industrial Revolution", "Steam engine"],
            cache_dir=tmp_path)
        assert [d.doc_id for d in docs] == ["Steam engine"]

    def test_missing_page_skipped(self, tmp_path):
        wiki = steam_fixture()
        docs = fetch_articles(wiki, ["Nonexistent page", "Steam engine"], cache_dir=tmp_path)
        assert [d.doc_id for d in docs] == ["Steam engine"]

    def test_zero_successes_error(self, tmp_path):
        wiki = steam_fixture()
        with pytest.raises(QamineError):
            fetch_articles(wiki, ["Nonexistent page"], cache_dir=tmp_path)


class TestBuildCorpus:
    def test_end_to_end_fixture(self, tmp_path):
        wiki = steam_fixture()
        provider = expansion_mock()
        corpus_path, manifest = build_corpus(
            provider, wiki, TopicSpec(TOPIC), out_dir=tmp_path / "out",
            cache_dir=tmp_path / "cache", model_id="m",
            clock=lambda: "2024-01-01T00:00:00Z")
        text = corpus_path.read_text(encoding="utf-8")
        assert text.count("\n") == 4  # 5 accepted minus 1 disambiguation
        assert set(manifest.accepted_titles) == {
            "Steam engine", "James Watt", "Watt steam engine", "Steam locomotive",
            "Steam power during the Industrial Revolution"}
        assert manifest.rejected_titles == []
        assert set(manifest.accepted_titles).isdisjoint(manifest.rejected_titles)
        assert (tmp_path / "out" / "manifest.json").exists()

    def test_accepted_subset_of_searched(self, tmp_path):
        wiki = steam_fixture()
        provider = expansion_mock(extra_rules=[
            {"contains": "searched document titles",
             "content": 'Related titles: ["Steam engine", "Completely Invented Page"]'},
        ])
        _, manifest = build_corpus(provider, wiki, TopicSpec(TOPIC),
                                   out_dir=tmp_path / "out", model_id="m")
        searched = {"Steam engine", "James Watt", "Watt steam engine", "Steam locomotive",
                    "Steam power during the Industrial Revolution"}
        assert set(manifest.accepted_titles) <= searched
        assert set(manifest.accepted_titles) | set(manifest.rejected_titles) == searched

    def test_warm_cache_rerun_byte_identical_zero_fetches(self, tmp_path):
        wiki = steam_fixture()
        kwargs = dict(out_dir=tmp_path / "out", cache_dir=tmp_path / "cache", model_id="m",
                      clock=lambda: "2024-01-01T00:00:00Z")
        path1, _ = build_corpus(expansion_mock(), wiki, TopicSpec(TOPIC), **kwargs)
        first = path1.read_bytes()
        fetches = wiki.fetch_calls
        path2, _ = build_corpus(expansion_mock(), wiki, TopicSpec(TOPIC), **kwargs)
        assert path2.read_bytes() == first
        assert wiki.fetch_calls == fetches  # zero network article fetches

    def test_empty_accept_errors(self, tmp_path):
        wiki = steam_fixture()
        provider = expansion_mock(extra_rules=[
            {"contains": "searched document titles", "content": "Related titles: []"},
        ])
        with pytest.raises(StageError, match="filter"):
            build_corpus(provider, wiki, TopicSpec(TOPIC), out_dir=tmp_path / "out", model_id="m")
