from __future__ import annotations

import json

import pytest

from qamine.cli import _provider_config, build_parser, main
from qamine.jsonio import write_jsonl

COT_REPLY = "The sentence states a key fact.\n\nQuestion: What fact?\nAnswer: The stated one."


def write_corpus(path, n_docs=2, n_sentences=3):
    rows = [{"id": f"d{i}", "title": f"T{i}",
             "text": " ".join(f"Doc {i} fact number {j} stands." for j in range(n_sentences))}
            for i in range(n_docs)]
    write_jsonl(path, rows)
    return path


def write_mock(path, rules=None, default=COT_REPLY):
    script = {"rules": rules or [], "default": default}
    path.write_text(json.dumps(script), encoding="utf-8")
    return path


def write_testset(path, n=3):
    write_jsonl(path, [{"case_id": f"c{i}", "topic": "AGI", "question": f"Q{i}?",
                        "reference_answer": f"A{i}."} for i in range(n)])
    return path


class TestMineCommand:
    def test_end_to_end(self, tmp_path):
        corpus = write_corpus(tmp_path / "c.jsonl")
        mock = write_mock(tmp_path / "script.json")
        out = tmp_path / "rec.jsonl"
        code = main(["mine", "--mode", "cot", "--corpus", str(corpus),
                     "--mock", str(mock), "--out", str(out)])
        assert code == 0
        lines = out.read_text(encoding="utf-8").splitlines()
        assert len(lines) == 6  # one record per sentence
        row = json.loads(lines[0])
        assert row["decision"] == "important"
        assert row["prompt_version"] == 1
        manifest = json.loads((tmp_path / "rec.manifest.json").read_text())
        assert manifest["mock"] is True
        assert manifest["n_records"] == 6

    def test_dry_run_prints_and_skips(self, tmp_path, capsys):
        corpus = write_corpus(tmp_path / "c.jsonl", n_docs=2, n_sentences=5)
        out = tmp_path / "rec.jsonl"
        code = main(["mine", "--corpus", str(corpus), "--dry-run",
                     "--mock", str(write_mock(tmp_path / "s.json")), "--out", str(out)])
        assert code == 0
        assert capsys.readouterr().out.strip() == "planned_provider_calls=10"
        assert not out.exists()

    def test_deterministic_across_runs(self, tmp_path):
        corpus = write_corpus(tmp_path / "c.jsonl")
        mock = write_mock(tmp_path / "script.json")
        outs = []
        manifests = []
        for name in ("a", "b"):
            out = tmp_path / f"{name}.jsonl"
            assert main(["mine", "--corpus", str(corpus), "--mock", str(mock),
                         "--out", str(out)]) == 0
            outs.append(out.read_bytes())
            manifests.append(json.loads((tmp_path / f"{name}.manifest.json").read_text()))
        assert outs[0] == outs[1]
        # same effective settings apart from the output name
        for m in manifests:
            m["settings"].pop("out")
            m.pop("config_hash")
            m.pop("started_at"), m.pop("finished_at")
        assert manifests[0] == manifests[1]

    def test_failure_is_one_line_error(self, tmp_path, capsys):
        code = main(["mine", "--corpus", str(tmp_path / "missing.jsonl"),
                     "--mock", "nope.json", "--out", str(tmp_path / "o.jsonl")])
        assert code == 1
        err = capsys.readouterr().err.strip().splitlines()[-1]
        assert err.startswith("error: command=mine type=")


class TestTrainConfigCommand:
    def test_miner_config_contents(self, tmp_path):
        out = tmp_path / "miner.cfg"
        assert main(["emit-train-config", "--kind", "miner", "--out", str(out)]) == 0
        text = out.read_text(encoding="utf-8")
        assert "lora_r=64" in text
        assert "learning_rate=5e-4" in text
        assert "num_train_epochs=4" in text

    def test_chatbot_config_contents(self, tmp_path):
        out = tmp_path / "chatbot.cfg"
        assert main(["emit-train-config", "--kind", "chatbot", "--out", str(out)]) == 0
        text = out.read_text(encoding="utf-8")
        assert "num_train_epochs=3" in text
        assert "learning_rate=2e-5" in text
        assert "effective_batch=64" in text


class TestUsage:
    def test_unknown_subcommand_exits_2(self):
        with pytest.raises(SystemExit) as exc:
            main(["frobnicate"])
        assert exc.value.code == 2

    def test_unknown_flag_exits_2(self):
        with pytest.raises(SystemExit) as exc:
            main(["mine", "--bogus"])
        assert exc.value.code == 2


class TestSeedCommand:
    def test_desk_scale_seed_run(self, tmp_path):
        wiki = write_corpus(tmp_path / "wiki.jsonl", n_docs=6, n_sentences=4)
        beir = tmp_path / "nfcorpus.jsonl"
        write_jsonl(beir, [{"_id": f"b{i}", "title": "t",
                            "text": "Fact one stands. Fact two stands."} for i in range(4)])
        mock = write_mock(tmp_path / "s.json", rules=[
            {"contains": "Sentence to Analyze", "content": "Yes. Dense analysis of the fact."},
            {"contains": "Highlighted Sentence", "content": "What stands?"},
            {"contains": "Query:", "content": "The fact stands."},
        ], default=None)
        out_dir = tmp_path / "seedrun"
        code = main(["seed", "--wiki-corpus", str(wiki), "--beir-corpus", str(beir),
                     "--n-wiki", "4", "--n-per-beir", "2", "--seed", "9",
                     "--mock", str(mock), "--out-dir", str(out_dir)])
        assert code == 0
        rows = [json.loads(l) for l in (out_dir / "seed_instances.jsonl").read_text().splitlines()]
        assert len(rows) == 6
        assert all(r["created_at"] == "1970-01-01T00:00:00Z" for r in rows)
        manifest = json.loads((out_dir / "manifest.json").read_text())
        assert manifest["per_source_counts"] == {"wikipedia": 4, "nfcorpus": 2}
        assert manifest["seed"] == 9

    def test_dry_run_counts(self, tmp_path, capsys):
        wiki = write_corpus(tmp_path / "wiki.jsonl", n_docs=5, n_sentences=4)
        code = main(["seed", "--wiki-corpus", str(wiki), "--n-wiki", "5", "--n-per-beir", "0",
                     "--out-dir", str(tmp_path / "x"), "--dry-run"])
        assert code == 0
        out = capsys.readouterr().out
        assert "planned_provider_calls_min=5" in out
        assert "planned_provider_calls_max=15" in out


class TestEmitFinetuneCommand:
    def test_round_trip_via_files(self, tmp_path):
        wiki = write_corpus(tmp_path / "wiki.jsonl", n_docs=3, n_sentences=3)
        mock = write_mock(tmp_path / "s.json", rules=[
            {"contains": "Sentence to Analyze", "content": "Yes. Focused analysis."},
            {"contains": "Highlighted Sentence", "content": "What is the fact?"},
            {"contains": "Query:", "content": "The fact is stated."},
        ], default=None)
        seed_dir = tmp_path / "seeds"
        assert main(["seed", "--wiki-corpus", str(wiki), "--n-wiki", "3", "--n-per-beir", "0",
                     "--mock", str(mock), "--out-dir", str(seed_dir)]) == 0
        out = tmp_path / "sft.jsonl"
        assert main(["emit-finetune", "--seeds", str(seed_dir / "seed_instances.jsonl"),
                     "--out", str(out)]) == 0
        rows = [json.loads(l) for l in out.read_text().splitlines()]
        assert len(rows) == 3
        assert all(r["template"] == "conv_llminer" for r in rows)
        assert all("Question: " in r["target"] for r in rows)


class TestMixCommand:
    def test_mix_end_to_end(self, tmp_path):
        corpus = write_corpus(tmp_path / "c.jsonl", n_docs=3, n_sentences=4)
        mock = write_mock(tmp_path / "s.json")
        records = tmp_path / "rec.jsonl"
        assert main(["mine", "--corpus", str(corpus), "--mock", str(mock),
                     "--out", str(records)]) == 0
        oasst = tmp_path / "oasst.jsonl"
        write_jsonl(oasst, [{"id": f"o{i}", "score": 0.9,
                             "messages": [{"role": "prompter", "text": "hi"},
                                          {"role": "assistant", "text": "hello"}]}
                            for i in range(5)])
        out = tmp_path / "train_mix.jsonl"
        code = main(["mix", "--corpus", str(corpus), "--oasst", str(oasst),
                     "--records", str(records), "--total", "20", "--seed", "4",
                     "--out", str(out)])
        assert code == 0
        rows = [json.loads(l) for l in out.read_text().splitlines()]
        assert len(rows) == 20
        assert {r["source_type"] for r in rows} <= {"raw_text", "conversation", "qa", "augmented"}
        assert all("text" in r for r in rows)

    def test_weights_flag(self, tmp_path):
        corpus = write_corpus(tmp_path / "c.jsonl")
        mock = write_mock(tmp_path / "s.json")
        records = tmp_path / "rec.jsonl"
        assert main(["mine", "--corpus", str(corpus), "--mock", str(mock),
                     "--out", str(records)]) == 0
        oasst = tmp_path / "oasst.jsonl"
        write_jsonl(oasst, [{"id": "o", "score": 0.9,
                             "messages": [{"role": "prompter", "text": "q"},
                                          {"role": "assistant", "text": "a"}]}])
        out = tmp_path / "mix.jsonl"
        code = main(["mix", "--corpus", str(corpus), "--oasst", str(oasst),
                     "--records", str(records), "--total", "5", "--seed", "1",
                     "--weights", "qa=1.0", "--out", str(out)])
        assert code == 0
        rows = [json.loads(l) for l in out.read_text().splitlines()]
        assert all(r["source_type"] == "qa" for r in rows)


class TestRespondEvaluateCommands:
    def test_respond_then_evaluate(self, tmp_path):
        testset = write_testset(tmp_path / "testset.jsonl", n=7)
        respond_mock = write_mock(tmp_path / "rm.json", default="A plausible chatbot reply.")
        responses = tmp_path / "responses.jsonl"
        assert main(["respond", "--testset", str(testset), "--mock", str(respond_mock),
                     "--out", str(responses)]) == 0
        assert len(responses.read_text().splitlines()) == 7

        ratings = [4, 4, 4, 4, 4, 4, 3]
        judge_mock = write_mock(tmp_path / "jm.json", rules=[
            {"tag": f"c{i}", "content": f"Explanation: fine.\nRating: {r}"}
            for i, r in enumerate(ratings)
        ], default=None)
        out_dir = tmp_path / "eval"
        assert main(["evaluate", "--testset", str(testset), "--responses", str(responses),
                     "--mock", str(judge_mock), "--out-dir", str(out_dir)]) == 0
        report = json.loads((out_dir / "report.json").read_text())
        assert abs(report["normalized_score"] - 77.142857) < 1e-3
        assert report["histogram"]["4"] == 6
        verdicts = [json.loads(l) for l in (out_dir / "verdicts.jsonl").read_text().splitlines()]
        assert [v["case_id"] for v in verdicts] == sorted(v["case_id"] for v in verdicts)

    def test_evaluate_dry_run(self, tmp_path, capsys):
        testset = write_testset(tmp_path / "t.jsonl", n=4)
        assert main(["evaluate", "--testset", str(testset), "--responses", "unused.jsonl",
                     "--out-dir", str(tmp_path / "e"), "--dry-run"]) == 0
        assert capsys.readouterr().out.strip() == "planned_provider_calls=4"


class TestConvertOasstCommand:
    def test_convert(self, tmp_path):
        trees = tmp_path / "trees.jsonl"
        write_jsonl(trees, [{
            "message_tree_id": "t1",
            "prompt": {"message_id": "m1", "role": "prompter", "text": "hi",
                       "labels": {"quality": {"value": 0.8}},
                       "replies": [{"message_id": "m2", "role": "assistant",
                                    "text": "hello", "replies": []}]},
        }])
        out = tmp_path / "flat.jsonl"
        assert main(["convert-oasst", "--in", str(trees), "--out", str(out)]) == 0
        row = json.loads(out.read_text().splitlines()[0])
        assert row["score"] == 0.8


class TestBuildCorpusCommand:
    def test_with_fixture_wiki(self, tmp_path):
        fixture = {
            "search_results": {"Steam power": ["Steam engine"]},
            "pages": {"Steam engine": {"text": "A steam engine is a heat engine. It works."}},
        }
        fixture_path = tmp_path / "wiki.json"
        fixture_path.write_text(json.dumps(fixture), encoding="utf-8")
        mock = write_mock(tmp_path / "m.json", rules=[
            {"contains": "hypothetical Wikipedia titles", "content": '["Steam power"]'},
            {"contains": "searched document titles", "content": 'Related titles: ["Steam engine"]'},
        ], default=None)
        out_dir = tmp_path / "corpus"
        code = main(["build-corpus", "--topic", "History of Steam Engine",
                     "--wiki-fixture", str(fixture_path), "--mock", str(mock),
                     "--out-dir", str(out_dir)])
        assert code == 0
        rows = [json.loads(l) for l in (out_dir / "corpus.jsonl").read_text().splitlines()]
        assert rows[0]["id"] == "Steam engine"
        assert rows[0]["source"] == "wikipedia"
        manifest = json.loads((out_dir / "manifest.json").read_text())
        assert manifest["accepted_titles"] == ["Steam engine"]


class TestConfigFile:
    def test_provider_section_with_flag_override(self, tmp_path):
        config_path = tmp_path / "run.toml"
        config_path.write_text(
            '[provider]\nbase_url = "http://local:8000/v1"\nmax_retries = 7\n', encoding="utf-8")
        parser = build_parser()
        args = parser.parse_args(["mine", "--config", str(config_path), "--corpus", "x",
                                  "--out", "y", "--max-retries", "2"])
        import tomli
        with open(config_path, "rb") as fh:
            config = tomli.load(fh)
        pc = _provider_config(args, config)
        assert pc.base_url == "http://local:8000/v1"  # from config
        assert pc.max_retries == 2  # flag wins
