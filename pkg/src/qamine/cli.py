"""Command-line entry point.

Subcommands: build-corpus, seed, emit-finetune, mine, mix, emit-train-config,
respond, evaluate, convert-oasst. Settings come from an optional TOML config
file with flag overrides (flags win); the API key comes only from the
environment variable named in the provider settings. Logs go to stderr, data
to files; --dry-run prints the planned provider-call count and performs none;
--mock installs a scripted provider from a JSON script file.

Exit codes: 0 success, 1 failure (one machine-parseable error line on
stderr), 2 usage.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from . import corpus as corpus_mod
from . import dataset as dataset_mod
from . import docmodel
from . import judge as judge_mod
from . import miner as miner_mod
from .errors import QamineError
from .jsonio import read_jsonl, write_jsonl
from .prompting import PromptRegistry, default_registry
from .provider import HttpProvider, ProviderConfig, load_mock_script
from .runmeta import utc_now, write_manifest

logger = logging.getLogger("qamine")


def _load_config(path: str | None) -> dict:
    if not path:
        return {}
    with open(path, "rb") as fh:
        return tomllib.load(fh)


def _provider_config(args, config: dict) -> ProviderConfig:
    section = config.get("provider", {})

    def pick(key, default):
        value = getattr(args, key, None)
        if value is not None:
            return value
        return section.get(key, default)

    return ProviderConfig(
        base_url=pick("base_url", "https://api.openai.com/v1"),
        api_key_env_name=pick("api_key_env_name", "OPENAI_API_KEY"),
        max_in_flight=int(pick("max_in_flight", 4)),
        max_retries=int(pick("max_retries", 3)),
        backoff_base_ms=int(pick("backoff_base_ms", 250)),
        timeout_ms=int(pick("timeout_ms", 60_000)),
    )


def _make_provider(args, config: dict):
    if getattr(args, "mock", None):
        return load_mock_script(args.mock), True
    return HttpProvider(_provider_config(args, config), trace=bool(getattr(args, "trace", False))), False


def _registry(args) -> PromptRegistry:
    if getattr(args, "prompts", None):
        return PromptRegistry.from_dir(args.prompts)
    return default_registry()


def _settings_dict(args, skip=("config", "trace")) -> dict:
    out = {}
    for key, value in sorted(vars(args).items()):
        if key in skip or key == "func" or callable(value):
            continue
        out[key] = value if not isinstance(value, Path) else str(value)
    return out


def _print_plan(n_min: int, n_max: int | None = None) -> None:
    if n_max is None or n_max == n_min:
        print(f"planned_provider_calls={n_min}")
    else:
        print(f"planned_provider_calls_min={n_min} planned_provider_calls_max={n_max}")


# --- subcommands -------------------------------------------------------------

def cmd_build_corpus(args, config: dict) -> int:
    spec = corpus_mod.TopicSpec(args.topic, tuple(args.keyword or ()))
    if args.dry_run:
        _print_plan(2, None)  # one expansion call + at least one filter batch
        return 0
    if args.wiki_fixture:
        with open(args.wiki_fixture, "r", encoding="utf-8") as fh:
            fixture = json.load(fh)
        wiki = corpus_mod.FixtureWikiClient(
            search_results=fixture.get("search_results", {}),
            pages=fixture.get("pages", {}),
            failing_queries=set(fixture.get("failing_queries", ())),
        )
    else:
        wiki = corpus_mod.LiveWikiClient(rate_per_sec=args.rate_per_sec)
    provider, mock = _make_provider(args, config)
    started = utc_now()
    corpus_path, manifest = corpus_mod.build_corpus(
        provider, wiki, spec,
        out_dir=args.out_dir,
        cache_dir=args.cache_dir,
        model_id=args.model,
        per_query_limit=args.per_query_limit,
        batch_size=args.batch_size,
        registry=_registry(args),
    )
    write_manifest(Path(args.out_dir) / "run_manifest.json", command="build-corpus",
                   settings=_settings_dict(args), mock=mock, started_at=started,
                   extra={"n_docs": len(manifest.fetched_doc_ids)})
    logger.info("corpus written to %s (%d docs)", corpus_path, len(manifest.fetched_doc_ids))
    return 0


def cmd_seed(args, config: dict) -> int:
    wiki_docs = docmodel.load_documents(args.wiki_corpus, "corpus_jsonl")
    beir = {Path(p).stem: docmodel.load_documents(p, "beir_jsonl") for p in args.beir_corpus or ()}
    samples = miner_mod.sample_seed_passages(
        wiki_docs, beir, n_wiki=args.n_wiki, n_per_beir=args.n_per_beir,
        seed=args.seed, budget=args.budget)
    if args.dry_run:
        _print_plan(len(samples), 3 * len(samples))
        return 0
    provider, mock = _make_provider(args, config)
    started = utc_now()
    created_at = miner_mod.EPOCH_TIMESTAMP if mock else utc_now()
    seeds = miner_mod.generate_seeds(provider, samples, model_id=args.model,
                                     registry=_registry(args), created_at=created_at)
    out_dir = Path(args.out_dir)
    write_jsonl(out_dir / "seed_instances.jsonl", (miner_mod.seed_to_row(s) for s in seeds))
    per_source: dict[str, int] = {}
    for sample in samples:
        per_source[sample.source] = per_source.get(sample.source, 0) + 1
    n_skip = sum(1 for s in seeds if s.decision.kind == "skip")
    write_manifest(out_dir, command="seed", settings=_settings_dict(args),
                   seed=args.seed, mock=mock, started_at=started,
                   extra={"per_source_counts": per_source,
                          "n_instances": len(seeds), "n_skips": n_skip})
    logger.info("wrote %d seed instances (%d skips) to %s", len(seeds), n_skip, out_dir)
    return 0


def cmd_emit_finetune(args, config: dict) -> int:
    seeds = [miner_mod.row_to_seed(row) for _, row in read_jsonl(args.seeds)]
    examples = miner_mod.emit_finetune_examples(seeds, strict=args.strict,
                                                registry=_registry(args))
    n = dataset_mod.write_examples(args.out, examples)
    write_manifest(Path(args.out).with_suffix(".manifest.json"), command="emit-finetune",
                   settings=_settings_dict(args), mock=False, started_at=utc_now(),
                   extra={"n_examples": n, "n_seeds": len(seeds)})
    logger.info("wrote %d fine-tune examples to %s", n, args.out)
    return 0


def cmd_mine(args, config: dict) -> int:
    docs = docmodel.load_documents(args.corpus, args.format)
    passages = docmodel.chunk_corpus(docs, args.budget)
    n_sentences = sum(len(p.sentence_spans) for p in passages)
    if args.dry_run:
        _print_plan(n_sentences)
        return 0
    provider, mock = _make_provider(args, config)
    started = utc_now()
    records = miner_mod.mine_corpus(provider, passages, args.mode, model_id=args.model,
                                    registry=_registry(args))
    if args.dedupe:
        records = miner_mod.dedupe_records(records)
    write_jsonl(args.out, (miner_mod.mined_record_to_row(r) for r in records))
    n_important = sum(1 for r in records if r.important)
    write_manifest(Path(args.out).with_suffix(".manifest.json"), command="mine",
                   settings=_settings_dict(args), mock=mock, started_at=started,
                   extra={"n_records": len(records), "n_important": n_important,
                          "n_sentences": n_sentences})
    logger.info("mined %d records (%d important) to %s", len(records), n_important, args.out)
    return 0


def _parse_weights(spec: str) -> dict[str, float]:
    weights = {}
    for part in spec.split(","):
        key, _, value = part.partition("=")
        if not value:
            raise QamineError(f"bad weight entry {part!r}; expected type=value")
        weights[key.strip()] = float(value)
    return weights


def cmd_mix(args, config: dict) -> int:
    records = [miner_mod.row_to_mined_record(row) for _, row in read_jsonl(args.records)]
    records = miner_mod.dedupe_records(records)
    if args.strict:
        records = [r for r in records if not r.lint_violations]
    important = [r for r in records if r.important]

    docs = docmodel.load_documents(args.corpus, "corpus_jsonl")
    passages = docmodel.chunk_corpus(docs, args.budget)
    conversations, skipped = dataset_mod.load_oasst(args.oasst)

    sources = {
        "raw_text": dataset_mod.passages_to_examples(passages),
        "conversation": conversations,
        "qa": dataset_mod.qa_to_examples(important),
        "augmented": dataset_mod.build_augmented_knowledge(records),
    }
    if args.weights:
        spec = dataset_mod.MixSpec(total_count=args.total, seed=args.seed,
                                   weights=_parse_weights(args.weights))
    else:
        spec = dataset_mod.MixSpec(total_count=args.total, seed=args.seed)
    mixed = dataset_mod.mix(sources, spec)
    n = dataset_mod.write_examples(args.out, mixed, template="assistant_chat")
    write_manifest(Path(args.out).with_suffix(".manifest.json"), command="mix",
                   settings=_settings_dict(args), seed=args.seed, mock=False,
                   started_at=utc_now(),
                   extra={"n_examples": n, "oasst_skipped": skipped,
                          "source_sizes": {k: len(v) for k, v in sources.items()}})
    logger.info("wrote %d mixed examples to %s", n, args.out)
    return 0


def cmd_emit_train_config(args, config: dict) -> int:
    emitted = dataset_mod.emit_training_config(args.kind, args.out)
    logger.info("wrote %s training config (%d keys) to %s", args.kind, len(emitted), args.out)
    return 0


def cmd_respond(args, config: dict) -> int:
    cases = judge_mod.load_testset(args.testset)
    if args.dry_run:
        _print_plan(len(cases))
        return 0
    provider, mock = _make_provider(args, config)
    started = utc_now()
    responses = judge_mod.collect_responses(provider, cases, model_id=args.model,
                                            temperature=args.temperature)
    write_jsonl(args.out, ({"case_id": c.case_id, "response": responses[c.case_id]}
                           for c in cases if c.case_id in responses))
    write_manifest(Path(args.out).with_suffix(".manifest.json"), command="respond",
                   settings=_settings_dict(args), mock=mock, started_at=started,
                   extra={"n_cases": len(cases), "n_responses": len(responses)})
    logger.info("wrote %d responses to %s", len(responses), args.out)
    return 0


def cmd_evaluate(args, config: dict) -> int:
    cases = judge_mod.load_testset(args.testset)
    if args.dry_run:
        _print_plan(len(cases))
        return 0
    responses = {str(row["case_id"]): row["response"] for _, row in read_jsonl(args.responses)}
    provider, mock = _make_provider(args, config)
    started = utc_now()
    report, verdicts = judge_mod.evaluate(provider, cases, responses,
                                          model_id=args.judge_model, registry=_registry(args))
    out_dir = Path(args.out_dir)
    write_jsonl(out_dir / "verdicts.jsonl", (judge_mod.verdict_to_row(v) for v in verdicts))
    (out_dir / "report.json").write_text(
        json.dumps(report.to_dict(), ensure_ascii=False, indent=2) + "\n", encoding="utf-8")
    write_manifest(out_dir, command="evaluate", settings=_settings_dict(args),
                   mock=mock, started_at=started,
                   extra={"normalized_score": report.normalized_score})
    logger.info("topic=%s mean=%.3f normalized=%.2f failures=%d",
                report.topic, report.mean_rating, report.normalized_score, len(report.failures))
    return 0


def cmd_convert_oasst(args, config: dict) -> int:
    written, skipped = dataset_mod.convert_oasst_trees(args.input, args.out,
                                                       score_field=args.score_field)
    logger.info("flattened %d conversations (%d trees skipped) to %s", written, skipped, args.out)
    return 0


# --- parser ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="qamine", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, provider=True):
        p.add_argument("--config", help="TOML config file; flags override it")
        p.add_argument("--prompts", help="directory of prompt template golden files")
        if provider:
            p.add_argument("--mock", help="JSON mock-provider script; no network calls")
            p.add_argument("--trace", action="store_true", help="log request/response bodies (key redacted)")
            p.add_argument("--model", default="gpt-4", help="model id sent to the provider")
            p.add_argument("--base-url", dest="base_url")
            p.add_argument("--api-key-env", dest="api_key_env_name")
            p.add_argument("--max-in-flight", type=int, dest="max_in_flight")
            p.add_argument("--max-retries", type=int, dest="max_retries")

    p = sub.add_parser("build-corpus", help="build a topic corpus from Wikipedia")
    common(p)
    p.add_argument("--topic", required=True)
    p.add_argument("--keyword", action="append", help="extra search keyword (repeatable)")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--cache-dir", default=None)
    p.add_argument("--per-query-limit", type=int, default=corpus_mod.DEFAULT_PER_QUERY_LIMIT)
    p.add_argument("--batch-size", type=int, default=corpus_mod.DEFAULT_FILTER_BATCH)
    p.add_argument("--rate-per-sec", type=float, default=10.0)
    p.add_argument("--wiki-fixture", help="JSON fixture replacing the live Wikipedia client")
    p.add_argument("--dry-run", action="store_true")
    p.set_defaults(func=cmd_build_corpus)

    p = sub.add_parser("seed", help="generate seed instances with the three-step procedure")
    common(p)
    p.add_argument("--wiki-corpus", required=True, help="corpus_jsonl file")
    p.add_argument("--beir-corpus", action="append", help="beir_jsonl file (repeatable)")
    p.add_argument("--n-wiki", type=int, default=300)
    p.add_argument("--n-per-beir", type=int, default=50)
    p.add_argument("--budget", type=int, default=docmodel.DEFAULT_WORD_BUDGET)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--dry-run", action="store_true")
    p.set_defaults(func=cmd_seed)

    p = sub.add_parser("emit-finetune", help="emit behavior-cloning examples from seeds")
    common(p, provider=False)
    p.add_argument("--seeds", required=True, help="seed_instances.jsonl")
    p.add_argument("--out", required=True)
    p.add_argument("--strict", action="store_true", help="drop lint-violating QA")
    p.set_defaults(func=cmd_emit_finetune)

    p = sub.add_parser("mine", help="mine QA records from a corpus")
    common(p)
    p.add_argument("--mode", choices=miner_mod.MODES, default="cot")
    p.add_argument("--corpus", required=True)
    p.add_argument("--format", choices=("corpus_jsonl", "beir_jsonl"), default="corpus_jsonl")
    p.add_argument("--budget", type=int, default=docmodel.DEFAULT_WORD_BUDGET)
    p.add_argument("--out", required=True)
    p.add_argument("--dedupe", action="store_true")
    p.add_argument("--dry-run", action="store_true")
    p.set_defaults(func=cmd_mine)

    p = sub.add_parser("mix", help="assemble the four-source training mixture")
    common(p, provider=False)
    p.add_argument("--corpus", required=True, help="corpus_jsonl for raw_text examples")
    p.add_argument("--oasst", required=True, help="flattened OASST conversations")
    p.add_argument("--records", required=True, help="mined_records.jsonl")
    p.add_argument("--total", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--weights", help="e.g. raw_text=0.25,conversation=0.25,qa=0.25,augmented=0.25")
    p.add_argument("--budget", type=int, default=docmodel.DEFAULT_WORD_BUDGET)
    p.add_argument("--strict", action="store_true", help="drop lint-violating records")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_mix)

    p = sub.add_parser("emit-train-config", help="write the training hyperparameter config")
    common(p, provider=False)
    p.add_argument("--kind", choices=("miner", "chatbot"), required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_emit_train_config)

    p = sub.add_parser("respond", help="collect model responses for a test set")
    common(p)
    p.add_argument("--testset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--temperature", type=float, default=0.0)
    p.add_argument("--dry-run", action="store_true")
    p.set_defaults(func=cmd_respond)

    p = sub.add_parser("evaluate", help="judge responses against the test set")
    common(p)
    p.add_argument("--testset", required=True)
    p.add_argument("--responses", required=True)
    p.add_argument("--judge-model", default="gpt-4")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--dry-run", action="store_true")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("convert-oasst", help="flatten OASST message trees")
    common(p, provider=False)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--score-field", default="quality")
    p.set_defaults(func=cmd_convert_oasst)

    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(stream=sys.stderr, level=logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        config = _load_config(getattr(args, "config", None))
        return args.func(args, config)
    except QamineError as exc:
        msg = str(exc).replace("\n", " ")
        print(f"error: command={args.command} type={type(exc).__name__} msg={msg}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: command={args.command} type={type(exc).__name__} msg={exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
