"""Chatbot training dataset assembly.

Four source types feed the chatbot mixture: raw_text (domain passages),
conversation (quality-filtered OASST dialogs), qa (mined question-answer
pairs), and augmented (per-document concatenations of mined answers). A
fifth type, miner_sft, tags the behavior-cloning examples used to fine-tune
the miner itself and never enters the chatbot mix.

Serialization markers are fixed so output files are byte-stable:

    SYSTEM: <preamble>       (assistant_chat only)
    USER: <content>
    ASSISTANT: <content>

raw_text and augmented examples serialize as a single "ASSISTANT: " block
(language-modeling continuation) with no USER marker.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Iterable

from .errors import FormatError, QamineError
from .jsonio import read_jsonl, write_jsonl
from .rng import SplitMix64

if TYPE_CHECKING:  # avoid a runtime cycle with miner.py
    from .miner import MinedRecord

logger = logging.getLogger(__name__)

SOURCE_TYPES = ("raw_text", "conversation", "qa", "augmented", "miner_sft")
MIX_SOURCE_TYPES = ("raw_text", "conversation", "qa", "augmented")
TEMPLATES = ("conv_llminer", "assistant_chat")

ASSISTANT_CHAT_PREAMBLE = (
    "A chat between a curious user and an artificial intelligence assistant. "
    "The assistant gives helpful, detailed, and polite answers to the user's questions."
)


@dataclass(frozen=True)
class Turn:
    role: str
    content: str

    def __post_init__(self):
        if self.role not in ("user", "assistant"):
            raise ValueError(f"invalid turn role {self.role!r}")


@dataclass(frozen=True)
class TrainingExample:
    source_type: str
    turns: tuple[Turn, ...]
    template_name: str = "assistant_chat"
    origin_ref: str = ""

    def __post_init__(self):
        if self.source_type not in SOURCE_TYPES:
            raise ValueError(f"invalid source_type {self.source_type!r}")
        if not self.turns:
            raise ValueError("turns must be non-empty")
        if self.source_type in ("raw_text", "augmented"):
            if len(self.turns) != 1 or self.turns[0].role != "assistant":
                raise ValueError(f"{self.source_type} examples are a single assistant item")
        else:
            for i, turn in enumerate(self.turns):
                expected = "user" if i % 2 == 0 else "assistant"
                if turn.role != expected:
                    raise ValueError("turns must alternate roles starting with user")


def load_oasst(path: str | Path) -> tuple[list[TrainingExample], int]:
    """Load flattened OASST conversations, keeping only score > 0.5 (strict).

    Returns (examples, malformed_count); malformed entries are skipped, not
    fatal.
    """
    examples: list[TrainingExample] = []
    skipped = 0
    for line_no, row in read_jsonl(path):
        try:
            score = row["score"]
            if not isinstance(score, (int, float)):
                raise KeyError("score")
            messages = row["messages"]
            turns = []
            for msg in messages:
                role = {"prompter": "user", "user": "user", "assistant": "assistant"}.get(msg["role"])
                if role is None:
                    raise ValueError(f"bad role {msg['role']!r}")
                turns.append(Turn(role, msg["text"]))
            example = TrainingExample(
                source_type="conversation",
                turns=tuple(turns),
                template_name="assistant_chat",
                origin_ref=str(row.get("id", line_no)),
            )
        except (KeyError, TypeError, ValueError, IndexError):
            skipped += 1
            continue
        if score > 0.5:
            examples.append(example)
    if skipped:
        logger.warning("load_oasst: skipped %d malformed entries", skipped)
    return examples, skipped


def build_augmented_knowledge(records: Iterable["MinedRecord"]) -> list[TrainingExample]:
    """One augmented pseudo-document per doc_id: its important answers, in
    sentence order, separated by blank lines. Expects deduped records."""
    by_doc: dict[str, list["MinedRecord"]] = {}
    for record in records:
        by_doc.setdefault(record.doc_id, []).append(record)
    examples = []
    for doc_id, doc_records in by_doc.items():
        important = [r for r in doc_records if r.important and r.answer]
        important.sort(key=lambda r: (r.chunk_index, r.sentence_index))
        if not important:
            continue
        content = "\n\n".join(r.answer for r in important)
        examples.append(TrainingExample(
            source_type="augmented",
            turns=(Turn("assistant", content),),
            template_name="assistant_chat",
            origin_ref=doc_id,
        ))
    return examples


def qa_to_examples(records: Iterable["MinedRecord"]) -> list[TrainingExample]:
    """Two-turn (question, answer) examples from important mined records."""
    examples = []
    for record in records:
        ref = f"{record.doc_id}:{record.chunk_index}:{record.sentence_index}"
        if not record.important or not record.question or not record.answer:
            raise QamineError(f"qa_to_examples: record {ref} is not an important QA record")
        examples.append(TrainingExample(
            source_type="qa",
            turns=(Turn("user", record.question), Turn("assistant", record.answer)),
            template_name="assistant_chat",
            origin_ref=ref,
        ))
    return examples


def passages_to_examples(passages) -> list[TrainingExample]:
    """raw_text examples, one per passage."""
    return [
        TrainingExample(
            source_type="raw_text",
            turns=(Turn("assistant", p.text),),
            template_name="assistant_chat",
            origin_ref=f"{p.doc_id}:{p.chunk_index}",
        )
        for p in passages
    ]


def _uniform_weights() -> dict[str, float]:
    return {t: 1.0 / len(MIX_SOURCE_TYPES) for t in MIX_SOURCE_TYPES}


@dataclass(frozen=True)
class MixSpec:
    total_count: int
    seed: int
    weights: dict[str, float] = field(default_factory=_uniform_weights)

    def __post_init__(self):
        if self.total_count < 0:
            raise ValueError("total_count must be >= 0")
        unknown = set(self.weights) - set(MIX_SOURCE_TYPES)
        if unknown:
            raise ValueError(f"unknown source types in weights: {sorted(unknown)}")
        if any(w < 0 for w in self.weights.values()):
            raise ValueError("weights must be non-negative")
        if abs(sum(self.weights.values()) - 1.0) > 1e-9:
            raise ValueError("weights must sum to 1")


def mix(sources: dict[str, list[TrainingExample]], spec: MixSpec) -> list[TrainingExample]:
    """Draw spec.total_count examples: pick a source type by weight, then an
    example uniformly without replacement within it; an exhausted source
    recycles with replacement (warned once). Deterministic given spec.seed.
    """
    active = [(t, spec.weights[t]) for t in MIX_SOURCE_TYPES if spec.weights.get(t, 0.0) > 0.0]
    for source_type, _ in active:
        if not sources.get(source_type):
            raise QamineError(f"mix: source {source_type!r} has weight > 0 but no examples")

    rng = SplitMix64(spec.seed)
    remaining = {t: list(range(len(sources[t]))) for t, _ in active}
    warned: set[str] = set()
    out: list[TrainingExample] = []
    for _ in range(spec.total_count):
        r = rng.next_float()
        acc = 0.0
        chosen = active[-1][0]
        for source_type, weight in active:
            acc += weight
            if r < acc:
                chosen = source_type
                break
        pool = remaining[chosen]
        if pool:
            idx = pool.pop(rng.next_below(len(pool)))
        else:
            if chosen not in warned:
                logger.warning("mix: source %r exhausted, recycling with replacement", chosen)
                warned.add(chosen)
            idx = rng.next_below(len(sources[chosen]))
        out.append(sources[chosen][idx])
    return out


def format_example(example: TrainingExample, template: str) -> str:
    """Serialize one example under the given conversation template."""
    if template not in TEMPLATES:
        raise ValueError(f"unknown template {template!r}")
    if example.source_type in ("raw_text", "augmented"):
        return f"ASSISTANT: {example.turns[0].content}"
    if template == "conv_llminer" and len(example.turns) != 2:
        raise QamineError("conv_llminer holds exactly one user prompt and one assistant target")
    lines = []
    if template == "assistant_chat":
        lines.append(f"SYSTEM: {ASSISTANT_CHAT_PREAMBLE}")
    for turn in example.turns:
        marker = "USER" if turn.role == "user" else "ASSISTANT"
        lines.append(f"{marker}: {turn.content}")
    return "\n".join(lines)


def example_to_row(example: TrainingExample, template: str | None = None) -> dict:
    template = template or example.template_name
    row = {
        "source_type": example.source_type,
        "origin_ref": example.origin_ref,
        "template": template,
    }
    if example.source_type == "miner_sft":
        row["input"] = example.turns[0].content
        row["target"] = example.turns[1].content
    else:
        row["text"] = format_example(example, template)
    return row


def write_examples(path: str | Path, examples: Iterable[TrainingExample],
                   template: str | None = None) -> int:
    return write_jsonl(path, (example_to_row(e, template) for e in examples))


# --- training configs --------------------------------------------------------

# Hyperparameters for aligning the miner (quantized low-rank adaptation) and
# for full-parameter chatbot training. kind / tuning_mode / effective_batch
# are run metadata; everything else maps one-to-one onto trainer flags.
METADATA_KEYS = ("kind", "tuning_mode", "effective_batch")

MINER_TRAIN_CONFIG: dict[str, str] = {
    "kind": "miner",
    "tuning_mode": "q_lora",
    "base_model": "decapoda-research/llama-7b-hf",
    "conv_template": "conv_llminer",
    "num_train_epochs": "4",
    "per_device_train_batch_size": "4",
    "gradient_accumulation_steps": "1",
    "learning_rate": "5e-4",
    "warmup_ratio": "0.03",
    "lr_scheduler_type": "cosine",
    "model_max_length": "2048",
    "lora_r": "64",
    "lora_dropout": "0.05",
    "lora_target_modules": "q_proj,k_proj,v_proj,o_proj,gate_proj,up_proj,down_proj",
    "q_lora": "True",
    "bf16": "True",
    "group_by_length": "True",
    "gradient_checkpointing": "True",
    "evaluation_strategy": "no",
    "logging_steps": "25",
    "save_strategy": "epoch",
    "save_total_limit": "5",
}

CHATBOT_TRAIN_CONFIG: dict[str, str] = {
    "kind": "chatbot",
    "tuning_mode": "full_parameter",
    "base_model": "decapoda-research/llama-7b-hf",
    "conv_template": "vicuna_v1_1",
    "nproc_per_node": "8",
    "num_train_epochs": "3",
    "per_device_train_batch_size": "4",
    "gradient_accumulation_steps": "2",
    "effective_batch": "64",
    "learning_rate": "2e-5",
    "lr_end": "2e-6",
    "weight_decay": "0.01",
    "warmup_ratio": "0.03",
    "lr_scheduler_name": "linear_warmup_cosine",
    "model_max_length": "2048",
    "bf16": "True",
    "gradient_checkpointing": "True",
    "fsdp": "full_shard auto_wrap",
    "fsdp_transformer_layer_cls_to_wrap": "LlamaDecoderLayer",
    "fsdp_config": "fsdp_config/config.json",
    "optim": "adamw_torch",
    "evaluation_strategy": "no",
    "logging_steps": "25",
    "save_strategy": "epoch",
    "save_total_limit": "2",
}


def training_config(kind: str) -> dict[str, str]:
    if kind == "miner":
        return dict(MINER_TRAIN_CONFIG)
    if kind == "chatbot":
        return dict(CHATBOT_TRAIN_CONFIG)
    raise ValueError(f"unknown training config kind {kind!r}")


def emit_training_config(kind: str, out_path: str | Path) -> dict[str, str]:
    """Write the flat key=value training config for the given kind."""
    config = training_config(kind)
    world = int(config.get("nproc_per_node", "1"))
    per_device = int(config["per_device_train_batch_size"])
    accum = int(config["gradient_accumulation_steps"])
    if "effective_batch" in config:
        assert int(config["effective_batch"]) == world * per_device * accum
    path = Path(out_path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        for key, value in config.items():
            fh.write(f"{key}={value}\n")
    return config


def read_training_config(path: str | Path) -> dict[str, str]:
    config: dict[str, str] = {}
    for line_no, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise FormatError("expected key=value", path=str(path), line=line_no)
        key, _, value = line.partition("=")
        config[key.strip()] = value.strip()
    return config


# --- OASST release conversion ------------------------------------------------

def convert_oasst_trees(in_path: str | Path, out_path: str | Path,
                        score_field: str = "quality") -> tuple[int, int]:
    """Flatten OASST message trees to one conversation per root-to-leaf path.

    The conversation score is the root prompt's labels[score_field].value.
    Returns (written, skipped).
    """
    rows = []
    skipped = 0
    for _line_no, tree in read_jsonl(in_path):
        prompt = tree.get("prompt")
        tree_id = tree.get("message_tree_id") or (prompt or {}).get("message_id") or ""
        if not isinstance(prompt, dict):
            skipped += 1
            continue
        try:
            score = float(prompt["labels"][score_field]["value"])
        except (KeyError, TypeError, ValueError):
            skipped += 1
            continue

        paths: list[list[dict]] = []

        def walk(node: dict, trail: list[dict]) -> None:
            trail = trail + [node]
            replies = node.get("replies") or []
            if not replies:
                paths.append(trail)
            else:
                for reply in replies:
                    walk(reply, trail)

        walk(prompt, [])
        for k, path_nodes in enumerate(paths):
            try:
                messages = [
                    {"role": "user" if n.get("role") == "prompter" else "assistant",
                     "text": n["text"]}
                    for n in path_nodes
                ]
            except (KeyError, TypeError):
                skipped += 1
                continue
            rows.append({"id": f"{tree_id}:{k}", "score": score, "messages": messages})
    write_jsonl(out_path, rows)
    return len(rows), skipped

