"""Fine-tuning launcher.

Consumes the flat key=value training config and the JSONL dataset emitted by
the data pipeline and constructs the exact trainer invocation: quantized
low-rank adaptation for the miner (single GPU) and sharded full-parameter
training for the chatbot (torchrun). The launcher transports hyperparameters
verbatim from the config; it never embeds its own, so the emitted config
stays the single source of truth.

Metadata keys (kind, tuning_mode, effective_batch) select the entry point and
are validated rather than passed as flags; every other config key appears
exactly once on the command line. A dry-run transcript parses back into the
full config, including re-derived metadata.
"""

from __future__ import annotations

import os
import subprocess
from dataclasses import dataclass, field
from pathlib import Path

__version__ = "0.1.0"

METADATA_KEYS = ("kind", "tuning_mode", "effective_batch")

MINER_ENTRY = ["python3", "-m", "lmlib.trainer.train_lora"]
CHATBOT_ENTRY = ["lmlib/trainer/train_mem.py"]
DEFAULT_MASTER_PORT = 29500

REQUIRED_KEYS = {
    "miner": ("kind", "base_model", "conv_template", "num_train_epochs", "learning_rate",
              "lora_r", "lora_dropout", "model_max_length", "per_device_train_batch_size",
              "gradient_accumulation_steps", "warmup_ratio", "lr_scheduler_type", "q_lora"),
    "chatbot": ("kind", "base_model", "conv_template", "num_train_epochs", "learning_rate",
                "lr_end", "weight_decay", "model_max_length", "per_device_train_batch_size",
                "gradient_accumulation_steps", "warmup_ratio", "nproc_per_node"),
}


class LaunchError(Exception):
    pass


@dataclass(frozen=True)
class LaunchPlan:
    kind: str
    command_line: tuple[str, ...]
    env: dict[str, str] = field(default_factory=dict)
    resolved_paths: dict[str, str] = field(default_factory=dict)

    def transcript(self) -> str:
        return " ".join(self.command_line)


def read_config(path: str | Path) -> dict[str, str]:
    """Parse the flat key=value config format."""
    config: dict[str, str] = {}
    for line_no, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise LaunchError(f"{path}:{line_no}: expected key=value, got {line!r}")
        key, _, value = line.partition("=")
        config[key.strip()] = value.strip()
    return config


def _check_required(config: dict[str, str], kind: str) -> None:
    for key in REQUIRED_KEYS[kind]:
        if key not in config:
            raise LaunchError(f"config missing required key: {key}")


def plan(config_path: str | Path, data_path: str | Path, out_dir: str | Path,
         kind: str | None = None, *, cache_dir: str | Path | None = None,
         master_port: int = DEFAULT_MASTER_PORT) -> LaunchPlan:
    """Build the trainer command line from an emitted config. Never executes."""
    config = read_config(config_path)
    config_kind = config.get("kind")
    if kind is None:
        kind = config_kind
    if kind not in ("miner", "chatbot"):
        raise LaunchError(f"unknown training kind {kind!r}")
    if config_kind is not None and config_kind != kind:
        raise LaunchError(f"config is for kind={config_kind!r}, requested {kind!r}")
    _check_required(config, kind)

    data_path = Path(data_path)
    if not data_path.exists():
        raise LaunchError(f"data file does not exist: {data_path}")
    out_dir = Path(out_dir)
    cache_dir = Path(cache_dir) if cache_dir is not None else out_dir / "cache"

    if "effective_batch" in config:
        world = int(config.get("nproc_per_node", "1"))
        per_device = int(config["per_device_train_batch_size"])
        accum = int(config["gradient_accumulation_steps"])
        if int(config["effective_batch"]) != world * per_device * accum:
            raise LaunchError(
                f"effective_batch={config['effective_batch']} does not equal "
                f"{world} x {per_device} x {accum}")

    if kind == "miner":
        command = list(MINER_ENTRY)
    else:
        command = ["torchrun", f"--nproc_per_node={config['nproc_per_node']}",
                   f"--master_port={master_port}"] + list(CHATBOT_ENTRY)

    command += [
        "--model_name_or_path", config["base_model"],
        "--data_path", str(data_path),
        "--output_dir", str(out_dir),
        "--cache_dir", str(cache_dir),
    ]
    for key, value in config.items():
        if key in METADATA_KEYS or key in ("base_model", "nproc_per_node"):
            continue
        command += [f"--{key}", value]

    return LaunchPlan(
        kind=kind,
        command_line=tuple(command),
        env={},
        resolved_paths={"data_path": str(data_path), "output_dir": str(out_dir),
                        "cache_dir": str(cache_dir)},
    )


def parse_transcript(transcript: str) -> dict[str, str]:
    """Invert a dry-run transcript back into the config it transported.

    Flag values may contain spaces (e.g. "full_shard auto_wrap"); a value runs
    until the next "--" token. Metadata keys are re-derived: kind from the
    entry point, tuning_mode from kind, effective_batch from the world size
    and batch settings.
    """
    tokens = transcript.split(" ")
    config: dict[str, str] = {}
    if "train_lora" in transcript:
        config["kind"] = "miner"
        config["tuning_mode"] = "q_lora"
    elif "train_mem" in transcript:
        config["kind"] = "chatbot"
        config["tuning_mode"] = "full_parameter"
    else:
        raise LaunchError("transcript has no recognizable trainer entry point")

    i = 0
    path_flags = {"data_path", "output_dir", "cache_dir"}
    while i < len(tokens):
        token = tokens[i]
        if token.startswith("--nproc_per_node="):
            config["nproc_per_node"] = token.split("=", 1)[1]
            i += 1
            continue
        if token.startswith("--master_port="):
            i += 1
            continue
        if token.startswith("--"):
            key = token[2:]
            value_parts = []
            i += 1
            while i < len(tokens) and not tokens[i].startswith("--"):
                value_parts.append(tokens[i])
                i += 1
            value = " ".join(value_parts)
            if key == "model_name_or_path":
                config["base_model"] = value
            elif key not in path_flags:
                config[key] = value
            continue
        i += 1

    if config["kind"] == "chatbot":
        world = int(config.get("nproc_per_node", "1"))
        per_device = int(config["per_device_train_batch_size"])
        accum = int(config["gradient_accumulation_steps"])
        config["effective_batch"] = str(world * per_device * accum)
    return config


def launch(plan_: LaunchPlan, execute: bool = False) -> tuple[int, str]:
    """Dry-run returns (0, transcript); execute spawns the command and relays
    its exit status."""
    transcript = plan_.transcript()
    if not execute:
        return 0, transcript
    try:
        result = subprocess.run(list(plan_.command_line),
                                env={**os.environ, **plan_.env})
    except OSError as exc:
        raise LaunchError(f"failed to spawn trainer: {exc}; command was: {transcript}") from exc
    return result.returncode, transcript
