"""train-launcher command line: plan and optionally execute a training run."""

from __future__ import annotations

import argparse
import sys

from . import DEFAULT_MASTER_PORT, LaunchError, launch, plan


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="train-launcher", description=__doc__)
    parser.add_argument("--config", required=True, help="key=value training config")
    parser.add_argument("--data", required=True, help="training JSONL file")
    parser.add_argument("--out-dir", required=True)
    parser.add_argument("--kind", choices=("miner", "chatbot"),
                        help="defaults to the config's kind")
    parser.add_argument("--cache-dir")
    parser.add_argument("--master-port", type=int, default=DEFAULT_MASTER_PORT)
    parser.add_argument("--execute", action="store_true",
                        help="spawn the trainer instead of printing the command")
    args = parser.parse_args(argv)
    try:
        p = plan(args.config, args.data, args.out_dir, args.kind,
                 cache_dir=args.cache_dir, master_port=args.master_port)
        code, transcript = launch(p, execute=args.execute)
    except (LaunchError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    if not args.execute:
        print(transcript)
    return code


if __name__ == "__main__":
    sys.exit(main())
