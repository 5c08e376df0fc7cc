"""Topic-driven corpus building, sentence-level QA mining, training dataset
assembly, and judge-based evaluation, with all model calls behind a pluggable
chat-completion provider."""

__version__ = "0.1.0"
