"""Exception types shared across the pipeline."""

from __future__ import annotations


class QamineError(Exception):
    """Base class for all pipeline errors."""


class FormatError(QamineError):
    """A data file violates its declared format (bad line, missing field, duplicate id)."""

    def __init__(self, message: str, *, path: str | None = None, line: int | None = None):
        where = ""
        if path is not None:
            where += f"{path}"
        if line is not None:
            where += f":{line}"
        super().__init__(f"{where}: {message}" if where else message)
        self.path = path
        self.line = line


class ChunkingError(QamineError):
    """A document cannot be chunked under the configured budget."""


class ParseError(QamineError):
    """Model output could not be parsed; carries the raw text for audit."""

    def __init__(self, message: str, raw: str = ""):
        super().__init__(message)
        self.raw = raw


class ProviderError(QamineError):
    """Base class for chat-completion provider failures."""


class TransportError(ProviderError):
    """Retries exhausted on a retryable failure (network, timeout, 429/5xx)."""

    def __init__(self, message: str, *, last_status: int | None = None, attempts: int = 0):
        super().__init__(message)
        self.last_status = last_status
        self.attempts = attempts


class ProtocolError(ProviderError):
    """Non-retryable failure (4xx other than 429, malformed response, unmatched mock)."""

    def __init__(self, message: str, *, status: int | None = None):
        super().__init__(message)
        self.status = status


class WikiError(QamineError):
    """Wikipedia API failure (transport or unexpected payload)."""


class StageError(QamineError):
    """Wraps a failure with the pipeline stage where it occurred."""

    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"stage={stage}: {cause}")
        self.stage = stage
        self.cause = cause
