"""Chat-completion providers: an OpenAI-compatible HTTP client and a scripted mock.

Every model call in the pipeline goes through a ChatProvider. The HTTP
provider speaks POST {base_url}/chat/completions with model / messages /
temperature / max_tokens and reads choices[0].message.content. Retryable
failures (transport errors, timeouts, HTTP 429/5xx) are retried up to
max_retries with full-jitter exponential backoff, honoring Retry-After when
present. The mock provider is scripted, deterministic, thread-safe, and
records every request plus its peak observed concurrency so tests can assert
batching behavior.
"""

from __future__ import annotations

import json
import logging
import os
import random
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import httpx

from .errors import ProtocolError, ProviderError, TransportError

logger = logging.getLogger(__name__)

ROLES = ("system", "user", "assistant")
FINISH_REASONS = ("stop", "length", "error")


@dataclass(frozen=True)
class ChatMessage:
    role: str
    content: str

    def __post_init__(self):
        if self.role not in ROLES:
            raise ValueError(f"invalid role {self.role!r}")


@dataclass(frozen=True)
class ChatRequest:
    model_id: str
    messages: tuple[ChatMessage, ...]
    temperature: float = 0.0
    max_output_units: int = 1024
    request_tag: str = ""

    def __post_init__(self):
        if not self.messages:
            raise ValueError("messages must be non-empty")
        if self.messages[-1].role != "user":
            raise ValueError("last message must have role 'user'")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")

    def prompt_text(self) -> str:
        return "\n".join(m.content for m in self.messages)


def user_request(model_id: str, prompt: str, *, temperature: float = 0.0,
                 max_output_units: int = 1024, request_tag: str = "") -> ChatRequest:
    """Single user-turn request, the shape used by every pipeline prompt."""
    return ChatRequest(
        model_id=model_id,
        messages=(ChatMessage("user", prompt),),
        temperature=temperature,
        max_output_units=max_output_units,
        request_tag=request_tag,
    )


@dataclass(frozen=True)
class ChatResponse:
    request_tag: str
    content: str
    model_id: str
    finish_reason: str
    attempt_count: int = 1
    error: str | None = None

    @property
    def ok(self) -> bool:
        return self.finish_reason != "error"


@dataclass(frozen=True)
class ProviderConfig:
    base_url: str = "https://api.openai.com/v1"
    api_key_env_name: str = "OPENAI_API_KEY"
    max_in_flight: int = 4
    max_retries: int = 3
    backoff_base_ms: int = 250
    timeout_ms: int = 60_000

    def __post_init__(self):
        if self.max_in_flight < 1:
            raise ValueError("max_in_flight must be >= 1")
        if self.timeout_ms <= 0:
            raise ValueError("timeout_ms must be > 0")
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")


class _Retryable(Exception):
    def __init__(self, message: str, status: int | None = None, retry_after: float | None = None):
        super().__init__(message)
        self.status = status
        self.retry_after = retry_after


class ChatProvider:
    """Shared retry loop and bounded-parallelism batch execution."""

    def __init__(self, config: ProviderConfig, *, sleeper=time.sleep, rng: random.Random | None = None):
        self.config = config
        self._sleep = sleeper
        self._rng = rng or random.Random()

    def _attempt(self, request: ChatRequest) -> ChatResponse:
        raise NotImplementedError

    def complete(self, request: ChatRequest) -> ChatResponse:
        last: _Retryable | None = None
        for attempt in range(self.config.max_retries + 1):
            try:
                response = self._attempt(request)
                return ChatResponse(
                    request_tag=request.request_tag,
                    content=response.content,
                    model_id=response.model_id,
                    finish_reason=response.finish_reason,
                    attempt_count=attempt + 1,
                )
            except _Retryable as exc:
                last = exc
                if attempt < self.config.max_retries:
                    if exc.retry_after is not None:
                        delay = exc.retry_after
                    else:
                        delay = self._rng.uniform(0, self.config.backoff_base_ms * 2**attempt) / 1000
                    if delay > 0:
                        self._sleep(delay)
        assert last is not None
        raise TransportError(
            f"retries exhausted after {self.config.max_retries + 1} attempts: {last}",
            last_status=last.status,
            attempts=self.config.max_retries + 1,
        )

    def complete_batch(self, requests: list[ChatRequest]) -> list[ChatResponse]:
        """Run requests with at most max_in_flight outstanding; output order matches input.

        Per-request failures become finish_reason="error" slots rather than
        aborting the batch.
        """
        if not requests:
            return []

        def run(request: ChatRequest) -> ChatResponse:
            try:
                return self.complete(request)
            except ProviderError as exc:
                return ChatResponse(
                    request_tag=request.request_tag,
                    content="",
                    model_id=request.model_id,
                    finish_reason="error",
                    attempt_count=getattr(exc, "attempts", 0) or 1,
                    error=f"{type(exc).__name__}: {exc}",
                )

        with ThreadPoolExecutor(max_workers=self.config.max_in_flight) as pool:
            futures = [pool.submit(run, r) for r in requests]
            return [f.result() for f in futures]


class HttpProvider(ChatProvider):
    """OpenAI-compatible chat-completions client over HTTP."""

    def __init__(self, config: ProviderConfig, *, trace: bool = False,
                 transport: httpx.BaseTransport | None = None, sleeper=time.sleep):
        super().__init__(config, sleeper=sleeper)
        self.trace = trace
        self._client = httpx.Client(
            timeout=config.timeout_ms / 1000,
            transport=transport,
        )

    def _headers(self) -> dict[str, str]:
        headers = {"Content-Type": "application/json"}
        key = os.environ.get(self.config.api_key_env_name, "")
        if key:
            headers["Authorization"] = f"Bearer {key}"
        return headers

    def _attempt(self, request: ChatRequest) -> ChatResponse:
        url = self.config.base_url.rstrip("/") + "/chat/completions"
        payload = {
            "model": request.model_id,
            "messages": [{"role": m.role, "content": m.content} for m in request.messages],
            "temperature": request.temperature,
            "max_tokens": request.max_output_units,
        }
        if self.trace:
            logger.info("POST %s tag=%s payload=%s (key redacted)", url, request.request_tag,
                        json.dumps(payload, ensure_ascii=False)[:2000])
        try:
            resp = self._client.post(url, json=payload, headers=self._headers())
        except httpx.TimeoutException as exc:
            raise _Retryable(f"timeout: {exc}") from exc
        except httpx.TransportError as exc:
            raise _Retryable(f"transport: {exc}") from exc

        if resp.status_code == 429 or resp.status_code >= 500:
            retry_after = None
            header = resp.headers.get("Retry-After")
            if header is not None:
                try:
                    retry_after = float(header)
                except ValueError:
                    retry_after = None
            raise _Retryable(f"HTTP {resp.status_code}", status=resp.status_code, retry_after=retry_after)
        if resp.status_code >= 400:
            raise ProtocolError(f"HTTP {resp.status_code}: {resp.text[:500]}", status=resp.status_code)

        try:
            body = resp.json()
            choice = body["choices"][0]
            content = choice["message"]["content"]
            finish = choice.get("finish_reason") or "stop"
        except (KeyError, IndexError, TypeError, ValueError) as exc:
            raise ProtocolError(f"malformed completion response: {exc}") from exc
        if finish not in ("stop", "length"):
            finish = "stop"
        if self.trace:
            logger.info("RESP tag=%s finish=%s content=%s", request.request_tag, finish, content[:2000])
        return ChatResponse(
            request_tag=request.request_tag,
            content=content,
            model_id=body.get("model", request.model_id),
            finish_reason=finish,
        )

    def close(self) -> None:
        self._client.close()


@dataclass
class MockRule:
    """One scripted behavior; first matching rule wins, in declaration order.

    A rule matches on exact request_tag, on a substring of the prompt, or on
    everything when neither is set. `status` with fail_times=N fails the
    first N attempts with that status then succeeds with `content`;
    fail_times=0 with a status set fails every attempt.
    """

    content: str = ""
    tag: str | None = None
    contains: str | None = None
    status: int | None = None
    fail_times: int = 0
    delay_ms: int = 0
    finish_reason: str = "stop"
    _failures_used: int = field(default=0, repr=False)

    def matches(self, request: ChatRequest) -> bool:
        if self.tag is not None:
            return request.request_tag == self.tag
        if self.contains is not None:
            return self.contains in request.prompt_text()
        return True


class MockProvider(ChatProvider):
    """Deterministic scripted provider for offline runs and tests."""

    def __init__(self, rules: list[MockRule], *, default: str | None = None,
                 config: ProviderConfig | None = None):
        config = config or ProviderConfig(base_url="mock://", max_retries=3, max_in_flight=8)
        super().__init__(config, sleeper=lambda _s: None)
        self.rules = list(rules)
        self.default = default  # None => unmatched requests are protocol errors
        self.calls: list[ChatRequest] = []
        self.peak_concurrency = 0
        self._in_flight = 0
        self._lock = threading.Lock()

    @property
    def call_count(self) -> int:
        return len(self.calls)

    def complete(self, request: ChatRequest) -> ChatResponse:
        with self._lock:
            self.calls.append(request)
        return super().complete(request)

    def _attempt(self, request: ChatRequest) -> ChatResponse:
        with self._lock:
            self._in_flight += 1
            self.peak_concurrency = max(self.peak_concurrency, self._in_flight)
            rule = next((r for r in self.rules if r.matches(request)), None)
            must_fail = False
            if rule is not None and rule.status is not None:
                if rule.fail_times == 0:
                    must_fail = True
                elif rule._failures_used < rule.fail_times:
                    rule._failures_used += 1
                    must_fail = True
        try:
            if rule is not None and rule.delay_ms:
                time.sleep(rule.delay_ms / 1000)
            if rule is None:
                if self.default is None:
                    raise ProtocolError(f"mock: no rule matches request tag={request.request_tag!r}")
                content, finish = self.default, "stop"
            elif must_fail:
                assert rule.status is not None
                if rule.status == 429 or rule.status >= 500:
                    raise _Retryable(f"HTTP {rule.status} (scripted)", status=rule.status)
                raise ProtocolError(f"HTTP {rule.status} (scripted)", status=rule.status)
            else:
                content, finish = rule.content, rule.finish_reason
            return ChatResponse(
                request_tag=request.request_tag,
                content=content,
                model_id=request.model_id,
                finish_reason=finish,
            )
        finally:
            with self._lock:
                self._in_flight -= 1


def make_mock(script: dict | list, *, config: ProviderConfig | None = None) -> MockProvider:
    """Build a MockProvider from a script: a list of rule dicts, or a dict
    {"rules": [...], "default": "text" | null, "max_retries": n, "max_in_flight": n}."""
    if isinstance(script, list):
        script = {"rules": script}
    rules = [
        MockRule(
            content=r.get("content", ""),
            tag=r.get("tag"),
            contains=r.get("contains"),
            status=r.get("status"),
            fail_times=r.get("fail_times", 0),
            delay_ms=r.get("delay_ms", 0),
            finish_reason=r.get("finish_reason", "stop"),
        )
        for r in script.get("rules", [])
    ]
    if config is None:
        config = ProviderConfig(
            base_url="mock://",
            max_retries=script.get("max_retries", 3),
            max_in_flight=script.get("max_in_flight", 8),
        )
    return MockProvider(rules, default=script.get("default"), config=config)


def load_mock_script(path: str) -> MockProvider:
    with open(path, "r", encoding="utf-8") as fh:
        return make_mock(json.load(fh))
