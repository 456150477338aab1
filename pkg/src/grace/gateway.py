"""Completion interface shared by the base and optimizer models.

Providers only turn a request into text (plus usage when they know it). The
:class:`Gateway` adds retries with exponential backoff, per-role concurrency
limits, token estimation and usage recording.
"""

from __future__ import annotations

import logging
import math
import os
import threading
import time
from dataclasses import dataclass, field
from typing import Callable, Iterable, Protocol, Sequence

import httpx

logger = logging.getLogger(__name__)

ROLES = ("base", "optimizer")
BASE_TEMPERATURE = 0.0
OPTIMIZER_TEMPERATURE = 0.6


class ProviderError(RuntimeError):
    """Non-retryable provider failure."""


class TransientError(ProviderError):
    """Failure worth retrying (rate limit, 5xx, network)."""


class AuthenticationError(ProviderError):
    pass


class ScriptExhausted(ProviderError):
    """A scripted provider had no unconsumed entry matching the request."""


class TransportError(ProviderError):
    """Retries exhausted; ``attempts`` holds every attempt made."""

    def __init__(self, message: str, attempts: list["Attempt"]):
        super().__init__(message)
        self.attempts = attempts


@dataclass(frozen=True)
class Usage:
    input_tokens: int
    output_tokens: int
    reasoning_tokens: int = 0
    api_calls: int = 1
    estimated: bool = False

    def __post_init__(self) -> None:
        if min(self.input_tokens, self.output_tokens, self.reasoning_tokens, self.api_calls) < 0:
            raise ValueError("usage counts must be non-negative")


@dataclass(frozen=True)
class CompletionRequest:
    role: str
    messages: tuple[tuple[str, str], ...]
    temperature: float | None = None
    max_output_tokens: int | None = None
    request_tag: str = ""

    def __post_init__(self) -> None:
        if self.role not in ROLES:
            raise ValueError(f"unknown role {self.role!r}")
        if not self.messages:
            raise ValueError("a request needs at least one message")
        if self.temperature is None:
            default = BASE_TEMPERATURE if self.role == "base" else OPTIMIZER_TEMPERATURE
            object.__setattr__(self, "temperature", default)
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")

    @classmethod
    def user(cls, role: str, text: str, **kw) -> "CompletionRequest":
        return cls(role=role, messages=(("user", text),), **kw)

    @property
    def text(self) -> str:
        return "\n".join(content for _, content in self.messages)


@dataclass(frozen=True)
class ProviderReply:
    text: str
    input_tokens: int | None = None
    output_tokens: int | None = None
    reasoning_tokens: int = 0
    reasoning: str | None = None


@dataclass(frozen=True)
class CompletionResult:
    text: str
    usage: Usage
    provider_id: str
    latency_ms: int
    reasoning: str | None = None


@dataclass(frozen=True)
class Attempt:
    role: str
    request_tag: str
    attempt: int
    ok: bool
    error: str | None
    latency_ms: int


class Provider(Protocol):
    provider_id: str

    def complete(self, request: CompletionRequest) -> ProviderReply | str: ...


def estimate_tokens(text: str) -> int:
    return math.ceil(len(text) / 4)


Matcher = str | Callable[[CompletionRequest], bool] | None


class ScriptedProvider:
    """Replays canned responses.

    Each call consumes the first unconsumed entry whose matcher accepts the
    request. A matcher is ``None`` or ``"*"`` (match anything), a substring of
    the rendered request text, or a predicate on the request. Responses may be
    strings or callables taking the request.
    """

    def __init__(self, script: Iterable[tuple[Matcher, str | Callable]], provider_id: str = "scripted"):
        self.script = list(script)
        if not self.script:
            raise ValueError("script must be non-empty")
        self.provider_id = provider_id
        self.consumed = [False] * len(self.script)
        self.calls: list[CompletionRequest] = []
        self._lock = threading.Lock()

    @staticmethod
    def _accepts(matcher: Matcher, request: CompletionRequest) -> bool:
        if matcher is None or matcher == "*":
            return True
        if isinstance(matcher, str):
            return matcher in request.text
        return bool(matcher(request))

    def complete(self, request: CompletionRequest) -> str:
        with self._lock:
            self.calls.append(request)
            for i, (matcher, response) in enumerate(self.script):
                if not self.consumed[i] and self._accepts(matcher, request):
                    self.consumed[i] = True
                    break
            else:
                raise ScriptExhausted(
                    f"{self.provider_id}: no unconsumed script entry matches request {request.request_tag!r}"
                )
        return response(request) if callable(response) else response

    @property
    def remaining(self) -> int:
        return self.consumed.count(False)


def script_provider(script: Iterable[tuple[Matcher, str | Callable]], provider_id: str = "scripted") -> ScriptedProvider:
    return ScriptedProvider(script, provider_id)


class FunctionProvider:
    """Wraps a pure function ``request -> text`` (rule-based fakes)."""

    def __init__(self, fn: Callable[[CompletionRequest], ProviderReply | str], provider_id: str = "function"):
        self.fn = fn
        self.provider_id = provider_id

    def complete(self, request: CompletionRequest) -> ProviderReply | str:
        return self.fn(request)


class HTTPChatProvider:
    """Client for the ``/chat/completions`` wire format.

    The API key is read from ``api_key_env`` at call time. Reasoning text
    (``reasoning_content``) is kept apart from the answer text.
    """

    def __init__(
        self,
        model: str,
        base_url: str,
        api_key_env: str | None = None,
        *,
        timeout: float = 120.0,
        transport: httpx.BaseTransport | None = None,
        extra_body: dict | None = None,
    ):
        self.model = model
        self.base_url = base_url.rstrip("/")
        self.api_key_env = api_key_env
        self.provider_id = f"http:{model}"
        self.extra_body = extra_body or {}
        self._client = httpx.Client(timeout=timeout, transport=transport)

    def _headers(self) -> dict[str, str]:
        headers = {"Content-Type": "application/json"}
        if self.api_key_env:
            key = os.environ.get(self.api_key_env)
            if not key:
                raise AuthenticationError(f"environment variable {self.api_key_env} is not set")
            headers["Authorization"] = f"Bearer {key}"
        return headers

    def complete(self, request: CompletionRequest) -> ProviderReply:
        body = {
            "model": self.model,
            "messages": [{"role": speaker, "content": text} for speaker, text in request.messages],
            "temperature": request.temperature,
            **self.extra_body,
        }
        if request.max_output_tokens is not None:
            body["max_tokens"] = request.max_output_tokens
        try:
            resp = self._client.post(f"{self.base_url}/chat/completions", json=body, headers=self._headers())
        except (httpx.TimeoutException, httpx.NetworkError) as exc:
            raise TransientError(f"network error: {exc}") from exc
        if resp.status_code in (401, 403):
            raise AuthenticationError(f"HTTP {resp.status_code}: {resp.text[:200]}")
        if resp.status_code == 429 or resp.status_code >= 500:
            raise TransientError(f"HTTP {resp.status_code}")
        if resp.status_code >= 400:
            raise ProviderError(f"HTTP {resp.status_code}: {resp.text[:200]}")
        data = resp.json()
        message = data["choices"][0]["message"]
        usage = data.get("usage") or {}
        details = usage.get("completion_tokens_details") or {}
        return ProviderReply(
            text=message.get("content") or "",
            input_tokens=usage.get("prompt_tokens"),
            output_tokens=usage.get("completion_tokens"),
            reasoning_tokens=details.get("reasoning_tokens") or 0,
            reasoning=message.get("reasoning_content"),
        )


@dataclass
class RetryPolicy:
    max_attempts: int = 5
    base_delay: float = 1.0
    max_delay: float = 30.0

    def delay(self, attempt: int) -> float:
        return min(self.max_delay, self.base_delay * 2 ** (attempt - 1))


@dataclass
class Gateway:
    """Routes requests to the provider configured for their role."""

    providers: dict[str, Provider]
    retry: RetryPolicy = field(default_factory=RetryPolicy)
    max_in_flight: int = 8
    on_usage: Callable[[str, Usage], None] | None = None
    sleep: Callable[[float], None] = time.sleep

    def __post_init__(self) -> None:
        self.attempts: list[Attempt] = []
        self._limits = {role: threading.BoundedSemaphore(self.max_in_flight) for role in ROLES}
        self._log_lock = threading.Lock()

    def _record(self, attempt: Attempt) -> None:
        with self._log_lock:
            self.attempts.append(attempt)

    def complete(self, request: CompletionRequest) -> CompletionResult:
        provider = self.providers.get(request.role)
        if provider is None:
            raise ProviderError(f"no provider configured for role {request.role!r}")
        tried: list[Attempt] = []
        with self._limits[request.role]:
            for n in range(1, self.retry.max_attempts + 1):
                t0 = time.perf_counter()
                try:
                    reply = provider.complete(request)
                except TransientError as exc:
                    ms = int((time.perf_counter() - t0) * 1000)
                    a = Attempt(request.role, request.request_tag, n, False, str(exc), ms)
                    tried.append(a)
                    self._record(a)
                    if n < self.retry.max_attempts:
                        logger.warning("%s attempt %d failed (%s); retrying", request.role, n, exc)
                        self.sleep(self.retry.delay(n))
                    continue
                except ProviderError as exc:
                    a = Attempt(request.role, request.request_tag, n, False, str(exc), int((time.perf_counter() - t0) * 1000))
                    tried.append(a)
                    self._record(a)
                    raise
                ms = int((time.perf_counter() - t0) * 1000)
                a = Attempt(request.role, request.request_tag, n, True, None, ms)
                tried.append(a)
                self._record(a)
                break
            else:
                raise TransportError(
                    f"{request.role}: {len(tried)} attempts failed for {request.request_tag!r}", tried
                )
        if isinstance(reply, str):
            reply = ProviderReply(text=reply)
        usage = self._usage(request, reply)
        if self.on_usage is not None:
            self.on_usage(request.role, usage)
        return CompletionResult(reply.text, usage, provider.provider_id, ms, reply.reasoning)

    @staticmethod
    def _usage(request: CompletionRequest, reply: ProviderReply) -> Usage:
        estimated = reply.input_tokens is None or reply.output_tokens is None
        inp = reply.input_tokens if reply.input_tokens is not None else estimate_tokens(request.text)
        out = reply.output_tokens
        if out is None:
            out = estimate_tokens(reply.text) + (estimate_tokens(reply.reasoning) if reply.reasoning else 0)
        reasoning = reply.reasoning_tokens
        if not reasoning and reply.reasoning and reply.output_tokens is None:
            reasoning = estimate_tokens(reply.reasoning)
        return Usage(inp, out, min(reasoning, out), 1, estimated)


def complete(gateway: Gateway, request: CompletionRequest) -> CompletionResult:
    return gateway.complete(request)
