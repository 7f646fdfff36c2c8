"""Chat-completion client: retries, rate limiting, bounded concurrency,
response caching, and a deterministic scripted mock for offline runs.

The wire protocol is the common open chat-completion shape: POST
{base_url}/chat/completions with {model, messages, temperature, max_tokens},
response {choices: [{message: {content}}], usage: {...}}. Endpoints whose
base_url uses the mock:// scheme are served by a scripted mock instead of
the network, which makes every LLM-dependent stage testable offline.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import random
import threading
import time
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import httpx

from .corpus import count_tokens
from .ioutil import iter_jsonl

logger = logging.getLogger(__name__)

BACKOFF_BASE = 1.0
BACKOFF_FACTOR = 2.0


class LlmError(Exception):
    pass


class PermanentClientError(LlmError):
    """4xx other than 429: retrying will not help."""

    def __init__(self, status: int, detail: str = ""):
        super().__init__(f"permanent client error {status}: {detail}")
        self.status = status


class TransientExhaustedError(LlmError):
    def __init__(self, attempts: int, last_error: str = ""):
        super().__init__(f"gave up after {attempts} attempts: {last_error}")
        self.attempts = attempts


@dataclass(frozen=True)
class LlmEndpoint:
    base_url: str
    model: str
    temperature: float = 0.0
    max_tokens: int = 1024
    timeout: float = 60.0
    max_retries: int = 5
    max_in_flight: int = 16
    requests_per_minute: int | None = None
    api_key_env: str | None = None
    context_tokens: int | None = None  # prompt-side truncation budget, in whitespace tokens

    def __post_init__(self):
        if self.max_in_flight < 1:
            raise ValueError("max_in_flight must be >= 1")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")

    def to_dict(self) -> dict:
        return {
            "base_url": self.base_url,
            "model": self.model,
            "temperature": self.temperature,
            "max_tokens": self.max_tokens,
            "timeout": self.timeout,
            "max_retries": self.max_retries,
            "max_in_flight": self.max_in_flight,
            "requests_per_minute": self.requests_per_minute,
            "api_key_env": self.api_key_env,
            "context_tokens": self.context_tokens,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LlmEndpoint":
        return cls(**d)


@dataclass
class ChatExchange:
    messages: list[dict]
    response_text: str | None
    prompt_tokens: int = 0
    response_tokens: int = 0
    latency: float = 0.0
    attempts: int = 1


def prompt_text(messages: list[dict]) -> str:
    return "\n".join(m.get("content", "") for m in messages)


def prompt_sha256(messages: list[dict]) -> str:
    return hashlib.sha256(prompt_text(messages).encode("utf-8")).hexdigest()


def cache_key(model: str, temperature: float, messages: list[dict]) -> str:
    payload = json.dumps(
        {"model": model, "temperature": temperature, "messages": messages},
        sort_keys=True, separators=(",", ":"), ensure_ascii=False,
    )
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


class RateLimiter:
    """Sliding-window limiter enforcing a strict requests-per-minute cap.

    A refilling bucket sized to the cap would admit up to twice the cap in a
    60-second window straddling the initial burst; tracking the admission
    timestamps enforces the cap over every window.
    """

    def __init__(self, per_minute: int, clock: Callable[[], float] = time.monotonic,
                 sleep: Callable[[float], None] = time.sleep):
        self.per_minute = per_minute
        self._clock = clock
        self._sleep = sleep
        self._stamps: deque[float] = deque()
        self._lock = threading.Lock()

    def acquire(self) -> None:
        while True:
            with self._lock:
                now = self._clock()
                while self._stamps and self._stamps[0] <= now - 60.0:
                    self._stamps.popleft()
                if len(self._stamps) < self.per_minute:
                    self._stamps.append(now)
                    return
                wait = self._stamps[0] + 60.0 - now
            self._sleep(max(wait, 0.001))


class LlmClient:
    """Thread-safe client for one endpoint. Share one instance per endpoint."""

    def __init__(
        self,
        endpoint: LlmEndpoint,
        cache_dir: Path | str | None = None,
        sleep: Callable[[float], None] = time.sleep,
        rng: random.Random | None = None,
        http: httpx.Client | None = None,
    ):
        self.endpoint = endpoint
        self.cache_dir = Path(cache_dir) if cache_dir else None
        self._sleep = sleep
        self._rng = rng or random.Random()
        self._http = http or httpx.Client()
        self._sem = threading.BoundedSemaphore(endpoint.max_in_flight)
        self._limiter = (
            RateLimiter(endpoint.requests_per_minute, sleep=sleep)
            if endpoint.requests_per_minute
            else None
        )
        self.counters = {"calls": 0, "cache_hits": 0, "cache_misses": 0, "corrupt_cache_entries": 0}

    def _headers(self) -> dict:
        headers = {"Content-Type": "application/json"}
        if self.endpoint.api_key_env:
            key = os.environ.get(self.endpoint.api_key_env)
            if key:
                headers["Authorization"] = f"Bearer {key}"
        return headers

    def complete(self, messages: list[dict]) -> ChatExchange:
        if not any(m.get("role") == "user" for m in messages):
            raise ValueError("at least one user message required")
        ep = self.endpoint
        body = {
            "model": ep.model,
            "messages": messages,
            "temperature": ep.temperature,
            "max_tokens": ep.max_tokens,
        }
        url = ep.base_url.rstrip("/") + "/chat/completions"
        last_error = ""
        with self._sem:
            for attempt in range(1, ep.max_retries + 2):
                if self._limiter is not None:
                    self._limiter.acquire()
                self.counters["calls"] += 1
                start = time.monotonic()
                try:
                    resp = self._http.post(url, json=body, headers=self._headers(), timeout=ep.timeout)
                except httpx.HTTPError as exc:
                    last_error = f"transport: {exc}"
                else:
                    if resp.status_code == 200:
                        data = resp.json()
                        text = data["choices"][0]["message"]["content"]
                        usage = data.get("usage", {})
                        return ChatExchange(
                            messages=messages,
                            response_text=text,
                            prompt_tokens=usage.get("prompt_tokens", 0),
                            response_tokens=usage.get("completion_tokens", 0),
                            latency=time.monotonic() - start,
                            attempts=attempt,
                        )
                    if resp.status_code == 429 or resp.status_code >= 500:
                        last_error = f"status {resp.status_code}"
                    else:
                        raise PermanentClientError(resp.status_code, resp.text[:200])
                if attempt <= ep.max_retries:
                    # Full jitter: uniform in [0, base * factor**(attempt-1)].
                    self._sleep(self._rng.uniform(0, BACKOFF_BASE * BACKOFF_FACTOR ** (attempt - 1)))
        raise TransientExhaustedError(ep.max_retries + 1, last_error)

    def cached_complete(self, messages: list[dict]) -> ChatExchange:
        if self.cache_dir is None:
            return self.complete(messages)
        key = cache_key(self.endpoint.model, self.endpoint.temperature, messages)
        path = self.cache_dir / key[:2] / f"{key}.json"
        if path.exists():
            try:
                entry = json.loads(path.read_text(encoding="utf-8"))
                text = entry["response_text"]
                if not isinstance(text, str):
                    raise ValueError("bad cache entry")
                self.counters["cache_hits"] += 1
                return ChatExchange(
                    messages=messages,
                    response_text=text,
                    prompt_tokens=entry.get("prompt_tokens", 0),
                    response_tokens=entry.get("response_tokens", 0),
                    latency=0.0,
                    attempts=0,
                )
            except (ValueError, KeyError, json.JSONDecodeError):
                self.counters["corrupt_cache_entries"] += 1
        self.counters["cache_misses"] += 1
        exchange = self.complete(messages)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_name(path.name + f".tmp{os.getpid()}")
        tmp.write_text(
            json.dumps(
                {
                    "response_text": exchange.response_text,
                    "prompt_tokens": exchange.prompt_tokens,
                    "response_tokens": exchange.response_tokens,
                },
                ensure_ascii=False,
            ),
            encoding="utf-8",
        )
        os.replace(tmp, path)
        return exchange


@dataclass
class MockRule:
    response: str
    substring: str | None = None
    prompt_hash: str | None = None
    fail_times: int = 0
    interpolate: bool = False
    _failures_left: int = field(default=-1, repr=False)

    def __post_init__(self):
        if self._failures_left < 0:
            self._failures_left = self.fail_times

    def matches(self, text: str, digest: str) -> bool:
        if self.prompt_hash is not None:
            return self.prompt_hash == digest
        if self.substring is not None:
            return self.substring in text
        return False


class MockLlm:
    """Deterministic scripted stand-in for LlmClient.

    Rules are tried in order; the first match wins. A rule with fail_times=k
    simulates k transient failures before succeeding, surfacing as an
    exchange with attempts=k+1 (or TransientExhaustedError if k exceeds the
    retry budget).
    """

    def __init__(self, rules: list[MockRule], endpoint: LlmEndpoint | None = None):
        self.rules = rules
        self.endpoint = endpoint or LlmEndpoint(base_url="mock://", model="mock")
        self.calls = 0
        self.prompts: list[str] = []
        self.counters = {"calls": 0, "cache_hits": 0, "cache_misses": 0, "corrupt_cache_entries": 0}
        self._lock = threading.Lock()

    @classmethod
    def from_script(cls, path: Path | str, endpoint: LlmEndpoint | None = None) -> "MockLlm":
        rules = []
        for row in iter_jsonl(path):
            rules.append(
                MockRule(
                    response=row["response"],
                    substring=row.get("substring"),
                    prompt_hash=row.get("prompt_hash"),
                    fail_times=row.get("fail_times", 0),
                    interpolate=row.get("interpolate", False),
                )
            )
        return cls(rules, endpoint=endpoint)

    def complete(self, messages: list[dict]) -> ChatExchange:
        text = prompt_text(messages)
        digest = hashlib.sha256(text.encode("utf-8")).hexdigest()
        with self._lock:
            self.calls += 1
            self.counters["calls"] += 1
            self.prompts.append(text)
            matched = next((r for r in self.rules if r.matches(text, digest)), None)
            if matched is None:
                raise LlmError(f"no mock rule matched prompt (sha256 {digest[:12]}...)")
            attempts = 1
            if matched._failures_left > 0:
                budget = self.endpoint.max_retries
                if matched._failures_left > budget:
                    matched._failures_left -= budget + 1
                    raise TransientExhaustedError(budget + 1, "scripted failure")
                attempts = matched._failures_left + 1
                matched._failures_left = 0
            response = matched.response
        if matched.interpolate:
            response = response.replace("{prompt_sha8}", digest[:8])
        return ChatExchange(
            messages=messages,
            response_text=response,
            prompt_tokens=count_tokens(text),
            response_tokens=count_tokens(response),
            latency=0.0,
            attempts=attempts,
        )

    def cached_complete(self, messages: list[dict]) -> ChatExchange:
        return self.complete(messages)


def build_client(endpoint: LlmEndpoint, cache_dir: Path | str | None = None):
    """LlmClient for http(s) endpoints, MockLlm for mock://<script-path>."""
    if endpoint.base_url.startswith("mock://"):
        script = endpoint.base_url[len("mock://"):]
        return MockLlm.from_script(script, endpoint=endpoint)
    return LlmClient(endpoint, cache_dir=cache_dir)
