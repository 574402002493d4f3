"""Language-model backends behind one uniform interface.

Three implementations: an HTTP client speaking the chat-completions JSON
shape, a deterministic scripted mock for offline runs, and a caching
wrapper usable around either. All callers build :class:`OracleRequest`
values; a request's fingerprint (sha256 of its canonical JSON) is both the
cache key and the mock-script key, so a pipeline run can be replayed
offline from a recorded script file.

Request-construction contract used by the planner and the judge: the
rendered template is sent as the user prompt, the system prompt is empty,
and sample_index distinguishes self-consistency samples of an otherwise
identical prompt.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import random
import threading
import time
from dataclasses import dataclass, replace
from typing import Callable, Mapping

import requests

logger = logging.getLogger(__name__)

DEFAULT_TEMPERATURE = 0.7
DEFAULT_MAX_TOKENS = 2048


class OracleError(Exception):
    """Base class for oracle failures."""


class TransportError(OracleError):
    pass


class AuthError(OracleError):
    pass


class RateLimited(OracleError):
    def __init__(self, message: str, retry_after: float | None = None):
        super().__init__(message)
        self.retry_after = retry_after


class MalformedBackendReply(OracleError):
    pass


class UnscriptedRequest(OracleError):
    pass


@dataclass(frozen=True)
class OracleRequest:
    model: str
    system_prompt: str = ""
    user_prompt: str = ""
    temperature: float = DEFAULT_TEMPERATURE
    max_tokens: int = DEFAULT_MAX_TOKENS
    sample_index: int = 0

    def __post_init__(self) -> None:
        if not 0 <= self.temperature <= 2:
            raise ValueError(f"temperature {self.temperature} outside [0, 2]")
        if self.max_tokens <= 0:
            raise ValueError("max_tokens must be positive")


@dataclass(frozen=True)
class OracleResponse:
    text: str
    prompt_tokens: int = 0
    completion_tokens: int = 0
    latency_ms: float = 0.0
    from_cache: bool = False

    def __post_init__(self) -> None:
        if self.prompt_tokens < 0 or self.completion_tokens < 0:
            raise ValueError("token counts must be non-negative")
        if self.from_cache and self.latency_ms != 0.0:
            raise ValueError("cached responses report zero latency")


def canonical_request(req: OracleRequest) -> str:
    """Stable JSON form of a request; the sole input to its fingerprint."""
    return json.dumps(
        {
            "model": req.model,
            "system_prompt": req.system_prompt,
            "user_prompt": req.user_prompt,
            "temperature": req.temperature,
            "max_tokens": req.max_tokens,
            "sample_index": req.sample_index,
        },
        sort_keys=True,
        ensure_ascii=False,
        separators=(",", ":"),
    )


def fingerprint(req: OracleRequest) -> str:
    """Lowercase hex digest identifying a request for caching and mock scripts."""
    return hashlib.sha256(canonical_request(req).encode("utf-8")).hexdigest()


def _count_tokens(text: str) -> int:
    # Whitespace tokens: deterministic and cheap, good enough for mock accounting.
    return len(text.split())


class Oracle:
    """Interface every backend implements."""

    def complete(self, req: OracleRequest) -> OracleResponse:
        raise NotImplementedError


class MockOracle(Oracle):
    """Replays a fixed script keyed by request fingerprint.

    Unmatched requests raise :class:`UnscriptedRequest` with enough context
    to add the missing entry. Safe for concurrent use.
    """

    def __init__(self, script: Mapping[str, str]):
        if not script:
            raise ValueError("mock script is empty")
        self._script = dict(script)
        self._lock = threading.Lock()
        self.calls = 0

    def complete(self, req: OracleRequest) -> OracleResponse:
        with self._lock:
            self.calls += 1
        key = fingerprint(req)
        if key not in self._script:
            head = req.user_prompt[:80].replace("\n", " ")
            raise UnscriptedRequest(
                f"no scripted reply for fingerprint {key} "
                f"(model={req.model}, sample_index={req.sample_index}, prompt starts: {head!r})"
            )
        text = self._script[key]
        return OracleResponse(
            text=text,
            prompt_tokens=_count_tokens(req.system_prompt) + _count_tokens(req.user_prompt),
            completion_tokens=_count_tokens(text),
        )


def mock_from_script(script: Mapping[str, str]) -> MockOracle:
    """Build a deterministic oracle from a {fingerprint: reply text} map."""
    return MockOracle(script)


def load_mock_script(path: str) -> MockOracle:
    with open(path, encoding="utf-8") as fh:
        data = json.load(fh)
    if not isinstance(data, dict) or not all(isinstance(v, str) for v in data.values()):
        raise ValueError(f"{path}: mock script must be a JSON object mapping fingerprints to strings")
    return mock_from_script(data)


class HttpOracle(Oracle):
    """Chat-completions client for any backend exposing that JSON shape.

    POSTs to ``<base_url>/chat/completions``; the credential is read from the
    environment variable named by ``api_key_env`` on each call. Transport
    failures are retried max_retries times with doubling backoff (1s base,
    +/-20% jitter); 429 replies honor Retry-After when present.
    """

    def __init__(
        self,
        base_url: str,
        api_key_env: str = "EDUQGEN_API_KEY",
        *,
        max_retries: int = 2,
        timeout: float = 60.0,
        session: requests.Session | None = None,
        sleeper: Callable[[float], None] = time.sleep,
    ):
        self.base_url = base_url.rstrip("/")
        self.api_key_env = api_key_env
        self.max_retries = max_retries
        self.timeout = timeout
        self._session = session if session is not None else requests.Session()
        self._sleep = sleeper
        self._rng = random.Random()
        self._lock = threading.Lock()
        self.transport_calls = 0

    def _headers(self) -> dict[str, str]:
        headers = {"Content-Type": "application/json"}
        key = os.environ.get(self.api_key_env, "")
        if key:
            headers["Authorization"] = f"Bearer {key}"
        return headers

    def _backoff(self, attempt: int) -> float:
        base = 2.0**attempt  # 1s, 2s, 4s, ...
        return base * (1.0 + self._rng.uniform(-0.2, 0.2))

    def complete(self, req: OracleRequest) -> OracleResponse:
        url = f"{self.base_url}/chat/completions"
        messages = []
        if req.system_prompt:
            messages.append({"role": "system", "content": req.system_prompt})
        messages.append({"role": "user", "content": req.user_prompt})
        body = {
            "model": req.model,
            "messages": messages,
            "temperature": req.temperature,
            "max_tokens": req.max_tokens,
        }

        last_error: Exception | None = None
        retry_after: float | None = None
        for attempt in range(self.max_retries + 1):
            if attempt:
                wait = retry_after if retry_after is not None else self._backoff(attempt - 1)
                self._sleep(wait)
                retry_after = None
            started = time.monotonic()
            with self._lock:
                self.transport_calls += 1
            try:
                resp = self._session.post(url, json=body, headers=self._headers(), timeout=self.timeout)
            except requests.RequestException as exc:
                last_error = TransportError(f"request failed: {exc}")
                continue
            elapsed_ms = (time.monotonic() - started) * 1000.0

            if resp.status_code in (401, 403):
                raise AuthError(f"backend rejected credentials (HTTP {resp.status_code})")
            if resp.status_code == 429:
                retry_after = _parse_retry_after(resp)
                last_error = RateLimited("backend rate limited the request", retry_after)
                continue
            if resp.status_code >= 500:
                last_error = TransportError(f"backend error HTTP {resp.status_code}")
                continue
            if resp.status_code != 200:
                raise TransportError(f"unexpected HTTP {resp.status_code}: {resp.text[:200]}")

            return _parse_chat_reply(resp, elapsed_ms)

        assert last_error is not None
        raise last_error


def _parse_retry_after(resp: requests.Response) -> float | None:
    raw = resp.headers.get("Retry-After")
    if raw is None:
        return None
    try:
        return max(0.0, float(raw))
    except ValueError:
        return None


def _parse_chat_reply(resp: requests.Response, elapsed_ms: float) -> OracleResponse:
    try:
        payload = resp.json()
    except ValueError as exc:
        raise MalformedBackendReply(f"response body is not JSON: {exc}") from exc
    try:
        text = payload["choices"][0]["message"]["content"]
    except (KeyError, IndexError, TypeError) as exc:
        raise MalformedBackendReply(f"missing choices[0].message.content: {exc}") from exc
    if not isinstance(text, str):
        raise MalformedBackendReply("completion content is not a string")
    usage = payload.get("usage") or {}
    return OracleResponse(
        text=text,
        prompt_tokens=int(usage.get("prompt_tokens", 0) or 0),
        completion_tokens=int(usage.get("completion_tokens", 0) or 0),
        latency_ms=elapsed_ms,
    )


class CachingOracle(Oracle):
    """Consults a response cache before delegating to the wrapped oracle.

    Hits are sound: the cache stores the canonical request next to each entry
    and a stored entry whose request differs from the query is ignored.
    """

    def __init__(self, inner: Oracle, cache):
        self.inner = inner
        self.cache = cache

    def complete(self, req: OracleRequest) -> OracleResponse:
        key = fingerprint(req)
        canonical = canonical_request(req)
        entry = self.cache.get(key, canonical)
        if entry is not None:
            return OracleResponse(
                text=entry.response_text,
                prompt_tokens=entry.prompt_tokens,
                completion_tokens=entry.completion_tokens,
                latency_ms=0.0,
                from_cache=True,
            )
        response = self.inner.complete(req)
        self.cache.put(key, canonical, response.text, response.prompt_tokens, response.completion_tokens)
        return response
