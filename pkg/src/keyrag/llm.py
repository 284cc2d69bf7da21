"""Chat-completion backends: a live OpenAI-style HTTP client and a scripted mock.

Both support plain generation and a binary True/False decision. The decision
prefers a one-token log-probability probe (argmax over the two options) and
falls back to generating text and scanning it for the first "true"/"false"
word when the backend hides probabilities.
"""
from __future__ import annotations

import json
import math
import re
import threading
import time
from dataclasses import dataclass

import requests


class LlmError(Exception):
    """Base class for backend failures."""


class TransportError(LlmError):
    """Network-level failure (connection refused, timeout) after retries."""


class BackendError(LlmError):
    """Endpoint returned an error status or an unparseable body."""

    def __init__(self, message: str, status: int | None = None):
        super().__init__(message)
        self.status = status


class ScriptError(LlmError):
    """Mock script exhausted or no entry matches the prompt."""


@dataclass(frozen=True)
class ChatMessage:
    role: str
    content: str

    def __post_init__(self) -> None:
        if self.role not in ("system", "user"):
            raise ValueError(f"role must be 'system' or 'user', got {self.role!r}")
        if not self.content:
            raise ValueError("message content must be non-empty")


@dataclass(frozen=True)
class GenParams:
    max_tokens: int
    temperature: float = 0.0

    def __post_init__(self) -> None:
        if self.max_tokens < 1:
            raise ValueError(f"max_tokens must be positive, got {self.max_tokens}")
        if self.temperature < 0:
            raise ValueError(f"temperature must be >= 0, got {self.temperature}")


@dataclass(frozen=True)
class BinaryVerdict:
    choice: bool
    p_true: float | None
    p_false: float | None
    method: str  # "logprob" or "text-fallback"
    flagged: bool = False


class LlmBackend:
    """Interface shared by the live client and the mock."""

    def complete(self, messages: list[ChatMessage], params: GenParams) -> str:
        raise NotImplementedError

    def choice_probs(self, messages: list[ChatMessage]) -> tuple[float, float] | None:
        """(p_true, p_false) from a probability probe, or None if unsupported."""
        raise NotImplementedError


FORCED_OPTIONS = ("True", "False")


def forced_choice(
    backend: LlmBackend,
    messages: list[ChatMessage],
    options: tuple[str, str] = FORCED_OPTIONS,
    params: GenParams | None = None,
) -> BinaryVerdict:
    """Binary decision between "True" and "False".

    Probability probe first: the option with the higher probability wins, ties
    going to False. Without probabilities, generate up to params.max_tokens and
    scan the text; a text that contains neither word yields a flagged False.
    """
    if tuple(options) != FORCED_OPTIONS:
        raise ValueError(f"options are fixed to {FORCED_OPTIONS}")
    if not messages:
        raise ValueError("messages must not be empty")
    probs = backend.choice_probs(messages)
    if probs is not None:
        p_true, p_false = probs
        return BinaryVerdict(
            choice=p_true > p_false, p_true=p_true, p_false=p_false, method="logprob"
        )
    text = backend.complete(messages, params or GenParams(max_tokens=30))
    return verdict_from_text(text)


def verdict_from_text(text: str) -> BinaryVerdict:
    """Map the first alphabetic "true"/"false" word; neither present → flagged False."""
    for word in re.findall(r"[A-Za-z]+", text):
        lowered = word.lower()
        if lowered == "true":
            return BinaryVerdict(True, None, None, "text-fallback")
        if lowered == "false":
            return BinaryVerdict(False, None, None, "text-fallback")
    return BinaryVerdict(False, None, None, "text-fallback", flagged=True)


def _user_text(messages: list[ChatMessage]) -> str:
    for msg in reversed(messages):
        if msg.role == "user":
            return msg.content
    return ""


@dataclass
class ScriptEntry:
    """One canned exchange: matched by substring against the rendered user message."""

    match: str
    response: str = ""
    p_true: float | None = None
    p_false: float | None = None

    @property
    def has_probs(self) -> bool:
        return self.p_true is not None or self.p_false is not None


class MockBackend(LlmBackend):
    """Deterministic scripted backend for tests and offline runs.

    Each call consumes the first unconsumed entry whose match string occurs in
    the rendered user message. Entries carrying p_true/p_false serve the
    probability probe; plain entries serve text generation.
    """

    def __init__(self, entries: list[ScriptEntry]):
        self._entries = list(entries)
        self._consumed = [False] * len(self._entries)
        self._lock = threading.Lock()
        self.n_calls = 0
        self.calls: list[str] = []

    @classmethod
    def from_script_file(cls, path) -> "MockBackend":
        entries = []
        with open(path, encoding="utf-8") as f:
            for line_no, line in enumerate(f, 1):
                if not line.strip():
                    continue
                try:
                    obj = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise ScriptError(f"script line {line_no}: invalid JSON ({exc.msg})") from exc
                if "match" not in obj:
                    raise ScriptError(f"script line {line_no}: missing 'match'")
                entries.append(
                    ScriptEntry(
                        match=obj["match"],
                        response=obj.get("response", ""),
                        p_true=obj.get("p_true"),
                        p_false=obj.get("p_false"),
                    )
                )
        return cls(entries)

    def _find(self, prompt: str) -> int | None:
        for i, entry in enumerate(self._entries):
            if not self._consumed[i] and entry.match in prompt:
                return i
        return None

    def _no_match_error(self, prompt: str) -> ScriptError:
        if all(self._consumed):
            return ScriptError(f"mock script exhausted; prompt was: {prompt[:80]!r}")
        return ScriptError(f"no script entry matches prompt: {prompt[:80]!r}")

    def complete(self, messages: list[ChatMessage], params: GenParams) -> str:
        if not messages:
            raise ValueError("messages must not be empty")
        prompt = _user_text(messages)
        with self._lock:
            i = self._find(prompt)
            if i is None:
                raise self._no_match_error(prompt)
            self._consumed[i] = True
            self.n_calls += 1
            self.calls.append(prompt)
            return self._entries[i].response

    def choice_probs(self, messages: list[ChatMessage]) -> tuple[float, float] | None:
        prompt = _user_text(messages)
        with self._lock:
            i = self._find(prompt)
            if i is None:
                raise self._no_match_error(prompt)
            entry = self._entries[i]
            if not entry.has_probs:
                return None  # left unconsumed for the text-fallback complete()
            self._consumed[i] = True
            self.n_calls += 1
            self.calls.append(prompt)
            return (entry.p_true or 0.0, entry.p_false or 0.0)


class HttpBackend(LlmBackend):
    """OpenAI-compatible chat-completions client.

    Retries (at most max_retries, exponential backoff) apply only to transport
    failures, timeouts, and 5xx responses; a 2xx response is never retried.
    In-flight requests are bounded by a semaphore so shared backends stay polite
    under concurrent pipelines.
    """

    def __init__(
        self,
        endpoint: str,
        model: str,
        api_key: str | None = None,
        *,
        supports_logprobs: bool = True,
        top_logprobs: int = 5,
        max_retries: int = 3,
        backoff: float = 0.5,
        timeout: float = 60.0,
        max_in_flight: int = 4,
        session: requests.Session | None = None,
    ):
        trimmed = endpoint.rstrip("/")
        if not trimmed.endswith("/chat/completions"):
            trimmed += "/chat/completions"
        self.url = trimmed
        self.model = model
        self.api_key = api_key
        self.supports_logprobs = supports_logprobs
        self.top_logprobs = max(5, top_logprobs)
        self.max_retries = max_retries
        self.backoff = backoff
        self.timeout = timeout
        self._sem = threading.Semaphore(max_in_flight)
        self._session = session or requests.Session()

    def _headers(self) -> dict[str, str]:
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        return headers

    def _post(self, payload: dict) -> dict:
        last_err: LlmError | None = None
        for attempt in range(self.max_retries + 1):
            if attempt:
                time.sleep(self.backoff * (2 ** (attempt - 1)))
            try:
                with self._sem:
                    resp = self._session.post(
                        self.url, json=payload, headers=self._headers(), timeout=self.timeout
                    )
            except (requests.ConnectionError, requests.Timeout) as exc:
                last_err = TransportError(f"request to {self.url} failed: {exc}")
                continue
            if 200 <= resp.status_code < 300:
                try:
                    return resp.json()
                except ValueError as exc:
                    raise BackendError(
                        f"non-JSON 2xx response: {resp.text[:200]!r}", status=resp.status_code
                    ) from exc
            if resp.status_code >= 500:
                last_err = BackendError(
                    f"HTTP {resp.status_code}: {resp.text[:200]}", status=resp.status_code
                )
                continue
            raise BackendError(
                f"HTTP {resp.status_code}: {resp.text[:200]}", status=resp.status_code
            )
        assert last_err is not None
        raise last_err

    def _payload(self, messages: list[ChatMessage]) -> dict:
        return {
            "model": self.model,
            "messages": [{"role": m.role, "content": m.content} for m in messages],
        }

    def complete(self, messages: list[ChatMessage], params: GenParams) -> str:
        if not messages:
            raise ValueError("messages must not be empty")
        payload = self._payload(messages)
        payload["max_tokens"] = params.max_tokens
        payload["temperature"] = params.temperature
        data = self._post(payload)
        try:
            text = data["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError) as exc:
            raise BackendError(f"malformed completion response: {data!r:.200}") from exc
        if not isinstance(text, str):
            raise BackendError("completion response has no text content")
        return text.rstrip()

    def choice_probs(self, messages: list[ChatMessage]) -> tuple[float, float] | None:
        if not self.supports_logprobs:
            return None
        payload = self._payload(messages)
        payload["max_tokens"] = 1
        payload["temperature"] = 0.0
        payload["logprobs"] = True
        payload["top_logprobs"] = self.top_logprobs
        data = self._post(payload)
        try:
            alts = data["choices"][0]["logprobs"]["content"][0]["top_logprobs"]
        except (KeyError, IndexError, TypeError):
            return None
        if not isinstance(alts, list):
            return None
        p_true = 0.0
        p_false = 0.0
        found = False
        for alt in alts:
            token = str(alt.get("token", ""))
            logprob = alt.get("logprob")
            if logprob is None:
                continue
            word = token.lstrip().lower()
            if word == "true":
                p_true += math.exp(logprob)
                found = True
            elif word == "false":
                p_false += math.exp(logprob)
                found = True
        if not found:
            return None  # neither option among the alternatives; use the text path
        return (p_true, p_false)
