"""Chat-completion gateway with a live OpenAI-compatible client and a scripted replay provider.

Every agent role in the runtime talks to an LLM through `Provider.complete`.
Two providers are shipped:

* `OpenAICompatProvider` — speaks the OpenAI chat-completions wire format over
  HTTPS with bounded retries and a per-request timeout.
* `ScriptedProvider` — replays canned responses from a script file, giving
  fully deterministic offline runs. Entries match on a digest of the rendered
  prompt (the first message), or on a (role, per-role index) fallback.

Token usage is reported on every result; the scripted provider estimates it
with `estimate_tokens` so offline metrics are deterministic.
"""

from __future__ import annotations

import hashlib
import json
import os
import threading
import time
from collections import defaultdict, deque
from dataclasses import dataclass, field
from pathlib import Path

import httpx

AGENT_ROLES = (
    "manager",
    "tool_developer",
    "executor",
    "integrator",
    "aggregator",
    "merger",
)

MESSAGE_ROLES = ("system", "user", "assistant")

DEFAULT_TEMPERATURE = 0.7


class GatewayError(Exception):
    """Base class for provider failures."""


class TransportError(GatewayError):
    """Network or HTTP failure that survived the retry budget."""


class ConfigurationError(GatewayError):
    """Provider misconfiguration, e.g. missing credentials."""


class ScriptExhaustedError(GatewayError):
    """The scripted provider had no entry matching an exchange.

    This is the test-failure signal for replay runs: either the script is
    incomplete or the system diverged from the scripted run.
    """


def estimate_tokens(text: str) -> int:
    """Deterministic token estimate: ceil(len(text) / 4)."""
    return (len(text) + 3) // 4


def prompt_digest(text: str) -> str:
    """Digest used to key scripted responses to a rendered prompt."""
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class ChatMessage:
    role: str
    text: str

    def __post_init__(self) -> None:
        if self.role not in MESSAGE_ROLES:
            raise ValueError(f"unknown message role: {self.role!r}")


@dataclass
class ChatExchange:
    """One request to a provider. The first message carries the rendered prompt."""

    messages: list[ChatMessage]
    agent_role: str
    model_id: str = ""
    temperature: float = DEFAULT_TEMPERATURE

    def __post_init__(self) -> None:
        if not self.messages:
            raise ValueError("exchange requires at least one message")
        if self.agent_role not in AGENT_ROLES:
            raise ValueError(f"unknown agent role: {self.agent_role!r}")
        if not 0.0 <= self.temperature <= 2.0:
            raise ValueError(f"temperature out of range: {self.temperature}")

    @property
    def rendered_prompt(self) -> str:
        return self.messages[0].text

    def prompt_chars(self) -> int:
        return sum(len(m.text) for m in self.messages)


@dataclass(frozen=True)
class CompletionResult:
    text: str
    prompt_tokens: int
    completion_tokens: int
    provider_id: str

    def __post_init__(self) -> None:
        if self.prompt_tokens < 0 or self.completion_tokens < 0:
            raise ValueError("token counts must be nonnegative")


@dataclass(frozen=True)
class UsageTotals:
    """Associative, commutative usage counter; worker-local totals merge at the barrier."""

    calls: int = 0
    prompt_tokens: int = 0
    completion_tokens: int = 0

    def __add__(self, other: "UsageTotals") -> "UsageTotals":
        return UsageTotals(
            calls=self.calls + other.calls,
            prompt_tokens=self.prompt_tokens + other.prompt_tokens,
            completion_tokens=self.completion_tokens + other.completion_tokens,
        )

    @classmethod
    def of(cls, result: CompletionResult) -> "UsageTotals":
        return cls(
            calls=1,
            prompt_tokens=result.prompt_tokens,
            completion_tokens=result.completion_tokens,
        )


class Provider:
    """Interface shared by both providers."""

    provider_id = "abstract"

    def complete(self, exchange: ChatExchange) -> CompletionResult:
        raise NotImplementedError


# ---------------------------------------------------------------------------
# Scripted provider
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ScriptEntry:
    """One canned response.

    Exactly one match key is set: `prompt_sha256` (digest of the rendered
    prompt) or the (`role`, `index`) pair. Entries sharing a digest form a
    FIFO consumed in call order, which keeps multi-turn loops (whose first
    message never changes) deterministic.
    """

    response_text: str
    prompt_sha256: str | None = None
    role: str | None = None
    index: int | None = None

    def __post_init__(self) -> None:
        by_digest = self.prompt_sha256 is not None
        by_sequence = self.role is not None or self.index is not None
        if by_digest == by_sequence:
            raise ValueError("entry must set prompt_sha256 or (role, index), not both")
        if by_sequence:
            if self.role not in AGENT_ROLES:
                raise ValueError(f"unknown script role: {self.role!r}")
            if self.index is None or self.index < 0:
                raise ValueError("sequence entry requires a nonnegative index")

    @classmethod
    def from_dict(cls, raw: dict) -> "ScriptEntry":
        if not isinstance(raw, dict) or "response_text" not in raw:
            raise ValueError("script entry must be an object with response_text")
        return cls(
            response_text=str(raw["response_text"]),
            prompt_sha256=raw.get("prompt_sha256"),
            role=raw.get("role"),
            index=raw.get("index"),
        )


def load_script(path: str | Path) -> list[ScriptEntry]:
    """Load a script file: a JSON array of entry records."""
    raw = json.loads(Path(path).read_text(encoding="utf-8"))
    if not isinstance(raw, list):
        raise ValueError("script file must contain a JSON array")
    return [ScriptEntry.from_dict(item) for item in raw]


class ScriptedProvider(Provider):
    """Deterministic provider replaying `ScriptEntry` records.

    Digest entries are consumed per-digest in file order, so repeated calls
    with the same rendered prompt (e.g. an executor loop) walk the queue in a
    scheduling-independent order. Sequence entries are a development fallback
    keyed by (role, per-role call index).
    """

    provider_id = "scripted"

    def __init__(self, entries: list[ScriptEntry] | str | Path):
        if isinstance(entries, (str, Path)):
            entries = load_script(entries)
        self._digest_queues: dict[str, deque[ScriptEntry]] = defaultdict(deque)
        self._sequence_entries: dict[tuple[str, int], ScriptEntry] = {}
        self._role_counters: dict[str, int] = defaultdict(int)
        self._lock = threading.Lock()
        for entry in entries:
            if entry.prompt_sha256 is not None:
                self._digest_queues[entry.prompt_sha256].append(entry)
            else:
                key = (entry.role, entry.index)
                if key in self._sequence_entries:
                    raise ValueError(f"duplicate script key {key}")
                self._sequence_entries[key] = entry

    def complete(self, exchange: ChatExchange) -> CompletionResult:
        digest = prompt_digest(exchange.rendered_prompt)
        with self._lock:
            queue = self._digest_queues.get(digest)
            if queue:
                entry = queue.popleft()
            else:
                role = exchange.agent_role
                index = self._role_counters[role]
                entry = self._sequence_entries.pop((role, index), None)
                if entry is None:
                    raise ScriptExhaustedError(
                        f"no script entry for role={role} seq={index} "
                        f"digest={digest[:12]}…"
                    )
                self._role_counters[role] = index + 1
        return CompletionResult(
            text=entry.response_text,
            prompt_tokens=sum(estimate_tokens(m.text) for m in exchange.messages),
            completion_tokens=estimate_tokens(entry.response_text),
            provider_id=self.provider_id,
        )


# ---------------------------------------------------------------------------
# Live provider
# ---------------------------------------------------------------------------


@dataclass
class OpenAICompatProvider(Provider):
    """Client for any endpoint speaking the OpenAI chat-completions format.

    Credentials are read from the environment variable named in the config;
    config files never carry secrets. Transient failures (network errors,
    429, 5xx) are retried with exponential backoff.
    """

    endpoint: str
    model_id: str
    credential_env: str = "OPENAI_API_KEY"
    role_models: dict[str, str] = field(default_factory=dict)
    timeout: float = 120.0
    max_attempts: int = 3
    backoff: float = 1.0

    provider_id = "openai-compat"

    def _resolve_model(self, exchange: ChatExchange) -> str:
        if exchange.model_id:
            return exchange.model_id
        return self.role_models.get(exchange.agent_role, self.model_id)

    def complete(self, exchange: ChatExchange) -> CompletionResult:
        api_key = os.environ.get(self.credential_env, "").strip()
        if not api_key:
            raise ConfigurationError(
                f"missing credentials: environment variable {self.credential_env} is not set"
            )
        body = {
            "model": self._resolve_model(exchange),
            "messages": [{"role": m.role, "content": m.text} for m in exchange.messages],
            "temperature": exchange.temperature,
        }
        url = self.endpoint.rstrip("/") + "/chat/completions"
        headers = {"Authorization": f"Bearer {api_key}"}
        last_error: Exception | None = None
        for attempt in range(self.max_attempts):
            try:
                response = httpx.post(url, json=body, headers=headers, timeout=self.timeout)
                if response.status_code in (429,) or response.status_code >= 500:
                    raise TransportError(f"HTTP {response.status_code}: {response.text[:200]}")
                response.raise_for_status()
                return self._parse(response.json(), exchange)
            except (httpx.TransportError, httpx.TimeoutException, TransportError) as exc:
                last_error = exc
                if attempt + 1 < self.max_attempts:
                    time.sleep(self.backoff * (2**attempt))
            except httpx.HTTPStatusError as exc:
                raise TransportError(f"request rejected: {exc}") from exc
        raise TransportError(f"request failed after {self.max_attempts} attempts: {last_error}")

    def _parse(self, payload: dict, exchange: ChatExchange) -> CompletionResult:
        try:
            text = payload["choices"][0]["message"]["content"] or ""
        except (KeyError, IndexError, TypeError) as exc:
            raise TransportError(f"malformed completion payload: {exc}") from exc
        usage = payload.get("usage") or {}
        prompt_tokens = usage.get("prompt_tokens")
        completion_tokens = usage.get("completion_tokens")
        if prompt_tokens is None:
            prompt_tokens = sum(estimate_tokens(m.text) for m in exchange.messages)
        if completion_tokens is None:
            completion_tokens = estimate_tokens(text)
        return CompletionResult(
            text=text,
            prompt_tokens=int(prompt_tokens),
            completion_tokens=int(completion_tokens),
            provider_id=self.provider_id,
        )
