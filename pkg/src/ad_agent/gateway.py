"""Language-model access with token/cost accounting and record/replay backends.

Every agent talks to a :class:`Gateway`. The gateway forwards requests to a
backend (live HTTPS, replay from a transcript, recording wrapper, or a plain
callable) and appends one :class:`LedgerEntry` per call.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import threading
import time
from collections import defaultdict, deque
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path
from typing import Callable, Iterable, Protocol

import httpx

from ad_agent.errors import (
    BackendUnavailable,
    CorruptTranscript,
    EmptyResult,
    GatewayError,
    ReplayMiss,
    SearchUnavailable,
)

logger = logging.getLogger(__name__)

AGENTS = ("processor", "selector", "info_miner", "generator", "reviewer", "evaluator", "optimizer")
ROLES = ("system", "user", "assistant")
TOOLS = frozenset({"web_search"})

CHAT_MODEL = "gpt-4o"
REASONING_MODEL = "o4-mini"
SEARCH_MODEL = "gpt-4o-search-preview"

API_KEY_ENV = "AD_AGENT_API_KEY"
API_BASE_ENV = "AD_AGENT_API_BASE"
DEFAULT_API_BASE = "https://api.openai.com/v1"


def is_reasoning_model(model_id: str) -> bool:
    return model_id.startswith(("o1", "o3", "o4"))


@dataclass(frozen=True)
class LLMRequest:
    agent_name: str
    model_id: str
    messages: tuple[tuple[str, str], ...]
    tools_enabled: frozenset[str] = frozenset()
    temperature: float | None = 0.0

    def __post_init__(self):
        if self.agent_name not in AGENTS:
            raise ValueError(f"unknown agent {self.agent_name!r}")
        if not self.messages:
            raise ValueError("messages must be non-empty")
        object.__setattr__(self, "messages", tuple((r, c) for r, c in self.messages))
        for role, _ in self.messages:
            if role not in ROLES:
                raise ValueError(f"unknown role {role!r}")
        if self.messages[0][0] not in ("system", "user"):
            raise ValueError("first message must come from system or user")
        object.__setattr__(self, "tools_enabled", frozenset(self.tools_enabled))
        if not self.tools_enabled <= TOOLS:
            raise ValueError(f"unsupported tools {sorted(self.tools_enabled - TOOLS)}")
        if self.temperature is not None and self.temperature < 0:
            raise ValueError("temperature must be >= 0")

    def to_dict(self) -> dict:
        return {
            "agent_name": self.agent_name,
            "model_id": self.model_id,
            "messages": [{"role": r, "content": c} for r, c in self.messages],
            "tools_enabled": sorted(self.tools_enabled),
            "temperature": self.temperature,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LLMRequest":
        return cls(
            agent_name=d["agent_name"],
            model_id=d["model_id"],
            messages=tuple((m["role"], m["content"]) for m in d["messages"]),
            tools_enabled=frozenset(d.get("tools_enabled", ())),
            temperature=d.get("temperature"),
        )


def make_request(agent_name: str, model_id: str, system: str, user: str, tools: Iterable[str] = ()) -> LLMRequest:
    """Build a two-message request with the default sampling temperature for ``model_id``."""
    temperature = None if is_reasoning_model(model_id) else 0.0
    return LLMRequest(agent_name, model_id, (("system", system), ("user", user)), frozenset(tools), temperature)


@dataclass(frozen=True)
class LLMResponse:
    content: str
    input_tokens: int = 0
    output_tokens: int = 0
    latency: float = 0.0
    web_search_calls: int = 0

    def __post_init__(self):
        if self.input_tokens < 0 or self.output_tokens < 0:
            raise ValueError("token counts must be >= 0")
        if self.latency < 0 or self.web_search_calls < 0:
            raise ValueError("latency and web_search_calls must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)


def request_key(request: LLMRequest) -> str:
    """Stable hex digest over (agent, model, messages) with whitespace normalised."""
    canonical = {
        "agent_name": request.agent_name,
        "model_id": request.model_id,
        "messages": [{"content": " ".join(c.split()), "role": r} for r, c in request.messages],
    }
    blob = json.dumps(canonical, sort_keys=True, ensure_ascii=False, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


# ---------------------------------------------------------------------------
# pricing and ledger


@dataclass(frozen=True)
class PriceTable:
    """Per-token rates in US$ (the JSON file stores US$ per 1M tokens)."""

    rates: dict[str, tuple[float, float]]
    web_search_call_rate: float = 0.0

    def __post_init__(self):
        if self.web_search_call_rate < 0 or any(a < 0 or b < 0 for a, b in self.rates.values()):
            raise ValueError("rates must be >= 0")

    @classmethod
    def from_dict(cls, d: dict) -> "PriceTable":
        rates = {m: (r["input_rate"] / 1e6, r["output_rate"] / 1e6) for m, r in d["models"].items()}
        return cls(rates, float(d.get("web_search_call_rate", 0.0)))

    @classmethod
    def load(cls, path: str | os.PathLike | None = None) -> "PriceTable":
        if path is None:
            text = resources.files("ad_agent.data").joinpath("prices.json").read_text("utf-8")
        else:
            text = Path(path).read_text("utf-8")
        return cls.from_dict(json.loads(text))

    def cost(self, model_id: str, input_tokens: int, output_tokens: int, web_search_calls: int = 0) -> float:
        if model_id not in self.rates:
            if input_tokens or output_tokens:
                raise KeyError(f"no price configured for model {model_id!r}")
            in_rate = out_rate = 0.0
        else:
            in_rate, out_rate = self.rates[model_id]
        return input_tokens * in_rate + output_tokens * out_rate + web_search_calls * self.web_search_call_rate


@dataclass(frozen=True)
class LedgerEntry:
    agent_name: str
    model_id: str
    input_tokens: int
    output_tokens: int
    web_search_calls: int
    latency: float
    cost: float


@dataclass
class TokenLedger:
    session_id: str = ""
    _entries: list[LedgerEntry] = field(default_factory=list, repr=False)

    def __post_init__(self):
        self._lock = threading.Lock()

    def append(self, entry: LedgerEntry) -> None:
        with self._lock:
            self._entries.append(entry)

    @property
    def entries(self) -> tuple[LedgerEntry, ...]:
        return tuple(self._entries)

    def __len__(self):
        return len(self._entries)

    @property
    def input_tokens(self) -> int:
        return sum(e.input_tokens for e in self._entries)

    @property
    def output_tokens(self) -> int:
        return sum(e.output_tokens for e in self._entries)

    @property
    def web_search_calls(self) -> int:
        return sum(e.web_search_calls for e in self._entries)

    @property
    def cost(self) -> float:
        return sum(e.cost for e in self._entries)

    @property
    def latency(self) -> float:
        return sum(e.latency for e in self._entries)

    def by_agent(self) -> dict[str, dict[str, float]]:
        out: dict[str, dict[str, float]] = {}
        for e in self._entries:
            row = out.setdefault(e.agent_name, {"calls": 0, "input_tokens": 0, "output_tokens": 0, "cost": 0.0})
            row["calls"] += 1
            row["input_tokens"] += e.input_tokens
            row["output_tokens"] += e.output_tokens
            row["cost"] += e.cost
        return out

    def summary(self) -> dict:
        return {
            "session_id": self.session_id,
            "calls": len(self._entries),
            "input_tokens": self.input_tokens,
            "output_tokens": self.output_tokens,
            "web_search_calls": self.web_search_calls,
            "cost": self.cost,
        }


# ---------------------------------------------------------------------------
# backends


class Backend(Protocol):
    def send(self, request: LLMRequest) -> LLMResponse: ...


class CallableBackend:
    """Answers from a plain function ``request -> LLMResponse | str``."""

    def __init__(self, fn: Callable[[LLMRequest], LLMResponse | str]):
        self.fn = fn

    def send(self, request):
        t0 = time.perf_counter()
        out = self.fn(request)
        if isinstance(out, str):
            calls = 1 if "web_search" in request.tools_enabled else 0
            out = LLMResponse(out, latency=time.perf_counter() - t0, web_search_calls=calls)
        return out


class LiveBackend:
    """OpenAI-compatible chat-completions client.

    Web-search requests go to a search-capable model with ``web_search_options``;
    each such request is billed as one search call.
    """

    transient_status = {408, 429, 500, 502, 503, 504}

    def __init__(self, api_key: str | None = None, base_url: str | None = None, timeout: float = 120.0,
                 transport: httpx.BaseTransport | None = None):
        self.api_key = api_key if api_key is not None else os.environ.get(API_KEY_ENV, "")
        self.base_url = (base_url or os.environ.get(API_BASE_ENV) or DEFAULT_API_BASE).rstrip("/")
        self._client = httpx.Client(base_url=self.base_url, timeout=timeout, transport=transport)

    def _payload(self, request: LLMRequest) -> dict:
        payload = {"model": request.model_id, "messages": [{"role": r, "content": c} for r, c in request.messages]}
        if request.temperature is not None:
            payload["temperature"] = request.temperature
        if "web_search" in request.tools_enabled:
            payload["web_search_options"] = {}
            payload.pop("temperature", None)
        return payload

    def send(self, request):
        if not self.api_key:
            raise BackendUnavailable(f"{API_KEY_ENV} is not set")
        headers = {"Authorization": f"Bearer {self.api_key}"}
        last_error: Exception | None = None
        for attempt in range(2):
            t0 = time.perf_counter()
            try:
                resp = self._client.post("/chat/completions", json=self._payload(request), headers=headers)
            except httpx.TransportError as exc:
                last_error = exc
                logger.warning("transport failure (attempt %d): %s", attempt + 1, exc)
                continue
            latency = time.perf_counter() - t0
            if resp.status_code in self.transient_status:
                last_error = BackendUnavailable(f"HTTP {resp.status_code}")
                logger.warning("transient HTTP %d (attempt %d)", resp.status_code, attempt + 1)
                continue
            if resp.status_code >= 400:
                raise BackendUnavailable(f"HTTP {resp.status_code}: {resp.text[:200]}")
            try:
                body = resp.json()
                content = body["choices"][0]["message"]["content"] or ""
                usage = body.get("usage") or {}
            except (ValueError, KeyError, IndexError) as exc:
                raise BackendUnavailable(f"malformed response: {exc}") from exc
            return LLMResponse(
                content=content,
                input_tokens=int(usage.get("prompt_tokens", 0)),
                output_tokens=int(usage.get("completion_tokens", 0)),
                latency=latency,
                web_search_calls=1 if "web_search" in request.tools_enabled else 0,
            )
        raise BackendUnavailable(f"gave up after retry: {last_error}")


def _read_transcript(path: Path) -> list[dict]:
    records = []
    try:
        lines = path.read_text("utf-8").splitlines()
    except (OSError, UnicodeDecodeError) as exc:
        raise CorruptTranscript(f"{path}: {exc}") from exc
    for lineno, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            rec["key"], rec["response"]
            LLMResponse(**rec["response"])
        except (ValueError, KeyError, TypeError) as exc:
            raise CorruptTranscript(f"{path}:{lineno}: {exc}") from exc
        records.append(rec)
    return records


class ReplayBackend:
    """Serves recorded responses keyed by :func:`request_key`.

    Repeated identical requests consume successive recordings for that key in
    transcript order; asking more often than recorded is a :class:`ReplayMiss`.
    The recorded latency is reported as-is without sleeping.
    """

    def __init__(self, records: Iterable[dict]):
        self._queues: dict[str, deque[LLMResponse]] = defaultdict(deque)
        for rec in records:
            self._queues[rec["key"]].append(LLMResponse(**rec["response"]))
        self._lock = threading.Lock()

    @classmethod
    def from_transcript(cls, path: str | os.PathLike) -> "ReplayBackend":
        path = Path(path)
        if not path.exists():
            raise CorruptTranscript(f"transcript {path} does not exist")
        return cls(_read_transcript(path))

    def remaining(self) -> int:
        return sum(len(q) for q in self._queues.values())

    def send(self, request):
        key = request_key(request)
        with self._lock:
            queue = self._queues.get(key)
            if not queue:
                raise ReplayMiss(f"no recording for {request.agent_name}/{request.model_id} request {key[:12]}")
            return queue.popleft()


class RecordingBackend:
    """Forwards to ``inner`` and appends every exchange to a JSONL transcript."""

    def __init__(self, inner: Backend, path: str | os.PathLike):
        self.inner = inner
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()

    def send(self, request):
        response = self.inner.send(request)
        record = {"key": request_key(request), "request": request.to_dict(), "response": response.to_dict()}
        with self._lock, self.path.open("a", encoding="utf-8") as fh:
            fh.write(json.dumps(record, ensure_ascii=False) + "\n")
        return response


def record_replay_roundtrip(transcript_path: str | os.PathLike) -> ReplayBackend:
    return ReplayBackend.from_transcript(transcript_path)


# ---------------------------------------------------------------------------


class Gateway:
    """Routes agent requests to a backend and bills each call to the ledger."""

    def __init__(self, backend: Backend, prices: PriceTable | None = None, ledger: TokenLedger | None = None,
                 chat_model: str = CHAT_MODEL, reasoning_model: str = REASONING_MODEL,
                 search_model: str = SEARCH_MODEL):
        self.backend = backend
        self.prices = prices if prices is not None else PriceTable.load()
        self.ledger = ledger if ledger is not None else TokenLedger()
        self.chat_model = chat_model
        self.reasoning_model = reasoning_model
        self.search_model = search_model

    def with_ledger(self, ledger: TokenLedger) -> "Gateway":
        """Same backend and prices, separate accounting (one ledger per session)."""
        return Gateway(self.backend, self.prices, ledger, self.chat_model, self.reasoning_model, self.search_model)

    def complete(self, request: LLMRequest) -> LLMResponse:
        response = self.backend.send(request)
        cost = self.prices.cost(request.model_id, response.input_tokens, response.output_tokens,
                                response.web_search_calls)
        self.ledger.append(LedgerEntry(request.agent_name, request.model_id, response.input_tokens,
                                       response.output_tokens, response.web_search_calls, response.latency, cost))
        return response

    def chat(self, agent_name: str, system: str, user: str, model_id: str | None = None) -> str:
        return self.complete(make_request(agent_name, model_id or self.chat_model, system, user)).content

    def web_search_summarize(self, query: str, instructions: str = "") -> tuple[str, float]:
        system = instructions or "Search the web and summarise the documentation you find."
        request = make_request("info_miner", self.search_model, system, query, tools=("web_search",))
        try:
            response = self.complete(request)
        except BackendUnavailable as exc:
            raise SearchUnavailable(str(exc)) from exc
        if not response.content.strip():
            raise EmptyResult(f"web search returned nothing for {query!r}")
        return response.content, response.latency


__all__ = [
    "AGENTS", "Backend", "BackendUnavailable", "CallableBackend", "CHAT_MODEL", "Gateway", "GatewayError",
    "LedgerEntry", "LiveBackend", "LLMRequest", "LLMResponse", "PriceTable", "REASONING_MODEL", "RecordingBackend",
    "ReplayBackend", "ReplayMiss", "SEARCH_MODEL", "TokenLedger", "make_request", "record_replay_roundtrip",
    "request_key",
]
