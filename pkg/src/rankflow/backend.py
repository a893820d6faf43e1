"""Chat-completion backends.

Every backend exposes ``complete(messages, params) -> Exchange``. The live
:class:`HttpBackend` talks the common JSON chat-completion wire format; the
offline ones (:class:`ScriptedBackend`, :class:`FunctionBackend`,
:class:`OracleBackend`) make the whole pipeline runnable without a network.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import random
import threading
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Mapping, Protocol, Sequence

import httpx

from .errors import (
    BackendRequestError,
    BackendUnavailableError,
    ContextOverflowError,
    EmptyReplyError,
    InvalidInputError,
    ScriptMissError,
)

logger = logging.getLogger(__name__)

API_KEY_ENV = "RANKFLOW_API_KEY"
ENDPOINT_ENV = "RANKFLOW_ENDPOINT"
DEFAULT_ENDPOINT = "https://api.openai.com/v1/chat/completions"

CHARS_PER_TOKEN = 4


@dataclass(frozen=True)
class ChatMessage:
    speaker_role: str
    text: str

    def __post_init__(self) -> None:
        if self.speaker_role not in ("system", "user", "assistant"):
            raise InvalidInputError(f"invalid speaker role {self.speaker_role!r}")
        if not self.text and self.speaker_role != "assistant":
            raise InvalidInputError(f"empty {self.speaker_role} message")

    def to_wire(self) -> dict[str, str]:
        return {"role": self.speaker_role, "content": self.text}


@dataclass(frozen=True)
class CompletionParams:
    temperature: float = 0.0
    max_output_tokens: int = 1024
    model_name: str = "gpt-4-0613"

    def __post_init__(self) -> None:
        if not 0.0 <= self.temperature <= 2.0:
            raise InvalidInputError("temperature must lie in [0, 2]")
        if self.max_output_tokens < 1:
            raise InvalidInputError("max_output_tokens must be positive")


@dataclass(frozen=True)
class Exchange:
    request_messages: tuple[ChatMessage, ...]
    reply_text: str
    input_tokens: int
    output_tokens: int
    latency_ms: int
    backend_name: str
    # attribution, filled in by TaggedBackend
    query_id: str | None = None
    role: str | None = None

    def __post_init__(self) -> None:
        if self.input_tokens < 0 or self.output_tokens < 0 or self.latency_ms < 0:
            raise InvalidInputError("token counts and latency must be nonnegative")

    def to_dict(self) -> dict:
        data = asdict(self)
        data["request_messages"] = [m.to_wire() for m in self.request_messages]
        return data

    @classmethod
    def from_dict(cls, data: Mapping) -> "Exchange":
        messages = tuple(ChatMessage(m["role"], m["content"]) for m in data.get("request_messages", ()))
        return cls(
            request_messages=messages,
            reply_text=data.get("reply_text", ""),
            input_tokens=int(data["input_tokens"]),
            output_tokens=int(data["output_tokens"]),
            latency_ms=int(data.get("latency_ms", 0)),
            backend_name=data.get("backend_name", ""),
            query_id=data.get("query_id"),
            role=data.get("role"),
        )


class Backend(Protocol):
    name: str

    def complete(self, messages: Sequence[ChatMessage], params: CompletionParams) -> Exchange: ...


def as_messages(pairs: Iterable[tuple[str, str]]) -> list[ChatMessage]:
    return [ChatMessage(role, text) for role, text in pairs]


def message_digest(messages: Sequence[ChatMessage]) -> str:
    """sha256 over the canonical JSON of the role/content pairs."""
    canonical = json.dumps([m.to_wire() for m in messages], ensure_ascii=False, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def estimate_tokens(text: str) -> int:
    """Rough token count at four characters per token, rounded up.

    Only used when a provider does not report usage.
    """
    return (len(text) + CHARS_PER_TOKEN - 1) // CHARS_PER_TOKEN


def _estimate_input(messages: Sequence[ChatMessage]) -> int:
    return sum(estimate_tokens(m.text) for m in messages)


def _check_messages(messages: Sequence[ChatMessage]) -> None:
    if not messages:
        raise InvalidInputError("messages must be non-empty")
    if messages[0].speaker_role not in ("system", "user"):
        raise InvalidInputError("first message must be a system or user message")


class FunctionBackend:
    """Reply computed by a plain function of the messages."""

    def __init__(self, fn: Callable[[Sequence[ChatMessage]], str], name: str = "function"):
        self.fn = fn
        self.name = name

    def complete(self, messages: Sequence[ChatMessage], params: CompletionParams) -> Exchange:
        _check_messages(messages)
        reply = self.fn(messages)
        if not reply or not reply.strip():
            raise EmptyReplyError(f"{self.name}: empty reply")
        return Exchange(tuple(messages), reply, _estimate_input(messages), estimate_tokens(reply), 0, self.name)


class ScriptedBackend:
    """Replays canned replies keyed by :func:`message_digest`.

    Scripts live in a directory of ``<digest>.json`` files holding
    ``{"reply": ..., "input_tokens": ..., "output_tokens": ...}``; token
    fields are optional and estimated when absent. A ``fallback`` backend,
    when given, answers digests with no script.
    """

    def __init__(
        self,
        entries: Mapping[str, Mapping | str] | None = None,
        directory: str | Path | None = None,
        fallback: Backend | None = None,
        name: str = "scripted",
    ):
        self.name = name
        self.fallback = fallback
        self._entries: dict[str, dict] = {}
        if directory is not None:
            for path in sorted(Path(directory).glob("*.json")):
                self._entries[path.stem] = json.loads(path.read_text(encoding="utf-8"))
        for digest, value in (entries or {}).items():
            self._entries[digest] = {"reply": value} if isinstance(value, str) else dict(value)

    def __len__(self) -> int:
        return len(self._entries)

    def complete(self, messages: Sequence[ChatMessage], params: CompletionParams) -> Exchange:
        _check_messages(messages)
        digest = message_digest(messages)
        entry = self._entries.get(digest)
        if entry is None:
            if self.fallback is None:
                raise ScriptMissError(digest)
            return self.fallback.complete(messages, params)
        reply = entry["reply"]
        if not reply or not reply.strip():
            raise EmptyReplyError(f"{self.name}: scripted reply for {digest} is empty")
        return Exchange(
            request_messages=tuple(messages),
            reply_text=reply,
            input_tokens=int(entry.get("input_tokens", _estimate_input(messages))),
            output_tokens=int(entry.get("output_tokens", estimate_tokens(reply))),
            latency_ms=int(entry.get("latency_ms", 0)),
            backend_name=self.name,
        )


class RecordingBackend:
    """Passes calls through and writes each reply as a script file."""

    def __init__(self, inner: Backend, directory: str | Path):
        self.inner = inner
        self.name = inner.name
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)

    def complete(self, messages: Sequence[ChatMessage], params: CompletionParams) -> Exchange:
        exchange = self.inner.complete(messages, params)
        entry = {
            "reply": exchange.reply_text,
            "input_tokens": exchange.input_tokens,
            "output_tokens": exchange.output_tokens,
        }
        path = self.directory / f"{message_digest(messages)}.json"
        path.write_text(json.dumps(entry, ensure_ascii=False, indent=1, sort_keys=True) + "\n", encoding="utf-8")
        return exchange


class OracleBackend:
    """Answers reranker prompts by sorting on planted relevance.

    ``relevance`` is either a mapping from passage text to grade or a
    function ``(query_text, passage_text) -> grade``. The window is recovered
    by parsing the rendered reranker prompt; passages are ranked by grade,
    descending, ties kept in their shown order. Prompts that are not reranker
    prompts go to ``fallback``.
    """

    def __init__(
        self,
        relevance: Mapping[str, float] | Callable[[str, str], float],
        fallback: Backend | None = None,
        name: str = "oracle",
    ):
        if callable(relevance):
            self._grade = relevance
        else:
            table = dict(relevance)
            self._grade = lambda _query, text: table.get(text, 0)
        self.fallback = fallback
        self.name = name

    @classmethod
    def from_qrels(cls, qrels, queries: Mapping[str, str], corpus: Mapping[str, str], **kwargs) -> "OracleBackend":
        """Grades looked up through original query text and passage text.

        The prompt's query is matched to the query whose original text it
        contains (longest match wins), so composed queries that embed the
        original still resolve.
        """
        by_text: dict[str, list[str]] = {}
        for doc_id, text in corpus.items():
            by_text.setdefault(text, []).append(doc_id)
        ordered = sorted(queries.items(), key=lambda item: -len(item[1]))

        def grade(query_text: str, passage_text: str) -> float:
            for qid, original in ordered:
                if original in query_text:
                    return max((qrels.grade(qid, d) for d in by_text.get(passage_text, ())), default=0)
            return 0

        return cls(grade, **kwargs)

    def rank_reply(self, query_text: str, passages: Sequence[str]) -> str:
        grades = [self._grade(query_text, text) for text in passages]
        order = sorted(range(len(passages)), key=lambda i: (-grades[i], i))
        return " > ".join(f"[{i + 1}]" for i in order)

    def complete(self, messages: Sequence[ChatMessage], params: CompletionParams) -> Exchange:
        from .rerank import extract_window

        _check_messages(messages)
        window = extract_window(messages)
        if window is None:
            if self.fallback is None:
                raise BackendRequestError(f"{self.name}: not a reranker prompt and no fallback configured")
            return self.fallback.complete(messages, params)
        query_text, passages = window
        reply = self.rank_reply(query_text, passages)
        return Exchange(tuple(messages), reply, _estimate_input(messages), estimate_tokens(reply), 0, self.name)


def serialize_request(messages: Sequence[ChatMessage], params: CompletionParams) -> dict:
    return {
        "model": params.model_name,
        "messages": [m.to_wire() for m in messages],
        "temperature": params.temperature,
        "max_tokens": params.max_output_tokens,
    }


def _is_context_overflow(response: httpx.Response) -> tuple[bool, str]:
    try:
        error = response.json().get("error") or {}
    except (ValueError, AttributeError):
        return False, response.text[:200]
    if not isinstance(error, dict):
        return False, str(error)[:200]
    message = str(error.get("message", ""))
    code = str(error.get("code", ""))
    overflow = code == "context_length_exceeded" or "maximum context length" in message.lower()
    return overflow, message


class HttpBackend:
    """Live chat-completion client with retries and bounded concurrency.

    Up to ``max_attempts`` attempts; transport errors and HTTP 429 are
    retried with capped exponential backoff and jitter, everything else
    fails fast. ``max_in_flight`` bounds concurrent requests across threads;
    backoff sleeps happen outside the admission slot.
    """

    def __init__(
        self,
        endpoint: str | None = None,
        api_key: str | None = None,
        max_in_flight: int = 8,
        max_attempts: int = 5,
        backoff_base: float = 1.0,
        backoff_cap: float = 30.0,
        timeout: float = 120.0,
        transport: httpx.BaseTransport | None = None,
        sleep: Callable[[float], None] = time.sleep,
        rng: random.Random | None = None,
        name: str = "http",
    ):
        self.endpoint = endpoint or os.environ.get(ENDPOINT_ENV) or DEFAULT_ENDPOINT
        self.api_key = api_key if api_key is not None else os.environ.get(API_KEY_ENV)
        if max_in_flight < 1 or max_attempts < 1:
            raise InvalidInputError("max_in_flight and max_attempts must be >= 1")
        self.max_attempts = max_attempts
        self.backoff_base = backoff_base
        self.backoff_cap = backoff_cap
        self.name = name
        self._sleep = sleep
        self._rng = rng or random.Random()
        self._rng_lock = threading.Lock()
        self._slots = threading.BoundedSemaphore(max_in_flight)
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        self._client = httpx.Client(headers=headers, timeout=timeout, transport=transport)

    def close(self) -> None:
        self._client.close()

    def _backoff(self, attempt: int, retry_after: str | None) -> float:
        delay = min(self.backoff_cap, self.backoff_base * 2 ** (attempt - 1))
        with self._rng_lock:
            delay *= 0.5 + 0.5 * self._rng.random()
        if retry_after:
            try:
                delay = max(delay, min(self.backoff_cap, float(retry_after)))
            except ValueError:
                pass
        return delay

    def complete(self, messages: Sequence[ChatMessage], params: CompletionParams) -> Exchange:
        _check_messages(messages)
        payload = serialize_request(messages, params)
        started = time.perf_counter()
        last_error = ""
        for attempt in range(1, self.max_attempts + 1):
            retry_after = None
            try:
                with self._slots:
                    response = self._client.post(self.endpoint, json=payload)
            except httpx.TransportError as exc:
                last_error = f"transport error: {exc!r}"
            else:
                if response.status_code == 429:
                    last_error = "rate limited (429)"
                    retry_after = response.headers.get("retry-after")
                elif response.status_code >= 400:
                    overflow, detail = _is_context_overflow(response)
                    if overflow:
                        raise ContextOverflowError(sum(len(m.text) for m in messages), detail)
                    raise BackendRequestError(f"{self.name}: HTTP {response.status_code}: {detail}")
                else:
                    exchange = self._parse(messages, response, started)
                    if attempt > 1:
                        logger.info("%s: request succeeded after %d retries", self.name, attempt - 1)
                    return exchange
            if attempt < self.max_attempts:
                delay = self._backoff(attempt, retry_after)
                logger.warning("%s: %s; retry %d/%d in %.2fs", self.name, last_error,
                               attempt, self.max_attempts - 1, delay)
                self._sleep(delay)
        raise BackendUnavailableError(f"{self.name}: giving up after {self.max_attempts} attempts ({last_error})")

    def _parse(self, messages: Sequence[ChatMessage], response: httpx.Response, started: float) -> Exchange:
        try:
            body = response.json()
            choice = body["choices"][0]
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise BackendRequestError(f"{self.name}: malformed response body") from exc
        reply = (choice.get("message") or {}).get("content") or ""
        if choice.get("finish_reason") == "content_filter" or not reply.strip():
            raise EmptyReplyError(f"{self.name}: empty or refused reply")
        usage = body.get("usage") or {}
        input_tokens = usage.get("prompt_tokens")
        output_tokens = usage.get("completion_tokens")
        return Exchange(
            request_messages=tuple(messages),
            reply_text=reply,
            input_tokens=int(input_tokens) if input_tokens is not None else _estimate_input(messages),
            output_tokens=int(output_tokens) if output_tokens is not None else estimate_tokens(reply),
            latency_ms=int((time.perf_counter() - started) * 1000),
            backend_name=self.name,
        )


@dataclass
class CallLog:
    """Thread-safe sink of exchanges, optionally mirrored to a JSON-lines file."""

    path: Path | None = None
    exchanges: list[Exchange] = field(default_factory=list)

    def __post_init__(self) -> None:
        self._lock = threading.Lock()
        if self.path is not None:
            self.path = Path(self.path)
            self.path.parent.mkdir(parents=True, exist_ok=True)

    def append(self, exchange: Exchange) -> None:
        with self._lock:
            self.exchanges.append(exchange)
            if self.path is not None:
                with self.path.open("a", encoding="utf-8") as fh:
                    fh.write(json.dumps(exchange.to_dict(), ensure_ascii=False) + "\n")


def read_call_log(path: str | Path) -> list[Exchange]:
    exchanges = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                exchanges.append(Exchange.from_dict(json.loads(line)))
    return exchanges


class TaggedBackend:
    """Attributes every exchange to a query and role and forwards it to a sink."""

    def __init__(self, inner: Backend, query_id: str | None, role: str, sink: CallLog | None = None):
        self.inner = inner
        self.name = inner.name
        self.query_id = query_id
        self.role = role
        self.sink = sink

    def complete(self, messages: Sequence[ChatMessage], params: CompletionParams) -> Exchange:
        exchange = replace(self.inner.complete(messages, params), query_id=self.query_id, role=self.role)
        if self.sink is not None:
            self.sink.append(exchange)
        return exchange
