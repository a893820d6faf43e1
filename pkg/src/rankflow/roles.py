"""Rewriter, Answerer and Summarizer executors."""

from __future__ import annotations

import logging
import re
import threading
from concurrent.futures import Future, ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Sequence

from .backend import Backend, CompletionParams, Exchange, as_messages
from .cache import Cache, cache_key
from .core import Passage, PromptTemplate, Query, SummarizedPassage, default_template, render_prompt
from .errors import BackendError, BackendUnavailableError, CacheUnavailableError, InvalidInputError, RoleFailureError

logger = logging.getLogger(__name__)

_LABELS = {
    "rewriter": ("rewritten query", "query"),
    "answerer": ("answer", "passage"),
    "summarizer": ("summarized passage", "summary"),
}
_QUOTE_PAIRS = {'"': '"', "'": "'", "“": "”", "‘": "’", "«": "»"}


@dataclass(frozen=True)
class RoleOutput:
    role_name: str
    input_digest: str
    output_text: str
    exchange: Exchange | None  # None when served from cache


def clean_reply(text: str, role_name: str) -> str:
    """Trim, drop one leading ``Label:`` and one pair of wrapping quotes."""
    text = text.strip()
    labels = "|".join(re.escape(label) for label in _LABELS.get(role_name, ()))
    if labels:
        text = re.sub(rf"^(?:{labels})\s*:\s*", "", text, count=1, flags=re.IGNORECASE).strip()
    if len(text) >= 2 and _QUOTE_PAIRS.get(text[0]) == text[-1]:
        text = text[1:-1].strip()
    return text


class RoleStore:
    """Single-flight memo over an optional persistent cache.

    Within one store every key is computed at most once, even under
    concurrent callers; a persistent cache, when given, is consulted first
    and filled afterwards. Cache I/O failures degrade to uncached operation.
    """

    def __init__(self, cache: Cache | None = None):
        self.cache = cache
        self._lock = threading.Lock()
        self._futures: dict[str, Future] = {}

    def _cache_get(self, key: str) -> str | None:
        if self.cache is None:
            return None
        try:
            return self.cache.get(key)
        except CacheUnavailableError as exc:
            logger.warning("cache unavailable, continuing uncached: %s", exc)
            return None

    def _cache_put(self, output: RoleOutput) -> None:
        if self.cache is None or output.exchange is None:
            return
        usage = {"input_tokens": output.exchange.input_tokens, "output_tokens": output.exchange.output_tokens}
        try:
            self.cache.put(output.input_digest, output.output_text, usage)
        except CacheUnavailableError as exc:
            logger.warning("cache unavailable, result not stored: %s", exc)

    def resolve(self, role_name: str, key: str, compute: Callable[[], RoleOutput]) -> RoleOutput:
        with self._lock:
            future = self._futures.get(key)
            owner = future is None
            if owner:
                future = self._futures[key] = Future()
        if not owner:
            return future.result()
        try:
            cached = self._cache_get(key)
            if cached is not None:
                output = RoleOutput(role_name, key, cached, None)
            else:
                output = compute()
                self._cache_put(output)
        except BaseException as exc:
            with self._lock:
                del self._futures[key]
            future.set_exception(exc)
            raise
        future.set_result(output)
        return output


def execute_role(
    template: PromptTemplate,
    placeholder: str,
    input_text: str,
    backend: Backend,
    params: CompletionParams | None = None,
    store: RoleStore | None = None,
    query_id: str | None = None,
) -> RoleOutput:
    """Render ``template`` around ``input_text``, call the backend, clean the reply."""
    role = template.role_name
    key = cache_key(role, template.version, input_text)
    params = params or CompletionParams()

    def compute() -> RoleOutput:
        messages = as_messages(render_prompt(template, {placeholder: input_text}))
        try:
            exchange = backend.complete(messages, params)
        except BackendError as exc:
            raise RoleFailureError(role, str(exc), query_id) from exc
        text = clean_reply(exchange.reply_text, role)
        if not text:
            raise RoleFailureError(role, "empty reply after cleanup", query_id)
        return RoleOutput(role, key, text, exchange)

    if store is None:
        return compute()
    return store.resolve(role, key, compute)


def rewrite_query(
    query: Query,
    backend: Backend,
    template: PromptTemplate | None = None,
    params: CompletionParams | None = None,
    store: RoleStore | None = None,
) -> str:
    template = template or default_template("rewriter")
    return execute_role(template, "query", query.text, backend, params, store, query.query_id).output_text


def generate_answer(
    rewritten: str,
    backend: Backend,
    template: PromptTemplate | None = None,
    params: CompletionParams | None = None,
    store: RoleStore | None = None,
    query_id: str | None = None,
) -> str:
    if not rewritten.strip():
        raise InvalidInputError("rewritten query must be non-empty")
    template = template or default_template("answerer")
    return execute_role(template, "query", rewritten, backend, params, store, query_id).output_text


def summarize_passage(
    passage: Passage,
    backend: Backend,
    template: PromptTemplate | None = None,
    params: CompletionParams | None = None,
    store: RoleStore | None = None,
) -> SummarizedPassage:
    if not passage.text.strip():
        raise InvalidInputError(f"passage {passage.doc_id!r} has empty text")
    template = template or default_template("summarizer")
    summary = execute_role(template, "passage", passage.text, backend, params, store).output_text
    return SummarizedPassage(passage.doc_id, summary, len(passage.text), len(summary))


def summarize_passages(
    passages: Sequence[Passage],
    backend: Backend,
    template: PromptTemplate | None = None,
    params: CompletionParams | None = None,
    store: RoleStore | None = None,
    max_workers: int = 8,
    fallback: bool = True,
) -> list[SummarizedPassage]:
    """Summarize a batch concurrently; results keep input order.

    With ``fallback`` a passage whose summary fails stands in for itself.
    Backend outages are never masked.
    """
    template = template or default_template("summarizer")

    def one(passage: Passage) -> SummarizedPassage:
        try:
            return summarize_passage(passage, backend, template, params, store)
        except RoleFailureError as exc:
            if not fallback or isinstance(exc.__cause__, BackendUnavailableError):
                raise
            logger.warning("summary of %s failed, using original text: %s", passage.doc_id, exc)
            return SummarizedPassage(passage.doc_id, passage.text, len(passage.text), len(passage.text))

    if max_workers <= 1 or len(passages) <= 1:
        return [one(p) for p in passages]
    with ThreadPoolExecutor(max_workers=max_workers) as pool:
        return list(pool.map(one, passages))
