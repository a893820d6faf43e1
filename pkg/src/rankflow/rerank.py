"""Sliding-window listwise reranking.

A pass walks windows of ``w`` candidates from the back of the list to the
front, moving ``s`` positions each time. Each window is shown to the model
with window-local identifiers ``[1]..[k]``; the reply is parsed, repaired
into a permutation and applied in place, so strong candidates bubble
forward through the overlapping region into the next window.
"""

from __future__ import annotations

import json
import logging
import re
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import AbstractSet, Callable, Mapping, Sequence

from .backend import Backend, ChatMessage, CompletionParams
from .core import COT, FORMAT_REQUIREMENT, RELEVANCE_STANDARD, PipelineConfig
from .errors import (
    EmptyReplyError,
    InternalInvariantError,
    InvalidConfigError,
    InvalidInputError,
    UnparseableReplyError,
)

logger = logging.getLogger(__name__)

RERANKER_PROMPT_VERSION = "reranker-v1"

SYSTEM_PROMPT = (
    "You are an intelligent assistant specialized in ranking passages "
    "according to their relevance to a search query."
)
_INTRO = (
    "I will provide you with {k} passages, each indicated by number identifier [].\n"
    "Rank the passages based on their relevance to query: {query}."
)
_ACK = "Okay, please provide the passages."
_RECEIVED = "Received passage [{i}]."
_HEAD = "Search Query: {query}.\nRank the {k} passages above based on their relevance to the search query."

FEATURE_BLOCKS = {
    RELEVANCE_STANDARD: (
        "Judge relevance with the following four-level standard:\n"
        "- Perfectly relevant: the passage is dedicated to the query and contains the exact answer.\n"
        "- Highly Relevant: the passage answers the query, but the answer may be unclear "
        "or buried among extraneous information.\n"
        "- Relevant: the passage is related to the query but does not answer it.\n"
        "- Irrelevant: the passage has nothing to do with the query.\n"
        "A passage at a higher level must be ranked above every passage at a lower level."
    ),
    COT: (
        "Work through the ranking step by step: identify what the query is asking for, "
        "assess how well each passage meets that need, and compare the passages carefully "
        "before settling on the final order."
    ),
    FORMAT_REQUIREMENT: (
        "The ranking must contain each of the {k} identifiers exactly once. "
        "Do not leave out any passage and do not list any passage twice."
    ),
}
# fixed block order, independent of set iteration order
FEATURE_ORDER = (RELEVANCE_STANDARD, COT, FORMAT_REQUIREMENT)

_CLOSE_PLAIN = (
    "The passages should be listed in descending order using identifiers. "
    "The most relevant passages should be listed first. "
    "The output format should be [] > [], e.g., [1] > [2]. "
    "Only respond with the ranking results, do not say any word or explain."
)
_CLOSE_COT = (
    "You may write out your reasoning first. Finish with the final ranking on its own line, "
    "listing the passages in descending order of relevance using identifiers, "
    "in the format [] > [], e.g., [1] > [2]."
)
REASK_PROMPT = (
    "Your previous answer did not contain a ranking I could read. "
    "Respond with the ranking only, in the format [] > [], e.g., [1] > [2], "
    "using each identifier from [1] to [{k}] exactly once."
)

_INTRO_RE = re.compile(
    r"\AI will provide you with (\d+) passages, each indicated by number identifier \[\]\.\n"
    r"Rank the passages based on their relevance to query: (.*)\.\Z",
    re.DOTALL,
)
_PASSAGE_RE = re.compile(r"\A\[(\d+)\] (.*)\Z", re.DOTALL)
_ID = r"\[\s*\d+\s*\]"
_SEP = r"(?:[\s,]*>[\s,]*|\s*,\s*)"
_CHAIN_RE = re.compile(rf"{_ID}(?:{_SEP}{_ID})*")


@dataclass(frozen=True)
class WindowPlan:
    windows: tuple[tuple[int, int], ...]

    def __len__(self) -> int:
        return len(self.windows)

    def __iter__(self):
        return iter(self.windows)


@dataclass(frozen=True)
class RankList:
    local_ids: tuple[int, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "local_ids", tuple(self.local_ids))


@dataclass(frozen=True)
class RankState:
    query_id: str
    ordering: tuple[str, ...]
    texts: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        object.__setattr__(self, "ordering", tuple(self.ordering))
        if len(set(self.ordering)) != len(self.ordering):
            raise InvalidInputError(f"duplicate doc_ids in ordering for query {self.query_id!r}")
        missing = [d for d in self.ordering if d not in self.texts]
        if missing:
            raise InvalidInputError(f"no text for doc_ids {missing[:5]}")


def plan_windows(n: int, w: int, s: int) -> WindowPlan:
    """Window ranges (1-based, inclusive) in processing order, back to front.

    The last window is pinned to start at 1 and keeps length ``w`` when
    ``n - w`` is not a multiple of ``s``.
    """
    if n < 1 or w < 1 or s < 1 or s > w:
        raise InvalidConfigError(f"need n >= 1 and 1 <= s <= w, got n={n} w={w} s={s}")
    if n <= w:
        return WindowPlan(((1, n),))
    windows = []
    end = n
    while True:
        start = end - w + 1
        if start <= 1:
            windows.append((1, w))
            break
        windows.append((start, end))
        end -= s
    return WindowPlan(tuple(windows))


def build_reranker_prompt(query_text: str, window_texts: Sequence[str], features: AbstractSet[str]) -> list[ChatMessage]:
    k = len(window_texts)
    if k == 0:
        raise InvalidInputError("cannot build a reranker prompt for an empty window")
    unknown = set(features) - set(FEATURE_BLOCKS)
    if unknown:
        raise InvalidInputError(f"unknown prompt features {sorted(unknown)}")
    messages = [
        ChatMessage("system", SYSTEM_PROMPT),
        ChatMessage("user", _INTRO.format(k=k, query=query_text)),
        ChatMessage("assistant", _ACK),
    ]
    for i, text in enumerate(window_texts, start=1):
        messages.append(ChatMessage("user", f"[{i}] {text}"))
        messages.append(ChatMessage("assistant", _RECEIVED.format(i=i)))
    parts = [_HEAD.format(query=query_text, k=k)]
    parts += [FEATURE_BLOCKS[f].format(k=k) for f in FEATURE_ORDER if f in features]
    parts.append(_CLOSE_COT if COT in features else _CLOSE_PLAIN)
    messages.append(ChatMessage("user", "\n".join(parts)))
    return messages


def extract_window(messages: Sequence[ChatMessage]) -> tuple[str, list[str]] | None:
    """Recover (query, window texts) from a prompt built by :func:`build_reranker_prompt`.

    Returns None when the messages are not a reranker prompt.
    """
    query = None
    count = 0
    passages: list[str] = []
    for message in messages:
        if message.speaker_role != "user":
            continue
        if query is None:
            match = _INTRO_RE.match(message.text)
            if match is None:
                return None
            count, query = int(match.group(1)), match.group(2)
            continue
        match = _PASSAGE_RE.match(message.text)
        if match and int(match.group(1)) == len(passages) + 1 and len(passages) < count:
            passages.append(match.group(2))
    if query is None or len(passages) != count:
        return None
    return query, passages


def parse_rank_list(reply: str, window_length: int) -> RankList:
    """Take the last ``[a] > [b] > ...`` chain in the reply.

    Chains shorter than two ids are only used when no longer chain exists,
    so a stray ``[3]`` in trailing prose does not hide the ranking. Ids are
    returned raw; see :func:`repair_rank_list`.
    """
    if window_length < 1:
        raise InvalidInputError("window_length must be >= 1")
    chains = [m.group(0) for m in _CHAIN_RE.finditer(reply)]
    if not chains:
        raise UnparseableReplyError(f"no bracketed ranking in reply: {reply[:120]!r}")
    need = min(2, window_length)
    long_enough = [c for c in chains if len(re.findall(r"\d+", c)) >= need]
    chain = (long_enough or chains)[-1]
    return RankList(tuple(int(x) for x in re.findall(r"\d+", chain)))


def repair_rank_list(raw: RankList, window_length: int) -> RankList:
    seen: set[int] = set()
    ids = []
    for i in raw.local_ids:
        if 1 <= i <= window_length and i not in seen:
            seen.add(i)
            ids.append(i)
    ids.extend(i for i in range(1, window_length + 1) if i not in seen)
    return RankList(tuple(ids))


def apply_window_permutation(state: RankState, window: tuple[int, int], ranked: RankList) -> RankState:
    start, end = window
    if not 1 <= start <= end <= len(state.ordering):
        raise InternalInvariantError(f"window {window} outside ordering of length {len(state.ordering)}")
    length = end - start + 1
    if sorted(ranked.local_ids) != list(range(1, length + 1)):
        raise InternalInvariantError(f"{list(ranked.local_ids)} is not a permutation of 1..{length}")
    segment = state.ordering[start - 1:end]
    reordered = tuple(segment[i - 1] for i in ranked.local_ids)
    ordering = state.ordering[:start - 1] + reordered + state.ordering[end:]
    return RankState(state.query_id, ordering, state.texts)


class TraceWriter:
    """Appends per-window records to a JSON-lines file."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()

    def __call__(self, record: dict) -> None:
        line = json.dumps(record, ensure_ascii=False)
        with self._lock, self.path.open("a", encoding="utf-8") as fh:
            fh.write(line + "\n")


def _rank_window(
    messages: list[ChatMessage], k: int, backend: Backend, params: CompletionParams
) -> tuple[RankList | None, list[str], bool]:
    """One call plus at most one re-ask. Returns (raw ids or None, replies, reasked)."""
    replies = []
    for attempt in range(2):
        try:
            reply = backend.complete(messages, params).reply_text
        except EmptyReplyError:
            reply = ""
        replies.append(reply)
        try:
            return parse_rank_list(reply, k), replies, attempt > 0
        except UnparseableReplyError:
            if attempt == 0:
                messages = messages + [
                    ChatMessage("assistant", reply),
                    ChatMessage("user", REASK_PROMPT.format(k=k)),
                ]
    return None, replies, True


def rerank_pass(
    state: RankState,
    query_text: str,
    config: PipelineConfig,
    backend: Backend,
    params: CompletionParams | None = None,
    trace: Callable[[dict], None] | None = None,
) -> RankState:
    """One back-to-first sliding-window pass over ``state``.

    Backend outages propagate. Malformed rankings are repaired; a window
    whose reply stays unparseable after one re-ask keeps its current order.
    """
    if not state.ordering:
        raise InvalidInputError("rerank_pass needs at least one candidate")
    params = params or CompletionParams(temperature=config.temperature)
    plan = plan_windows(len(state.ordering), config.window_w, config.step_s)
    for index, (start, end) in enumerate(plan):
        k = end - start + 1
        doc_ids = state.ordering[start - 1:end]
        messages = build_reranker_prompt(query_text, [state.texts[d] for d in doc_ids],
                                         config.reranker_prompt_features)
        raw, replies, reasked = _rank_window(messages, k, backend, params)
        fail_open = raw is None
        if fail_open:
            logger.warning("query %s window %d-%d: unparseable reply after re-ask, keeping order",
                           state.query_id, start, end)
            repaired = RankList(tuple(range(1, k + 1)))
        else:
            repaired = repair_rank_list(raw, k)
        state = apply_window_permutation(state, (start, end), repaired)
        if trace is not None:
            trace({
                "query_id": state.query_id,
                "window_index": index,
                "window": [start, end],
                "replies": replies,
                "parsed": None if raw is None else list(raw.local_ids),
                "repaired": list(repaired.local_ids),
                "reasked": reasked,
                "fail_open": fail_open,
                "ordering": list(state.ordering),
            })
    return state


def rank_scores(n: int) -> list[float]:
    """Strictly decreasing run scores (n - r + 1) / n for ranks r = 1..n."""
    return [(n - r + 1) / n for r in range(1, n + 1)]
