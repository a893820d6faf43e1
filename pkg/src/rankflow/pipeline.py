"""End-to-end reranking over a first-stage run."""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Mapping

from .backend import Backend, CallLog, CompletionParams, TaggedBackend
from .cache import Cache
from .core import Passage, PipelineConfig, PromptTemplate, Query, compose_new_query, default_templates
from .errors import BackendError, BackendUnavailableError, IngestionError, RoleFailureError
from .evaluation import RunEntry, RunFile
from .rerank import RERANKER_PROMPT_VERSION, RankState, rank_scores, rerank_pass
from .roles import RoleStore, generate_answer, rewrite_query, summarize_passages

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Corpus:
    passages: Mapping[str, str]

    def __contains__(self, doc_id: str) -> bool:
        return doc_id in self.passages

    def __getitem__(self, doc_id: str) -> str:
        return self.passages[doc_id]


def read_corpus(path: str | Path) -> Corpus:
    """JSON-lines ``{"doc_id": ..., "text": ...}``."""
    passages: dict[str, str] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
                doc_id, text = str(record["doc_id"]), record["text"]
            except (ValueError, KeyError, TypeError):
                raise IngestionError(f"{path}:{lineno}: expected a JSON object with doc_id and text") from None
            if doc_id in passages:
                raise IngestionError(f"{path}:{lineno}: duplicate doc_id {doc_id}")
            passages[doc_id] = text
    return Corpus(passages)


def read_queries(path: str | Path) -> dict[str, str]:
    """TSV ``query_id<TAB>text``."""
    queries: dict[str, str] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n").rstrip("\r")
            if not line.strip():
                continue
            qid, sep, text = line.partition("\t")
            if not sep or not text.strip():
                raise IngestionError(f"{path}:{lineno}: expected query_id<TAB>text")
            queries[qid] = text
    return queries


def _is_outage(exc: BaseException) -> bool:
    return isinstance(exc, BackendUnavailableError) or isinstance(exc.__cause__, BackendUnavailableError)


def _check_inputs(config: PipelineConfig, run_in: RunFile, corpus: Corpus, queries: Mapping[str, str]) -> None:
    missing_queries = [q for q in run_in.query_ids if q not in queries]
    if missing_queries:
        raise IngestionError("run references unknown queries", missing_queries)
    missing_docs = [
        f"{qid}:{e.doc_id}"
        for qid in run_in.query_ids
        for e in run_in.entries[qid]
        if e.doc_id not in corpus
    ]
    if missing_docs:
        raise IngestionError("run references doc_ids missing from the corpus", missing_docs)


def run_header(config: PipelineConfig, templates: Mapping[str, PromptTemplate], params: CompletionParams,
               backend: Backend, failed: list[str]) -> dict:
    return {
        "config": config.to_dict(),
        "templates": {role: t.version for role, t in sorted(templates.items())},
        "reranker_prompt": RERANKER_PROMPT_VERSION,
        "model": params.model_name,
        "backend": backend.name,
        "failed_queries": failed,
    }


def run_rerank(
    config: PipelineConfig,
    run_in: RunFile,
    corpus: Corpus,
    queries: Mapping[str, str],
    backend: Backend,
    cache: Cache | None = None,
    *,
    templates: Mapping[str, PromptTemplate] | None = None,
    params: CompletionParams | None = None,
    trace: Callable[[dict], None] | None = None,
    call_log: CallLog | None = None,
    fail_soft: bool = False,
    max_workers: int = 4,
    summary_workers: int = 8,
    tag: str = "rankflow",
) -> RunFile:
    """Rerank the top ``config.top_k`` candidates of every query in ``run_in``.

    Per query: optional rewrite, optional answer + composition, optional
    summaries, then one sliding-window pass. Candidates below ``top_k`` keep
    their first-stage order after the reranked head. With ``fail_soft`` a
    query whose backend calls fail is left out of the output and listed in
    the header instead of aborting the run.
    """
    _check_inputs(config, run_in, corpus, queries)
    templates = {**default_templates(), **(templates or {})}
    params = params or CompletionParams(temperature=config.temperature)
    store = RoleStore(cache)
    answer_store = store if config.cache_answers else RoleStore(None)

    def process(qid: str) -> list[str]:
        def tagged(role: str) -> TaggedBackend:
            return TaggedBackend(backend, qid, role, call_log)

        query = Query(qid, queries[qid])
        rows = run_in.entries[qid]
        head = [Passage(e.doc_id, corpus[e.doc_id], e.rank, e.score) for e in rows[:config.top_k]]
        tail = [e.doc_id for e in rows[config.top_k:]]
        if not head:
            return []

        rewritten = query.text
        if config.use_rewriter:
            try:
                rewritten = rewrite_query(query, tagged("rewriter"), templates["rewriter"], params, store)
            except RoleFailureError as exc:
                if not config.rewriter_fallback or _is_outage(exc):
                    raise
                logger.warning("%s; using the original query", exc)

        query_text = rewritten
        if config.use_answerer:
            try:
                answer = generate_answer(rewritten, tagged("answerer"), templates["answerer"], params,
                                         answer_store, qid)
                query_text = compose_new_query(rewritten, answer, config.repeat_m)
            except RoleFailureError as exc:
                if not config.answerer_fallback or _is_outage(exc):
                    raise
                logger.warning("%s; composing without an answer", exc)
                query_text = " ".join([rewritten] * config.repeat_m)

        texts = {p.doc_id: p.text for p in head}
        if config.use_summarizer:
            todo = [p for p in head if p.text.strip()]
            summaries = summarize_passages(todo, tagged("summarizer"), templates["summarizer"], params, store,
                                           max_workers=summary_workers, fallback=config.summarizer_fallback)
            texts.update({s.doc_id: s.summary for s in summaries})

        state = RankState(qid, tuple(p.doc_id for p in head), texts)
        state = rerank_pass(state, query_text, config, tagged("reranker"), params, trace)
        return list(state.ordering) + tail

    def guarded(qid: str) -> list[str] | None:
        try:
            return process(qid)
        except (BackendError, RoleFailureError) as exc:
            if not fail_soft:
                raise
            logger.error("query %s dropped: %s", qid, exc)
            return None

    qids = run_in.query_ids
    if max_workers <= 1:
        results = [guarded(q) for q in qids]
    else:
        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            results = list(pool.map(guarded, qids))

    entries = {}
    failed = []
    for qid, ordering in zip(qids, results):
        if ordering is None:
            failed.append(qid)
            continue
        scores = rank_scores(len(ordering))
        entries[qid] = [RunEntry(d, s, r) for r, (d, s) in enumerate(zip(ordering, scores), start=1)]
    return RunFile(entries, tag, run_header(config, templates, params, backend, failed))
