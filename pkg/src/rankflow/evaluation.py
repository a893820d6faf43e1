"""Qrels/run I/O, nDCG@k, run comparison and token cost accounting."""

from __future__ import annotations

import json
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .backend import Exchange
from .errors import EmptyIntersectionError, IngestionError, InvalidConfigError, InvalidInputError

HEADER_PREFIX = "# rankflow "

DEFAULT_PRICE_IN = 0.03
DEFAULT_PRICE_OUT = 0.06


@dataclass(frozen=True)
class Qrels:
    judgments: Mapping[tuple[str, str], int]

    def __post_init__(self) -> None:
        by_query: dict[str, dict[str, int]] = defaultdict(dict)
        for (qid, doc_id), grade in self.judgments.items():
            if grade < 0:
                raise InvalidInputError(f"negative grade for ({qid}, {doc_id})")
            by_query[qid][doc_id] = grade
        object.__setattr__(self, "_by_query", dict(by_query))

    @classmethod
    def from_nested(cls, nested: Mapping[str, Mapping[str, int]]) -> "Qrels":
        return cls({(q, d): g for q, docs in nested.items() for d, g in docs.items()})

    @property
    def query_ids(self) -> list[str]:
        return list(self._by_query)

    def for_query(self, query_id: str) -> dict[str, int]:
        return self._by_query.get(query_id, {})

    def grade(self, query_id: str, doc_id: str) -> int:
        return self._by_query.get(query_id, {}).get(doc_id, 0)


@dataclass(frozen=True)
class RunEntry:
    doc_id: str
    score: float
    rank: int


@dataclass
class RunFile:
    """Ranked output per query, plus an optional provenance header."""

    entries: dict[str, list[RunEntry]] = field(default_factory=dict)
    tag: str = "rankflow"
    header: dict | None = None

    def __post_init__(self) -> None:
        for qid, rows in self.entries.items():
            if [r.rank for r in rows] != list(range(1, len(rows) + 1)):
                raise InvalidInputError(f"query {qid}: ranks must run 1..k without gaps")
            if any(a.score < b.score for a, b in zip(rows, rows[1:])):
                raise InvalidInputError(f"query {qid}: scores must be non-increasing with rank")
            if len({r.doc_id for r in rows}) != len(rows):
                raise InvalidInputError(f"query {qid}: duplicate doc_ids")

    @classmethod
    def from_rankings(cls, rankings: Mapping[str, Sequence[str]], tag: str = "rankflow", header: dict | None = None) -> "RunFile":
        entries = {}
        for qid, docs in rankings.items():
            n = len(docs)
            entries[qid] = [RunEntry(d, (n - r + 1) / n, r) for r, d in enumerate(docs, start=1)]
        return cls(entries, tag, header)

    def ranking(self, query_id: str) -> list[str]:
        return [r.doc_id for r in self.entries.get(query_id, [])]

    @property
    def query_ids(self) -> list[str]:
        return list(self.entries)


def read_qrels(path: str | Path) -> Qrels:
    """``query_id 0 doc_id grade`` lines; negative grades count as 0."""
    judgments: dict[tuple[str, str], int] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 4:
                raise IngestionError(f"{path}:{lineno}: expected 4 fields, got {len(parts)}")
            qid, _, doc_id, grade = parts
            try:
                judgments[(qid, doc_id)] = max(0, int(grade))
            except ValueError:
                raise IngestionError(f"{path}:{lineno}: grade {grade!r} is not an integer") from None
    return Qrels(judgments)


def write_qrels(qrels: Qrels, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for (qid, doc_id), grade in qrels.judgments.items():
            fh.write(f"{qid} 0 {doc_id} {grade}\n")


def read_run(path: str | Path) -> RunFile:
    """TREC ``qid Q0 doc_id rank score tag`` lines; ``# rankflow`` header lines are kept."""
    rows: dict[str, list[RunEntry]] = defaultdict(list)
    tag = "rankflow"
    header = None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if line.startswith(HEADER_PREFIX):
                header = json.loads(line[len(HEADER_PREFIX):])
                continue
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            if len(parts) != 6:
                raise IngestionError(f"{path}:{lineno}: expected 6 fields, got {len(parts)}")
            qid, _, doc_id, rank, score, tag = parts
            try:
                rows[qid].append(RunEntry(doc_id, float(score), int(rank)))
            except ValueError:
                raise IngestionError(f"{path}:{lineno}: bad rank or score") from None
    entries = {qid: sorted(r, key=lambda e: e.rank) for qid, r in rows.items()}
    try:
        return RunFile(entries, tag, header)
    except InvalidInputError as exc:
        raise IngestionError(f"{path}: {exc}") from None


def format_run(run: RunFile) -> str:
    lines = []
    if run.header is not None:
        lines.append(HEADER_PREFIX + json.dumps(run.header, sort_keys=True, ensure_ascii=False))
    for qid, rows in run.entries.items():
        for r in rows:
            lines.append(f"{qid} Q0 {r.doc_id} {r.rank} {r.score!r} {run.tag}")
    return "\n".join(lines) + "\n"


def write_run(run: RunFile, path: str | Path) -> None:
    Path(path).write_text(format_run(run), encoding="utf-8")


def _dcg(grades: Iterable[int]) -> float:
    return sum((2 ** g - 1) / math.log2(i + 1) for i, g in enumerate(grades, start=1))


def ndcg_at_k(ranking: Sequence[str], qrels: Qrels, query_id: str, k: int) -> float:
    """Exponential-gain nDCG@k; 0.0 when the query has no relevant documents."""
    if k < 1:
        raise InvalidInputError("k must be >= 1")
    grades = qrels.for_query(query_id)
    ideal = _dcg(sorted(grades.values(), reverse=True)[:k])
    if ideal == 0:
        return 0.0
    return _dcg(grades.get(d, 0) for d in ranking[:k]) / ideal


@dataclass(frozen=True)
class EvalResult:
    cutoffs: tuple[int, ...]
    means: dict[int, float]
    per_query: dict[str, dict[int, float]]

    def to_dict(self) -> dict:
        return {
            "cutoffs": list(self.cutoffs),
            "means": {f"ndcg@{k}": v for k, v in self.means.items()},
            "per_query": {q: {f"ndcg@{k}": v for k, v in row.items()} for q, row in self.per_query.items()},
        }


def evaluate_run(run: RunFile, qrels: Qrels, cutoffs: Sequence[int] = (1, 5, 10)) -> EvalResult:
    """Mean nDCG over every query in the qrels; queries missing from the run score 0."""
    cutoffs = tuple(cutoffs)
    if not cutoffs:
        raise InvalidInputError("cutoffs must be non-empty")
    query_ids = qrels.query_ids
    if not set(query_ids) & set(run.query_ids):
        raise EmptyIntersectionError("run and qrels share no query")
    per_query = {
        qid: {k: ndcg_at_k(run.ranking(qid), qrels, qid, k) for k in cutoffs}
        for qid in query_ids
    }
    means = {k: sum(row[k] for row in per_query.values()) / len(per_query) for k in cutoffs}
    return EvalResult(cutoffs, means, per_query)


@dataclass(frozen=True)
class Comparison:
    cutoff: int
    deltas: dict[str, float]
    mean_delta: float

    def to_dict(self) -> dict:
        return {"cutoff": self.cutoff, "mean_delta": self.mean_delta, "deltas": self.deltas}


def compare_runs(a: RunFile, b: RunFile, qrels: Qrels, cutoff: int = 10) -> Comparison:
    """Per-query nDCG@cutoff of ``b`` minus ``a`` over the queries both runs cover."""
    shared = [q for q in a.query_ids if q in set(b.query_ids)]
    if not shared:
        raise EmptyIntersectionError("runs share no query")
    deltas = {
        q: ndcg_at_k(b.ranking(q), qrels, q, cutoff) - ndcg_at_k(a.ranking(q), qrels, q, cutoff)
        for q in shared
    }
    return Comparison(cutoff, deltas, sum(deltas.values()) / len(deltas))


@dataclass(frozen=True)
class CostLine:
    input_tokens: float = 0
    output_tokens: float = 0
    wall_time_ms: float = 0
    usd: float = 0.0


@dataclass(frozen=True)
class CostReport:
    price_per_1k_input: float
    price_per_1k_output: float
    query_count: int
    per_query: dict[str, CostLine]
    total: CostLine
    mean_per_query: CostLine

    def to_dict(self) -> dict:
        def line(c: CostLine) -> dict:
            return {"input_tokens": c.input_tokens, "output_tokens": c.output_tokens,
                    "wall_time_ms": c.wall_time_ms, "usd": c.usd}
        return {
            "price_per_1k_input": self.price_per_1k_input,
            "price_per_1k_output": self.price_per_1k_output,
            "query_count": self.query_count,
            "total": line(self.total),
            "mean_per_query": line(self.mean_per_query),
            "per_query": {q: line(c) for q, c in self.per_query.items()},
        }


def usd_cost(input_tokens: float, output_tokens: float, price_in: float, price_out: float) -> float:
    return input_tokens / 1000 * price_in + output_tokens / 1000 * price_out


def cost_report(
    call_log: Iterable[Exchange],
    price_in: float = DEFAULT_PRICE_IN,
    price_out: float = DEFAULT_PRICE_OUT,
    query_count: int = 1,
) -> CostReport:
    """Token, latency and USD totals; exchanges without a query id group under ``""``."""
    if price_in < 0 or price_out < 0:
        raise InvalidConfigError("prices must be nonnegative")
    if query_count < 1:
        raise InvalidInputError("query_count must be >= 1")
    sums: dict[str, list[int]] = defaultdict(lambda: [0, 0, 0])
    for ex in call_log:
        row = sums[ex.query_id or ""]
        row[0] += ex.input_tokens
        row[1] += ex.output_tokens
        row[2] += ex.latency_ms
    per_query = {
        q: CostLine(i, o, t, usd_cost(i, o, price_in, price_out)) for q, (i, o, t) in sums.items()
    }
    tin = sum(r[0] for r in sums.values())
    tout = sum(r[1] for r in sums.values())
    tms = sum(r[2] for r in sums.values())
    total = CostLine(tin, tout, tms, usd_cost(tin, tout, price_in, price_out))
    n = query_count
    mean = CostLine(tin / n, tout / n, tms / n, usd_cost(tin / n, tout / n, price_in, price_out))
    return CostReport(price_in, price_out, query_count, per_query, total, mean)


def format_table(header: Sequence[str], rows: Sequence[Sequence[str]]) -> str:
    widths = [max(len(str(c)) for c in col) for col in zip(header, *rows)]
    out = []
    for i, row in enumerate([header, *rows]):
        out.append("  ".join(str(c).ljust(w) if j == 0 else str(c).rjust(w)
                             for j, (c, w) in enumerate(zip(row, widths))).rstrip())
        if i == 0:
            out.append("  ".join("-" * w for w in widths))
    return "\n".join(out)


def format_eval(result: EvalResult, per_query: bool = False) -> str:
    header = ["query", *[f"nDCG@{k}" for k in result.cutoffs]]
    rows = []
    if per_query:
        rows += [[q, *[f"{row[k]:.4f}" for k in result.cutoffs]] for q, row in result.per_query.items()]
    rows.append([f"mean ({len(result.per_query)})", *[f"{result.means[k]:.4f}" for k in result.cutoffs]])
    return format_table(header, rows)


def format_comparison(comp: Comparison) -> str:
    rows = [[q, f"{d:+.4f}"] for q, d in comp.deltas.items()]
    rows.append([f"mean ({len(comp.deltas)})", f"{comp.mean_delta:+.4f}"])
    return format_table(["query", f"delta nDCG@{comp.cutoff}"], rows)


def format_cost(report: CostReport) -> str:
    def row(name: str, c: CostLine) -> list[str]:
        return [name, f"{c.input_tokens:,.0f}", f"{c.output_tokens:,.0f}", f"{c.wall_time_ms / 1000:.1f}", f"{c.usd:.3f}"]
    rows = [row(q or "(unattributed)", c) for q, c in report.per_query.items()]
    rows.append(row("total", report.total))
    rows.append(row(f"mean per query ({report.query_count})", report.mean_per_query))
    return format_table(["query", "input tokens", "output tokens", "time (s)", "USD"], rows)
