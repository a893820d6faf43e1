"""Command-line entry point: ``rankflow rerank|eval|compare|cost``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 backend error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .backend import CallLog, CompletionParams, HttpBackend, OracleBackend, ScriptedBackend, read_call_log
from .cache import DiskCache
from .core import COT, FORMAT_REQUIREMENT, RELEVANCE_STANDARD, PipelineConfig, load_templates
from .errors import (
    BackendError,
    EmptyIntersectionError,
    IngestionError,
    InvalidConfigError,
    InvalidInputError,
    RoleFailureError,
)
from .evaluation import (
    DEFAULT_PRICE_IN,
    DEFAULT_PRICE_OUT,
    compare_runs,
    cost_report,
    evaluate_run,
    format_comparison,
    format_cost,
    format_eval,
    read_qrels,
    read_run,
    write_run,
)
from .pipeline import read_corpus, read_queries, run_rerank
from .rerank import TraceWriter

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_BACKEND = 0, 1, 2, 3

ROLE_CHOICES = ("rewriter", "answerer", "summarizer")
FEATURE_ALIASES = {"standard": RELEVANCE_STANDARD, "cot": COT, "format": FORMAT_REQUIREMENT}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _csv(value: str) -> list[str]:
    if value.strip().lower() in ("", "none"):
        return []
    return [v.strip() for v in value.split(",") if v.strip()]


def _int_list(value: str) -> list[int]:
    try:
        values = [int(v) for v in _csv(value)]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {value!r}") from None
    if not values or min(values) < 1:
        raise argparse.ArgumentTypeError("cutoffs must be positive integers")
    return values


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="rankflow", description="Multi-role listwise passage reranking.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("rerank", help="rerank a first-stage TREC run")
    p.add_argument("--run", required=True, help="first-stage TREC run file")
    p.add_argument("--corpus", required=True, help="JSON-lines corpus with doc_id and text")
    p.add_argument("--queries", required=True, help="TSV query_id<TAB>text")
    p.add_argument("--out", required=True, help="output TREC run file")
    p.add_argument("--backend", default="http",
                   help="http | scripted:<dir> | oracle:<qrels> (default: http)")
    p.add_argument("--model", default="gpt-4-0613")
    p.add_argument("--endpoint", default=None, help="chat-completion URL (default: $RANKFLOW_ENDPOINT)")
    p.add_argument("--roles", default="rewriter,answerer,summarizer",
                   help="comma-separated subset of rewriter,answerer,summarizer, or 'none'")
    p.add_argument("--m", type=int, default=3, help="query repetitions in the composed query")
    p.add_argument("--window", type=int, default=20)
    p.add_argument("--step", type=int, default=10)
    p.add_argument("--features", default="standard,cot,format",
                   help="comma-separated subset of standard,cot,format, or 'none'")
    p.add_argument("--top-k", type=int, default=100)
    p.add_argument("--temperature", type=float, default=0.0)
    p.add_argument("--max-tokens", type=int, default=1024)
    p.add_argument("--cache-dir", default=None)
    p.add_argument("--no-answer-cache", action="store_true", help="do not cache Answerer outputs")
    p.add_argument("--templates", default=None, help="directory with <role>.txt template overrides")
    p.add_argument("--trace", default=None, help="JSON-lines file for per-window records")
    p.add_argument("--call-log", default=None, help="JSON-lines file for every backend exchange")
    p.add_argument("--fail-soft", action="store_true", help="drop failing queries instead of aborting")
    p.add_argument("--max-workers", type=int, default=4, help="queries processed concurrently")
    p.add_argument("--max-in-flight", type=int, default=8, help="concurrent HTTP requests")
    p.add_argument("--tag", default="rankflow")

    p = sub.add_parser("eval", help="nDCG@k of a run against qrels")
    p.add_argument("--run", required=True)
    p.add_argument("--qrels", required=True)
    p.add_argument("--cutoffs", type=_int_list, default=[1, 5, 10])
    p.add_argument("--per-query", action="store_true")
    p.add_argument("--json", action="store_true")

    p = sub.add_parser("compare", help="per-query nDCG deltas of run-b over run-a")
    p.add_argument("--run-a", required=True)
    p.add_argument("--run-b", required=True)
    p.add_argument("--qrels", required=True)
    p.add_argument("--cutoff", type=int, default=10)
    p.add_argument("--json", action="store_true")

    p = sub.add_parser("cost", help="token and USD totals from a call log")
    p.add_argument("--log", required=True)
    p.add_argument("--price-in", type=float, default=DEFAULT_PRICE_IN, help="USD per 1K input tokens")
    p.add_argument("--price-out", type=float, default=DEFAULT_PRICE_OUT, help="USD per 1K output tokens")
    p.add_argument("--queries", type=int, default=None,
                   help="query count for per-query means (default: distinct query ids in the log)")
    p.add_argument("--json", action="store_true")
    return parser


def _config_from_args(args) -> PipelineConfig:
    roles = _csv(args.roles)
    unknown = set(roles) - set(ROLE_CHOICES)
    if unknown:
        raise UsageError(f"unknown roles: {', '.join(sorted(unknown))}")
    features = _csv(args.features)
    unknown = set(features) - set(FEATURE_ALIASES)
    if unknown:
        raise UsageError(f"unknown features: {', '.join(sorted(unknown))}")
    return PipelineConfig(
        use_rewriter="rewriter" in roles,
        use_answerer="answerer" in roles,
        use_summarizer="summarizer" in roles,
        repeat_m=args.m,
        window_w=args.window,
        step_s=args.step,
        reranker_prompt_features=frozenset(FEATURE_ALIASES[f] for f in features),
        temperature=args.temperature,
        top_k=args.top_k,
        cache_answers=not args.no_answer_cache,
    )


def _backend_from_args(args, queries, corpus):
    kind, _, arg = args.backend.partition(":")
    if kind == "http":
        return HttpBackend(endpoint=args.endpoint, max_in_flight=args.max_in_flight)
    if kind == "scripted" and arg:
        return ScriptedBackend(directory=arg)
    if kind == "oracle" and arg:
        return OracleBackend.from_qrels(read_qrels(arg), queries, corpus.passages)
    raise UsageError(f"unknown backend {args.backend!r}")


def cmd_rerank(args) -> int:
    config = _config_from_args(args)
    run_in = read_run(args.run)
    corpus = read_corpus(args.corpus)
    queries = read_queries(args.queries)
    backend = _backend_from_args(args, queries, corpus)
    params = CompletionParams(temperature=config.temperature, max_output_tokens=args.max_tokens,
                              model_name=args.model)
    run_out = run_rerank(
        config, run_in, corpus, queries, backend,
        cache=DiskCache(args.cache_dir) if args.cache_dir else None,
        templates=load_templates(args.templates),
        params=params,
        trace=TraceWriter(args.trace) if args.trace else None,
        call_log=CallLog(Path(args.call_log)) if args.call_log else None,
        fail_soft=args.fail_soft,
        max_workers=args.max_workers,
        tag=args.tag,
    )
    write_run(run_out, args.out)
    failed = run_out.header["failed_queries"]
    print(f"wrote {len(run_out.entries)} queries to {args.out}"
          + (f" ({len(failed)} failed: {', '.join(failed)})" if failed else ""))
    return EXIT_OK


def cmd_eval(args) -> int:
    result = evaluate_run(read_run(args.run), read_qrels(args.qrels), args.cutoffs)
    print(json.dumps(result.to_dict(), indent=2) if args.json else format_eval(result, args.per_query))
    return EXIT_OK


def cmd_compare(args) -> int:
    if args.cutoff < 1:
        raise UsageError("--cutoff must be >= 1")
    comp = compare_runs(read_run(args.run_a), read_run(args.run_b), read_qrels(args.qrels), args.cutoff)
    print(json.dumps(comp.to_dict(), indent=2) if args.json else format_comparison(comp))
    return EXIT_OK


def cmd_cost(args) -> int:
    exchanges = read_call_log(args.log)
    count = args.queries or max(1, len({e.query_id for e in exchanges if e.query_id}))
    report = cost_report(exchanges, args.price_in, args.price_out, count)
    print(json.dumps(report.to_dict(), indent=2) if args.json else format_cost(report))
    return EXIT_OK


COMMANDS = {"rerank": cmd_rerank, "eval": cmd_eval, "compare": cmd_compare, "cost": cmd_cost}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (UsageError, InvalidConfigError) as exc:
        print(f"rankflow: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (BackendError, RoleFailureError) as exc:
        print(f"rankflow: backend error: {exc}", file=sys.stderr)
        return EXIT_BACKEND
    except (IngestionError, InvalidInputError, EmptyIntersectionError, OSError, ValueError) as exc:
        print(f"rankflow: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
