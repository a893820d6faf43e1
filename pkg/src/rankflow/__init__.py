"""Multi-role listwise passage reranking: rewrite, answer, summarize, rerank."""

from .backend import (
    CallLog,
    ChatMessage,
    CompletionParams,
    Exchange,
    FunctionBackend,
    HttpBackend,
    OracleBackend,
    RecordingBackend,
    ScriptedBackend,
    estimate_tokens,
)
from .cache import DiskCache, MemoryCache, cache_key
from .core import (
    Passage,
    PipelineConfig,
    PromptTemplate,
    Query,
    SummarizedPassage,
    compose_new_query,
    default_template,
    render_prompt,
)
from .evaluation import (
    Qrels,
    RunFile,
    compare_runs,
    cost_report,
    evaluate_run,
    ndcg_at_k,
    read_qrels,
    read_run,
    write_run,
)
from .pipeline import Corpus, read_corpus, read_queries, run_rerank
from .rerank import (
    RankList,
    RankState,
    apply_window_permutation,
    build_reranker_prompt,
    parse_rank_list,
    plan_windows,
    repair_rank_list,
    rerank_pass,
)
from .roles import generate_answer, rewrite_query, summarize_passage

__version__ = "0.1.0"
