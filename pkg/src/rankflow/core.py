"""Domain types, query composition and prompt templates."""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping

from .errors import InvalidConfigError, InvalidInputError, RenderError

ROLE_NAMES = ("rewriter", "answerer", "summarizer", "reranker")
SPEAKER_ROLES = ("system", "user", "assistant")

RELEVANCE_STANDARD = "relevance_standard"
COT = "cot"
FORMAT_REQUIREMENT = "format_requirement"
RERANKER_FEATURES = (RELEVANCE_STANDARD, COT, FORMAT_REQUIREMENT)

_PLACEHOLDER = re.compile(r"\{([A-Za-z_][A-Za-z0-9_]*)\}")


@dataclass(frozen=True)
class Query:
    query_id: str
    text: str
    rewritten: str | None = None
    pseudo_answer: str | None = None
    composed: str | None = None

    def __post_init__(self) -> None:
        if not self.text.strip():
            raise InvalidInputError(f"query {self.query_id!r} has empty text")
        if self.composed is not None and (self.rewritten is None or self.pseudo_answer is None):
            raise InvalidInputError("composed query requires both rewritten query and pseudo answer")


@dataclass(frozen=True)
class Passage:
    doc_id: str
    text: str
    first_stage_rank: int = 1
    first_stage_score: float = 0.0

    def __post_init__(self) -> None:
        if self.first_stage_rank < 1:
            raise InvalidInputError(f"passage {self.doc_id!r}: first_stage_rank must be >= 1")


@dataclass(frozen=True)
class SummarizedPassage:
    doc_id: str
    summary: str
    source_length_chars: int
    summary_length_chars: int

    def __post_init__(self) -> None:
        if not self.summary.strip():
            raise InvalidInputError(f"empty summary for passage {self.doc_id!r}")


@dataclass(frozen=True)
class PipelineConfig:
    """Role toggles and reranking geometry for one pipeline run.

    The defaults are the full workflow: all three preparatory roles on,
    query repeated three times, windows of 20 sliding by 10 over the top
    100 first-stage candidates, every reranker prompt feature enabled.
    """

    use_rewriter: bool = True
    use_answerer: bool = True
    use_summarizer: bool = True
    repeat_m: int = 3
    window_w: int = 20
    step_s: int = 10
    reranker_prompt_features: frozenset[str] = frozenset(RERANKER_FEATURES)
    temperature: float = 0.0
    top_k: int = 100
    rewriter_fallback: bool = True
    answerer_fallback: bool = True
    summarizer_fallback: bool = True
    cache_answers: bool = True

    def __post_init__(self) -> None:
        object.__setattr__(self, "reranker_prompt_features", frozenset(self.reranker_prompt_features))
        unknown = set(self.reranker_prompt_features) - set(RERANKER_FEATURES)
        if unknown:
            raise InvalidConfigError(f"unknown reranker prompt features: {sorted(unknown)}")
        if self.repeat_m < 1:
            raise InvalidConfigError("repeat_m must be >= 1")
        if self.window_w < 1 or self.step_s < 1 or self.step_s > self.window_w:
            raise InvalidConfigError(f"need 1 <= step_s <= window_w, got s={self.step_s} w={self.window_w}")
        if self.top_k < 1:
            raise InvalidConfigError("top_k must be >= 1")
        if not 0.0 <= self.temperature <= 2.0:
            raise InvalidConfigError("temperature must lie in [0, 2]")

    @classmethod
    def baseline(cls, **overrides) -> "PipelineConfig":
        """Plain listwise reranking: no roles, no extra prompt blocks."""
        values = dict(use_rewriter=False, use_answerer=False, use_summarizer=False,
                      reranker_prompt_features=frozenset())
        values.update(overrides)
        return cls(**values)

    def to_dict(self) -> dict:
        return {
            "use_rewriter": self.use_rewriter,
            "use_answerer": self.use_answerer,
            "use_summarizer": self.use_summarizer,
            "repeat_m": self.repeat_m,
            "window_w": self.window_w,
            "step_s": self.step_s,
            "reranker_prompt_features": sorted(self.reranker_prompt_features),
            "temperature": self.temperature,
            "top_k": self.top_k,
            "rewriter_fallback": self.rewriter_fallback,
            "answerer_fallback": self.answerer_fallback,
            "summarizer_fallback": self.summarizer_fallback,
            "cache_answers": self.cache_answers,
        }


@dataclass(frozen=True)
class PromptTemplate:
    role_name: str
    version: str
    messages: tuple[tuple[str, str], ...] = field(default_factory=tuple)

    def __post_init__(self) -> None:
        if self.role_name not in ROLE_NAMES:
            raise InvalidInputError(f"unknown role {self.role_name!r}")
        object.__setattr__(self, "messages", tuple((r, t) for r, t in self.messages))
        for speaker, _ in self.messages:
            if speaker not in SPEAKER_ROLES:
                raise InvalidInputError(f"unknown speaker role {speaker!r}")

    @property
    def placeholders(self) -> list[str]:
        seen: dict[str, None] = {}
        for _, text in self.messages:
            for name in _PLACEHOLDER.findall(text):
                seen.setdefault(name)
        return list(seen)


def compose_new_query(rewritten: str, pseudo_answer: str, m: int) -> str:
    """Repeat ``rewritten`` m times and append the pseudo answer, space separated."""
    if not rewritten:
        raise InvalidInputError("rewritten query must be non-empty")
    if m < 1:
        raise InvalidInputError(f"repeat count must be >= 1, got {m}")
    return " ".join([rewritten] * m + [pseudo_answer])


def render_prompt(template: PromptTemplate, bindings: Mapping[str, str]) -> list[tuple[str, str]]:
    """Substitute ``{name}`` placeholders verbatim.

    Bound values are inserted as-is and never rescanned, so braces inside a
    passage survive untouched.
    """
    for name in template.placeholders:
        if name not in bindings:
            raise RenderError(name, template.role_name)

    def substitute(match: re.Match) -> str:
        return bindings[match.group(1)]

    return [(speaker, _PLACEHOLDER.sub(substitute, text)) for speaker, text in template.messages]


def parse_template(text: str, role_name: str) -> PromptTemplate:
    """Parse the plain-text template format.

    Header lines ``# key: value`` precede the first message; each message
    starts with a line ``@system``, ``@user`` or ``@assistant`` and runs to
    the next such line. Trailing blank lines of a message are dropped.
    """
    version = "unversioned"
    messages: list[tuple[str, list[str]]] = []
    for line in text.splitlines():
        stripped = line.strip()
        if stripped[1:] in SPEAKER_ROLES and stripped.startswith("@"):
            messages.append((stripped[1:], []))
        elif not messages:
            if stripped.startswith("#") and ":" in stripped:
                key, _, value = stripped[1:].partition(":")
                if key.strip() == "version":
                    version = value.strip()
            elif stripped and not stripped.startswith("#"):
                raise InvalidInputError(f"text before first message marker: {line!r}")
        else:
            messages[-1][1].append(line)
    if not messages:
        raise InvalidInputError(f"{role_name} template has no messages")
    built = []
    for speaker, lines in messages:
        while lines and not lines[-1].strip():
            lines.pop()
        built.append((speaker, "\n".join(lines)))
    return PromptTemplate(role_name=role_name, version=version, messages=tuple(built))


def load_template(path: str | Path, role_name: str | None = None) -> PromptTemplate:
    path = Path(path)
    return parse_template(path.read_text(encoding="utf-8"), role_name or path.stem)


def default_template(role_name: str) -> PromptTemplate:
    source = resources.files("rankflow").joinpath("templates", f"{role_name}.txt")
    return parse_template(source.read_text(encoding="utf-8"), role_name)


def default_templates() -> dict[str, PromptTemplate]:
    return {name: default_template(name) for name in ("rewriter", "answerer", "summarizer")}


def load_templates(directory: str | Path | None, roles: Iterable[str] = ("rewriter", "answerer", "summarizer")) -> dict[str, PromptTemplate]:
    """Defaults, overridden by ``<role>.txt`` files found in ``directory``."""
    templates = default_templates()
    if directory is not None:
        for role in roles:
            candidate = Path(directory) / f"{role}.txt"
            if candidate.exists():
                templates[role] = load_template(candidate, role)
    return templates
