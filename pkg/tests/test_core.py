import json
import subprocess
import sys

import pytest
from hypothesis import given, strategies as st

from rankflow.core import (
    PipelineConfig,
    PromptTemplate,
    Query,
    compose_new_query,
    default_template,
    load_templates,
    parse_template,
    render_prompt,
)
from rankflow.errors import InvalidConfigError, InvalidInputError, RenderError

from conftest import GOLDEN


def test_compose_three_copies():
    assert compose_new_query("Q", "A", 3) == "Q Q Q A"


def test_compose_single_copy():
    assert compose_new_query("Q", "A", 1) == "Q A"


def test_compose_two_copies_prefix():
    q = "wifi vs bluetooth comparison"
    a = "Wi-Fi and Bluetooth differ in range..."
    out = compose_new_query(q, a, 2)
    assert out == f"{q} {q} {a}"


def test_compose_rejects_empty_and_bad_m():
    with pytest.raises(InvalidInputError):
        compose_new_query("", "A", 3)
    with pytest.raises(InvalidInputError):
        compose_new_query("Q", "A", 0)


@given(st.text(min_size=1), st.text(), st.integers(min_value=1, max_value=12))
def test_compose_length(rewritten, answer, m):
    out = compose_new_query(rewritten, answer, m)
    assert len(out) == m * len(rewritten) + len(answer) + m
    assert out.startswith(" ".join([rewritten] * m) + " ")
    assert out.endswith(answer)


def test_render_rewriter():
    messages = render_prompt(default_template("rewriter"), {"query": "what is wifi vs bluetooth"})
    assert len(messages) == 4
    assert messages[0][1].startswith("You are an AI retrieval assistant")
    assert messages[-1] == ("user", "what is wifi vs bluetooth")


def test_render_summarizer():
    messages = render_prompt(default_template("summarizer"), {"passage": "NFC, or Near Field..."})
    assert len(messages) == 2
    assert "good at summarizing passages" in messages[0][1]
    assert messages[1][1].endswith("Passage: NFC, or Near Field...")


def test_render_missing_placeholder_names_it():
    with pytest.raises(RenderError, match="query") as info:
        render_prompt(default_template("rewriter"), {})
    assert info.value.placeholder == "query"


def test_render_inserts_verbatim_without_rescanning():
    template = PromptTemplate("summarizer", "t", (("user", "Passage: {passage}"),))
    value = "braces {query} and {{x}} and \\n stay"
    assert render_prompt(template, {"passage": value}) == [("user", "Passage: " + value)]


def test_render_ignores_non_identifier_braces():
    template = PromptTemplate("reranker", "t", (("user", "format [] > [] {1} {query}"),))
    assert render_prompt(template, {"query": "q"}) == [("user", "format [] > [] {1} q")]


def test_default_templates_match_golden():
    golden = json.loads((GOLDEN / "role_prompts.json").read_text(encoding="utf-8"))
    for role, messages in golden.items():
        assert [list(m) for m in default_template(role).messages] == messages


def test_render_is_deterministic_across_processes():
    code = (
        "import json, sys; from rankflow.core import default_template, render_prompt;"
        "sys.stdout.write(json.dumps(render_prompt(default_template('answerer'), {'query': 'caf\\u00e9 \\u2603'})))"
    )
    outputs = {subprocess.run([sys.executable, "-c", code], capture_output=True, check=True).stdout for _ in range(2)}
    assert len(outputs) == 1
    local = json.dumps(render_prompt(default_template("answerer"), {"query": "café ☃"})).encode()
    assert outputs == {local}


def test_parse_template_header_and_blank_lines():
    text = "# version: v7\n# a comment\n@system\nline one\n\nline three\n\n@user\n{query}\n\n"
    t = parse_template(text, "rewriter")
    assert t.version == "v7"
    assert t.messages == (("system", "line one\n\nline three"), ("user", "{query}"))
    assert t.placeholders == ["query"]


def test_parse_template_rejects_stray_text():
    with pytest.raises(InvalidInputError):
        parse_template("hello\n@user\nx", "rewriter")


def test_load_templates_override(tmp_path):
    (tmp_path / "rewriter.txt").write_text("# version: mine\n@user\nRewrite: {query}\n", encoding="utf-8")
    templates = load_templates(tmp_path)
    assert templates["rewriter"].version == "mine"
    assert templates["answerer"].version == "answerer-v1"


def test_query_invariants():
    with pytest.raises(InvalidInputError):
        Query("q", "   ")
    with pytest.raises(InvalidInputError):
        Query("q", "text", rewritten="r", composed="r r r")
    assert Query("q", "t", "r", "a", "r r r a").composed == "r r r a"


def test_config_defaults_follow_published_setup():
    c = PipelineConfig()
    assert (c.repeat_m, c.window_w, c.step_s, c.temperature, c.top_k) == (3, 20, 10, 0.0, 100)
    assert c.reranker_prompt_features == {"relevance_standard", "cot", "format_requirement"}


@pytest.mark.parametrize("kwargs", [
    {"step_s": 21}, {"step_s": 0}, {"repeat_m": 0}, {"window_w": 0},
    {"reranker_prompt_features": {"bogus"}}, {"temperature": 3.0}, {"top_k": 0},
])
def test_config_validation(kwargs):
    with pytest.raises(InvalidConfigError):
        PipelineConfig(**kwargs)


def test_baseline_config():
    c = PipelineConfig.baseline()
    assert not (c.use_rewriter or c.use_answerer or c.use_summarizer)
    assert c.reranker_prompt_features == frozenset()
