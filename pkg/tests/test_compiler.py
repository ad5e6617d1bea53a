from __future__ import annotations

import json

import pytest
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

from conftest import FIG2_SUCCESS, check_golden
from metarefine.backends import RoleTag, ScriptedBackend
from metarefine.compiler import (
    CompiledFormatError,
    CompiledPipeline,
    Provenance,
    bootstrap_demos,
    inject_demos,
    load_compiled,
    persist_compiled,
)
from metarefine.engine import BudgetConfig
from metarefine.pipeline import Violation, check_constraints
from metarefine.prompting import render_prompt
from metarefine.records import CounterExampleDemo, DemoKind, EventKind, InstructionSource, MetaInstruction
from metarefine.tracing import Tracer

STAMP = "2026-01-01T00:00:00+00:00"


@pytest.fixture
def fig2_compiled(tweet_pipeline, tweet_inputs, fig2_script_data):
    teacher = ScriptedBackend({"TEACHER": fig2_script_data["TEACHER"], "META": fig2_script_data["META"]})
    return bootstrap_demos(tweet_pipeline, [tweet_inputs], teacher, BudgetConfig(), created_at=STAMP)


def test_fig2_counter_example(fig2_compiled, tweet_module, fig2_script_data):
    (demo,) = fig2_compiled.demos["generate_tweet"]
    assert demo.kind is DemoKind.COUNTER_EXAMPLE
    assert demo.synthesized_instruction.text == fig2_script_data["META"][0]
    assert demo.synthesized_instruction.source is InstructionSource.MODEL
    assert demo.successful_output == {"tweet": FIG2_SUCCESS}
    # the last failure before the instruction took effect is attempt 3 (too long)
    assert demo.failing_output == fig2_script_data["TEACHER"][2]
    assert [v.constraint_id for v in demo.failing_violations] == ["length"]
    assert check_constraints(tweet_module.constraints, demo.successful_output) == []
    assert fig2_compiled.provenance.budgets["max_backtracks"] == 5


def test_teacher_role_is_used(tweet_pipeline, tweet_inputs):
    teacher = ScriptedBackend({"TEACHER": [FIG2_SUCCESS]})
    compiled = bootstrap_demos(tweet_pipeline, [tweet_inputs], teacher, BudgetConfig())
    assert teacher.calls[RoleTag.TEACHER] == 1 and teacher.calls[RoleTag.BASE] == 0
    (demo,) = compiled.demos["generate_tweet"]
    assert demo.kind is DemoKind.PLAIN_SUCCESS


def test_hard_failure_is_skipped(strict_pipeline, tweet_inputs):
    long = "GAN generator discriminator " * 5
    tracer = Tracer()
    teacher = ScriptedBackend({"TEACHER": [long] * 6})
    compiled = bootstrap_demos(strict_pipeline, [tweet_inputs], teacher, BudgetConfig(), tracer=tracer)
    assert compiled.demos["generate_tweet"] == []
    skips = [e for e in tracer.events if e.kind is EventKind.INPUT_SKIPPED]
    assert len(skips) == 1 and "HARD_FAIL" in skips[0].payload["reason"]


def test_backend_error_skips_not_aborts(tweet_pipeline, tweet_inputs):
    tracer = Tracer()
    teacher = ScriptedBackend({"TEACHER": [FIG2_SUCCESS]})
    compiled = bootstrap_demos(tweet_pipeline, [tweet_inputs, tweet_inputs], teacher, BudgetConfig(), tracer=tracer)
    assert len(compiled.demos["generate_tweet"]) == 1
    assert [e.kind for e in tracer.events if e.kind in (EventKind.DEMO_CAPTURED, EventKind.INPUT_SKIPPED)] == [
        EventKind.DEMO_CAPTURED,
        EventKind.INPUT_SKIPPED,
    ]


def test_empty_trainset(tweet_pipeline):
    with pytest.raises(ValueError):
        bootstrap_demos(tweet_pipeline, [], ScriptedBackend({}), BudgetConfig())


def test_meta_calls_bounded(tweet_pipeline, tweet_inputs, fig2_script_data):
    teacher = ScriptedBackend({"TEACHER": fig2_script_data["TEACHER"] * 3, "META": fig2_script_data["META"] * 3})
    bootstrap_demos(tweet_pipeline, [tweet_inputs] * 3, teacher, BudgetConfig(5, 1, False))
    assert teacher.calls[RoleTag.META] <= 1 * 3


class TestPersistence:
    def test_round_trip(self, tmp_path, fig2_compiled, tweet_pipeline):
        path = tmp_path / "c.json"
        persist_compiled(fig2_compiled, path, tweet_pipeline)
        assert load_compiled(path) == fig2_compiled

    def test_unknown_version(self, tmp_path, fig2_compiled):
        path = tmp_path / "c.json"
        data = fig2_compiled.to_dict()
        data["format_version"] = 99
        path.write_text(json.dumps(data))
        with pytest.raises(CompiledFormatError, match="format_version"):
            load_compiled(path)

    def test_truncated(self, tmp_path, fig2_compiled):
        path = tmp_path / "c.json"
        persist_compiled(fig2_compiled, path)
        text = path.read_text()
        path.write_text(text[: len(text) // 2])
        with pytest.raises(CompiledFormatError):
            load_compiled(path)

    def test_schema_violation(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text(json.dumps({"format_version": 1, "pipeline_id": "p"}))
        with pytest.raises(CompiledFormatError):
            load_compiled(path)

    def test_rejects_noncompliant_counter_example(self, tmp_path, fig2_compiled, tweet_pipeline):
        demo = fig2_compiled.demos["generate_tweet"][0]
        bad = CounterExampleDemo(
            DemoKind.COUNTER_EXAMPLE, demo.inputs, {"tweet": "too short, no keywords"},
            demo.failing_output, demo.failing_violations, demo.synthesized_instruction,
        )
        compiled = CompiledPipeline("tweet_summarizer", {"generate_tweet": [bad]}, fig2_compiled.provenance)
        with pytest.raises(ValueError):
            persist_compiled(compiled, tmp_path / "c.json", tweet_pipeline)


_text = st.text(alphabet="abc xyz'\"\n日", max_size=12)
_fields = st.dictionaries(st.sampled_from(["q", "tweet", "x"]), _text, max_size=3)


@st.composite
def demos(draw):
    if draw(st.booleans()):
        return CounterExampleDemo(DemoKind.PLAIN_SUCCESS, draw(_fields), draw(_fields))
    instr = MetaInstruction(draw(_text) or "i", draw(st.sampled_from(list(InstructionSource))), "d" * 8, "meta-1")
    violations = tuple(Violation(draw(_text) or "c", draw(_text) or "m", draw(_text)) for _ in range(draw(st.integers(1, 2))))
    return CounterExampleDemo(DemoKind.COUNTER_EXAMPLE, draw(_fields), draw(_fields), draw(_text), violations, instr)


@settings(max_examples=50, suppress_health_check=[HealthCheck.function_scoped_fixture])
@given(st.dictionaries(st.sampled_from(["m1", "m2"]), st.lists(demos(), max_size=4), max_size=2))
def test_round_trip_property(tmp_path, demo_map):
    compiled = CompiledPipeline("p", demo_map, Provenance("t", STAMP, {"max_backtracks": 5}))
    path = tmp_path / "c.json"
    persist_compiled(compiled, path)
    assert load_compiled(path) == compiled


def _plain(i):
    return CounterExampleDemo(DemoKind.PLAIN_SUCCESS, {"q": str(i)}, {"tweet": str(i)})


class TestInject:
    def test_single(self, fig2_compiled):
        assert inject_demos(fig2_compiled, "generate_tweet") == fig2_compiled.demos["generate_tweet"]

    def test_prefers_counter_examples(self, fig2_compiled):
        ce = fig2_compiled.demos["generate_tweet"][0]
        stored = [_plain(1), ce, _plain(2), ce, _plain(3)]
        compiled = CompiledPipeline("p", {"m": stored}, fig2_compiled.provenance)
        assert inject_demos(compiled, "m", k=3) == [_plain(1), ce, ce]

    def test_unknown_module(self, fig2_compiled):
        with pytest.raises(KeyError):
            inject_demos(fig2_compiled, "nope")

    def test_adds_one_exemplar_block(self, fig2_compiled, tweet_module, tweet_inputs):
        plain = render_prompt(tweet_module.signature, tweet_inputs)
        with_demo = render_prompt(tweet_module.signature, tweet_inputs, inject_demos(fig2_compiled, "generate_tweet"))
        assert len(with_demo) == len(plain) + 2
        assert with_demo.messages[0] == plain.messages[0] and with_demo.messages[-1] == plain.messages[-1]
        check_golden("prompt_with_counter_example.txt", with_demo.as_text())
