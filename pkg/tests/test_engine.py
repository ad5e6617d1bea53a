from __future__ import annotations

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import FIG2_SUCCESS
from metarefine.backends import RoleTag, ScriptedBackend
from metarefine.engine import BudgetConfig, ExecutionAborted, execute_module, run_pipeline, select_best_attempt
from metarefine.pipeline import (
    FORMAT_CONSTRAINT_ID,
    Constraint,
    ConstraintKind,
    ContainsAll,
    FieldSpec,
    MaxChars,
    ModuleDef,
    PipelineDef,
    Signature,
    Violation,
)
from metarefine.records import Attempt, EventKind, HardFail, InstructionKind, SoftAccept, Success


def _run(module, inputs, script, budgets, **kw):
    backend = ScriptedBackend(script)
    trace = execute_module(module.signature, module.constraints, inputs, budgets, backend, **kw)
    return trace, backend


def kinds(trace):
    return [e.kind for e in trace.events]


def test_fig2_success_via_meta(tweet_module, tweet_inputs, fig2_script_data):
    trace, backend = _run(tweet_module, tweet_inputs, fig2_script_data, BudgetConfig(5, 1, True))
    assert isinstance(trace.outcome, Success)
    assert trace.outcome.attempt_index == 4
    assert trace.outcome.output == {"tweet": FIG2_SUCCESS}
    assert [a.instruction_kind for a in trace.attempts] == [InstructionKind.BASE] * 3 + [InstructionKind.META]
    assert trace.attempts[3].meta_instruction_id == "meta-1"
    assert kinds(trace) == [
        EventKind.ATTEMPT_FAILED,
        EventKind.ATTEMPT_FAILED,
        EventKind.ATTEMPT_FAILED,
        EventKind.LOOP_DETECTED,
        EventKind.META_INSTRUCTION,
        EventKind.ATTEMPT_SUCCEEDED,
    ]
    assert backend.calls[RoleTag.BASE] == 4 and backend.calls[RoleTag.META] == 1
    loop = trace.events[3].payload
    assert loop["period"] == 2 and loop["detected_at_attempt"] == 3
    assert loop["signatures"] == [["length"], ["keywords"]]


def test_baseline_without_meta(tweet_module, tweet_inputs, fig2_script_data):
    trace, backend = _run(tweet_module, tweet_inputs, fig2_script_data, BudgetConfig(5, 1, False))
    assert isinstance(trace.outcome, SoftAccept)
    assert len(trace.attempts) == 6
    assert trace.outcome.attempt_index == 6
    assert len(trace.outcome.violations) >= 1
    assert backend.calls[RoleTag.META] == 0
    assert all(a.instruction_kind is InstructionKind.BASE for a in trace.attempts)
    assert EventKind.LOOP_DETECTED not in kinds(trace)


def test_hard_fail(strict_pipeline, tweet_inputs):
    module = strict_pipeline.module("generate_tweet")
    long = "GAN generator discriminator " * 5
    trace, _ = _run(module, tweet_inputs, {"BASE": [long] * 3}, BudgetConfig(2, 1, True))
    assert isinstance(trace.outcome, HardFail)
    assert trace.outcome.violated == ("length",)
    assert kinds(trace)[-1] is EventKind.HARD_FAILED


def test_feedback_reaches_the_prompt(tweet_module, tweet_inputs):
    class Recorder(ScriptedBackend):
        prompts = []

        def complete(self, role, prompt):
            self.prompts.append(prompt)
            return super().complete(role, prompt)

    backend = Recorder({"BASE": ["x" * 120, FIG2_SUCCESS]})
    execute_module(tweet_module.signature, tweet_module.constraints, tweet_inputs, BudgetConfig(), backend)
    retry = backend.prompts[1].messages[-1].content
    assert "Previous attempt 1:" in retry
    # only the first violation of the attempt is fed back
    assert "Tweet must include these keywords" in retry and "very concise" not in retry


def test_parse_failure_consumes_budget():
    sig = Signature("m", "i", (FieldSpec("q"),), (FieldSpec("a"), FieldSpec("b")))
    trace = execute_module(sig, (), {"q": "?"}, BudgetConfig(1, 0, False), ScriptedBackend({"BASE": ["a: 1", "a: 1\nb: 2"]}))
    assert trace.attempts[0].parse_failed
    assert trace.attempts[0].violations[0].constraint_id == FORMAT_CONSTRAINT_ID
    assert isinstance(trace.outcome, Success) and trace.outcome.output == {"a": "1", "b": "2"}


def test_all_parse_failures_is_hard_fail():
    sig = Signature("m", "i", (FieldSpec("q"),), (FieldSpec("a"), FieldSpec("b")))
    trace = execute_module(sig, (), {"q": "?"}, BudgetConfig(1, 0, False), ScriptedBackend({"BASE": ["nope", "nope"]}))
    assert isinstance(trace.outcome, HardFail) and trace.outcome.violated == (FORMAT_CONSTRAINT_ID,)


def test_backend_error_keeps_partial_trace(tweet_module, tweet_inputs):
    with pytest.raises(ExecutionAborted) as info:
        _run(tweet_module, tweet_inputs, {"BASE": ["x" * 120]}, BudgetConfig(3, 0, False))
    trace = info.value.trace
    assert len(trace.attempts) == 1 and trace.outcome is None
    assert kinds(trace)[-1] is EventKind.EXECUTION_ABORTED


def test_meta_failure_falls_back_and_continues(tweet_module, tweet_inputs, fig2_script_data):
    script = dict(fig2_script_data, META=[{"raise": "transport"}])
    trace, _ = _run(tweet_module, tweet_inputs, script, BudgetConfig(5, 1, True))
    assert trace.meta_instructions[0].source.value == "FALLBACK"
    assert isinstance(trace.outcome, Success)


def test_second_repair_needs_a_fresh_loop(tweet_module, tweet_inputs):
    L, S = "GAN generator discriminator " * 5, "GAN"
    script = {"BASE": [L, S, L, S, L, S], "META": ["one", "two"]}
    trace, backend = _run(tweet_module, tweet_inputs, script, BudgetConfig(5, 2, True))
    detected = [e.payload["detected_at_attempt"] for e in trace.events if e.kind is EventKind.LOOP_DETECTED]
    # the detection window restarts after a repair; the next cycle would close at
    # attempt 6, which is the last one, so no second synthesis is spent
    assert detected == [3]
    assert backend.calls[RoleTag.META] == 1

    trace, backend = _run(tweet_module, tweet_inputs, {"BASE": [L, S, L, S, L, S, L, S], "META": ["one", "two"]}, BudgetConfig(7, 2, True))
    detected = [e.payload["detected_at_attempt"] for e in trace.events if e.kind is EventKind.LOOP_DETECTED]
    assert detected == [3, 6]
    assert [a.meta_instruction_id for a in trace.attempts[-2:]] == ["meta-2", "meta-2"]


def _attempt(index, *ids):
    return Attempt(index, InstructionKind.BASE, "", {"tweet": ""}, tuple(Violation(i, i) for i in ids))


HARD = Constraint("h", ConstraintKind.HARD, "tweet", MaxChars(5), "h")
SOFTS = [Constraint(i, ConstraintKind.SOFT, "tweet", MaxChars(5), i) for i in ("len", "kw", "s1", "s2")]


class TestSelectBest:
    def test_tie_goes_to_latest(self):
        attempts = [_attempt(1, "len"), _attempt(2, "kw"), _attempt(3, "len")]
        assert select_best_attempt(attempts, SOFTS).index == 3

    def test_fewer_violations(self):
        assert select_best_attempt([_attempt(1, "len", "kw"), _attempt(2, "kw")], SOFTS).index == 2

    def test_hard_dominates(self):
        assert select_best_attempt([_attempt(1, "h"), _attempt(2, "s1", "s2")], [HARD, *SOFTS]).index == 2

    def test_empty(self):
        with pytest.raises(ValueError):
            select_best_attempt([], SOFTS)


def test_run_pipeline_chains_modules():
    first = ModuleDef(Signature("draft", "d", (FieldSpec("topic"),), (FieldSpec("text"),)))
    second = ModuleDef(
        Signature("shorten", "s", (FieldSpec("text"),), (FieldSpec("short"),)),
        (Constraint("len", ConstraintKind.HARD, "short", MaxChars(10), "short please"),),
    )
    pipeline = PipelineDef("two", (second, first), {"shorten": {"text": "draft.text"}})
    backend = ScriptedBackend({"BASE": ["a long draft", "tiny"]})
    run = run_pipeline(pipeline, {"topic": "t"}, BudgetConfig(), backend)
    assert [t.module for t in run.traces] == ["draft", "shorten"]
    assert run.outputs["shorten"] == {"short": "tiny"}
    assert run.traces[1].inputs == {"text": "a long draft"}
    assert run.outcome_kind == "SUCCESS"


def test_reproducible(tweet_module, tweet_inputs, fig2_script_data):
    a, _ = _run(tweet_module, tweet_inputs, fig2_script_data, BudgetConfig())
    b, _ = _run(tweet_module, tweet_inputs, fig2_script_data, BudgetConfig())
    assert a.events == b.events and a.attempts == b.attempts


# --------------------------------------------------------------------------- #
# randomized scripts
# --------------------------------------------------------------------------- #

POOL = ["", "GAN", "generator discriminator", "GAN generator discriminator", "GAN generator discriminator " * 5, "x" * 120]
META_POOL = ["", "balance both", {"raise": "transport"}, "y" * 2500]

SIG = Signature("m", "i", (FieldSpec("q"),), (FieldSpec("tweet"),))


@st.composite
def scenarios(draw):
    constraints = []
    if draw(st.booleans()):
        constraints.append(Constraint("kw", draw(st.sampled_from(list(ConstraintKind))), "tweet", ContainsAll(("GAN", "generator")), "kw"))
    if draw(st.booleans()):
        constraints.append(Constraint("len", draw(st.sampled_from(list(ConstraintKind))), "tweet", MaxChars(40), "len"))
    budgets = BudgetConfig(draw(st.integers(0, 6)), draw(st.integers(0, 3)), draw(st.booleans()), draw(st.integers(2, 3)))
    base = draw(st.lists(st.sampled_from(POOL), min_size=budgets.max_attempts, max_size=budgets.max_attempts))
    meta = draw(st.lists(st.sampled_from(META_POOL), min_size=budgets.max_meta_repairs, max_size=budgets.max_meta_repairs))
    return constraints, budgets, {"BASE": base, "META": meta}


def check_invariants(trace, constraints, budgets, backend):
    hard = {c.id for c in constraints if c.is_hard}
    assert backend.calls[RoleTag.BASE] == trace.base_calls == len(trace.attempts) <= budgets.max_attempts
    assert backend.calls[RoleTag.META] == trace.meta_calls <= budgets.max_meta_repairs
    assert [a.index for a in trace.attempts] == list(range(1, len(trace.attempts) + 1))
    if not budgets.meta_enabled:
        assert trace.meta_calls == 0
        assert all(a.instruction_kind is InstructionKind.BASE for a in trace.attempts)
    outcome = trace.outcome
    any_clean = any(a.succeeded for a in trace.attempts)
    assert isinstance(outcome, Success) == any_clean
    if isinstance(outcome, Success):
        assert trace.attempts[-1].succeeded and sum(a.succeeded for a in trace.attempts) == 1
    if isinstance(outcome, SoftAccept):
        assert outcome.violations and all(v.constraint_id not in hard for v in outcome.violations)
    if isinstance(outcome, HardFail):
        assert set(outcome.violated) <= hard | {FORMAT_CONSTRAINT_ID}
        assert len(trace.attempts) == budgets.max_attempts
    terminal = [e for e in trace.events if e.kind in {EventKind.ATTEMPT_SUCCEEDED, EventKind.ACCEPTED_WITH_VIOLATIONS, EventKind.HARD_FAILED}]
    assert len(terminal) == 1 and trace.events[-1] is terminal[0]


@settings(max_examples=300, deadline=None)
@given(scenarios())
def test_budget_and_outcome_invariants(scenario):
    constraints, budgets, script = scenario
    backend = ScriptedBackend(script)
    trace = execute_module(SIG, constraints, {"q": "?"}, budgets, backend)
    check_invariants(trace, constraints, budgets, backend)
