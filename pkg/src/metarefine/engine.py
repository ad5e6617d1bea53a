"""Self-refinement backtracking with meta-repair of oscillating constraint failures."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Any, Mapping, Optional, Sequence

from .backends import Backend, BackendError, RoleTag
from .meta import aggregate_context, detect_loop, synthesize_instruction
from .pipeline import (
    FORMAT_CONSTRAINT_ID,
    Constraint,
    PipelineDef,
    Signature,
    Violation,
    check_constraints,
    render_feedback,
)
from .prompting import OutputParseError, format_fields, parse_output, render_prompt
from .records import (
    Attempt,
    CounterExampleDemo,
    EventKind,
    ExecutionTrace,
    HardFail,
    InstructionKind,
    MetaInstruction,
    Outcome,
    SoftAccept,
    Success,
)
from .records import violation_to_dict
from .tracing import RunMetrics, Tracer

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class BudgetConfig:
    max_backtracks: int = 5
    max_meta_repairs: int = 1
    meta_enabled: bool = True
    loop_max_period: int = 3

    def __post_init__(self) -> None:
        if self.max_backtracks < 0 or self.max_meta_repairs < 0:
            raise ValueError("budgets must be non-negative")
        if self.loop_max_period < 2:
            raise ValueError("loop_max_period must be at least 2")

    @property
    def max_attempts(self) -> int:
        return 1 + self.max_backtracks

    def to_dict(self) -> dict[str, Any]:
        return {
            "max_backtracks": self.max_backtracks,
            "max_meta_repairs": self.max_meta_repairs,
            "meta_enabled": self.meta_enabled,
            "loop_max_period": self.loop_max_period,
        }


class ExecutionAborted(RuntimeError):
    """A backend error stopped the execution; ``trace`` holds everything recorded so far."""

    def __init__(self, trace: ExecutionTrace, cause: BaseException) -> None:
        self.trace = trace
        self.cause = cause
        super().__init__(f"execution {trace.execution_id} aborted: {cause}")


def select_best_attempt(attempts: Sequence[Attempt], constraints: Sequence[Constraint]) -> Attempt:
    """Fewest HARD violations, then fewest SOFT, then the latest attempt.

    A format (parse) failure counts as a HARD violation: there is no output to accept.
    """
    if not attempts:
        raise ValueError("no attempts to choose from")
    hard = {c.id for c in constraints if c.is_hard} | {FORMAT_CONSTRAINT_ID}

    def score(a: Attempt) -> tuple[int, int, int]:
        n_hard = sum(v.constraint_id in hard for v in a.violations)
        return (n_hard, len(a.violations) - n_hard, -a.index)

    return min(attempts, key=score)


def _metrics(trace: ExecutionTrace, constraints: Sequence[Constraint], outcome: Outcome, final: Attempt) -> RunMetrics:
    failed = final.violation_ids
    return RunMetrics(
        base_calls=trace.base_calls,
        meta_calls=trace.meta_calls,
        attempts=len(trace.attempts),
        outcome=outcome.kind,
        constraint_satisfied={c.id: c.id not in failed and not final.parse_failed for c in constraints},
    )


def _attempt_text(attempt: Attempt) -> str:
    return attempt.raw_text.strip() if attempt.output is None else format_fields(dict(attempt.output))


def _primary_text(signature: Signature, attempt: Attempt) -> str:
    if attempt.output is None:
        return attempt.raw_text.strip()
    if len(signature.output_fields) == 1:
        return attempt.output[signature.output_names[0]]
    return format_fields(dict(attempt.output))


def execute_module(
    signature: Signature,
    constraints: Sequence[Constraint],
    inputs: Mapping[str, str],
    budgets: BudgetConfig,
    base_backend: Backend,
    meta_backend: Optional[Backend] = None,
    demos: Sequence[CounterExampleDemo] = (),
    *,
    tracer: Optional[Tracer] = None,
    pipeline_id: str = "",
    execution_id: Optional[str] = None,
    base_role: RoleTag = RoleTag.BASE,
) -> ExecutionTrace:
    """Run one module to an outcome under the given budgets.

    Each failed attempt adds its output and first violation to the retry
    feedback. While meta repair is enabled and budgeted, the failed-attempt
    history since the last repair is checked for a ping-pong loop; on
    detection the synthesized instruction rides along with every later
    attempt. Meta retries share the ordinary backtracking budget.
    """
    tracer = tracer or Tracer()
    meta_backend = meta_backend or base_backend
    execution_id = execution_id or tracer.new_execution_id(f"{pipeline_id or 'pipeline'}/{signature.name}")
    trace = ExecutionTrace(execution_id, pipeline_id, signature.name, dict(inputs))
    started = time.perf_counter()
    field_label = signature.output_names[0] if len(signature.output_fields) == 1 else "output"

    def emit(kind: EventKind, payload: Mapping[str, Any]) -> None:
        trace.events.append(tracer.emit(execution_id, kind, payload))

    def finish(outcome: Outcome, final: Attempt, kind: EventKind, payload: dict[str, Any]) -> ExecutionTrace:
        trace.outcome = outcome
        metrics = _metrics(trace, constraints, outcome, final)
        payload["metrics"] = metrics.to_dict(include_wall_time=False)
        emit(kind, payload)
        logger.debug("%s finished as %s in %.3fs", execution_id, outcome.kind, time.perf_counter() - started)
        return trace

    feedback_history: list[tuple[str, str]] = []
    active: Optional[MetaInstruction] = None
    loop_window_start = 0

    for index in range(1, budgets.max_attempts + 1):
        prompt = render_prompt(signature, inputs, demos, feedback_history, active)
        try:
            completion = base_backend.complete(base_role, prompt)
        except BackendError as exc:
            emit(EventKind.EXECUTION_ABORTED, {"attempt": index, "error": f"{type(exc).__name__}: {exc}"})
            raise ExecutionAborted(trace, exc) from exc

        try:
            output: Optional[dict[str, str]] = parse_output(completion.text, signature)
            violations = check_constraints(constraints, output)
        except OutputParseError as exc:
            output = None
            violations = [
                Violation(
                    FORMAT_CONSTRAINT_ID,
                    f"Output must provide every field using the 'name: value' format ({', '.join(exc.missing)} missing).",
                    f"missing {exc.missing}",
                )
            ]
        attempt = Attempt(
            index=index,
            instruction_kind=InstructionKind.META if active else InstructionKind.BASE,
            raw_text=completion.text,
            output=output,
            violations=tuple(violations),
            meta_instruction_id=active.instruction_id if active else None,
        )
        trace.attempts.append(attempt)
        common = {
            "attempt": index,
            "instruction_kind": attempt.instruction_kind.value,
            "field": field_label,
            "output": _primary_text(signature, attempt),
        }

        if attempt.succeeded:
            return finish(
                Success(dict(output), index),
                attempt,
                EventKind.ATTEMPT_SUCCEEDED,
                {**common, "fields": dict(output)},
            )

        feedback = render_feedback(violations[0])
        emit(
            EventKind.ATTEMPT_FAILED,
            {
                **common,
                "feedback": feedback,
                "violations": [violation_to_dict(v) for v in violations],
            },
        )
        feedback_history.append((_attempt_text(attempt), feedback))

        retries_left = index < budgets.max_attempts
        if not (retries_left and budgets.meta_enabled and trace.meta_calls < budgets.max_meta_repairs):
            continue
        window = trace.attempts[loop_window_start:]
        cycle = detect_loop([a.violation_ids for a in window], budgets.loop_max_period, first_attempt=window[0].index)
        if cycle is None:
            continue

        snapshot = aggregate_context(trace, signature, constraints, cycle)
        competing = trace.attempts[-(cycle.period + 1) :]
        emit(
            EventKind.LOOP_DETECTED,
            {
                **cycle.to_dict(),
                "competition_history": [
                    [_primary_text(signature, a), a.violations[0].rendered_message] for a in competing[:-1]
                ],
                "snapshot_digest": snapshot.digest,
            },
        )
        active = synthesize_instruction(snapshot, meta_backend, f"meta-{trace.meta_calls + 1}")
        trace.meta_instructions.append(active)
        emit(EventKind.META_INSTRUCTION, active.to_dict())
        loop_window_start = len(trace.attempts)

    best = select_best_attempt(trace.attempts, constraints)
    hard = {c.id for c in constraints if c.is_hard} | {FORMAT_CONSTRAINT_ID}
    hard_left = [v for v in best.violations if v.constraint_id in hard]
    payload = {
        "attempt": best.index,
        "field": field_label,
        "output": _primary_text(signature, best),
        "violations": [violation_to_dict(v) for v in best.violations],
    }
    if hard_left:
        violated = tuple(v.constraint_id for v in hard_left)
        return finish(
            HardFail(best.index, violated, best.violations),
            best,
            EventKind.HARD_FAILED,
            {**payload, "violated": list(violated)},
        )
    return finish(SoftAccept(dict(best.output), best.index, best.violations), best, EventKind.ACCEPTED_WITH_VIOLATIONS, payload)


@dataclass
class PipelineRun:
    pipeline_id: str
    traces: list[ExecutionTrace] = field(default_factory=list)
    outputs: dict[str, dict[str, str]] = field(default_factory=dict)

    @property
    def outcome_kind(self) -> str:
        kinds = {t.outcome.kind for t in self.traces if t.outcome is not None}
        for k in ("HARD_FAIL", "SOFT_ACCEPT"):
            if k in kinds:
                return k
        return "SUCCESS"


def resolve_inputs(pipeline: PipelineDef, module_name: str, inputs: Mapping[str, str], outputs: Mapping[str, Mapping[str, str]]) -> dict[str, str]:
    module = pipeline.module(module_name)
    resolved = {}
    for f in module.signature.input_names:
        src, _, name = pipeline.source_of(module_name, f).partition(".")
        pool = inputs if src == "inputs" else outputs[src]
        if name not in pool:
            raise KeyError(f"input {module_name}.{f} needs {src}.{name}, which is not available")
        resolved[f] = pool[name]
    return resolved


def run_pipeline(
    pipeline: PipelineDef,
    inputs: Mapping[str, str],
    budgets: BudgetConfig,
    base_backend: Backend,
    meta_backend: Optional[Backend] = None,
    demos: Optional[Mapping[str, Sequence[CounterExampleDemo]]] = None,
    *,
    tracer: Optional[Tracer] = None,
    base_role: RoleTag = RoleTag.BASE,
) -> PipelineRun:
    """Execute modules in dataflow order; a hard failure stops downstream modules."""
    tracer = tracer or Tracer()
    run = PipelineRun(pipeline.pipeline_id)
    for module in pipeline.execution_order():
        trace = execute_module(
            module.signature,
            module.constraints,
            resolve_inputs(pipeline, module.name, inputs, run.outputs),
            budgets,
            base_backend,
            meta_backend,
            (demos or {}).get(module.name, ()),
            tracer=tracer,
            pipeline_id=pipeline.pipeline_id,
            base_role=base_role,
        )
        run.traces.append(trace)
        if isinstance(trace.outcome, HardFail):
            break
        run.outputs[module.name] = dict(trace.outcome.output)
    return run
