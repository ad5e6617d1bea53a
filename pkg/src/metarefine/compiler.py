"""Counter-example bootstrapping of few-shot demos, and the compiled-artifact file."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Mapping, Optional, Sequence

from .backends import Backend, RoleTag
from .engine import BudgetConfig, ExecutionAborted, execute_module, resolve_inputs
from .pipeline import PipelineDef, check_constraints
from .records import (
    CounterExampleDemo,
    DemoKind,
    EventKind,
    ExecutionTrace,
    InstructionKind,
    Success,
)
from .tracing import Tracer

logger = logging.getLogger(__name__)

COMPILED_FORMAT_VERSION = 1
DEFAULT_DEMO_CAP = 3


class CompiledFormatError(ValueError):
    """The compiled artifact is truncated, malformed or of an unknown version."""


@dataclass(frozen=True)
class Provenance:
    teacher_model: str
    created_at: str
    budgets: Mapping[str, Any]


@dataclass
class CompiledPipeline:
    pipeline_id: str
    demos: dict[str, list[CounterExampleDemo]]
    provenance: Provenance
    format_version: int = COMPILED_FORMAT_VERSION

    def counter_examples(self, module: str) -> list[CounterExampleDemo]:
        return [d for d in self.demos.get(module, []) if d.kind is DemoKind.COUNTER_EXAMPLE]

    def to_dict(self) -> dict[str, Any]:
        return {
            "format_version": self.format_version,
            "pipeline_id": self.pipeline_id,
            "provenance": {
                "teacher_model": self.provenance.teacher_model,
                "created_at": self.provenance.created_at,
                "budgets": dict(self.provenance.budgets),
            },
            "modules": {name: [d.to_dict() for d in demos] for name, demos in self.demos.items()},
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "CompiledPipeline":
        if not isinstance(data, Mapping):
            raise CompiledFormatError("compiled artifact must be a JSON object")
        version = data.get("format_version")
        if version != COMPILED_FORMAT_VERSION:
            raise CompiledFormatError(f"unsupported compiled format_version {version!r}")
        try:
            prov = data["provenance"]
            return cls(
                pipeline_id=data["pipeline_id"],
                demos={name: [CounterExampleDemo.from_dict(d) for d in demos] for name, demos in data["modules"].items()},
                provenance=Provenance(prov["teacher_model"], prov["created_at"], dict(prov["budgets"])),
            )
        except (KeyError, TypeError, ValueError, AttributeError) as exc:
            raise CompiledFormatError(f"compiled artifact does not match the schema: {exc!r}") from None


def _demo_from_trace(trace: ExecutionTrace) -> CounterExampleDemo:
    success = trace.attempts[-1]
    if success.instruction_kind is not InstructionKind.META:
        return CounterExampleDemo(DemoKind.PLAIN_SUCCESS, dict(trace.inputs), dict(success.output))
    instruction = next(m for m in trace.meta_instructions if m.instruction_id == success.meta_instruction_id)
    # last failure recorded before this instruction first applied
    first_use = next(a.index for a in trace.attempts if a.meta_instruction_id == instruction.instruction_id)
    failing = trace.attempts[first_use - 2]
    return CounterExampleDemo(
        DemoKind.COUNTER_EXAMPLE,
        dict(trace.inputs),
        dict(success.output),
        failing_output=failing.raw_text.strip(),
        failing_violations=failing.violations,
        synthesized_instruction=instruction,
    )


def bootstrap_demos(
    pipeline: PipelineDef,
    trainset: Sequence[Mapping[str, str]],
    teacher_backend: Backend,
    budgets: BudgetConfig,
    meta_backend: Optional[Backend] = None,
    *,
    tracer: Optional[Tracer] = None,
    teacher_model: str = "teacher",
    created_at: Optional[str] = None,
) -> CompiledPipeline:
    """Run the teacher over ``trainset`` with meta repair on and keep what succeeded.

    Successes reached through a meta-guided retry become counter-example demos
    that carry the failure, the instruction and the corrected output. Other
    successes become plain demos. Anything else is skipped with an event.
    """
    if not trainset:
        raise ValueError("trainset must not be empty")
    tracer = tracer or Tracer()
    budgets = BudgetConfig(budgets.max_backtracks, budgets.max_meta_repairs, True, budgets.loop_max_period)
    demos: dict[str, list[CounterExampleDemo]] = {m.name: [] for m in pipeline.modules}

    for i, example in enumerate(trainset):
        compile_id = f"compile/{pipeline.pipeline_id}#{i + 1}"
        outputs: dict[str, dict[str, str]] = {}
        for module in pipeline.execution_order():
            def skip(reason: str) -> None:
                tracer.emit(compile_id, EventKind.INPUT_SKIPPED, {"input_index": i, "module": module.name, "reason": reason})

            try:
                module_inputs = resolve_inputs(pipeline, module.name, example, outputs)
            except KeyError as exc:
                skip(str(exc))
                break
            try:
                trace = execute_module(
                    module.signature,
                    module.constraints,
                    module_inputs,
                    budgets,
                    teacher_backend,
                    meta_backend or teacher_backend,
                    tracer=tracer,
                    pipeline_id=pipeline.pipeline_id,
                    base_role=RoleTag.TEACHER,
                )
            except ExecutionAborted as exc:
                skip(f"backend error: {exc.cause}")
                break
            if not isinstance(trace.outcome, Success):
                skip(f"teacher outcome was {trace.outcome.kind}")
                if trace.outcome.kind == "HARD_FAIL":
                    break
                outputs[module.name] = dict(trace.outcome.output)
                continue
            demo = _demo_from_trace(trace)
            demos[module.name].append(demo)
            outputs[module.name] = dict(trace.outcome.output)
            tracer.emit(
                compile_id,
                EventKind.DEMO_CAPTURED,
                {"input_index": i, "module": module.name, "demo_kind": demo.kind.value, "execution_id": trace.execution_id},
            )

    return CompiledPipeline(
        pipeline.pipeline_id,
        demos,
        Provenance(teacher_model, created_at or datetime.now(timezone.utc).isoformat(), budgets.to_dict()),
    )


def persist_compiled(compiled: CompiledPipeline, path: str | Path, pipeline: Optional[PipelineDef] = None) -> None:
    """Write the artifact as JSON.

    With ``pipeline`` given, every counter-example's corrected output is
    re-checked against its module's constraints first.
    """
    if pipeline is not None:
        for name in compiled.demos:
            constraints = pipeline.module(name).constraints
            for demo in compiled.counter_examples(name):
                bad = check_constraints(constraints, demo.successful_output)
                if bad:
                    raise ValueError(f"counter-example demo for {name!r} violates {[v.constraint_id for v in bad]}")
    Path(path).write_text(json.dumps(compiled.to_dict(), indent=2, ensure_ascii=False) + "\n", encoding="utf-8")


def load_compiled(path: str | Path) -> CompiledPipeline:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise CompiledFormatError(f"{path}: not valid JSON ({exc.msg})") from None
    return CompiledPipeline.from_dict(data)


def inject_demos(compiled: CompiledPipeline, module: str, k: int = DEFAULT_DEMO_CAP) -> list[CounterExampleDemo]:
    """Up to ``k`` demos in stored order, keeping counter-examples first when truncating."""
    if module not in compiled.demos:
        raise KeyError(f"compiled pipeline has no module {module!r}")
    demos = compiled.demos[module]
    if len(demos) <= k:
        return list(demos)
    counter = [i for i, d in enumerate(demos) if d.kind is DemoKind.COUNTER_EXAMPLE]
    plain = [i for i, d in enumerate(demos) if d.kind is not DemoKind.COUNTER_EXAMPLE]
    keep = sorted((counter + plain)[:k])
    return [demos[i] for i in keep]
