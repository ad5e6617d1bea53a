"""Value types shared by the engine, meta-repair, compiler and tracing layers."""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Mapping, Optional, Union

from .pipeline import Violation


class InstructionKind(str, Enum):
    BASE = "BASE"
    META = "META"


class InstructionSource(str, Enum):
    MODEL = "MODEL"
    FALLBACK = "FALLBACK"


class DemoKind(str, Enum):
    COUNTER_EXAMPLE = "COUNTER_EXAMPLE"
    PLAIN_SUCCESS = "PLAIN_SUCCESS"


class EventKind(str, Enum):
    ATTEMPT_FAILED = "ATTEMPT_FAILED"
    LOOP_DETECTED = "LOOP_DETECTED"
    META_INSTRUCTION = "META_INSTRUCTION"
    ATTEMPT_SUCCEEDED = "ATTEMPT_SUCCEEDED"
    ACCEPTED_WITH_VIOLATIONS = "ACCEPTED_WITH_VIOLATIONS"
    HARD_FAILED = "HARD_FAILED"
    EXECUTION_ABORTED = "EXECUTION_ABORTED"
    DEMO_CAPTURED = "DEMO_CAPTURED"
    INPUT_SKIPPED = "INPUT_SKIPPED"


TERMINAL_EVENTS = frozenset(
    {
        EventKind.ATTEMPT_SUCCEEDED,
        EventKind.ACCEPTED_WITH_VIOLATIONS,
        EventKind.HARD_FAILED,
        EventKind.EXECUTION_ABORTED,
    }
)

MAX_INSTRUCTION_CHARS = 2000


@dataclass(frozen=True)
class MetaInstruction:
    text: str
    source: InstructionSource
    snapshot_digest: str
    instruction_id: str = "meta-1"

    def to_dict(self) -> dict[str, Any]:
        return {
            "instruction_id": self.instruction_id,
            "text": self.text,
            "source": self.source.value,
            "snapshot_digest": self.snapshot_digest,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "MetaInstruction":
        return cls(
            text=data["text"],
            source=InstructionSource(data["source"]),
            snapshot_digest=data["snapshot_digest"],
            instruction_id=data.get("instruction_id", "meta-1"),
        )


@dataclass(frozen=True)
class CounterExampleDemo:
    """A few-shot demonstration; counter-examples also carry the failure and its repair."""

    kind: DemoKind
    inputs: Mapping[str, str]
    successful_output: Mapping[str, str]
    failing_output: Optional[str] = None
    failing_violations: tuple[Violation, ...] = ()
    synthesized_instruction: Optional[MetaInstruction] = None

    def __post_init__(self) -> None:
        if self.kind is DemoKind.COUNTER_EXAMPLE and (
            self.failing_output is None or not self.failing_violations or self.synthesized_instruction is None
        ):
            raise ValueError("a COUNTER_EXAMPLE demo needs a failing output, its violations and an instruction")

    def to_dict(self) -> dict[str, Any]:
        data: dict[str, Any] = {
            "kind": self.kind.value,
            "inputs": dict(self.inputs),
            "successful_output": dict(self.successful_output),
        }
        if self.kind is DemoKind.COUNTER_EXAMPLE:
            data["failing_output"] = self.failing_output
            data["failing_violations"] = [violation_to_dict(v) for v in self.failing_violations]
            data["synthesized_instruction"] = self.synthesized_instruction.to_dict()
        return data

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "CounterExampleDemo":
        instr = data.get("synthesized_instruction")
        return cls(
            kind=DemoKind(data["kind"]),
            inputs=dict(data["inputs"]),
            successful_output=dict(data["successful_output"]),
            failing_output=data.get("failing_output"),
            failing_violations=tuple(violation_from_dict(v) for v in data.get("failing_violations", [])),
            synthesized_instruction=MetaInstruction.from_dict(instr) if instr is not None else None,
        )


def violation_to_dict(v: Violation) -> dict[str, str]:
    return {"constraint_id": v.constraint_id, "rendered_message": v.rendered_message, "observed": v.observed}


def violation_from_dict(data: Mapping[str, Any]) -> Violation:
    return Violation(data["constraint_id"], data["rendered_message"], data.get("observed", ""))


@dataclass(frozen=True)
class Attempt:
    index: int
    instruction_kind: InstructionKind
    raw_text: str
    output: Optional[Mapping[str, str]]  # None when the completion could not be parsed
    violations: tuple[Violation, ...]
    meta_instruction_id: Optional[str] = None
    base_calls_consumed: int = 1

    @property
    def succeeded(self) -> bool:
        return not self.violations

    @property
    def parse_failed(self) -> bool:
        return self.output is None

    @property
    def violation_ids(self) -> frozenset[str]:
        return frozenset(v.constraint_id for v in self.violations)


@dataclass(frozen=True)
class Success:
    output: Mapping[str, str]
    attempt_index: int
    kind: str = field(default="SUCCESS", init=False)


@dataclass(frozen=True)
class SoftAccept:
    output: Mapping[str, str]
    attempt_index: int
    violations: tuple[Violation, ...]
    kind: str = field(default="SOFT_ACCEPT", init=False)


@dataclass(frozen=True)
class HardFail:
    attempt_index: int
    violated: tuple[str, ...]
    violations: tuple[Violation, ...]
    kind: str = field(default="HARD_FAIL", init=False)


Outcome = Union[Success, SoftAccept, HardFail]


@dataclass(frozen=True)
class TraceEvent:
    sequence_no: int
    execution_id: str
    kind: EventKind
    payload: Mapping[str, Any]
    timestamp: Optional[str] = None

    def to_dict(self) -> dict[str, Any]:
        data: dict[str, Any] = {
            "sequence_no": self.sequence_no,
            "execution_id": self.execution_id,
            "kind": self.kind.value,
            "payload": self.payload,
        }
        if self.timestamp is not None:
            data["timestamp"] = self.timestamp
        return data

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "TraceEvent":
        return cls(
            sequence_no=int(data["sequence_no"]),
            execution_id=str(data["execution_id"]),
            kind=EventKind(data["kind"]),
            payload=dict(data["payload"]),
            timestamp=data.get("timestamp"),
        )


@dataclass
class ExecutionTrace:
    """Ordered record of one module execution. Mutated only by the engine while it runs."""

    execution_id: str
    pipeline_id: str
    module: str
    inputs: Mapping[str, str]
    attempts: list[Attempt] = field(default_factory=list)
    events: list[TraceEvent] = field(default_factory=list)
    meta_instructions: list[MetaInstruction] = field(default_factory=list)
    outcome: Optional[Outcome] = None

    @property
    def base_calls(self) -> int:
        return sum(a.base_calls_consumed for a in self.attempts)

    @property
    def meta_calls(self) -> int:
        return len(self.meta_instructions)
