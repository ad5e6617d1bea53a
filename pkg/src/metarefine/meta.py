"""Ping-pong loop detection and synthesis of a balancing instruction.

When the violated-constraint sets of consecutive failed attempts start to
repeat (A fails, then B, then A again), the refine loop is oscillating
between competing constraints rather than converging. This module spots
that pattern, packages the whole module state for a second model call, and
turns the reply into one instruction for the remaining retries.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass
from typing import Any, Optional, Sequence

from .backends import Backend, BackendError, RoleTag
from .pipeline import Constraint, Signature
from .prompting import Message, MessageRole, PromptMessages, format_fields
from .records import (
    MAX_INSTRUCTION_CHARS,
    ExecutionTrace,
    InstructionSource,
    MetaInstruction,
)

logger = logging.getLogger(__name__)

ViolationSignature = frozenset  # frozenset[str] of violated constraint ids

MIN_SNAPSHOT_HISTORY = 3


@dataclass(frozen=True)
class CycleDescription:
    period: int
    detected_at_attempt: int
    signatures: tuple[frozenset[str], ...]

    def to_dict(self) -> dict[str, Any]:
        return {
            "period": self.period,
            "detected_at_attempt": self.detected_at_attempt,
            "signatures": [sorted(s) for s in self.signatures],
        }


def detect_loop(
    history: Sequence[frozenset[str]],
    max_period: int = 3,
    first_attempt: int = 1,
) -> Optional[CycleDescription]:
    """Return the shortest oscillation ending at the latest failed attempt, if any.

    A period ``p`` matches when the newest signature equals the one ``p``
    attempts earlier and those ``p + 1`` trailing signatures are not all the
    same (a single constraint failing over and over is stagnation, not a
    ping-pong). ``first_attempt`` is the attempt index of ``history[0]``.
    """
    n = len(history)
    for p in range(2, max_period + 1):
        if n < p + 1:
            break
        window = history[n - p - 1 :]
        if window[-1] == window[0] and len(set(window)) >= 2:
            return CycleDescription(p, first_attempt + n - 1, tuple(window[:p]))
    return None


# --------------------------------------------------------------------------- #
# State snapshot
# --------------------------------------------------------------------------- #


@dataclass(frozen=True)
class ConstraintSummary:
    id: str
    kind: str
    target_field: str
    predicate: str
    message: str


@dataclass(frozen=True)
class AttemptSummary:
    index: int
    output_text: str
    violations: tuple[str, ...]


@dataclass(frozen=True)
class StateSnapshot:
    module: str
    instruction: str
    input_fields: tuple[str, ...]
    output_fields: tuple[str, ...]
    inputs: tuple[tuple[str, str], ...]
    constraints: tuple[ConstraintSummary, ...]
    history: tuple[AttemptSummary, ...]
    cycle: CycleDescription

    def __post_init__(self) -> None:
        if len(self.history) < MIN_SNAPSHOT_HISTORY:
            raise ValueError(f"a snapshot needs at least {MIN_SNAPSHOT_HISTORY} attempts, got {len(self.history)}")

    def canonical(self) -> dict[str, Any]:
        return {
            "module": self.module,
            "instruction": self.instruction,
            "input_fields": list(self.input_fields),
            "output_fields": list(self.output_fields),
            "inputs": [list(kv) for kv in self.inputs],
            "constraints": [vars(c) for c in self.constraints],
            "history": [
                {"index": a.index, "output_text": a.output_text, "violations": list(a.violations)}
                for a in self.history
            ],
            "cycle": self.cycle.to_dict(),
        }

    @property
    def digest(self) -> str:
        blob = json.dumps(self.canonical(), sort_keys=True, ensure_ascii=False, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def aggregate_context(
    trace: ExecutionTrace,
    signature: Signature,
    constraints: Sequence[Constraint],
    cycle: CycleDescription,
) -> StateSnapshot:
    history = tuple(
        AttemptSummary(
            a.index,
            a.raw_text if a.output is None else format_fields(dict(a.output)),
            tuple(v.rendered_message for v in a.violations),
        )
        for a in trace.attempts
    )
    return StateSnapshot(
        module=signature.name,
        instruction=signature.instruction,
        input_fields=tuple(signature.input_names),
        output_fields=tuple(signature.output_names),
        inputs=tuple((k, str(trace.inputs[k])) for k in signature.input_names if k in trace.inputs),
        constraints=tuple(
            ConstraintSummary(c.id, c.kind.value, c.target_field, c.predicate.describe(), c.message())
            for c in constraints
        ),
        history=history,
        cycle=cycle,
    )


def build_meta_prompt(snapshot: StateSnapshot) -> PromptMessages:
    system = (
        "You are a meta-repairer for a language-model pipeline. A module keeps failing because "
        "its output constraints compete: fixing one breaks another. Analyze the competing "
        "constraints and the failed attempts, then write ONE instruction that tells the "
        "original model how to satisfy all of them at once. Output only the instruction, "
        "with no commentary."
    )
    lines = [
        f"Module: {snapshot.module}",
        f"Original instruction: {snapshot.instruction}",
        "",
        "Inputs:",
        format_fields(dict(snapshot.inputs)),
        "",
        "Constraints (all must hold):",
    ]
    for i, c in enumerate(snapshot.constraints, start=1):
        lines.append(f"{i}. [{c.kind}] {c.id} on '{c.target_field}': {c.message} (requires {c.predicate})")
    lines += ["", "Failed attempts, oldest first:"]
    for a in snapshot.history:
        lines.append(f"Attempt {a.index}:")
        lines.append(a.output_text)
        for v in a.violations:
            lines.append(f"  violated: {v}")
    pattern = " -> ".join("{" + ", ".join(sorted(s)) + "}" for s in snapshot.cycle.signatures)
    lines += [
        "",
        f"Detected pattern: the failures alternate with period {snapshot.cycle.period}: "
        f"{pattern} -> (repeats)",
        "",
        "Write a single instruction that balances all of the requirements above so the next attempt "
        "satisfies every constraint.",
    ]
    return PromptMessages((Message(MessageRole.SYSTEM, system), Message(MessageRole.USER, "\n".join(lines))))


def fallback_text(snapshot: StateSnapshot) -> str:
    parts = "; ".join(f"({i}) {c.message}" for i, c in enumerate(snapshot.constraints, start=1))
    return f"Produce an output that satisfies ALL of the following simultaneously: {parts}"


def synthesize_instruction(
    snapshot: StateSnapshot,
    meta_backend: Backend,
    instruction_id: str = "meta-1",
) -> MetaInstruction:
    """Ask the meta model for an instruction; degrade to a fixed conjunction on any failure."""
    digest = snapshot.digest
    try:
        completion = meta_backend.complete(RoleTag.META, build_meta_prompt(snapshot))
        text = completion.text.strip()
    except BackendError as exc:
        logger.warning("meta backend failed, using fallback instruction: %s", exc)
        text = ""
    if text and len(text) <= MAX_INSTRUCTION_CHARS:
        return MetaInstruction(text, InstructionSource.MODEL, digest, instruction_id)
    return MetaInstruction(fallback_text(snapshot)[:MAX_INSTRUCTION_CHARS], InstructionSource.FALLBACK, digest, instruction_id)
