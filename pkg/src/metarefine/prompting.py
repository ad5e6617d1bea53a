"""Prompt rendering for module calls and parsing of completions back into fields."""

from __future__ import annotations

import re
from dataclasses import dataclass
from enum import Enum
from typing import Mapping, Optional, Sequence

from .pipeline import Signature
from .records import CounterExampleDemo, DemoKind, MetaInstruction

GUIDANCE_OPEN = "=== PRIORITY GUIDANCE ==="
GUIDANCE_CLOSE = "=== END PRIORITY GUIDANCE ==="


class MessageRole(str, Enum):
    SYSTEM = "system"
    USER = "user"
    ASSISTANT = "assistant"


@dataclass(frozen=True)
class Message:
    role: MessageRole
    content: str


@dataclass(frozen=True)
class PromptMessages:
    messages: tuple[Message, ...]

    def __post_init__(self) -> None:
        if not self.messages:
            raise ValueError("a prompt needs at least one message")
        if self.messages[0].role is not MessageRole.SYSTEM:
            raise ValueError("the first prompt message must be a SYSTEM message")

    def __len__(self) -> int:
        return len(self.messages)

    @property
    def system(self) -> str:
        return self.messages[0].content

    def has_guidance(self) -> bool:
        return GUIDANCE_OPEN in self.system

    def to_wire(self) -> list[dict[str, str]]:
        return [{"role": m.role.value, "content": m.content} for m in self.messages]

    def as_text(self) -> str:
        return "\n\n".join(f"[{m.role.value.upper()}]\n{m.content}" for m in self.messages)


class OutputParseError(ValueError):
    """The completion did not provide every output field."""

    def __init__(self, missing: Sequence[str], text: str = "") -> None:
        self.missing = list(missing)
        self.text = text
        super().__init__(f"completion is missing output field(s): {', '.join(self.missing)}")


def format_fields(fields: Mapping[str, str]) -> str:
    """Marked ``name: value`` rendering; ``parse_output`` inverts it."""
    return "\n".join(f"{name}: {value}" for name, value in fields.items())


def _format_spec(signature: Signature) -> str:
    lines = ["Respond using exactly this format, one field per line:"]
    for f in signature.output_fields:
        desc = f" ({f.description})" if f.description else ""
        lines.append(f"{f.name}: <{f.name}{desc}>")
    return "\n".join(lines)


def _input_block(signature: Signature, inputs: Mapping[str, str]) -> str:
    missing = [n for n in signature.input_names if n not in inputs]
    if missing:
        raise KeyError(f"missing input field(s) for {signature.name!r}: {missing}")
    return format_fields({n: inputs[n] for n in signature.input_names})


def _render_demo(signature: Signature, demo: CounterExampleDemo) -> tuple[Message, Message]:
    user = _input_block(signature, demo.inputs)
    if demo.kind is DemoKind.COUNTER_EXAMPLE:
        feedback = "\n".join(v.rendered_message for v in demo.failing_violations)
        user = (
            f"{user}\n\n"
            f"Previous attempt:\n{demo.failing_output}\n"
            f"Feedback: {feedback}\n"
            f"Guidance: {demo.synthesized_instruction.text}"
        )
    return (
        Message(MessageRole.USER, user),
        Message(MessageRole.ASSISTANT, format_fields(dict(demo.successful_output))),
    )


def render_prompt(
    signature: Signature,
    inputs: Mapping[str, str],
    demos: Sequence[CounterExampleDemo] = (),
    feedback_history: Sequence[tuple[str, str]] = (),
    meta_instruction: Optional[MetaInstruction] = None,
) -> PromptMessages:
    system = f"{signature.instruction}\n\n{_format_spec(signature)}"
    if meta_instruction is not None:
        system += f"\n\n{GUIDANCE_OPEN}\n{meta_instruction.text}\n{GUIDANCE_CLOSE}"

    messages = [Message(MessageRole.SYSTEM, system)]
    for demo in demos:
        messages.extend(_render_demo(signature, demo))

    user = _input_block(signature, inputs)
    for i, (attempt_text, feedback) in enumerate(feedback_history, start=1):
        user += f"\n\nPrevious attempt {i}:\n{attempt_text}\nFeedback: {feedback}"
    if feedback_history:
        user += "\n\nRevise your answer so that it addresses the feedback above."
    messages.append(Message(MessageRole.USER, user))
    return PromptMessages(tuple(messages))


def parse_output(text: str, signature: Signature) -> dict[str, str]:
    """Split a completion into output fields.

    Lines starting with ``<field>:`` open a field; its value runs to the next
    field marker. Only the first marker per field counts, so a repeated marker
    is treated as part of the current value. A single-field signature with no
    marker takes the whole trimmed completion.
    """
    names = signature.output_names
    marker = re.compile(r"^\s*(" + "|".join(re.escape(n) for n in names) + r")\s*:(.*)$")
    values: dict[str, list[str]] = {}
    current: Optional[str] = None
    for line in text.splitlines():
        m = marker.match(line)
        if m and m.group(1) not in values:
            current = m.group(1)
            values[current] = [m.group(2)]
        elif current is not None:
            values[current].append(line)

    if len(names) == 1 and names[0] not in values:
        return {names[0]: text.strip()}
    missing = [n for n in names if n not in values]
    if missing:
        raise OutputParseError(missing, text)
    return {n: "\n".join(values[n]).strip() for n in names}
