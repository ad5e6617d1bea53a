"""JSONL execution traces, a human-readable console mirror, and run statistics."""

from __future__ import annotations

import json
import sys
import threading
from collections import Counter
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import IO, Any, Iterable, Mapping, Optional, Sequence

from .records import TERMINAL_EVENTS, EventKind, TraceEvent

TRACE_FORMAT = "metarefine-trace"
TRACE_FORMAT_VERSION = 1


class TraceFormatError(ValueError):
    pass


def _clip(text: str, limit: int = 120) -> str:
    text = " ".join(text.split())
    return text if len(text) <= limit else text[: limit - 3] + "..."


def describe_event(event: TraceEvent) -> Optional[str]:
    """Human-readable rendering of an event, styled after the failure / meta / success log."""
    p = event.payload
    field_label = str(p.get("field", "output")).capitalize()
    if event.kind is EventKind.ATTEMPT_FAILED:
        return f"[error] Attempt {p['attempt']} Failed: {p['feedback']} ({field_label}: '{_clip(p['output'])}')"
    if event.kind is EventKind.LOOP_DETECTED:
        history = [(_clip(out, 40), _clip(msg, 40)) for out, msg in p["competition_history"]]
        return (
            "[info] --- META-SELF-REFINING: PING-PONG LOOP DETECTED ---\n"
            f"[info] Period {p['period']} after attempt {p['detected_at_attempt']}; "
            f"Competition History: {history}"
        )
    if event.kind is EventKind.META_INSTRUCTION:
        return f"[info] Synthesized Instruction ({p['source']}): {p['text']}"
    if event.kind is EventKind.ATTEMPT_SUCCEEDED:
        return f"[success] Success: {p['output']}"
    if event.kind is EventKind.ACCEPTED_WITH_VIOLATIONS:
        msgs = "; ".join(v["rendered_message"] for v in p["violations"])
        return f"[warning] Accepted after attempt {p['attempt']} with violations: {msgs} ({field_label}: '{_clip(p['output'])}')"
    if event.kind is EventKind.HARD_FAILED:
        return f"[error] Hard failure after {p['metrics']['attempts']} attempts: {', '.join(p['violated'])}"
    if event.kind is EventKind.EXECUTION_ABORTED:
        return f"[error] Execution aborted: {p['error']}"
    if event.kind is EventKind.DEMO_CAPTURED:
        return f"[info] Captured {p['demo_kind']} demo for {p['module']} (input {p['input_index']})"
    if event.kind is EventKind.INPUT_SKIPPED:
        return f"[warning] Skipped input {p['input_index']} for {p['module']}: {p['reason']}"
    return None


class Tracer:
    """Append-only event sink.

    Every event is kept in memory and, when ``sink`` is given, written as one
    JSON line and flushed immediately. ``echo`` receives the human-readable
    mirror. Whole lines are written under a lock, so executions may share one tracer.
    """

    def __init__(
        self,
        sink: Optional[IO[str]] = None,
        *,
        echo: Optional[IO[str]] = None,
        timestamps: bool = False,
        header: Optional[Mapping[str, Any]] = None,
    ) -> None:
        self.sink = sink
        self.echo = echo
        self.timestamps = timestamps
        self.events: list[TraceEvent] = []
        self._seq = 0
        self._exec_counter: Counter[str] = Counter()
        self._lock = threading.Lock()
        if sink is not None:
            record = {"format": TRACE_FORMAT, "format_version": TRACE_FORMAT_VERSION, **(header or {})}
            sink.write(json.dumps(record, ensure_ascii=False) + "\n")
            sink.flush()

    @classmethod
    def to_path(cls, path: str | Path, **kwargs: Any) -> "Tracer":
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        return cls(path.open("w", encoding="utf-8"), **kwargs)

    def new_execution_id(self, prefix: str) -> str:
        with self._lock:
            self._exec_counter[prefix] += 1
            return f"{prefix}#{self._exec_counter[prefix]}"

    def emit(self, execution_id: str, kind: EventKind, payload: Mapping[str, Any]) -> TraceEvent:
        with self._lock:
            self._seq += 1
            stamp = datetime.now(timezone.utc).isoformat() if self.timestamps else None
            event = TraceEvent(self._seq, execution_id, kind, dict(payload), stamp)
            if self.sink is not None:
                self.sink.write(json.dumps(event.to_dict(), ensure_ascii=False) + "\n")
                self.sink.flush()
            self.events.append(event)
        if self.echo is not None:
            line = describe_event(event)
            if line:
                print(line, file=self.echo)
        return event

    def close(self) -> None:
        if self.sink is not None and self.sink not in (sys.stdout, sys.stderr):
            self.sink.close()


def read_trace(path: str | Path) -> tuple[dict[str, Any], list[TraceEvent]]:
    """Parse a trace file into its header record and events, validating as it goes."""
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines:
        raise TraceFormatError(f"{path}: empty trace file")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise TraceFormatError(f"{path}:1: header is not valid JSON") from exc
    if not isinstance(header, dict) or header.get("format") != TRACE_FORMAT:
        raise TraceFormatError(f"{path}: missing trace header record")
    if header.get("format_version") != TRACE_FORMAT_VERSION:
        raise TraceFormatError(f"{path}: unsupported trace format_version {header.get('format_version')!r}")
    events = []
    last_seq: dict[str, int] = {}
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            event = TraceEvent.from_dict(json.loads(line))
        except (json.JSONDecodeError, KeyError, ValueError, TypeError) as exc:
            raise TraceFormatError(f"{path}:{lineno}: malformed event ({exc})") from None
        if event.sequence_no <= last_seq.get(event.execution_id, 0):
            raise TraceFormatError(f"{path}:{lineno}: sequence_no is not increasing")
        last_seq[event.execution_id] = event.sequence_no
        events.append(event)
    return header, events


# --------------------------------------------------------------------------- #
# Metrics
# --------------------------------------------------------------------------- #


@dataclass
class RunMetrics:
    base_calls: int
    meta_calls: int
    attempts: int
    outcome: str
    constraint_satisfied: dict[str, bool]
    wall_time: Optional[float] = None

    @property
    def final_violations(self) -> int:
        return sum(not ok for ok in self.constraint_satisfied.values())

    def to_dict(self, include_wall_time: bool = True) -> dict[str, Any]:
        data = asdict(self)
        if not include_wall_time or self.wall_time is None:
            data.pop("wall_time")
        return data


def metrics_from_events(events: Iterable[TraceEvent]) -> list[RunMetrics]:
    """One RunMetrics per execution that reached a terminal outcome event."""
    out = []
    for e in events:
        if e.kind in TERMINAL_EVENTS and "metrics" in e.payload:
            m = e.payload["metrics"]
            out.append(
                RunMetrics(
                    base_calls=int(m["base_calls"]),
                    meta_calls=int(m["meta_calls"]),
                    attempts=int(m["attempts"]),
                    outcome=str(m["outcome"]),
                    constraint_satisfied={k: bool(v) for k, v in m["constraint_satisfied"].items()},
                )
            )
    return out


@dataclass
class TraceStats:
    path: str
    executions: int = 0
    base_calls: int = 0
    meta_calls: int = 0
    attempts: int = 0
    final_violations: int = 0
    outcomes: dict[str, int] = field(default_factory=dict)


def compute_stats(paths: Sequence[Path]) -> dict[str, Any]:
    per_file = []
    histogram: Counter[int] = Counter()
    outcomes: Counter[str] = Counter()
    sat_hits: Counter[str] = Counter()
    sat_total: Counter[str] = Counter()
    for path in paths:
        _, events = read_trace(path)
        runs = metrics_from_events(events)
        stats = TraceStats(str(path))
        for m in runs:
            stats.executions += 1
            stats.base_calls += m.base_calls
            stats.meta_calls += m.meta_calls
            stats.attempts += m.attempts
            stats.final_violations += m.final_violations
            stats.outcomes[m.outcome] = stats.outcomes.get(m.outcome, 0) + 1
            histogram[m.attempts] += 1
            outcomes[m.outcome] += 1
            for cid, ok in m.constraint_satisfied.items():
                sat_total[cid] += 1
                sat_hits[cid] += ok
        per_file.append(asdict(stats))
    return {
        "files": per_file,
        "aggregate": {
            "executions": sum(f["executions"] for f in per_file),
            "base_calls": sum(f["base_calls"] for f in per_file),
            "meta_calls": sum(f["meta_calls"] for f in per_file),
            "attempt_histogram": {str(k): histogram[k] for k in sorted(histogram)},
            "outcomes": dict(sorted(outcomes.items())),
            "constraint_satisfaction_rates": {k: sat_hits[k] / sat_total[k] for k in sorted(sat_total)},
        },
    }


def format_stats_table(stats: Mapping[str, Any]) -> str:
    header = f"{'trace':<40} {'execs':>5} {'attempts':>8} {'base':>5} {'meta':>5} {'viol':>5}  outcomes"
    rows = [header, "-" * len(header)]
    for f in stats["files"]:
        outcomes = ", ".join(f"{k}={v}" for k, v in sorted(f["outcomes"].items()))
        rows.append(
            f"{_clip(Path(f['path']).name, 40):<40} {f['executions']:>5} {f['attempts']:>8} "
            f"{f['base_calls']:>5} {f['meta_calls']:>5} {f['final_violations']:>5}  {outcomes}"
        )
    agg = stats["aggregate"]
    rows.append("")
    rows.append(f"attempt histogram: {agg['attempt_histogram']}")
    rows.append(f"outcomes: {agg['outcomes']}")
    rates = ", ".join(f"{k}={v:.2f}" for k, v in agg["constraint_satisfaction_rates"].items())
    rows.append(f"constraint satisfaction: {rates}")
    return "\n".join(rows)
