"""Pipeline definitions: signatures, the predicate DSL, constraints and their evaluation."""

from __future__ import annotations

import graphlib
import json
import re
from dataclasses import dataclass, field, fields
from enum import Enum
from pathlib import Path
from typing import Any, ClassVar, Mapping, Union

PIPELINE_FORMAT_VERSION = 1
PIPELINE_INPUT_PREFIX = "inputs"


class ConstraintKind(str, Enum):
    HARD = "HARD"
    SOFT = "SOFT"


class StructuralError(ValueError):
    """Raised when an output map lacks a field a constraint targets."""


# --------------------------------------------------------------------------- #
# Predicate DSL
# --------------------------------------------------------------------------- #


def _norm(text: str, case_sensitive: bool) -> str:
    return text if case_sensitive else text.casefold()


@dataclass(frozen=True)
class MaxChars:
    """Text is strictly shorter than ``limit`` Unicode code points."""

    limit: int
    type_name: ClassVar[str] = "MaxChars"

    def check(self, value: str) -> bool:
        return len(value) < self.limit

    def diagnose(self, value: str) -> str:
        return f"observed {len(value)} characters"

    def problems(self) -> list[str]:
        return [] if _positive_int(self.limit) else [f"MaxChars limit must be a positive integer, got {self.limit!r}"]

    def describe(self) -> str:
        return f"fewer than {self.limit} characters"


@dataclass(frozen=True)
class MinChars:
    """Text has at least ``limit`` code points."""

    limit: int
    type_name: ClassVar[str] = "MinChars"

    def check(self, value: str) -> bool:
        return len(value) >= self.limit

    def diagnose(self, value: str) -> str:
        return f"observed {len(value)} characters"

    def problems(self) -> list[str]:
        return [] if _positive_int(self.limit) else [f"MinChars limit must be a positive integer, got {self.limit!r}"]

    def describe(self) -> str:
        return f"at least {self.limit} characters"


@dataclass(frozen=True)
class ContainsAll:
    keywords: tuple[str, ...]
    case_sensitive: bool = True
    type_name: ClassVar[str] = "ContainsAll"

    def missing(self, value: str) -> list[str]:
        hay = _norm(value, self.case_sensitive)
        return [k for k in self.keywords if _norm(k, self.case_sensitive) not in hay]

    def check(self, value: str) -> bool:
        return not self.missing(value)

    def diagnose(self, value: str) -> str:
        return f"missing {self.missing(value)}"

    def problems(self) -> list[str]:
        return _keyword_problems("ContainsAll", self.keywords)

    def describe(self) -> str:
        return f"contains all of {list(self.keywords)}"


@dataclass(frozen=True)
class ContainsAny:
    keywords: tuple[str, ...]
    case_sensitive: bool = True
    type_name: ClassVar[str] = "ContainsAny"

    def check(self, value: str) -> bool:
        hay = _norm(value, self.case_sensitive)
        return any(_norm(k, self.case_sensitive) in hay for k in self.keywords)

    def diagnose(self, value: str) -> str:
        return f"none of {list(self.keywords)} present"

    def problems(self) -> list[str]:
        return _keyword_problems("ContainsAny", self.keywords)

    def describe(self) -> str:
        return f"contains at least one of {list(self.keywords)}"


@dataclass(frozen=True)
class NotContains:
    terms: tuple[str, ...]
    case_sensitive: bool = True
    type_name: ClassVar[str] = "NotContains"

    def found(self, value: str) -> list[str]:
        hay = _norm(value, self.case_sensitive)
        return [t for t in self.terms if _norm(t, self.case_sensitive) in hay]

    def check(self, value: str) -> bool:
        return not self.found(value)

    def diagnose(self, value: str) -> str:
        return f"found {self.found(value)}"

    def problems(self) -> list[str]:
        return _keyword_problems("NotContains", self.terms)

    def describe(self) -> str:
        return f"contains none of {list(self.terms)}"


@dataclass(frozen=True)
class MatchesRegex:
    """``re.search`` semantics: the pattern may match anywhere."""

    pattern: str
    type_name: ClassVar[str] = "MatchesRegex"

    def check(self, value: str) -> bool:
        return re.search(self.pattern, value) is not None

    def diagnose(self, value: str) -> str:
        return f"no match for /{self.pattern}/"

    def problems(self) -> list[str]:
        try:
            re.compile(self.pattern)
        except (re.error, TypeError) as exc:
            return [f"MatchesRegex pattern {self.pattern!r} does not compile: {exc}"]
        return []

    def describe(self) -> str:
        return f"matches /{self.pattern}/"


@dataclass(frozen=True)
class WordCountBetween:
    """Whitespace-delimited word count in the inclusive range [lo, hi]."""

    lo: int
    hi: int
    type_name: ClassVar[str] = "WordCountBetween"

    def check(self, value: str) -> bool:
        return self.lo <= len(value.split()) <= self.hi

    def diagnose(self, value: str) -> str:
        return f"observed {len(value.split())} words"

    def problems(self) -> list[str]:
        errs = []
        if not (isinstance(self.lo, int) and self.lo >= 0):
            errs.append(f"WordCountBetween lo must be a non-negative integer, got {self.lo!r}")
        if not _positive_int(self.hi):
            errs.append(f"WordCountBetween hi must be a positive integer, got {self.hi!r}")
        if not errs and self.lo > self.hi:
            errs.append(f"WordCountBetween lo ({self.lo}) exceeds hi ({self.hi})")
        return errs

    def describe(self) -> str:
        return f"between {self.lo} and {self.hi} words"


PredicateSpec = Union[MaxChars, MinChars, ContainsAll, ContainsAny, NotContains, MatchesRegex, WordCountBetween]

PREDICATE_TYPES: dict[str, type] = {
    cls.type_name: cls
    for cls in (MaxChars, MinChars, ContainsAll, ContainsAny, NotContains, MatchesRegex, WordCountBetween)
}


def _positive_int(x: Any) -> bool:
    return isinstance(x, int) and not isinstance(x, bool) and x > 0


def _keyword_problems(name: str, words: tuple[str, ...]) -> list[str]:
    if not words:
        return [f"{name} requires a non-empty keyword list"]
    if any(not isinstance(w, str) or not w for w in words):
        return [f"{name} keywords must be non-empty strings"]
    return []


def predicate_params(spec: PredicateSpec) -> dict[str, Any]:
    """Parameters available to feedback templates; sequences are exposed as lists."""
    params = {}
    for f in fields(spec):
        value = getattr(spec, f.name)
        params[f.name] = list(value) if isinstance(value, tuple) else value
    return params


def predicate_to_dict(spec: PredicateSpec) -> dict[str, Any]:
    return {"type": spec.type_name, **predicate_params(spec)}


def predicate_from_dict(data: Mapping[str, Any]) -> PredicateSpec:
    data = dict(data)
    type_name = data.pop("type", None)
    cls = PREDICATE_TYPES.get(type_name)
    if cls is None:
        raise ValueError(f"unknown predicate type {type_name!r}")
    kwargs = {k: tuple(v) if isinstance(v, list) else v for k, v in data.items()}
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ValueError(f"bad parameters for {type_name}: {exc}") from None


def evaluate_predicate(spec: PredicateSpec, value: str) -> bool:
    return spec.check(value)


# --------------------------------------------------------------------------- #
# Signatures, constraints, pipelines
# --------------------------------------------------------------------------- #


@dataclass(frozen=True)
class FieldSpec:
    name: str
    description: str = ""


@dataclass(frozen=True)
class Signature:
    name: str
    instruction: str
    input_fields: tuple[FieldSpec, ...]
    output_fields: tuple[FieldSpec, ...]

    @property
    def input_names(self) -> list[str]:
        return [f.name for f in self.input_fields]

    @property
    def output_names(self) -> list[str]:
        return [f.name for f in self.output_fields]

    def problems(self) -> list[str]:
        errs = []
        if not self.name:
            errs.append("signature name must be non-empty")
        if not self.output_fields:
            errs.append(f"signature {self.name!r} declares no output fields")
        names = self.input_names + self.output_names
        if any(not n for n in names):
            errs.append(f"signature {self.name!r} has an empty field name")
        dupes = sorted({n for n in names if n and names.count(n) > 1})
        for n in dupes:
            errs.append(f"signature {self.name!r} declares field {n!r} more than once")
        return errs


@dataclass(frozen=True)
class Constraint:
    id: str
    kind: ConstraintKind
    target_field: str
    predicate: PredicateSpec
    feedback_message: str

    @property
    def is_hard(self) -> bool:
        return self.kind is ConstraintKind.HARD

    def message(self) -> str:
        """The feedback template with predicate parameters interpolated."""
        return self.feedback_message.format(**predicate_params(self.predicate))


@dataclass(frozen=True)
class Violation:
    constraint_id: str
    rendered_message: str
    observed: str = ""


FORMAT_CONSTRAINT_ID = "__format__"


@dataclass(frozen=True)
class ModuleDef:
    signature: Signature
    constraints: tuple[Constraint, ...] = ()

    @property
    def name(self) -> str:
        return self.signature.name


@dataclass(frozen=True)
class PipelineDef:
    """Ordered modules plus a dataflow mapping.

    ``dataflow[module][input_field]`` is either ``"inputs.<name>"`` (a pipeline
    input) or ``"<module>.<output_field>"`` (an upstream module's output).
    Module inputs without an explicit mapping read the pipeline input of the same name.
    """

    pipeline_id: str
    modules: tuple[ModuleDef, ...]
    dataflow: Mapping[str, Mapping[str, str]] = field(default_factory=dict)

    def module(self, name: str) -> ModuleDef:
        for m in self.modules:
            if m.name == name:
                return m
        raise KeyError(f"pipeline {self.pipeline_id!r} has no module {name!r}")

    def source_of(self, module: str, input_field: str) -> str:
        return self.dataflow.get(module, {}).get(input_field, f"{PIPELINE_INPUT_PREFIX}.{input_field}")

    def pipeline_inputs(self) -> list[str]:
        names: list[str] = []
        for m in self.modules:
            for f in m.signature.input_names:
                src, _, name = self.source_of(m.name, f).partition(".")
                if src == PIPELINE_INPUT_PREFIX and name not in names:
                    names.append(name)
        return names

    def execution_order(self) -> list[ModuleDef]:
        """Topological order of modules; ties keep declaration order."""
        graph = {m.name: set(self._upstream(m)) for m in self.modules}
        sorter = graphlib.TopologicalSorter(graph)
        sorter.prepare()
        position = {m.name: i for i, m in enumerate(self.modules)}
        order: list[str] = []
        while sorter.is_active():
            ready = sorted(sorter.get_ready(), key=position.__getitem__)
            order.extend(ready)
            sorter.done(*ready)
        return [self.module(n) for n in order]

    def _upstream(self, m: ModuleDef) -> list[str]:
        ups = []
        for f in m.signature.input_names:
            src = self.source_of(m.name, f).partition(".")[0]
            if src != PIPELINE_INPUT_PREFIX:
                ups.append(src)
        return ups


# --------------------------------------------------------------------------- #
# Operations
# --------------------------------------------------------------------------- #


def check_constraints(constraints: tuple[Constraint, ...] | list[Constraint], output: Mapping[str, str]) -> list[Violation]:
    """Evaluate every constraint in declaration order and return all violations."""
    missing = [c.target_field for c in constraints if c.target_field not in output]
    if missing:
        raise StructuralError(f"output is missing constrained field(s): {sorted(set(missing))}")
    violations = []
    for c in constraints:
        value = output[c.target_field]
        if not c.predicate.check(value):
            violations.append(Violation(c.id, c.message(), c.predicate.diagnose(value)))
    return violations


def render_feedback(violation: Violation) -> str:
    if violation.observed:
        return f"{violation.rendered_message} ({violation.observed})"
    return violation.rendered_message


def validate_pipeline(pipeline: PipelineDef) -> list[str]:
    """Return every structural problem found; an empty list means the pipeline is valid."""
    errs: list[str] = []
    if not pipeline.pipeline_id:
        errs.append("pipeline_id must be non-empty")
    if not pipeline.modules:
        errs.append("pipeline declares no modules")

    names = [m.name for m in pipeline.modules]
    for n in sorted({n for n in names if names.count(n) > 1}):
        errs.append(f"module name {n!r} is declared more than once")
    by_name = {m.name: m for m in pipeline.modules}

    for m in pipeline.modules:
        errs.extend(m.signature.problems())
        outputs = set(m.signature.output_names)
        seen: set[str] = set()
        for c in m.constraints:
            if not c.id:
                errs.append(f"module {m.name!r} has a constraint with an empty id")
            elif c.id == FORMAT_CONSTRAINT_ID:
                errs.append(f"module {m.name!r}: constraint id {c.id!r} is reserved")
            elif c.id in seen:
                errs.append(f"module {m.name!r}: duplicate constraint id {c.id!r}")
            seen.add(c.id)
            if c.target_field not in outputs:
                errs.append(f"module {m.name!r}: constraint {c.id!r} targets unknown output field {c.target_field!r}")
            if not isinstance(c.kind, ConstraintKind):
                errs.append(f"module {m.name!r}: constraint {c.id!r} has invalid kind {c.kind!r}")
            pred_errs = c.predicate.problems()
            errs.extend(f"module {m.name!r}: constraint {c.id!r}: {e}" for e in pred_errs)
            if not pred_errs:
                try:
                    rendered = c.message()
                except (KeyError, IndexError, ValueError) as exc:
                    errs.append(f"module {m.name!r}: constraint {c.id!r} message template is invalid: {exc!r}")
                else:
                    if not rendered.strip():
                        errs.append(f"module {m.name!r}: constraint {c.id!r} has an empty feedback message")

    for mod_name, mapping in pipeline.dataflow.items():
        if mod_name not in by_name:
            errs.append(f"dataflow references unknown module {mod_name!r}")
            continue
        for field_name in mapping:
            if field_name not in by_name[mod_name].signature.input_names:
                errs.append(f"dataflow maps unknown input field {mod_name}.{field_name}")

    for m in pipeline.modules:
        for f in m.signature.input_names:
            ref = pipeline.source_of(m.name, f)
            src, dot, out = ref.partition(".")
            if not dot or not out:
                errs.append(f"dataflow reference {ref!r} for {m.name}.{f} is malformed")
            elif src == PIPELINE_INPUT_PREFIX:
                continue
            elif src not in by_name:
                errs.append(f"dataflow reference {ref!r} for {m.name}.{f} names an unknown module")
            elif out not in by_name[src].signature.output_names:
                errs.append(f"dataflow reference {ref!r} for {m.name}.{f} names a nonexistent field")

    if not errs:
        try:
            pipeline.execution_order()
        except graphlib.CycleError as exc:
            errs.append(f"dataflow contains a cycle: {exc.args[1]}")
    return errs


# --------------------------------------------------------------------------- #
# Serialization
# --------------------------------------------------------------------------- #


def pipeline_to_dict(pipeline: PipelineDef) -> dict[str, Any]:
    return {
        "format_version": PIPELINE_FORMAT_VERSION,
        "pipeline_id": pipeline.pipeline_id,
        "modules": [
            {
                "signature": {
                    "name": m.signature.name,
                    "instruction": m.signature.instruction,
                    "input_fields": [{"name": f.name, "description": f.description} for f in m.signature.input_fields],
                    "output_fields": [{"name": f.name, "description": f.description} for f in m.signature.output_fields],
                },
                "constraints": [
                    {
                        "id": c.id,
                        "kind": c.kind.value,
                        "target_field": c.target_field,
                        "predicate": predicate_to_dict(c.predicate),
                        "feedback_message": c.feedback_message,
                    }
                    for c in m.constraints
                ],
            }
            for m in pipeline.modules
        ],
        "dataflow": {k: dict(v) for k, v in pipeline.dataflow.items()},
    }


def pipeline_from_dict(data: Mapping[str, Any]) -> PipelineDef:
    version = data.get("format_version")
    if version != PIPELINE_FORMAT_VERSION:
        raise ValueError(f"unsupported pipeline format_version {version!r}")
    try:
        modules = []
        for m in data["modules"]:
            sig = m["signature"]
            signature = Signature(
                name=sig["name"],
                instruction=sig.get("instruction", ""),
                input_fields=tuple(FieldSpec(f["name"], f.get("description", "")) for f in sig.get("input_fields", [])),
                output_fields=tuple(FieldSpec(f["name"], f.get("description", "")) for f in sig["output_fields"]),
            )
            constraints = tuple(
                Constraint(
                    id=c["id"],
                    kind=ConstraintKind(c["kind"]),
                    target_field=c["target_field"],
                    predicate=predicate_from_dict(c["predicate"]),
                    feedback_message=c["feedback_message"],
                )
                for c in m.get("constraints", [])
            )
            modules.append(ModuleDef(signature, constraints))
        return PipelineDef(data["pipeline_id"], tuple(modules), {k: dict(v) for k, v in data.get("dataflow", {}).items()})
    except (KeyError, TypeError) as exc:
        raise ValueError(f"malformed pipeline definition: {exc!r}") from None


def load_pipeline(path: str | Path) -> PipelineDef:
    """Load a pipeline from a JSON file, or from a directory containing ``pipeline.json``."""
    path = Path(path)
    if path.is_dir():
        path = path / "pipeline.json"
    return pipeline_from_dict(json.loads(path.read_text(encoding="utf-8")))


def dump_pipeline(pipeline: PipelineDef, path: str | Path) -> None:
    Path(path).write_text(json.dumps(pipeline_to_dict(pipeline), indent=2) + "\n", encoding="utf-8")
