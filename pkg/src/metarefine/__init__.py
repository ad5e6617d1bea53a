"""Constraint-checked LM pipelines that repair ping-pong refinement loops at runtime."""

from .backends import (
    BackendConfig,
    BackendKind,
    Completion,
    HttpBackend,
    RoleTag,
    ScriptedBackend,
    ScriptedScript,
)
from .compiler import CompiledPipeline, bootstrap_demos, inject_demos, load_compiled, persist_compiled
from .engine import BudgetConfig, ExecutionAborted, execute_module, run_pipeline, select_best_attempt
from .meta import aggregate_context, build_meta_prompt, detect_loop, synthesize_instruction
from .pipeline import (
    Constraint,
    ConstraintKind,
    ContainsAll,
    ContainsAny,
    FieldSpec,
    MatchesRegex,
    MaxChars,
    MinChars,
    ModuleDef,
    NotContains,
    PipelineDef,
    Signature,
    Violation,
    WordCountBetween,
    check_constraints,
    evaluate_predicate,
    load_pipeline,
    render_feedback,
    validate_pipeline,
)
from .prompting import OutputParseError, PromptMessages, parse_output, render_prompt
from .records import CounterExampleDemo, DemoKind, EventKind, ExecutionTrace, MetaInstruction
from .tracing import RunMetrics, Tracer, read_trace

__version__ = "0.1.0"
