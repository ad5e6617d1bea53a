"""Command-line entry points: ``run``, ``compile`` and ``stats``.

Exit codes for ``run``: 0 success, 2 accepted with soft violations, 3 hard
failure, 1 usage, configuration or backend error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from importlib import resources
from pathlib import Path
from typing import Any, Optional, Sequence

from .backends import Backend, BackendConfig, BackendKind, ScriptedScript, make_backend
from .compiler import CompiledFormatError, bootstrap_demos, inject_demos, load_compiled, persist_compiled
from .engine import BudgetConfig, ExecutionAborted, run_pipeline
from .pipeline import PipelineDef, load_pipeline, validate_pipeline
from .tracing import TraceFormatError, Tracer, compute_stats, format_stats_table, metrics_from_events

EXIT_SUCCESS = 0
EXIT_USAGE = 1
EXIT_SOFT_ACCEPT = 2
EXIT_HARD_FAIL = 3

OUTCOME_EXIT = {"SUCCESS": EXIT_SUCCESS, "SOFT_ACCEPT": EXIT_SOFT_ACCEPT, "HARD_FAIL": EXIT_HARD_FAIL}
INPUTS_FORMAT_VERSION = 1

logger = logging.getLogger("metarefine")


class UsageError(Exception):
    pass


def bundled_root() -> Path:
    return Path(str(resources.files("metarefine") / "bundled"))


def resolve_resource(arg: str) -> Path:
    """A path as given, or else a bundled pipeline/fixture with the same final name."""
    path = Path(arg)
    if path.exists():
        return path
    root = bundled_root()
    for candidate in (root / path.name, root / "fixtures" / path.name):
        if candidate.exists():
            return candidate
    raise UsageError(f"no such file or directory: {arg}")


def load_inputs(path: Path) -> list[dict[str, str]]:
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read inputs {path}: {exc}") from None
    if not isinstance(data, dict) or data.get("format_version") != INPUTS_FORMAT_VERSION:
        raise UsageError(f"{path}: expected an object with format_version {INPUTS_FORMAT_VERSION}")
    if "examples" in data:
        examples = data["examples"]
    elif "inputs" in data:
        examples = [data["inputs"]]
    else:
        raise UsageError(f"{path}: needs an 'inputs' object or an 'examples' list")
    if not examples or not all(isinstance(e, dict) for e in examples):
        raise UsageError(f"{path}: inputs must be non-empty field maps")
    return [{str(k): str(v) for k, v in e.items()} for e in examples]


def _pipeline(arg: str) -> tuple[PipelineDef, Path]:
    path = resolve_resource(arg)
    try:
        pipeline = load_pipeline(path)
    except (OSError, ValueError) as exc:
        raise UsageError(f"cannot load pipeline {path}: {exc}") from None
    errors = validate_pipeline(pipeline)
    if errors:
        raise UsageError("invalid pipeline:\n  " + "\n  ".join(errors))
    return pipeline, path


def _default_inputs(args: argparse.Namespace, pipeline_path: Path, default_name: str) -> list[dict[str, str]]:
    if args.inputs:
        return load_inputs(resolve_resource(args.inputs))
    candidate = (pipeline_path if pipeline_path.is_dir() else pipeline_path.parent) / default_name
    if not candidate.exists():
        raise UsageError("no --inputs given and the pipeline ships no default inputs")
    return load_inputs(candidate)


def _backend(args: argparse.Namespace) -> Backend:
    try:
        if args.backend == "http":
            if not args.endpoint or not args.model:
                raise UsageError("--backend http requires --endpoint and --model")
            config = BackendConfig(BackendKind.HTTP, args.endpoint, args.model, args.api_key_env, args.timeout)
            return make_backend(config)
        if not args.script:
            raise UsageError("--backend scripted requires --script")
        script = ScriptedScript.load(resolve_resource(args.script))
        return make_backend(BackendConfig(model_name=args.model or "scripted"), script)
    except (OSError, ValueError) as exc:
        raise UsageError(f"backend configuration error: {exc}") from None


def _budgets(args: argparse.Namespace, meta: bool) -> BudgetConfig:
    try:
        return BudgetConfig(args.max_backtracks, args.max_meta_repairs, meta)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _tracer(args: argparse.Namespace, header: dict[str, Any]) -> Tracer:
    echo = None if args.quiet else sys.stdout
    if args.trace_out:
        return Tracer.to_path(args.trace_out, echo=echo, timestamps=args.timestamps, header=header)
    return Tracer(echo=echo, timestamps=args.timestamps)


def cmd_run(args: argparse.Namespace) -> int:
    pipeline, path = _pipeline(args.pipeline)
    examples = _default_inputs(args, path, "inputs.json")
    backend = _backend(args)
    budgets = _budgets(args, args.meta)
    demos = None
    if args.demos:
        try:
            compiled = load_compiled(resolve_resource(args.demos))
        except (OSError, CompiledFormatError) as exc:
            raise UsageError(f"cannot load demos: {exc}") from None
        demos = {m.name: inject_demos(compiled, m.name, args.demo_cap) for m in pipeline.modules if m.name in compiled.demos}

    tracer = _tracer(args, {"command": "run", "pipeline_id": pipeline.pipeline_id, "budgets": budgets.to_dict()})
    worst = EXIT_SUCCESS
    all_metrics = []
    try:
        for inputs in examples:
            started = time.perf_counter()
            try:
                run = run_pipeline(pipeline, inputs, budgets, backend, backend, demos, tracer=tracer)
            except ExecutionAborted as exc:
                print(f"error: {exc}", file=sys.stderr)
                return EXIT_USAGE
            except KeyError as exc:
                raise UsageError(str(exc)) from None
            elapsed = time.perf_counter() - started
            for m in metrics_from_events(e for t in run.traces for e in t.events):
                m.wall_time = elapsed / max(len(run.traces), 1)
                all_metrics.append(m.to_dict())
            code = OUTCOME_EXIT[run.outcome_kind]
            worst = max(worst, code)
            if not args.quiet:
                print(f"outcome: {run.outcome_kind}")
    finally:
        tracer.close()
    if args.metrics_out:
        Path(args.metrics_out).write_text(json.dumps(all_metrics, indent=2) + "\n", encoding="utf-8")
    return worst


def cmd_compile(args: argparse.Namespace) -> int:
    pipeline, path = _pipeline(args.pipeline)
    trainset = _default_inputs(args, path, "trainset.json")
    backend = _backend(args)
    budgets = _budgets(args, True)
    tracer = _tracer(args, {"command": "compile", "pipeline_id": pipeline.pipeline_id, "budgets": budgets.to_dict()})
    try:
        compiled = bootstrap_demos(
            pipeline,
            trainset,
            backend,
            budgets,
            tracer=tracer,
            teacher_model=args.model or backend.backend_id,
            created_at=args.created_at,
        )
    finally:
        tracer.close()
    try:
        persist_compiled(compiled, args.out, pipeline)
    except (OSError, ValueError) as exc:
        raise UsageError(f"cannot write compiled artifact: {exc}") from None
    if not args.quiet:
        n = sum(len(d) for d in compiled.demos.values())
        ce = sum(len(compiled.counter_examples(m)) for m in compiled.demos)
        print(f"compiled {n} demo(s) ({ce} counter-example) -> {args.out}")
    return EXIT_SUCCESS


def cmd_stats(args: argparse.Namespace) -> int:
    files: list[Path] = []
    for p in map(Path, args.paths):
        if p.is_dir():
            files.extend(sorted(p.glob("*.jsonl")))
        elif p.exists():
            files.append(p)
        else:
            raise UsageError(f"no such file or directory: {p}")
    if not files:
        raise UsageError("no trace files found")
    try:
        stats = compute_stats(files)
    except (OSError, TraceFormatError) as exc:
        raise UsageError(f"malformed trace: {exc}") from None
    if args.json:
        print(json.dumps(stats, indent=2))
    else:
        print(format_stats_table(stats))
    if args.json_out:
        Path(args.json_out).write_text(json.dumps(stats, indent=2) + "\n", encoding="utf-8")
    return EXIT_SUCCESS


def _add_execution_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("pipeline", help="pipeline JSON file or directory containing pipeline.json")
    p.add_argument("--inputs", help="inputs JSON file (defaults to the pipeline's bundled inputs)")
    p.add_argument("--backend", choices=["scripted", "http"], default="scripted")
    p.add_argument("--script", help="scripted-backend JSON file or directory containing script.json")
    p.add_argument("--endpoint", help="base URL of an OpenAI-compatible API")
    p.add_argument("--model", help="model name")
    p.add_argument("--api-key-env", default="OPENAI_API_KEY", help="name of the environment variable holding the API key")
    p.add_argument("--timeout", type=float, default=30.0)
    p.add_argument("--max-backtracks", type=int, default=5)
    p.add_argument("--max-meta-repairs", type=int, default=1)
    p.add_argument("--trace-out", help="write the JSONL trace here")
    p.add_argument("--timestamps", action="store_true", help="stamp trace events with wall-clock time")
    p.add_argument("-q", "--quiet", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="metarefine", description="Run, compile and analyze constrained LM pipelines.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="execute a pipeline")
    _add_execution_flags(run)
    run.add_argument("--meta", action=argparse.BooleanOptionalAction, default=True, help="enable meta repair")
    run.add_argument("--demos", help="compiled artifact whose demos are injected into prompts")
    run.add_argument("--demo-cap", type=int, default=3)
    run.add_argument("--metrics-out", help="write per-execution metrics JSON here")
    run.set_defaults(func=cmd_run)

    comp = sub.add_parser("compile", help="bootstrap demos with a teacher model")
    _add_execution_flags(comp)
    comp.add_argument("--out", required=True, help="compiled artifact path")
    comp.add_argument("--created-at", help="provenance timestamp override (for reproducible artifacts)")
    comp.set_defaults(func=cmd_compile)

    stats = sub.add_parser("stats", help="aggregate metrics over trace files")
    stats.add_argument("paths", nargs="+", help="trace files or directories of *.jsonl")
    stats.add_argument("--json", action="store_true", help="print JSON instead of a table")
    stats.add_argument("--json-out", help="also write the JSON summary here")
    stats.set_defaults(func=cmd_stats)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_SUCCESS
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
