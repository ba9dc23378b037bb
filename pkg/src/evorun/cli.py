"""Operator entry point.

Subcommands: run an evolution stream, inspect a persisted library, validate a
tool source, replay a trace, export metric curves. Exit status is 0 only when
the command fully succeeded; an aborted run leaves a checkpoint and exits
nonzero.
"""

from __future__ import annotations

import argparse
import json
import signal
import sys
from pathlib import Path

from . import metrics as metrics_mod
from . import registry
from .config import MODE_WARM, ConfigError, RunConfig
from .evolution import Checkpoint, EvolutionConfig, EvolutionEngine, EvolutionState, RunAborted
from .gateway import OpenAICompatProvider, ScriptedProvider
from .metrics import QuerySample
from .prompts import PromptSuite
from .sandbox import (
    ArtifactValidationError,
    Sandbox,
    SandboxLimits,
    SharedEnvProvisioner,
    VenvProvisioner,
    validate_standalone,
)
from .trace import LogicalClock, TraceCorruptionError, TraceWriter, WallClock

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2
EXIT_ABORTED = 3


def _build_provider(config: RunConfig):
    if config.provider.kind == "scripted":
        return ScriptedProvider(config.provider.script_path)
    return OpenAICompatProvider(
        endpoint=config.provider.endpoint,
        model_id=config.provider.model,
        credential_env=config.provider.credential_env,
        role_models=dict(config.provider.role_models),
    )


def _build_sandbox(config: RunConfig) -> Sandbox:
    profile = config.sandbox
    if profile.provisioner == "venv":
        cache = profile.venv_cache_dir or str(Path(config.out_dir) / "envs")
        provisioner = VenvProvisioner(cache)
    else:
        provisioner = SharedEnvProvisioner()
    return Sandbox(
        harness_path=profile.harness_path,
        provisioner=provisioner,
        limits=SandboxLimits(timeout=profile.timeout, max_output_bytes=profile.max_output_bytes),
        passthrough_env=tuple(profile.passthrough_env),
        max_concurrent=profile.max_concurrent,
    )


class StreamFormatError(Exception):
    pass


def read_stream(path: str | Path) -> list[tuple[str, str]]:
    """One query per line: either plain text or a JSON record with id and query."""
    entries: list[tuple[str, str]] = []
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise StreamFormatError(f"unreadable stream file {path}: {exc}") from exc
    for i, line in enumerate(lines):
        line = line.strip()
        if not line:
            continue
        if line.startswith("{"):
            try:
                record = json.loads(line)
                entries.append((str(record.get("id", f"q{i + 1:04d}")), str(record["query"])))
            except (json.JSONDecodeError, KeyError) as exc:
                raise StreamFormatError(f"stream line {i + 1} is not a valid query record: {exc}") from exc
        else:
            entries.append((f"q{i + 1:04d}", line))
    return entries


def _apply_run_overrides(config: RunConfig, args: argparse.Namespace) -> RunConfig:
    if args.stream is not None:
        config.stream_path = args.stream
    if args.batch_size is not None:
        config.batch_size = args.batch_size
    if args.script is not None:
        config.provider.kind = "scripted"
        config.provider.script_path = args.script
    if args.mode is not None:
        config.mode = args.mode
    if args.library_in is not None:
        config.library_in = args.library_in
    if args.out is not None:
        config.out_dir = args.out
    if args.workers is not None:
        config.worker_cap = args.workers
    return config


def _format_metric(value) -> str:
    return "undefined" if value is None else f"{value:.3f}"


def cmd_run(args: argparse.Namespace) -> int:
    try:
        config = RunConfig.from_file(args.config) if args.config else RunConfig()
        config = _apply_run_overrides(config, args)
        problems = config.validate()
        if not config.stream_path:
            problems.append("stream_path is required (flag --stream or config)")
        if problems:
            for problem in problems:
                print(f"config error: {problem}", file=sys.stderr)
            return EXIT_CONFIG
    except ConfigError as exc:
        for problem in exc.problems:
            print(f"config error: {problem}", file=sys.stderr)
        return EXIT_CONFIG

    out_dir = Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    try:
        stream = read_stream(config.stream_path)
    except StreamFormatError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    snapshot = registry.empty_snapshot()
    start_offset = 0
    resumed_sums: dict | None = None
    trace_path = config.trace_path
    try:
        if config.mode == MODE_WARM:
            snapshot = registry.load(config.library_in)
        if args.resume:
            checkpoint = Checkpoint.load(config.checkpoint_path)
            snapshot = registry.load(checkpoint.snapshot_path)
            start_offset = checkpoint.stream_offset
            resumed_sums = checkpoint.metric_sums
            trace_path = out_dir / f"trace.resume-{start_offset}.ndjson"
            print(f"resuming at offset {start_offset} (step {checkpoint.step})")
    except (registry.RegistryError, OSError, json.JSONDecodeError, KeyError, ValueError) as exc:
        print(f"error: cannot load run state: {exc}", file=sys.stderr)
        return EXIT_FAILURE

    provider = _build_provider(config)
    prompts = PromptSuite()
    box = _build_sandbox(config)
    clock = LogicalClock() if config.effective_clock() == "logical" else WallClock()

    engine = EvolutionEngine(
        provider=provider,
        prompts=prompts,
        sandbox=box,
        workflow_config=config.budgets,
        config=EvolutionConfig(batch_size=config.batch_size, worker_cap=config.worker_cap),
        temperature=config.provider.temperature,
    )
    if resumed_sums:
        engine.metrics.add(
            QuerySample(
                query_id="__resumed__",
                c=int(resumed_sums.get("tools_created", 0)),
                u=int(resumed_sums.get("invocations", 0)),
                successes=int(resumed_sums.get("successes", 0)),
                tool_tokens=int(resumed_sums.get("tool_tokens", 0)),
            )
        )

    def handle_signal(signum, frame):
        print(f"signal {signum}: finishing the current batch, then checkpointing", file=sys.stderr)
        engine.request_stop()

    for signum in (signal.SIGINT, signal.SIGTERM):
        try:
            signal.signal(signum, handle_signal)
        except ValueError:  # pragma: no cover - non-main-thread runners
            pass

    writer = TraceWriter(trace_path, clock=clock, config_echo=config.echo())
    engine.trace = writer
    status = EXIT_OK
    answers: list = []
    state = EvolutionState(snapshot=snapshot, workflow_config=config.budgets)
    try:
        state, answers = engine.run_stream(
            state,
            stream,
            batch_size=config.batch_size,
            checkpoint_path=config.checkpoint_path,
            snapshot_dir=out_dir / "snapshots",
            start_offset=start_offset,
        )
    except RunAborted as exc:
        print(f"run aborted: {exc}", file=sys.stderr)
        if exc.checkpoint is not None:
            print(f"checkpoint: {config.checkpoint_path}", file=sys.stderr)
        answers = exc.answers
        if exc.state is not None:
            state = exc.state
        status = EXIT_ABORTED
    finally:
        writer.close()

    if answers:
        mode = "a" if args.resume else "w"
        with config.answers_path.open(mode, encoding="utf-8") as handle:
            offset_ids = [qid for qid, _ in stream[start_offset : start_offset + len(answers)]]
            for qid, answer in zip(offset_ids, answers):
                handle.write(
                    json.dumps(
                        {
                            "query_id": qid,
                            "final_answer": answer.final_answer,
                            "reasoning_summary": answer.reasoning_summary,
                        },
                        ensure_ascii=False,
                    )
                    + "\n"
                )

    registry.persist(state.snapshot, config.library_out)
    if status == EXIT_OK:
        metrics_mod.export_curves(trace_path, config.exports_dir)

    summary = engine.metrics.summary()
    print(f"queries processed : {summary['queries']}")
    print(f"library size      : {len(state.snapshot)} (step {state.step})")
    print(f"tools created     : {summary['tools_created']}")
    print(f"invocations       : {summary['invocations']}")
    print(f"EGL               : {_format_metric(summary['generality_loss'])}")
    print(f"success rate      : {_format_metric(summary['success_rate'])}")
    print(f"avg tokens/invoke : {_format_metric(summary['avg_tokens_per_invocation'])}")
    return status


def cmd_inspect(args: argparse.Namespace) -> int:
    try:
        snapshot = registry.load(args.library)
    except registry.RegistryError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    print(f"library step {snapshot.step}: {len(snapshot)} tools, {len(snapshot.aliases)} aliases")
    header = f"{'name':30} {'invocations':>11} {'successes':>9} {'provenance':12} description"
    print(header)
    print("-" * len(header))
    for record in sorted(snapshot.records, key=lambda r: (-r.stats.invocations, r.name)):
        description = record.description if len(record.description) <= 60 else record.description[:57] + "..."
        print(
            f"{record.name:30} {record.stats.invocations:>11} {record.stats.successes:>9} "
            f"{record.provenance.kind:12} {description}"
        )
    return EXIT_OK


def cmd_validate_tool(args: argparse.Namespace) -> int:
    try:
        source = Path(args.source).read_text(encoding="utf-8")
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    try:
        artifact = validate_standalone(source)
    except ArtifactValidationError as exc:
        print(f"INVALID ({exc.category}): {exc}")
        return EXIT_FAILURE
    print(f"OK: {artifact.name} (dependencies: {', '.join(artifact.dependencies) or 'none'})")
    print(f"digest: {artifact.digest}")
    return EXIT_OK


def cmd_replay(args: argparse.Namespace) -> int:
    try:
        summary = metrics_mod.replay(args.trace)
    except TraceCorruptionError as exc:
        print(f"trace corrupt at seq {exc.seq}: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    stats = summary.summary()
    print(f"events replayed for {stats['queries']} queries across {len(summary.batches)} batches")
    print(f"tools created     : {stats['tools_created']}")
    print(f"invocations       : {stats['invocations']}")
    print(f"EGL               : {_format_metric(stats['generality_loss'])}")
    print(f"success rate      : {_format_metric(stats['success_rate'])}")
    print(f"avg tokens/invoke : {_format_metric(stats['avg_tokens_per_invocation'])}")
    return EXIT_OK


def cmd_export(args: argparse.Namespace) -> int:
    try:
        files = metrics_mod.export_curves(args.trace, args.out)
    except TraceCorruptionError as exc:
        print(f"trace corrupt at seq {exc.seq}: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    for path in files:
        print(path)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="evorun", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run an evolution stream")
    run.add_argument("--config", help="JSON config file")
    run.add_argument("--stream", help="query stream file (one query or JSON record per line)")
    run.add_argument("--script", help="scripted provider response file")
    run.add_argument("--batch-size", type=int, dest="batch_size")
    run.add_argument("--workers", type=int)
    run.add_argument("--mode", choices=["zero-start", "warm-start"])
    run.add_argument("--library-in", dest="library_in", help="persisted library for warm starts")
    run.add_argument("--out", help="output directory")
    run.add_argument("--resume", action="store_true", help="resume from the run's checkpoint")
    run.set_defaults(func=cmd_run)

    inspect = sub.add_parser("inspect", help="print a persisted library's tools and stats")
    inspect.add_argument("library")
    inspect.set_defaults(func=cmd_inspect)

    validate = sub.add_parser("validate-tool", help="statically validate a tool source file")
    validate.add_argument("source")
    validate.set_defaults(func=cmd_validate_tool)

    replay = sub.add_parser("replay", help="verify a trace and recompute its metrics")
    replay.add_argument("trace")
    replay.set_defaults(func=cmd_replay)

    export = sub.add_parser("export", help="write plot-ready metric curves from a trace")
    export.add_argument("trace")
    export.add_argument("--out", required=True)
    export.set_defaults(func=cmd_export)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
