"""The fixed per-query workflow: manager selection, tool synthesis, the
executor's think/act/observe loop (with suspension for on-the-fly tool
requests), and integrator answer extraction.

A job runs single-threaded against a frozen registry snapshot; many jobs run
concurrently sharing only the snapshot, the provider, and the sandbox. All
events are buffered on the job and flushed to the trace at the batch barrier,
keeping traces deterministic under concurrent scheduling.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from . import registry
from .gateway import (
    ChatExchange,
    ChatMessage,
    ConfigurationError,
    Provider,
    TransportError,
    UsageTotals,
    estimate_tokens,
    prompt_digest,
)
from .metrics import QuerySample
from .prompts import (
    ExecutorReport,
    FinalAnswer,
    ParseError,
    PromptSuite,
    ToolRequest,
    parse_executor_action,
    parse_executor_report,
    parse_manager,
    parse_final_answer,
    parse_single_code_block,
    tool_listing_slot,
)
from .registry import RegistrySnapshot, ResolutionError, ToolStats
from .sandbox import (
    ArtifactValidationError,
    InputSchemaError,
    ProvisioningError,
    Sandbox,
    ToolArtifact,
    validate_artifact,
)

REQUEST_TOOLS = "request_tools"

PHASE_MANAGER = "manager_select"
PHASE_SYNTHESIZE = "synthesize"
PHASE_EXECUTE = "execute"
PHASE_SUSPENDED = "suspended"
PHASE_INTEGRATE = "integrate"
PHASE_DONE = "done"
PHASE_FAILED = "failed"

# The failure phase doubles as the bounded re-plan gate: recoverable failures
# route failed -> manager_select until the re-plan budget runs out.
LEGAL_TRANSITIONS: dict[str | None, frozenset[str]] = {
    None: frozenset({PHASE_MANAGER}),
    PHASE_MANAGER: frozenset({PHASE_SYNTHESIZE, PHASE_EXECUTE, PHASE_FAILED}),
    PHASE_SYNTHESIZE: frozenset({PHASE_EXECUTE, PHASE_FAILED}),
    PHASE_EXECUTE: frozenset({PHASE_SUSPENDED, PHASE_INTEGRATE, PHASE_FAILED}),
    PHASE_SUSPENDED: frozenset({PHASE_MANAGER}),
    PHASE_INTEGRATE: frozenset({PHASE_DONE, PHASE_FAILED}),
    PHASE_FAILED: frozenset({PHASE_MANAGER}),
    PHASE_DONE: frozenset(),
}

INCOMPLETION_PREFIX = "The task is not completable"


class WorkflowError(Exception):
    pass


class IllegalTransitionError(WorkflowError):
    pass


@dataclass
class WorkflowConfig:
    max_executor_steps: int = 30
    developer_retries: int = 3
    manager_replans: int = 2
    max_suspensions: int = 3
    integrator_retries: int = 1
    observation_limit: int = 4000  # chars of one observation shown to the executor

    def validate(self) -> list[str]:
        problems = []
        for name in ("max_executor_steps", "developer_retries", "manager_replans", "max_suspensions"):
            if getattr(self, name) < 1:
                problems.append(f"{name} must be >= 1")
        return problems


@dataclass(frozen=True)
class BoundTool:
    name: str
    description: str
    artifact: ToolArtifact

    @property
    def input_schema(self) -> dict:
        return self.artifact.input_schema


def bound_tool_from_record(record) -> BoundTool:
    artifact = ToolArtifact(
        name=record.name,
        description=record.description,
        dependencies=record.dependencies,
        source=record.source,
        digest=record.digest,
        input_schema=record.input_schema,
        output_schema=record.output_schema,
    )
    return BoundTool(name=record.name, description=record.description, artifact=artifact)


class JobRecorder:
    """Buffers a job's trace events and enforces phase-machine legality."""

    def __init__(self, query_id: str):
        self.query_id = query_id
        self.events: list[tuple[str, dict]] = []
        self.phase: str | None = None

    def record(self, kind: str, payload: dict) -> None:
        self.events.append((kind, payload))

    def transition(self, to: str, detail: dict | None = None) -> None:
        if to not in LEGAL_TRANSITIONS[self.phase]:
            raise IllegalTransitionError(f"{self.phase} -> {to} is not a legal transition")
        payload = {"query_id": self.query_id, "from": self.phase, "to": to}
        if detail:
            payload["detail"] = detail
        self.record("phase", payload)
        self.phase = to


@dataclass
class JobResult:
    query_id: str
    answer: FinalAnswer
    status: str  # done | failed
    local_tools: list[ToolArtifact]
    sample: QuerySample
    stats_deltas: dict[str, ToolStats]
    events: list[tuple[str, dict]]
    usage: UsageTotals


@dataclass
class _JobState:
    bound: dict[str, BoundTool] = field(default_factory=dict)
    local_tools: list[ToolArtifact] = field(default_factory=list)
    guidance: str = ""
    failure_report: str | None = None
    executor_requests: str | None = None
    context_summary: str | None = None
    observations: list[tuple[str, str]] = field(default_factory=list)
    replans: int = 0
    suspensions: int = 0
    c: int = 0
    u: int = 0
    successes: int = 0
    tool_tokens: int = 0
    stats_deltas: dict[str, dict[str, int]] = field(default_factory=dict)


def _clip(text: str, limit: int = 500) -> str:
    return text if len(text) <= limit else text[:limit] + "…"


class QueryWorkflow:
    """Drives one query through the phase machine."""

    def __init__(
        self,
        provider: Provider,
        prompts: PromptSuite,
        sandbox: Sandbox,
        config: WorkflowConfig | None = None,
        temperature: float = 0.7,
    ):
        self.provider = provider
        self.prompts = prompts
        self.sandbox = sandbox
        self.config = config or WorkflowConfig()
        self.temperature = temperature

    # -- plumbing -----------------------------------------------------------

    def _complete(self, recorder: JobRecorder, role: str, messages: list[ChatMessage]):
        exchange = ChatExchange(messages=messages, agent_role=role, temperature=self.temperature)
        result = self.provider.complete(exchange)
        recorder.record(
            "llm_exchange",
            {
                "query_id": recorder.query_id,
                "role": role,
                "prompt_sha256": prompt_digest(exchange.rendered_prompt),
                "prompt_tokens": result.prompt_tokens,
                "completion_tokens": result.completion_tokens,
                "provider_id": result.provider_id,
            },
        )
        return result

    def _combined_listing(self, snapshot: RegistrySnapshot, state: _JobState) -> list[tuple[str, str, dict]]:
        combined = {name: (name, desc, schema) for name, desc, schema in registry.listing(snapshot)}
        for artifact in state.local_tools:
            combined.setdefault(artifact.name, (artifact.name, artifact.description, artifact.input_schema))
        return [combined[name] for name in sorted(combined)]

    # -- phases -------------------------------------------------------------

    def run_query(self, query_id: str, query_text: str, snapshot: RegistrySnapshot) -> JobResult:
        recorder = JobRecorder(query_id)
        state = _JobState()
        usage = UsageTotals()
        recorder.transition(PHASE_MANAGER, {"listing_digest": registry.listing_digest(snapshot)})

        failure_reason: str | None = None
        report: ExecutorReport | None = None
        answer: FinalAnswer | None = None

        try:
            while True:
                # --- manager selection --------------------------------------------
                outcome, usage = self._manager_phase(recorder, state, query_id, query_text, snapshot, usage)
                if outcome == "failed":
                    failure_reason = state.failure_report or "manager phase failed"
                    break
                requests = outcome  # list of ToolRequest

                # --- synthesis -----------------------------------------------------
                if requests:
                    recorder.transition(PHASE_SYNTHESIZE, {"requests": [r.name for r in requests]})
                    failures, usage = self._synthesize_phase(recorder, state, snapshot, requests, usage)
                    if failures and state.replans < self.config.manager_replans:
                        state.replans += 1
                        state.failure_report = "Tool synthesis failed:\n" + "\n".join(failures)
                        recorder.transition(PHASE_FAILED, {"reason": "synthesis failure", "tools": failures})
                        recorder.transition(PHASE_MANAGER)
                        continue
                    # Proceed with whatever passed validation; the executor may still
                    # conclude the task is not completable.

                # --- execution -----------------------------------------------------
                recorder.transition(PHASE_EXECUTE, {"bound": sorted(state.bound)})
                exec_outcome, report, usage = self._executor_loop(recorder, state, query_id, query_text, usage)
                if exec_outcome == "suspended":
                    recorder.transition(PHASE_MANAGER)
                    continue
                if exec_outcome == "failed":
                    failure_reason = "executor step budget exhausted"
                    break

                # --- integration ---------------------------------------------------
                recorder.transition(PHASE_INTEGRATE)
                answer, usage = self._integrate_phase(recorder, query_text, report, usage)
                if answer is None:
                    failure_reason = "integrator reply could not be parsed"
                    break
                recorder.transition(PHASE_DONE, {"final_answer": answer.final_answer})
                break
        except (TransportError, ConfigurationError) as exc:
            # Provider trouble fails this job, never the batch. Script-exhausted
            # errors are deliberately not caught: they signal a diverged replay.
            failure_reason = f"provider failure: {exc}"
            answer = None

        sample = QuerySample(
            query_id=query_id,
            c=state.c,
            u=state.u,
            successes=state.successes,
            tool_tokens=state.tool_tokens,
        )
        if answer is None:
            reason = failure_reason or "workflow failed"
            recorder.transition(PHASE_FAILED, {"reason": reason, "terminal": True})
            answer = FinalAnswer(
                final_answer=f"{INCOMPLETION_PREFIX}: {reason}",
                reasoning_summary=f"The workflow terminated without an integrated answer: {reason}",
            )
            status = "failed"
        else:
            status = "done"
        deltas = {
            name: ToolStats(
                invocations=t["invocations"], successes=t["successes"], tool_output_tokens=t["tokens"]
            )
            for name, t in state.stats_deltas.items()
        }
        return JobResult(
            query_id=query_id,
            answer=answer,
            status=status,
            local_tools=list(state.local_tools),
            sample=sample,
            stats_deltas=deltas,
            events=recorder.events,
            usage=usage,
        )

    def _manager_phase(self, recorder, state, query_id, query_text, snapshot, usage):
        """Returns (list of tool requests | "failed", usage)."""
        while True:
            listing_entries = self._combined_listing(snapshot, state)
            slots = {
                "user_query": query_text,
                "tools": tool_listing_slot(listing_entries),
            }
            if state.failure_report:
                slots["failure_report"] = state.failure_report
            if state.executor_requests:
                slots["additional_tool_requests"] = state.executor_requests
            prompt = self.prompts.render("manager", slots)
            result = self._complete(recorder, "manager", [ChatMessage("user", prompt)])
            usage = usage + UsageTotals.of(result)
            state.failure_report = None
            state.executor_requests = None

            try:
                decision = parse_manager(result.text)
            except ParseError as exc:
                if state.replans < self.config.manager_replans:
                    state.replans += 1
                    state.failure_report = (
                        f"The previous tool-selection reply could not be parsed: {exc}. "
                        f"Offending reply: {_clip(exc.reply)}"
                    )
                    recorder.transition(PHASE_FAILED, {"reason": "manager parse error"})
                    recorder.transition(PHASE_MANAGER)
                    continue
                state.failure_report = f"manager reply parse error: {exc}"
                return "failed", usage

            available = {entry[0] for entry in listing_entries}
            unresolved = [n for n in decision.required_tool_names if n not in available]
            if unresolved:
                if state.replans < self.config.manager_replans:
                    state.replans += 1
                    state.failure_report = (
                        "The previous selection named tools that do not exist "
                        f"(case-sensitive): {', '.join(unresolved)}. Select names verbatim "
                        "from the Available Tools list or request new tools."
                    )
                    recorder.transition(PHASE_FAILED, {"reason": "unresolvable tools", "names": unresolved})
                    recorder.transition(PHASE_MANAGER)
                    continue
                state.failure_report = f"unresolvable tool names: {', '.join(unresolved)}"
                return "failed", usage

            state.guidance = decision.tool_usage_guidance
            bound: dict[str, BoundTool] = {}
            local_by_name = {a.name: a for a in state.local_tools}
            for name in decision.required_tool_names:
                if name in local_by_name:
                    artifact = local_by_name[name]
                    bound[name] = BoundTool(name=name, description=artifact.description, artifact=artifact)
                else:
                    try:
                        resolution = registry.resolve(snapshot, name)
                    except ResolutionError:  # pragma: no cover - filtered above
                        continue
                    bound[name] = bound_tool_from_record(resolution.record)
            state.bound = bound
            return list(decision.tool_requests), usage

    def _synthesize_phase(self, recorder, state, snapshot, requests, usage):
        failures: list[str] = []
        existing = {name for name, *_ in self._combined_listing(snapshot, state)}
        for request in requests:
            if request.name in existing or request.name in state.bound:
                failures.append(f"{request.name}: name already exists in the registry")
                recorder.record(
                    "validation",
                    {"query_id": recorder.query_id, "tool": request.name, "passed": False,
                     "category": "name collision", "context": "develop"},
                )
                continue
            artifact, usage = self._develop_tool(recorder, request, usage)
            if artifact is None:
                failures.append(f"{request.name}: synthesis retry budget exhausted")
                continue
            state.local_tools.append(artifact)
            state.c += 1
            existing.add(artifact.name)
            state.bound[artifact.name] = BoundTool(
                name=artifact.name, description=artifact.description, artifact=artifact
            )
        return failures, usage

    def _develop_tool(self, recorder, request: ToolRequest, usage):
        prompt = self.prompts.render("tool_developer", {"tool_request_json": request.to_json()})
        messages = [ChatMessage("user", prompt)]
        last_error = ""
        for attempt in range(self.config.developer_retries):
            result = self._complete(recorder, "tool_developer", messages)
            usage = usage + UsageTotals.of(result)
            try:
                source = parse_single_code_block(result.text)
                artifact = validate_artifact(source, request)
                try:
                    self.sandbox.provisioner.provision(artifact.dependencies)
                except ProvisioningError as exc:
                    raise ArtifactValidationError("provisioning", str(exc)) from exc
            except (ParseError, ArtifactValidationError) as exc:
                category = getattr(exc, "category", "parse error")
                last_error = f"{category}: {exc}"
                recorder.record(
                    "validation",
                    {"query_id": recorder.query_id, "tool": request.name, "passed": False,
                     "category": category, "context": "develop"},
                )
                messages = messages + [
                    ChatMessage("assistant", result.text),
                    ChatMessage(
                        "user",
                        f"Validation failed: {last_error}. Regenerate the complete tool module "
                        "in one and only one fenced python block.",
                    ),
                ]
                continue
            recorder.record(
                "validation",
                {"query_id": recorder.query_id, "tool": request.name, "passed": True,
                 "context": "develop"},
            )
            return artifact, usage
        return None, usage

    def _executor_loop(self, recorder, state, query_id, query_text, usage):
        """Returns (outcome, report, usage) with outcome in {report, suspended, failed}."""
        slots = {"user_query": query_text}
        if state.guidance:
            slots["tool_usage_guidance"] = state.guidance
        if state.context_summary:
            slots["context_summary"] = state.context_summary
        base = self.prompts.render("executor", slots)
        protocol = self.prompts.render(
            "executor_protocol",
            {"tools": tool_listing_slot(
                [(b.name, b.description, b.input_schema) for b in
                 sorted(state.bound.values(), key=lambda b: b.name)]
            )},
        )
        messages = [ChatMessage("user", base + "\n\n" + protocol)]

        for _step in range(self.config.max_executor_steps):
            result = self._complete(recorder, "executor", messages)
            usage = usage + UsageTotals.of(result)
            reply = result.text
            try:
                action = parse_executor_action(reply)
            except ParseError as exc:
                messages = messages + [
                    ChatMessage("assistant", reply),
                    ChatMessage("user", f"Observation: {exc}. Emit exactly one action block per reply."),
                ]
                continue

            if action is None:
                try:
                    report = parse_executor_report(reply)
                except ParseError as exc:
                    messages = messages + [
                        ChatMessage("assistant", reply),
                        ChatMessage(
                            "user",
                            f"Observation: your reply was neither a tool action nor a valid report ({exc}). "
                            "Reply with one fenced JSON action block or the final three-section report.",
                        ),
                    ]
                    continue
                return "report", report, usage

            messages = messages + [ChatMessage("assistant", reply)]
            if action.tool == REQUEST_TOOLS:
                if state.suspensions < self.config.max_suspensions:
                    state.suspensions += 1
                    state.executor_requests = json.dumps(action.input, indent=2, ensure_ascii=False)
                    state.context_summary = self._summarize_context(state)
                    recorder.transition(PHASE_SUSPENDED, {"requests": action.input})
                    return "suspended", None, usage
                observation = "Error: suspension budget exhausted; continue with the bound tools."
            elif action.tool not in state.bound:
                observation = (
                    f"Error: tool '{action.tool}' is not bound. Bound tools: "
                    f"{', '.join(sorted(state.bound)) or '(none)'}. Never assume a tool exists."
                )
            else:
                observation = self._invoke_bound(recorder, state, query_id, state.bound[action.tool], action.input)
            state.observations.append((action.tool, observation))
            messages = messages + [ChatMessage("user", f"Observation ({action.tool}): {observation}")]

        return "failed", None, usage

    def _invoke_bound(self, recorder, state, query_id, tool: BoundTool, payload: dict) -> str:
        try:
            result = self.sandbox.invoke(tool.artifact, payload)
        except InputSchemaError as exc:
            # Host-side rejection: no child was spawned, so no invocation is counted.
            return f"Error: input payload rejected by {tool.name}'s schema: {exc}"
        except ProvisioningError as exc:
            return f"Error: environment for {tool.name} could not be provisioned: {exc}"
        state.u += 1
        if result.ok:
            state.successes += 1
        tokens = estimate_tokens(result.output_text)
        state.tool_tokens += tokens
        tally = state.stats_deltas.setdefault(tool.name, {"invocations": 0, "successes": 0, "tokens": 0})
        tally["invocations"] += 1
        tally["successes"] += 1 if result.ok else 0
        tally["tokens"] += tokens
        recorder.record(
            "invocation",
            {"query_id": query_id, "tool": tool.name, "status": result.status,
             "output_tokens": tokens},
        )
        if result.ok:
            return result.output_text
        return f"{result.status}: {result.output_text}"

    def _summarize_context(self, state: _JobState) -> str:
        if not state.observations:
            return "No tool observations were gathered before suspension."
        lines = ["Observations gathered before suspension:"]
        for tool, text in state.observations[-10:]:
            lines.append(f"- {tool}: {_clip(text, self.config.observation_limit)}")
        return "\n".join(lines)

    def _integrate_phase(self, recorder, query_text, report: ExecutorReport, usage):
        prompt = self.prompts.render(
            "integrator",
            {"user_query": query_text, "executor_report": report.to_markdown()},
        )
        messages = [ChatMessage("user", prompt)]
        for attempt in range(1 + self.config.integrator_retries):
            result = self._complete(recorder, "integrator", messages)
            usage = usage + UsageTotals.of(result)
            try:
                return parse_final_answer(result.text), usage
            except ParseError as exc:
                messages = messages + [
                    ChatMessage("assistant", result.text),
                    ChatMessage("user", f"Parse failure: {exc}. Reply with exactly the JSON object in the mandated format."),
                ]
        return None, usage
