"""Batch-parallel evolution engine.

Each batch runs B query jobs concurrently against one frozen registry
snapshot. At the barrier, every candidate tool (the existing library plus all
batch-local syntheses) is clustered by the aggregator, multi-member clusters
containing new tools are consolidated by the merger, and the survivors are
committed as the next snapshot. Job events flush to the trace in stable query
order, so scripted runs replay byte-identically regardless of worker timing.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

from . import registry
from .gateway import ChatExchange, ChatMessage, Provider, UsageTotals
from .metrics import MetricsAccumulator
from .prompts import (
    ClusterPlan,
    ParseError,
    PromptSuite,
    ToolCluster,
    parse_cluster_plan,
    parse_single_code_block,
    tool_listing_slot,
)
from .registry import Provenance, RegistrySnapshot, ToolRecord, ToolStats, commit_union
from .sandbox import ArtifactValidationError, ProvisioningError, Sandbox, ToolArtifact, validate_merged_source
from .workflow import JobResult, QueryWorkflow, WorkflowConfig


class EvolutionError(Exception):
    pass


class RunAborted(EvolutionError):
    """A stream run stopped early; a resumable checkpoint was written.

    Carries the answers of the batches that did complete so the caller can
    persist partial results.
    """

    def __init__(
        self,
        message: str,
        checkpoint: "Checkpoint | None" = None,
        answers: list | None = None,
        state: "EvolutionState | None" = None,
    ):
        super().__init__(message)
        self.checkpoint = checkpoint
        self.answers = answers or []
        self.state = state


@dataclass
class EvolutionConfig:
    batch_size: int = 16
    worker_cap: int = 8
    aggregator_retries: int = 1
    remerge_stable: bool = False  # allow the merger to re-consolidate pure-library clusters

    def validate(self) -> list[str]:
        problems = []
        if self.batch_size < 1:
            problems.append("batch_size must be >= 1")
        if self.worker_cap < 1:
            problems.append("worker_cap must be >= 1")
        return problems


@dataclass(frozen=True)
class EvolutionState:
    """The evolving system state: fixed workflow/prompt configuration, varying toolset."""

    snapshot: RegistrySnapshot
    workflow_config: WorkflowConfig

    @property
    def step(self) -> int:
        return self.snapshot.step


@dataclass(frozen=True)
class ClusterOutcome:
    cluster_id: str
    members: tuple[str, ...]
    kind: str  # passthrough | merged | fallback
    master: str | None = None
    reason: str | None = None


@dataclass
class AbsorptionPlan:
    clusters: list[ToolCluster]
    outcomes: list[ClusterOutcome] = field(default_factory=list)
    aggregator_retried: bool = False
    degraded_to_singletons: bool = False


@dataclass
class BatchResult:
    index: int
    answers: list
    results: list[JobResult]
    state: EvolutionState
    metrics: dict


@dataclass
class Checkpoint:
    stream_offset: int
    step: int
    snapshot_path: str
    metric_sums: dict

    def save(self, path: str | Path) -> None:
        Path(path).write_text(
            json.dumps(
                {
                    "stream_offset": self.stream_offset,
                    "step": self.step,
                    "snapshot_path": self.snapshot_path,
                    "metric_sums": self.metric_sums,
                },
                indent=2,
                sort_keys=True,
            )
            + "\n",
            encoding="utf-8",
        )

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
        return cls(
            stream_offset=int(raw["stream_offset"]),
            step=int(raw["step"]),
            snapshot_path=str(raw["snapshot_path"]),
            metric_sums=dict(raw.get("metric_sums", {})),
        )


def validate_partition(plan: ClusterPlan, candidate_names) -> list[str]:
    """Check that a cluster plan covers every candidate exactly once."""
    candidates = set(candidate_names)
    seen: dict[str, int] = {}
    for name in plan.all_member_names():
        seen[name] = seen.get(name, 0) + 1
    violations = []
    unknown = sorted(set(seen) - candidates)
    if unknown:
        violations.append(f"unknown tools in clusters: {', '.join(unknown)}")
    duplicated = sorted(name for name, count in seen.items() if count > 1 and name in candidates)
    if duplicated:
        violations.append(f"tools assigned to multiple clusters: {', '.join(duplicated)}")
    missing = sorted(candidates - set(seen))
    if missing:
        violations.append(f"tools left behind: {', '.join(missing)}")
    return violations


@dataclass
class _Candidate:
    name: str
    description: str
    input_schema: dict
    is_local: bool
    artifact: ToolArtifact | None = None  # locals only
    record: ToolRecord | None = None  # globals only
    owner_query: str | None = None
    invocations: int = 0
    source: str = ""


class EvolutionEngine:
    """Owns a run: worker pool, absorbing barrier, trace, metrics, checkpoints."""

    def __init__(
        self,
        provider: Provider,
        prompts: PromptSuite,
        sandbox: Sandbox,
        workflow_config: WorkflowConfig | None = None,
        config: EvolutionConfig | None = None,
        trace_writer=None,
        temperature: float = 0.7,
        jitter=None,
    ):
        self.provider = provider
        self.prompts = prompts
        self.sandbox = sandbox
        self.workflow_config = workflow_config or WorkflowConfig()
        self.config = config or EvolutionConfig()
        self.trace = trace_writer
        self.temperature = temperature
        self.jitter = jitter
        self.metrics = MetricsAccumulator()
        self.usage = UsageTotals()
        self._batch_index = 0
        self._stop = False

    def request_stop(self) -> None:
        self._stop = True

    # -- tracing ------------------------------------------------------------

    def _trace(self, kind: str, payload: dict) -> None:
        if self.trace is not None:
            self.trace.append(kind, payload)

    def _complete_barrier(self, role: str, messages: list[ChatMessage]):
        exchange = ChatExchange(messages=messages, agent_role=role, temperature=self.temperature)
        result = self.provider.complete(exchange)
        self.usage = self.usage + UsageTotals.of(result)
        self._trace(
            "llm_exchange",
            {
                "query_id": None,
                "role": role,
                "prompt_tokens": result.prompt_tokens,
                "completion_tokens": result.completion_tokens,
                "provider_id": result.provider_id,
            },
        )
        return result

    # -- batch execution ----------------------------------------------------

    def run_batch(self, state: EvolutionState, queries: list[tuple[str, str]]) -> BatchResult:
        """Run one batch of (query_id, text) pairs and commit the absorbed toolset."""
        if not queries:
            raise EvolutionError("batch must contain at least one query")
        snapshot = state.snapshot
        index = self._batch_index
        self._batch_index += 1
        self._trace(
            "batch_boundary",
            {
                "index": index,
                "size": len(queries),
                "query_ids": [qid for qid, _ in queries],
                "listing_digest": registry.listing_digest(snapshot),
            },
        )

        workflow = QueryWorkflow(
            provider=self.provider,
            prompts=self.prompts,
            sandbox=self.sandbox,
            config=self.workflow_config,
            temperature=self.temperature,
        )

        def job(entry: tuple[str, str]) -> JobResult:
            if self.jitter is not None:
                self.jitter()
            query_id, text = entry
            return workflow.run_query(query_id, text, snapshot)

        workers = min(len(queries), self.config.worker_cap)
        if workers == 1:
            results = [job(entry) for entry in queries]
        else:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                results = list(pool.map(job, queries))

        # Barrier: flush job events in stable query order, then absorb and commit.
        if self.trace is not None:
            for result in results:
                self.trace.extend(result.events)
        for result in results:
            self.usage = self.usage + result.usage

        local_sets = [
            [(result.query_id, artifact) for artifact in result.local_tools] for result in results
        ]
        deltas: dict[str, ToolStats] = {}
        for result in results:
            for name, delta in result.stats_deltas.items():
                base = deltas.get(name, ToolStats())
                deltas[name] = base.merged(
                    invocations=delta.invocations,
                    successes=delta.successes,
                    tool_output_tokens=delta.tool_output_tokens,
                )

        new_records, aliases, plan = self.absorb(snapshot, local_sets, deltas)
        new_snapshot = commit_union(snapshot, new_records, aliases, stats_deltas=deltas)
        self._trace(
            "commit",
            {
                "step": new_snapshot.step,
                "library_size": len(new_snapshot),
                "listing_digest": registry.listing_digest(new_snapshot),
            },
        )

        samples = [result.sample for result in results]
        self.metrics.extend(samples)
        batch_metrics = MetricsAccumulator(samples=list(samples)).summary()
        new_state = replace(state, snapshot=new_snapshot)
        return BatchResult(
            index=index,
            answers=[result.answer for result in results],
            results=results,
            state=new_state,
            metrics=batch_metrics,
        )

    # -- absorbing ----------------------------------------------------------

    def _gather_candidates(
        self, snapshot: RegistrySnapshot, local_sets, deltas: dict[str, ToolStats]
    ) -> list[_Candidate]:
        candidates: dict[str, _Candidate] = {}
        for record in snapshot.records:
            candidates[record.name] = _Candidate(
                name=record.name,
                description=record.description,
                input_schema=record.input_schema,
                is_local=False,
                record=record,
                invocations=record.stats.invocations + deltas.get(record.name, ToolStats()).invocations,
                source=record.source,
            )
        for owned in local_sets:
            for query_id, artifact in owned:
                name = artifact.name
                # Concurrent jobs can synthesize the same name against the frozen
                # snapshot; disambiguate deterministically before clustering.
                if name in candidates:
                    suffix = 2
                    while f"{name}_{suffix}" in candidates:
                        suffix += 1
                    name = f"{name}_{suffix}"
                    artifact = replace(artifact, name=name)
                candidates[name] = _Candidate(
                    name=name,
                    description=artifact.description,
                    input_schema=artifact.input_schema,
                    is_local=True,
                    artifact=artifact,
                    owner_query=query_id,
                    invocations=deltas.get(artifact.name, ToolStats()).invocations,
                    source=artifact.source,
                )
        return [candidates[name] for name in sorted(candidates)]

    def _aggregate(self, candidates: list[_Candidate]) -> tuple[ClusterPlan, bool, bool]:
        """Ask the aggregator for a cluster plan; returns (plan, retried, degraded)."""
        names = [c.name for c in candidates]
        slot = tool_listing_slot([(c.name, c.description, c.input_schema) for c in candidates])
        prompt = self.prompts.render("aggregator", {"tools": slot})
        messages = [ChatMessage("user", prompt)]
        retried = False
        for attempt in range(1 + self.config.aggregator_retries):
            result = self._complete_barrier("aggregator", messages)
            try:
                plan = parse_cluster_plan(result.text)
                violations = validate_partition(plan, names)
            except ParseError as exc:
                violations = [f"cluster plan parse error: {exc}"]
                plan = None
            if not violations:
                return plan, retried, False
            if attempt < self.config.aggregator_retries:
                retried = True
                messages = messages + [
                    ChatMessage("assistant", result.text),
                    ChatMessage(
                        "user",
                        "The cluster plan is invalid: "
                        + "; ".join(violations)
                        + ". Every input tool must appear exactly once across the clusters. "
                        "Output the corrected JSON object only.",
                    ),
                ]
        # Degraded mode: evolution correctness over consolidation aggressiveness.
        singleton = ClusterPlan(
            clusters=[
                ToolCluster(cluster_id=f"Singleton_{name}", suggested_master_tool_name=name, tool_names=[name])
                for name in names
            ]
        )
        return singleton, retried, True

    def _merge_cluster(
        self,
        cluster: ToolCluster,
        members: list[_Candidate],
        master_name: str,
        step: int,
    ) -> tuple[ToolRecord | None, str | None]:
        """Run the merger over a cluster; returns (record, failure_reason)."""
        slot = [
            {"idx": i + 1, "name": member.name, "code": member.source}
            for i, member in enumerate(members)
        ]
        prompt = self.prompts.render("merger", {"tools": slot, "suggest_name": master_name})
        result = self._complete_barrier("merger", messages=[ChatMessage("user", prompt)])
        try:
            source = parse_single_code_block(result.text)
            artifact = validate_merged_source(source, master_name)
            self.sandbox.provisioner.provision(artifact.dependencies)
        except (ParseError, ArtifactValidationError, ProvisioningError) as exc:
            self._trace(
                "validation",
                {"query_id": None, "tool": master_name, "passed": False,
                 "category": getattr(exc, "category", "merge failure"), "context": "absorb"},
            )
            return None, f"{type(exc).__name__}: {exc}"
        self._trace(
            "validation",
            {"query_id": None, "tool": master_name, "passed": True, "context": "absorb"},
        )
        record = ToolRecord.create(
            name=artifact.name,
            description=artifact.description,
            input_schema=artifact.input_schema,
            output_schema=artifact.output_schema,
            dependencies=artifact.dependencies,
            source=artifact.source,
            provenance=Provenance.merged(step=step, member_names=[m.name for m in members]),
        )
        return record, None

    def absorb(
        self,
        snapshot: RegistrySnapshot,
        local_sets,
        deltas: dict[str, ToolStats] | None = None,
    ) -> tuple[list[ToolRecord], dict[str, str], AbsorptionPlan]:
        """Cluster and consolidate the batch's candidate tools.

        Returns the new records to commit, the alias map for merged-away
        members, and the applied plan. With no local tools the delta is empty
        and no gateway calls are made.
        """
        deltas = deltas or {}
        has_locals = any(owned for owned in local_sets)
        if not has_locals:
            plan = AbsorptionPlan(clusters=[], outcomes=[])
            self._trace("absorb", {"clusters": [], "retried": False, "degraded": False})
            return [], {}, plan

        candidates = self._gather_candidates(snapshot, local_sets, deltas)
        by_name = {c.name: c for c in candidates}
        step = snapshot.step + 1

        cluster_plan, retried, degraded = self._aggregate(candidates)
        plan = AbsorptionPlan(
            clusters=cluster_plan.clusters, aggregator_retried=retried, degraded_to_singletons=degraded
        )

        new_records: list[ToolRecord] = []
        aliases: dict[str, str] = {}
        surviving_globals = set(snapshot.names)

        def claimed_names() -> set[str]:
            taken = set(surviving_globals)
            taken.update(r.name for r in new_records)
            return taken

        for cluster in cluster_plan.clusters:
            members = [by_name[name] for name in cluster.tool_names]
            member_names = tuple(m.name for m in members)
            local_members = [m for m in members if m.is_local]
            global_members = [m for m in members if not m.is_local]

            if not local_members and not (self.config.remerge_stable and len(members) > 1):
                # No-op protection: stable library tools pass through untouched.
                plan.outcomes.append(
                    ClusterOutcome(cluster_id=cluster.cluster_id, members=member_names, kind="passthrough")
                )
                continue

            if len(members) == 1:
                member = members[0]
                if member.is_local:
                    new_records.append(
                        ToolRecord.create(
                            name=member.name,
                            description=member.artifact.description,
                            input_schema=member.artifact.input_schema,
                            output_schema=member.artifact.output_schema,
                            dependencies=member.artifact.dependencies,
                            source=member.artifact.source,
                            provenance=Provenance.synthesized(step=step, query_id=member.owner_query or ""),
                        )
                    )
                plan.outcomes.append(
                    ClusterOutcome(cluster_id=cluster.cluster_id, members=member_names, kind="passthrough")
                )
                continue

            # Multi-member cluster to consolidate.
            for member in global_members:
                surviving_globals.discard(member.name)
            master_name = cluster.suggested_master_tool_name or members[0].name
            taken = claimed_names() - set(member_names)
            if master_name in taken:
                suffix = 2
                while f"{master_name}_v{suffix}" in taken:
                    suffix += 1
                master_name = f"{master_name}_v{suffix}"

            record, failure = self._merge_cluster(cluster, members, master_name, step)
            if record is not None:
                new_records.append(record)
                for member in members:
                    if member.name == record.name and member.is_local:
                        continue
                    # A global member sharing the master's name is replaced in
                    # place: the self-alias retires the old record on commit.
                    aliases[member.name] = record.name
                plan.outcomes.append(
                    ClusterOutcome(
                        cluster_id=cluster.cluster_id, members=member_names, kind="merged", master=record.name
                    )
                )
                continue

            # Merger output failed validation: fall back to the member with the
            # highest invocation count (ties break lexicographically).
            fallback = sorted(members, key=lambda m: (-m.invocations, m.name))[0]
            if fallback.is_local:
                new_records.append(
                    ToolRecord.create(
                        name=fallback.name,
                        description=fallback.artifact.description,
                        input_schema=fallback.artifact.input_schema,
                        output_schema=fallback.artifact.output_schema,
                        dependencies=fallback.artifact.dependencies,
                        source=fallback.artifact.source,
                        provenance=Provenance.synthesized(step=step, query_id=fallback.owner_query or ""),
                    )
                )
            else:
                surviving_globals.add(fallback.name)
            for member in members:
                if member.name != fallback.name:
                    aliases[member.name] = fallback.name
            plan.outcomes.append(
                ClusterOutcome(
                    cluster_id=cluster.cluster_id,
                    members=member_names,
                    kind="fallback",
                    master=fallback.name,
                    reason=failure,
                )
            )

        self._trace(
            "absorb",
            {
                "clusters": [
                    {
                        "cluster_id": o.cluster_id,
                        "members": list(o.members),
                        "outcome": o.kind,
                        "master": o.master,
                        "reason": o.reason,
                    }
                    for o in plan.outcomes
                ],
                "retried": plan.aggregator_retried,
                "degraded": plan.degraded_to_singletons,
            },
        )
        # Aliases must point at surviving names only; commit_union re-validates.
        return new_records, aliases, plan

    # -- stream driving -----------------------------------------------------

    def run_stream(
        self,
        state: EvolutionState,
        stream: list[tuple[str, str]],
        batch_size: int | None = None,
        sink=None,
        checkpoint_path: str | Path | None = None,
        snapshot_dir: str | Path | None = None,
        start_offset: int = 0,
    ) -> tuple[EvolutionState, list]:
        """Partition the stream into consecutive batches and fold run_batch over them.

        `sink`, when given, is called with each BatchResult. Sink failures and
        stop requests abort the run with a resumable checkpoint (when a
        checkpoint path is configured). Returns the final state and the
        answers in input order.
        """
        batch_size = batch_size or self.config.batch_size
        if batch_size < 1:
            raise EvolutionError("batch size must be >= 1")
        answers: list = []
        offset = start_offset

        def write_checkpoint() -> Checkpoint | None:
            if checkpoint_path is None:
                return None
            directory = Path(snapshot_dir) if snapshot_dir else Path(checkpoint_path).parent / "snapshots"
            snap_path = Path(directory) / f"step-{state.step:05d}"
            registry.persist(state.snapshot, snap_path)
            checkpoint = Checkpoint(
                stream_offset=offset,
                step=state.step,
                snapshot_path=str(snap_path),
                metric_sums=self.metrics.summary(),
            )
            checkpoint.save(checkpoint_path)
            return checkpoint

        while offset < len(stream):
            if self._stop:
                raise RunAborted("stop requested", write_checkpoint(), answers, state)
            batch = stream[offset : offset + batch_size]
            result = self.run_batch(state, batch)
            state = result.state
            offset += len(batch)
            answers.extend(result.answers)
            if sink is not None:
                try:
                    sink(result)
                except Exception as exc:
                    raise RunAborted(f"sink failure: {exc}", write_checkpoint(), answers, state) from exc
            write_checkpoint()
        return state, answers
