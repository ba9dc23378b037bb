"""Digest-keyed script construction for deterministic end-to-end runs.

The builder walks a hand-written plan of an evolution run (who creates which
tool, who reuses what, how the aggregator clusters), renders the exact prompts
each role will see, and emits a scripted-provider entry per rendered prompt
digest. Digest matching is scheduling-proof, so the same script drives fully
concurrent batches deterministically. Any divergence between the plan and the
engine surfaces as a script-exhausted error, which is the test failure signal.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from helpers import (
    aggregator_reply,
    developer_reply,
    executor_action,
    executor_report,
    integrator_reply,
    make_tool_request,
    make_tool_source,
    manager_reply,
    merger_reply,
)
from evorun.gateway import prompt_digest
from evorun.prompts import PromptSuite, ToolRequest, parse_executor_report, tool_listing_slot
from evorun.sandbox import validate_merged_source


@dataclass
class ToolSpec:
    """Builder-side model of one tool: what listings and prompts will show."""

    name: str
    description: str
    input_schema: dict
    source: str
    out_field: str


@dataclass
class JobPlan:
    query_id: str
    text: str
    answer: str
    required: list[str] = field(default_factory=list)
    create: list[ToolSpec] = field(default_factory=list)
    calls: list[tuple[str, dict]] = field(default_factory=list)
    conclusion: str = ""


@dataclass
class BatchPlan:
    jobs: list[JobPlan]
    # (cluster_id, master_name, member_names); None when the batch creates nothing.
    clusters: list[tuple[str, str, list[str]]] | None = None
    merged_sources: dict[str, str] = field(default_factory=dict)


def echo_tool_spec(name: str, in_field: str = "text", out_field: str = "result") -> ToolSpec:
    request = make_tool_request(name, in_field=in_field, out_field=out_field)
    return ToolSpec(
        name=name,
        description=request["description"],
        input_schema=request["input_schema"],
        source=make_tool_source(name, in_field=in_field, out_field=out_field),
        out_field=out_field,
    )


def _request_dict(spec: ToolSpec) -> dict:
    in_field = next(iter(spec.input_schema["properties"]))
    return make_tool_request(spec.name, in_field=in_field, out_field=spec.out_field)


class ScriptBuilder:
    """Simulates the run's prompt stream against a registry model."""

    def __init__(self, suite: PromptSuite, registry_model: dict[str, ToolSpec] | None = None):
        self.suite = suite
        self.registry: dict[str, ToolSpec] = dict(registry_model or {})
        self.entries: list[dict] = []

    def _emit(self, prompt: str, reply: str) -> None:
        self.entries.append({"prompt_sha256": prompt_digest(prompt), "response_text": reply})

    def _listing_slot(self, specs: list[ToolSpec]):
        return tool_listing_slot([(s.name, s.description, s.input_schema) for s in specs])

    def _global_listing(self) -> list[ToolSpec]:
        return [self.registry[name] for name in sorted(self.registry)]

    def add_job(self, job: JobPlan) -> None:
        # Manager sees the frozen global listing.
        manager_prompt = self.suite.render(
            "manager",
            {"user_query": job.text, "tools": self._listing_slot(self._global_listing())},
        )
        request_dicts = [_request_dict(spec) for spec in job.create]
        self._emit(manager_prompt, manager_reply(required=job.required, requests=request_dicts))

        # One developer exchange per requested tool.
        for spec, request_dict in zip(job.create, request_dicts):
            request = ToolRequest(
                name=request_dict["name"],
                description=request_dict["description"],
                input_schema=request_dict["input_schema"],
                output_schema=request_dict["output_schema"],
            )
            developer_prompt = self.suite.render(
                "tool_developer", {"tool_request_json": request.to_json()}
            )
            self._emit(developer_prompt, developer_reply(spec.source))

        # Executor: first message is constant across the loop, so replies queue
        # on one digest: all tool actions, then the final report.
        bound = {name: self.registry[name] for name in job.required}
        bound.update({spec.name: spec for spec in job.create})
        bound_specs = [bound[name] for name in sorted(bound)]
        executor_prompt = (
            self.suite.render("executor", {"user_query": job.text})
            + "\n\n"
            + self.suite.render("executor_protocol", {"tools": self._listing_slot(bound_specs)})
        )
        for tool, payload in job.calls:
            self._emit(executor_prompt, executor_action(tool, payload))
        conclusion = job.conclusion or f"The answer is {job.answer}."
        report_text = executor_report(
            f"resolve {job.query_id}", f"evidence for {job.query_id}", conclusion
        )
        self._emit(executor_prompt, report_text)

        # Integrator consumes the normalized report.
        integrator_prompt = self.suite.render(
            "integrator",
            {
                "user_query": job.text,
                "executor_report": parse_executor_report(report_text).to_markdown(),
            },
        )
        self._emit(integrator_prompt, integrator_reply(job.answer))

    def add_barrier(self, batch: BatchPlan) -> None:
        locals_by_name = {spec.name: spec for job in batch.jobs for spec in job.create}
        if not locals_by_name:
            assert batch.clusters is None, "clusters given but no local tools were created"
            return
        candidates = dict(self.registry)
        candidates.update(locals_by_name)
        candidate_specs = [candidates[name] for name in sorted(candidates)]
        aggregator_prompt = self.suite.render(
            "aggregator", {"tools": self._listing_slot(candidate_specs)}
        )
        # The plan must cover every candidate exactly once; auto-complete
        # singleton clusters for candidates the authored plan leaves implicit.
        covered = {name for _, _, members in batch.clusters for name in members}
        clusters = list(batch.clusters) + [
            (f"Singleton_{name}", name, [name]) for name in sorted(set(candidates) - covered)
        ]
        self._emit(aggregator_prompt, aggregator_reply(clusters))

        for cluster_id, master, member_names in clusters:
            members = [candidates[name] for name in member_names]
            if len(members) == 1:
                member = members[0]
                if member.name in locals_by_name:
                    self.registry[member.name] = member
                continue
            if all(m.name not in locals_by_name for m in members):
                continue  # pure-library cluster: no merger call
            merged_source = batch.merged_sources[master]
            merger_prompt = self.suite.render(
                "merger",
                {
                    "tools": [
                        {"idx": i + 1, "name": m.name, "code": m.source}
                        for i, m in enumerate(members)
                    ],
                    "suggest_name": master,
                },
            )
            self._emit(merger_prompt, merger_reply(merged_source))
            merged_artifact = validate_merged_source(merged_source, master)
            for member in members:
                self.registry.pop(member.name, None)
            self.registry[master] = ToolSpec(
                name=master,
                description=merged_artifact.description,
                input_schema=merged_artifact.input_schema,
                source=merged_source,
                out_field=next(iter(merged_artifact.output_schema["properties"])),
            )

    def add_batches(self, batches: list[BatchPlan]) -> None:
        for batch in batches:
            for job in batch.jobs:
                self.add_job(job)
            self.add_barrier(batch)


# ---------------------------------------------------------------------------
# The canonical 12-query evolution fixture
# ---------------------------------------------------------------------------

FETCH_ALPHA = echo_tool_spec("fetch_text_alpha")
FETCH_BETA = echo_tool_spec("fetch_text_beta")
COMPUTE_SUM = echo_tool_spec("compute_sum", in_field="expression", out_field="value")
PARSE_X = echo_tool_spec("parse_rows_x", in_field="raw", out_field="rows")
PARSE_Y = echo_tool_spec("parse_rows_y", in_field="raw", out_field="rows")
FETCH_TEXT_SOURCE = make_tool_source("fetch_text")
PARSE_ROWS_SOURCE = make_tool_source("parse_rows", in_field="raw", out_field="rows")

QUERY_TEXTS = {f"q{i:02d}": f"benchmark task number {i}" for i in range(1, 13)}

# Expected per-invocation sandbox outputs, ordered by query: the acceptance
# suite hand-computes token metrics from these.
E2E_EXPECTED_OUTPUTS = [
    '{"result":"alpha-1"}',
    '{"result":"beta-1"}',
    '{"value":"2+1"}',
    '{"result":"five"}',
    '{"rows":"r6"}',
    '{"rows":"r7"}',
    '{"value":"8"}',
    '{"kind":"RuntimeError","message":"forced failure"}',
    '{"kind":"RuntimeError","message":"forced failure"}',
    '{"value":"11"}',
    '{"result":"twelve"}',
]

E2E_ANSWERS = ["A1", "A2", "A3", "A4", "A5", "A6", "A7", "A8", "E9", "E10", "A11", "A12"]


def batch_plans_b4() -> list[BatchPlan]:
    return [
        BatchPlan(
            jobs=[
                JobPlan("q01", QUERY_TEXTS["q01"], "A1", create=[FETCH_ALPHA],
                        calls=[("fetch_text_alpha", {"text": "alpha-1"})]),
                JobPlan("q02", QUERY_TEXTS["q02"], "A2", create=[FETCH_BETA],
                        calls=[("fetch_text_beta", {"text": "beta-1"})]),
                JobPlan("q03", QUERY_TEXTS["q03"], "A3", create=[COMPUTE_SUM],
                        calls=[("compute_sum", {"expression": "2+1"})]),
                JobPlan("q04", QUERY_TEXTS["q04"], "A4"),
            ],
            clusters=[
                ("Cluster_Fetch_Text", "fetch_text", ["fetch_text_alpha", "fetch_text_beta"]),
                ("Singleton_Compute_Sum", "compute_sum", ["compute_sum"]),
            ],
            merged_sources={"fetch_text": FETCH_TEXT_SOURCE},
        ),
        BatchPlan(
            jobs=[
                JobPlan("q05", QUERY_TEXTS["q05"], "A5", required=["fetch_text"],
                        calls=[("fetch_text", {"text": "five"})]),
                JobPlan("q06", QUERY_TEXTS["q06"], "A6", create=[PARSE_X],
                        calls=[("parse_rows_x", {"raw": "r6"})]),
                JobPlan("q07", QUERY_TEXTS["q07"], "A7", create=[PARSE_Y],
                        calls=[("parse_rows_y", {"raw": "r7"})]),
                JobPlan("q08", QUERY_TEXTS["q08"], "A8", required=["compute_sum"],
                        calls=[("compute_sum", {"expression": "8"})]),
            ],
            clusters=[
                ("Singleton_Compute_Sum", "compute_sum", ["compute_sum"]),
                ("Singleton_Fetch_Text", "fetch_text", ["fetch_text"]),
                ("Cluster_Parse_Rows", "parse_rows", ["parse_rows_x", "parse_rows_y"]),
            ],
            merged_sources={"parse_rows": PARSE_ROWS_SOURCE},
        ),
        BatchPlan(
            jobs=[
                JobPlan("q09", QUERY_TEXTS["q09"], "E9", required=["fetch_text"],
                        calls=[("fetch_text", {"text": "FAIL"})],
                        conclusion="The task is not completable: the fetch failed."),
                JobPlan("q10", QUERY_TEXTS["q10"], "E10", required=["parse_rows"],
                        calls=[("parse_rows", {"raw": "FAIL"})],
                        conclusion="The task is not completable: the parse failed."),
                JobPlan("q11", QUERY_TEXTS["q11"], "A11", required=["compute_sum"],
                        calls=[("compute_sum", {"expression": "11"})]),
                JobPlan("q12", QUERY_TEXTS["q12"], "A12", required=["fetch_text"],
                        calls=[("fetch_text", {"text": "twelve"})]),
            ],
            clusters=None,
        ),
    ]


def batch_plans_b1() -> list[BatchPlan]:
    """Sequential semantics: later queries reuse tools committed by earlier ones."""

    def singleton(job: JobPlan) -> BatchPlan:
        clusters = None
        if job.create:
            clusters = [(f"Singleton_{s.name}", s.name, [s.name]) for s in job.create]
        return BatchPlan(jobs=[job], clusters=clusters)

    return [
        singleton(JobPlan("q01", QUERY_TEXTS["q01"], "A1", create=[FETCH_ALPHA],
                          calls=[("fetch_text_alpha", {"text": "alpha-1"})])),
        singleton(JobPlan("q02", QUERY_TEXTS["q02"], "A2", required=["fetch_text_alpha"],
                          calls=[("fetch_text_alpha", {"text": "beta-1"})])),
        singleton(JobPlan("q03", QUERY_TEXTS["q03"], "A3", create=[COMPUTE_SUM],
                          calls=[("compute_sum", {"expression": "2+1"})])),
        singleton(JobPlan("q04", QUERY_TEXTS["q04"], "A4")),
        singleton(JobPlan("q05", QUERY_TEXTS["q05"], "A5", required=["fetch_text_alpha"],
                          calls=[("fetch_text_alpha", {"text": "five"})])),
        singleton(JobPlan("q06", QUERY_TEXTS["q06"], "A6", create=[PARSE_X],
                          calls=[("parse_rows_x", {"raw": "r6"})])),
        singleton(JobPlan("q07", QUERY_TEXTS["q07"], "A7", required=["parse_rows_x"],
                          calls=[("parse_rows_x", {"raw": "r7"})])),
        singleton(JobPlan("q08", QUERY_TEXTS["q08"], "A8", required=["compute_sum"],
                          calls=[("compute_sum", {"expression": "8"})])),
        singleton(JobPlan("q09", QUERY_TEXTS["q09"], "E9", required=["fetch_text_alpha"],
                          calls=[("fetch_text_alpha", {"text": "FAIL"})],
                          conclusion="The task is not completable: the fetch failed.")),
        singleton(JobPlan("q10", QUERY_TEXTS["q10"], "E10", required=["parse_rows_x"],
                          calls=[("parse_rows_x", {"raw": "FAIL"})],
                          conclusion="The task is not completable: the parse failed.")),
        singleton(JobPlan("q11", QUERY_TEXTS["q11"], "A11", required=["compute_sum"],
                          calls=[("compute_sum", {"expression": "11"})])),
        singleton(JobPlan("q12", QUERY_TEXTS["q12"], "A12", required=["fetch_text_alpha"],
                          calls=[("fetch_text_alpha", {"text": "twelve"})])),
    ]


def warm_start_plan(registry_model: dict[str, ToolSpec]) -> list[BatchPlan]:
    """Reuse-only stream against a warm-started library: zero synthesis."""
    texts = {f"w{i}": f"warm task number {i}" for i in range(1, 5)}
    return [
        BatchPlan(
            jobs=[
                JobPlan("w1", texts["w1"], "W1", required=["fetch_text"],
                        calls=[("fetch_text", {"text": "w-one"})]),
                JobPlan("w2", texts["w2"], "W2", required=["parse_rows"],
                        calls=[("parse_rows", {"raw": "w-two"})]),
                JobPlan("w3", texts["w3"], "W3", required=["compute_sum"],
                        calls=[("compute_sum", {"expression": "w3"})]),
                JobPlan("w4", texts["w4"], "W4", required=["fetch_text"],
                        calls=[("fetch_text", {"text": "w-four"})]),
            ],
            clusters=None,
        )
    ]


def build_script(suite: PromptSuite, plans: list[BatchPlan], registry_model=None):
    """Returns (entries, final registry model)."""
    builder = ScriptBuilder(suite, registry_model)
    builder.add_batches(plans)
    return builder.entries, builder.registry


def isolation_plan(worker_count: int = 8) -> list[BatchPlan]:
    """One batch of `worker_count` jobs, each synthesizing a distinct tool.

    If any commit leaked mid-batch, later-scheduled jobs would render manager
    prompts against a non-empty listing and miss the script entirely.
    """
    jobs = []
    clusters = []
    for i in range(worker_count):
        spec = echo_tool_spec(f"probe_tool_{i}")
        jobs.append(
            JobPlan(f"iso{i}", f"isolation probe number {i}", f"I{i}", create=[spec])
        )
        clusters.append((f"Singleton_{spec.name}", spec.name, [spec.name]))
    return [BatchPlan(jobs=jobs, clusters=clusters)]
