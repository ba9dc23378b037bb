from __future__ import annotations

import json

import pytest

from helpers import (
    developer_reply,
    executor_action,
    executor_report,
    integrator_reply,
    make_tool_request,
    make_tool_source,
    manager_reply,
    seq,
)
from evorun.gateway import ScriptedProvider, ScriptEntry
from evorun.registry import Provenance, ToolRecord, commit_union, empty_snapshot
from evorun.workflow import (
    INCOMPLETION_PREFIX,
    LEGAL_TRANSITIONS,
    IllegalTransitionError,
    JobRecorder,
    QueryWorkflow,
    WorkflowConfig,
)


class RecordingProvider:
    """Wraps the scripted provider to expose every exchange for assertions."""

    def __init__(self, entries):
        self.inner = ScriptedProvider([ScriptEntry.from_dict(e) for e in entries])
        self.exchanges = []

    def complete(self, exchange):
        self.exchanges.append(exchange)
        return self.inner.complete(exchange)

    def prompts_for(self, role: str) -> list[str]:
        return [e.rendered_prompt for e in self.exchanges if e.agent_role == role]


def echo_record(name: str = "echo_text") -> ToolRecord:
    request = make_tool_request(name)
    return ToolRecord.create(
        name=name,
        description=request["description"],
        input_schema=request["input_schema"],
        output_schema=request["output_schema"],
        dependencies=(),
        source=make_tool_source(name),
        provenance=Provenance.synthesized(step=1, query_id="q0"),
    )


def run(provider, sandbox, prompt_suite, snapshot, query="what is up?", config=None):
    workflow = QueryWorkflow(
        provider=provider, prompts=prompt_suite, sandbox=sandbox, config=config or WorkflowConfig()
    )
    return workflow.run_query("q1", query, snapshot)


REPORT = executor_report("straightforward", "observed result", "The answer is 3.")


class TestReuseScenario:
    def test_existing_tool_called_once(self, sandbox, prompt_suite):
        snapshot = commit_union(empty_snapshot(), [echo_record()])
        provider = RecordingProvider(
            [
                seq("manager", 0, manager_reply(required=["echo_text"], guidance="echo_text: echo the text")),
                seq("executor", 0, executor_action("echo_text", {"text": "3"})),
                seq("executor", 1, REPORT),
                seq("integrator", 0, integrator_reply("3")),
            ]
        )
        result = run(provider, sandbox, prompt_suite, snapshot)
        assert result.status == "done"
        assert result.answer.final_answer == "3"
        assert (result.sample.c, result.sample.u, result.sample.successes) == (0, 1, 1)
        assert result.local_tools == []
        assert result.stats_deltas["echo_text"].invocations == 1
        # Observation fed back to the executor verbatim.
        second_executor_prompt = [
            m.text for e in provider.exchanges if e.agent_role == "executor" for m in e.messages
        ]
        assert any('{"result":"3"}' in text for text in second_executor_prompt)


class TestSynthesisScenario:
    def test_new_tool_used_twice(self, sandbox, prompt_suite):
        request = make_tool_request("fetch_note")
        provider = RecordingProvider(
            [
                seq("manager", 0, manager_reply(requests=[request])),
                seq("tool_developer", 0, developer_reply(make_tool_source("fetch_note"))),
                seq("executor", 0, executor_action("fetch_note", {"text": "one"})),
                seq("executor", 1, executor_action("fetch_note", {"text": "two"})),
                seq("executor", 2, REPORT),
                seq("integrator", 0, integrator_reply("3")),
            ]
        )
        result = run(provider, sandbox, prompt_suite, empty_snapshot())
        assert result.status == "done"
        assert (result.sample.c, result.sample.u) == (1, 2)
        assert [a.name for a in result.local_tools] == ["fetch_note"]
        # Developer prompt carries the serialized request.
        developer_prompt = provider.prompts_for("tool_developer")[0]
        assert '"fetch_note"' in developer_prompt

    def test_two_requests_enter_synthesize_together(self, sandbox, prompt_suite):
        first = make_tool_request("fetch_page")
        second = make_tool_request("strip_tags", in_field="html", out_field="result")
        provider = RecordingProvider(
            [
                seq("manager", 0, manager_reply(requests=[first, second])),
                seq("tool_developer", 0, developer_reply(make_tool_source("fetch_page"))),
                seq("tool_developer", 1, developer_reply(make_tool_source("strip_tags", in_field="html"))),
                seq("executor", 0, REPORT),
                seq("integrator", 0, integrator_reply("ok")),
            ]
        )
        result = run(provider, sandbox, prompt_suite, empty_snapshot())
        assert result.sample.c == 2
        assert sorted(a.name for a in result.local_tools) == ["fetch_page", "strip_tags"]
        synthesize_events = [
            e[1] for e in result.events if e[0] == "phase" and e[1]["to"] == "synthesize"
        ]
        assert synthesize_events[0]["detail"]["requests"] == ["fetch_page", "strip_tags"]

    def test_zero_start_empty_listing(self, sandbox, prompt_suite):
        request = make_tool_request("fetch_note")
        provider = RecordingProvider(
            [
                seq("manager", 0, manager_reply(requests=[request])),
                seq("tool_developer", 0, developer_reply(make_tool_source("fetch_note"))),
                seq("executor", 0, REPORT),
                seq("integrator", 0, integrator_reply("ok")),
            ]
        )
        result = run(provider, sandbox, prompt_suite, empty_snapshot())
        manager_prompt = provider.prompts_for("manager")[0]
        assert "The following tools are currently available" in manager_prompt
        assert result.status == "done"


class TestDeveloperRetry:
    def test_invalid_then_valid(self, sandbox, prompt_suite):
        request = make_tool_request("fetch_note")
        provider = RecordingProvider(
            [
                seq("manager", 0, manager_reply(requests=[request])),
                seq("tool_developer", 0, "no code block here"),
                seq("tool_developer", 1, developer_reply(make_tool_source("fetch_note"))),
                seq("executor", 0, REPORT),
                seq("integrator", 0, integrator_reply("ok")),
            ]
        )
        result = run(provider, sandbox, prompt_suite, empty_snapshot())
        assert result.status == "done"
        assert result.sample.c == 1
        developer_exchanges = [e for e in provider.exchanges if e.agent_role == "tool_developer"]
        assert len(developer_exchanges) == 2
        retry_messages = [m.text for m in developer_exchanges[1].messages]
        assert any("no code block" in text for text in retry_messages)

    def test_unresolvable_dependency_counts_as_synthesis_failure(self, sandbox, prompt_suite):
        request = make_tool_request("fetch_note")
        needy = make_tool_source("fetch_note").replace(
            '"dependencies": []', '"dependencies": ["definitely-not-a-real-pkg-xyz"]'
        )
        provider = RecordingProvider(
            [
                seq("manager", 0, manager_reply(requests=[request])),
                seq("tool_developer", 0, developer_reply(needy)),
                seq("tool_developer", 1, developer_reply(needy)),
                seq("tool_developer", 2, developer_reply(needy)),
                seq("manager", 1, manager_reply()),
                seq("executor", 0, REPORT),
                seq("integrator", 0, integrator_reply("ok")),
            ]
        )
        result = run(provider, sandbox, prompt_suite, empty_snapshot())
        assert result.status == "done"
        assert result.sample.c == 0
        failed_validations = [
            e[1] for e in result.events if e[0] == "validation" and not e[1]["passed"]
        ]
        assert all(v["category"] == "provisioning" for v in failed_validations)
        retry_texts = [
            m.text for e in provider.exchanges if e.agent_role == "tool_developer" for m in e.messages
        ]
        assert any("definitely-not-a-real-pkg-xyz" in t for t in retry_texts)

    def test_budget_exhaustion_triggers_replan(self, sandbox, prompt_suite):
        request = make_tool_request("fetch_note")
        provider = RecordingProvider(
            [
                seq("manager", 0, manager_reply(requests=[request])),
                seq("tool_developer", 0, "junk"),
                seq("tool_developer", 1, "junk"),
                seq("tool_developer", 2, "junk"),
                # Re-planned manager gives up on new tools; executor answers tool-free.
                seq("manager", 1, manager_reply()),
                seq("executor", 0, REPORT),
                seq("integrator", 0, integrator_reply("done anyway")),
            ]
        )
        result = run(provider, sandbox, prompt_suite, empty_snapshot())
        assert result.status == "done"
        assert result.sample.c == 0
        second_manager_prompt = provider.prompts_for("manager")[1]
        assert "Failure Report For Previous Execution" in second_manager_prompt
        assert "fetch_note" in second_manager_prompt


class TestManagerResolution:
    def test_unknown_name_replans_with_report(self, sandbox, prompt_suite):
        snapshot = commit_union(empty_snapshot(), [echo_record("web_search")])
        provider = RecordingProvider(
            [
                seq("manager", 0, manager_reply(required=["websearch"])),
                seq("manager", 1, manager_reply(required=["web_search"])),
                seq("executor", 0, executor_action("web_search", {"text": "q"})),
                seq("executor", 1, REPORT),
                seq("integrator", 0, integrator_reply("found")),
            ]
        )
        result = run(provider, sandbox, prompt_suite, snapshot)
        assert result.status == "done"
        second_prompt = provider.prompts_for("manager")[1]
        assert "websearch" in second_prompt
        assert "Failure Report For Previous Execution" in second_prompt

    def test_parse_failures_beyond_budget_fail_terminally(self, sandbox, prompt_suite):
        provider = RecordingProvider(
            [
                seq("manager", 0, "gibberish"),
                seq("manager", 1, "gibberish"),
                seq("manager", 2, "gibberish"),
            ]
        )
        result = run(provider, sandbox, prompt_suite, empty_snapshot())
        assert result.status == "failed"
        assert result.answer.final_answer.startswith(INCOMPLETION_PREFIX)
        assert len(provider.prompts_for("manager")) == 3  # 1 + 2 re-plans


class TestExecutorLoop:
    def test_unbound_tool_rejected_locally(self, sandbox, prompt_suite):
        snapshot = commit_union(empty_snapshot(), [echo_record()])
        provider = RecordingProvider(
            [
                seq("manager", 0, manager_reply(required=["echo_text"])),
                seq("executor", 0, executor_action("ghost_tool", {"text": "x"})),
                seq("executor", 1, REPORT),
                seq("integrator", 0, integrator_reply("3")),
            ]
        )
        result = run(provider, sandbox, prompt_suite, snapshot)
        assert result.status == "done"
        assert result.sample.u == 0  # never executed
        executor_texts = [
            m.text for e in provider.exchanges if e.agent_role == "executor" for m in e.messages
        ]
        assert any("is not bound" in t for t in executor_texts)
        assert not any(e[0] == "invocation" for e in result.events)

    def test_tool_error_becomes_observation(self, sandbox, prompt_suite):
        snapshot = commit_union(empty_snapshot(), [echo_record()])
        provider = RecordingProvider(
            [
                seq("manager", 0, manager_reply(required=["echo_text"])),
                seq("executor", 0, executor_action("echo_text", {"text": "FAIL"})),
                seq("executor", 1, REPORT),
                seq("integrator", 0, integrator_reply("errored")),
            ]
        )
        result = run(provider, sandbox, prompt_suite, snapshot)
        assert result.status == "done"
        assert (result.sample.u, result.sample.successes) == (1, 0)
        executor_texts = [
            m.text for e in provider.exchanges if e.agent_role == "executor" for m in e.messages
        ]
        assert any("tool_error" in t and "forced failure" in t for t in executor_texts)

    def test_step_budget_exhaustion(self, sandbox, prompt_suite):
        snapshot = commit_union(empty_snapshot(), [echo_record()])
        config = WorkflowConfig(max_executor_steps=2)
        provider = RecordingProvider(
            [
                seq("manager", 0, manager_reply(required=["echo_text"])),
                seq("executor", 0, executor_action("echo_text", {"text": "a"})),
                seq("executor", 1, executor_action("echo_text", {"text": "b"})),
            ]
        )
        result = run(provider, sandbox, prompt_suite, snapshot, config=config)
        assert result.status == "failed"
        assert "step budget" in result.answer.final_answer

    def test_bad_payload_rejected_host_side_without_counting(self, sandbox, prompt_suite):
        snapshot = commit_union(empty_snapshot(), [echo_record()])
        provider = RecordingProvider(
            [
                seq("manager", 0, manager_reply(required=["echo_text"])),
                seq("executor", 0, executor_action("echo_text", {"wrong_field": "x"})),
                seq("executor", 1, REPORT),
                seq("integrator", 0, integrator_reply("3")),
            ]
        )
        result = run(provider, sandbox, prompt_suite, snapshot)
        assert result.sample.u == 0
        executor_texts = [
            m.text for e in provider.exchanges if e.agent_role == "executor" for m in e.messages
        ]
        assert any("rejected" in t for t in executor_texts)


class TestSuspension:
    def test_suspend_resume_cycle(self, sandbox, prompt_suite):
        request = make_tool_request("parse_table")
        provider = RecordingProvider(
            [
                seq("manager", 0, manager_reply()),
                seq("executor", 0, executor_action("request_tools", {"requests": [request]})),
                seq("manager", 1, manager_reply(requests=[request])),
                seq("tool_developer", 0, developer_reply(make_tool_source("parse_table"))),
                seq("executor", 1, executor_action("parse_table", {"text": "row"})),
                seq("executor", 2, REPORT),
                seq("integrator", 0, integrator_reply("parsed")),
            ]
        )
        result = run(provider, sandbox, prompt_suite, empty_snapshot())
        assert result.status == "done"
        assert result.answer.final_answer == "parsed"
        assert (result.sample.c, result.sample.u) == (1, 1)
        # The resumed manager prompt carries the executor's request.
        second_manager = provider.prompts_for("manager")[1]
        assert "Tool Request from Executor" in second_manager
        assert "parse_table" in second_manager
        # The resumed executor prompt carries a context summary block.
        resumed_executor = provider.prompts_for("executor")[1]
        assert "Context Summary" in resumed_executor
        phases = [e[1]["to"] for e in result.events if e[0] == "phase"]
        assert "suspended" in phases

    def test_suspension_budget_bounded(self, sandbox, prompt_suite):
        config = WorkflowConfig(max_suspensions=1)
        request = make_tool_request("parse_table")
        provider = RecordingProvider(
            [
                seq("manager", 0, manager_reply()),
                seq("executor", 0, executor_action("request_tools", {"requests": [request]})),
                seq("manager", 1, manager_reply()),
                seq("executor", 1, executor_action("request_tools", {"requests": [request]})),
                seq("executor", 2, REPORT),
                seq("integrator", 0, integrator_reply("gave up nicely")),
            ]
        )
        result = run(provider, sandbox, prompt_suite, empty_snapshot(), config=config)
        assert result.status == "done"
        phases = [e[1]["to"] for e in result.events if e[0] == "phase"]
        assert phases.count("suspended") == 1


class TestIntegrator:
    def test_parse_failure_retries_then_fails(self, sandbox, prompt_suite):
        provider = RecordingProvider(
            [
                seq("manager", 0, manager_reply()),
                seq("executor", 0, REPORT),
                seq("integrator", 0, "not json"),
                seq("integrator", 1, "still not json"),
            ]
        )
        result = run(provider, sandbox, prompt_suite, empty_snapshot())
        assert result.status == "failed"
        assert result.answer.final_answer.startswith(INCOMPLETION_PREFIX)
        assert len(provider.prompts_for("integrator")) == 2

    def test_answer_fields_populated(self, sandbox, prompt_suite):
        provider = RecordingProvider(
            [
                seq("manager", 0, manager_reply()),
                seq("executor", 0, REPORT),
                seq("integrator", 0, integrator_reply("42", "derived from the key findings")),
            ]
        )
        result = run(provider, sandbox, prompt_suite, empty_snapshot())
        assert result.answer.final_answer == "42"
        assert "key findings" in result.answer.reasoning_summary


class TestProviderFailure:
    def test_transport_error_fails_job_not_run(self, sandbox, prompt_suite):
        from evorun.gateway import ScriptExhaustedError, TransportError

        class FlakyProvider:
            def complete(self, exchange):
                raise TransportError("endpoint unreachable")

        workflow = QueryWorkflow(
            provider=FlakyProvider(), prompts=prompt_suite, sandbox=sandbox
        )
        result = workflow.run_query("q1", "anything", empty_snapshot())
        assert result.status == "failed"
        assert "provider failure" in result.answer.final_answer

    def test_script_exhaustion_still_propagates(self, sandbox, prompt_suite):
        from evorun.gateway import ScriptExhaustedError

        provider = RecordingProvider([])
        workflow = QueryWorkflow(provider=provider, prompts=prompt_suite, sandbox=sandbox)
        with pytest.raises(ScriptExhaustedError):
            workflow.run_query("q1", "anything", empty_snapshot())


class TestPhaseMachine:
    def scenario_events(self, sandbox, prompt_suite):
        provider = RecordingProvider(
            [
                seq("manager", 0, manager_reply()),
                seq("executor", 0, REPORT),
                seq("integrator", 0, integrator_reply("ok")),
            ]
        )
        return run(provider, sandbox, prompt_suite, empty_snapshot()).events

    def test_transcripts_contain_only_legal_transitions(self, sandbox, prompt_suite):
        events = self.scenario_events(sandbox, prompt_suite)
        phase_events = [payload for kind, payload in events if kind == "phase"]
        assert phase_events, "expected phase events"
        for payload in phase_events:
            assert payload["to"] in LEGAL_TRANSITIONS[payload["from"]]

    def test_recorder_rejects_illegal_transition(self):
        recorder = JobRecorder("q1")
        recorder.transition("manager_select")
        with pytest.raises(IllegalTransitionError):
            recorder.transition("integrate")

    def test_accounting_exactness(self, sandbox, prompt_suite):
        snapshot = commit_union(empty_snapshot(), [echo_record()])
        request = make_tool_request("fetch_note")
        provider = RecordingProvider(
            [
                seq("manager", 0, manager_reply(required=["echo_text"], requests=[request])),
                seq("tool_developer", 0, developer_reply(make_tool_source("fetch_note"))),
                seq("executor", 0, executor_action("echo_text", {"text": "x"})),
                seq("executor", 1, executor_action("fetch_note", {"text": "y"})),
                seq("executor", 2, REPORT),
                seq("integrator", 0, integrator_reply("ok")),
            ]
        )
        result = run(provider, sandbox, prompt_suite, snapshot)
        invocation_events = [e for e in result.events if e[0] == "invocation"]
        develop_passes = [
            e for e in result.events
            if e[0] == "validation" and e[1]["context"] == "develop" and e[1]["passed"]
        ]
        assert result.sample.u == len(invocation_events) == 2
        assert result.sample.c == len(develop_passes) == 1
        # Tool-binding closure: every invocation names a bound tool.
        bound_names = {"echo_text", "fetch_note"}
        assert all(e[1]["tool"] in bound_names for e in invocation_events)
