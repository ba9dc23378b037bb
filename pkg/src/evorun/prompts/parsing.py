"""Structured-reply parsers for each agent role.

Parsers never invent data: every extracted field is a verbatim substring of
the reply (or a JSON value parsed from it). Malformed replies raise
`ParseError` carrying the offending text so it can be fed back to the model
as failure context.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field

SNAKE_CASE = re.compile(r"^[a-z][a-z0-9]*(_[a-z0-9]+)*$")

_FENCE = re.compile(r"```([a-zA-Z0-9_+-]*)[ \t]*\r?\n(.*?)\r?\n?```", re.DOTALL)


class ParseError(Exception):
    """A reply did not match the role's mandated output format."""

    def __init__(self, message: str, reply: str = ""):
        super().__init__(message)
        self.reply = reply


@dataclass(frozen=True)
class ToolRequest:
    name: str
    description: str
    input_schema: dict
    output_schema: dict

    def __post_init__(self) -> None:
        if not SNAKE_CASE.match(self.name):
            raise ValueError(f"tool request name is not snake_case: {self.name!r}")
        for label, schema in (("input_schema", self.input_schema), ("output_schema", self.output_schema)):
            if not isinstance(schema, dict) or not isinstance(schema.get("properties"), dict):
                raise ValueError(f"{label} must be an object with a properties map")

    @property
    def required_params(self) -> list[str]:
        return list(self.input_schema.get("required", []))

    def to_json(self) -> str:
        return json.dumps(
            {
                "name": self.name,
                "description": self.description,
                "input_schema": self.input_schema,
                "output_schema": self.output_schema,
            },
            indent=2,
            ensure_ascii=False,
        )


@dataclass(frozen=True)
class ManagerDecision:
    required_tool_names: list[str]
    tool_usage_guidance: str = ""
    tool_requests: list[ToolRequest] = field(default_factory=list)


@dataclass(frozen=True)
class ExecutorReport:
    reasoning_plan: str
    key_findings: str
    final_conclusion: str

    def to_markdown(self) -> str:
        return (
            f"## Reasoning & Plan\n{self.reasoning_plan}\n\n"
            f"## Key Findings & Evidence\n{self.key_findings}\n\n"
            f"## Final Conclusion\n{self.final_conclusion}"
        )


@dataclass(frozen=True)
class FinalAnswer:
    final_answer: str
    reasoning_summary: str = ""


@dataclass(frozen=True)
class ToolCluster:
    cluster_id: str
    suggested_master_tool_name: str
    tool_names: list[str]


@dataclass(frozen=True)
class ClusterPlan:
    clusters: list[ToolCluster]

    def all_member_names(self) -> list[str]:
        return [name for cluster in self.clusters for name in cluster.tool_names]


@dataclass(frozen=True)
class ExecutorAction:
    """A tool call parsed from an executor reply's fenced JSON action block."""

    tool: str
    input: dict


def fenced_blocks(reply: str, language: str | None = None) -> list[str]:
    """Return the interiors of fenced code blocks, optionally filtered by tag."""
    blocks = []
    for match in _FENCE.finditer(reply):
        tag, body = match.group(1).lower(), match.group(2)
        if language is None or tag == language or (language == "json" and tag == ""):
            blocks.append(body)
    return blocks


def _scan_bare_object(text: str) -> str | None:
    """Extract the first balanced top-level JSON object from free text."""
    start = text.find("{")
    if start < 0:
        return None
    depth = 0
    in_string = False
    escaped = False
    for i in range(start, len(text)):
        ch = text[i]
        if in_string:
            if escaped:
                escaped = False
            elif ch == "\\":
                escaped = True
            elif ch == '"':
                in_string = False
            continue
        if ch == '"':
            in_string = True
        elif ch == "{":
            depth += 1
        elif ch == "}":
            depth -= 1
            if depth == 0:
                return text[start : i + 1]
    return None


def extract_json_object(reply: str) -> dict:
    """Parse the single fenced JSON block, or a bare JSON object, from a reply."""
    candidates = fenced_blocks(reply, language="json")
    if len(candidates) > 1:
        raise ParseError("multiple JSON blocks in reply", reply)
    if candidates:
        raw = candidates[0]
    else:
        raw = _scan_bare_object(reply)
        if raw is None:
            raise ParseError("no JSON object found in reply", reply)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise ParseError(f"malformed JSON in reply: {exc}", reply) from exc
    if not isinstance(value, dict):
        raise ParseError("reply JSON is not an object", reply)
    return value


def parse_manager(reply: str) -> ManagerDecision:
    """Parse the Manager's tool-selection JSON."""
    obj = extract_json_object(reply)
    names = obj.get("required_tool_names")
    if not isinstance(names, list) or not all(isinstance(n, str) for n in names):
        raise ParseError("required_tool_names missing or not a list of strings", reply)
    raw_requests = obj.get("tool_requests", [])
    if not isinstance(raw_requests, list):
        raise ParseError("tool_requests must be a list", reply)
    requests = []
    for raw in raw_requests:
        if not isinstance(raw, dict):
            raise ParseError("tool_requests entries must be objects", reply)
        try:
            requests.append(
                ToolRequest(
                    name=str(raw.get("name", "")),
                    description=str(raw.get("description", "")),
                    input_schema=raw.get("input_schema") or {},
                    output_schema=raw.get("output_schema") or {},
                )
            )
        except ValueError as exc:
            raise ParseError(f"invalid tool request: {exc}", reply) from exc
    guidance = obj.get("tool_usage_guidance", "")
    if not isinstance(guidance, str):
        raise ParseError("tool_usage_guidance must be a string", reply)
    return ManagerDecision(
        required_tool_names=list(names),
        tool_usage_guidance=guidance,
        tool_requests=requests,
    )


def parse_single_code_block(reply: str) -> str:
    """Return the interior of the one and only fenced code block in a reply."""
    blocks = fenced_blocks(reply)
    if not blocks:
        raise ParseError("no code block in reply", reply)
    if len(blocks) > 1:
        raise ParseError(f"multiple code blocks in reply ({len(blocks)})", reply)
    return blocks[0]


_REPORT_SECTIONS = {
    "Reasoning & Plan": "reasoning_plan",
    "Key Findings & Evidence": "key_findings",
    "Final Conclusion": "final_conclusion",
}

_HEADING = re.compile(
    r"^##\s*(Reasoning & Plan|Key Findings & Evidence|Final Conclusion)\s*$",
    re.MULTILINE,
)


def parse_executor_report(reply: str) -> ExecutorReport:
    """Split an executor reply on its three mandated section headings.

    Sections are matched by heading, not position, so reordered replies still
    parse. Prose outside the sections (or a wrapping ```markdown fence) is
    tolerated.
    """
    body = reply
    markdown_blocks = fenced_blocks(reply, language="markdown")
    if len(markdown_blocks) == 1:
        body = markdown_blocks[0]
    matches = list(_HEADING.finditer(body))
    sections: dict[str, str] = {}
    for i, match in enumerate(matches):
        title = match.group(1)
        start = match.end()
        end = matches[i + 1].start() if i + 1 < len(matches) else len(body)
        sections[_REPORT_SECTIONS[title]] = body[start:end].strip()
    missing = [t for t, key in _REPORT_SECTIONS.items() if key not in sections]
    if missing:
        raise ParseError(f"missing report sections: {', '.join(missing)}", reply)
    return ExecutorReport(**sections)


def parse_final_answer(reply: str) -> FinalAnswer:
    """Parse the Integrator's answer JSON; final_answer must be non-empty."""
    obj = extract_json_object(reply)
    answer = obj.get("final_answer")
    if not isinstance(answer, str) or not answer.strip():
        raise ParseError("final_answer missing or empty", reply)
    summary = obj.get("reasoning_summary", "")
    if not isinstance(summary, str):
        raise ParseError("reasoning_summary must be a string", reply)
    return FinalAnswer(final_answer=answer, reasoning_summary=summary)


def parse_cluster_plan(reply: str) -> ClusterPlan:
    """Parse the Aggregator's consolidated_tool_clusters JSON."""
    obj = extract_json_object(reply)
    raw_clusters = obj.get("consolidated_tool_clusters")
    if not isinstance(raw_clusters, list):
        raise ParseError("consolidated_tool_clusters missing or not a list", reply)
    clusters = []
    for raw in raw_clusters:
        if not isinstance(raw, dict):
            raise ParseError("cluster entries must be objects", reply)
        names = raw.get("tool_names")
        if not isinstance(names, list) or not names or not all(isinstance(n, str) for n in names):
            raise ParseError("cluster tool_names must be a non-empty list of strings", reply)
        clusters.append(
            ToolCluster(
                cluster_id=str(raw.get("cluster_id", "")),
                suggested_master_tool_name=str(raw.get("suggested_master_tool_name", "")),
                tool_names=list(names),
            )
        )
    return ClusterPlan(clusters=clusters)


def parse_executor_action(reply: str) -> ExecutorAction | None:
    """Detect a tool-call action block in an executor reply.

    Returns None when the reply carries no action block (i.e. it should be
    parsed as a final report instead). A reply with several action blocks is
    malformed.
    """
    actions = []
    for body in fenced_blocks(reply, language="json"):
        try:
            value = json.loads(body)
        except json.JSONDecodeError:
            continue
        if isinstance(value, dict) and "tool" in value:
            actions.append(value)
    if not actions:
        return None
    if len(actions) > 1:
        raise ParseError("multiple tool action blocks in reply", reply)
    action = actions[0]
    tool = action.get("tool")
    payload = action.get("input", {})
    if not isinstance(tool, str) or not isinstance(payload, dict):
        raise ParseError("action block must carry a tool name and an input object", reply)
    return ExecutorAction(tool=tool, input=payload)
