"""Builders for scripted provider replies and contract-conforming tool sources."""

from __future__ import annotations

import json

FIXTURE_REQUEST_SCHEMAS = {
    "echo_text": (
        {"type": "object", "properties": {"text": {"type": "string"}}, "required": ["text"]},
        {"type": "object", "properties": {"result": {"type": "string"}}, "required": ["result"]},
    ),
    "sleep_seconds": (
        {"type": "object", "properties": {"seconds": {"type": "number"}}, "required": ["seconds"]},
        {"type": "object", "properties": {"slept": {"type": "number"}}, "required": ["slept"]},
    ),
    "raise_error": (
        {"type": "object", "properties": {"message": {"type": "string"}}, "required": ["message"]},
        {"type": "object", "properties": {"result": {"type": "string"}}, "required": ["result"]},
    ),
    "bad_output": (
        {"type": "object", "properties": {"text": {"type": "string"}}, "required": ["text"]},
        {"type": "object", "properties": {"result": {"type": "string"}}, "required": ["result"]},
    ),
    "escape_workspace": (
        {
            "type": "object",
            "properties": {"path": {"type": "string"}, "content": {"type": "string"}},
            "required": ["path", "content"],
        },
        {"type": "object", "properties": {"written": {"type": "string"}}, "required": ["written"]},
    ),
    "uses_dependency": (
        {"type": "object", "properties": {"probe": {"type": "string"}}, "required": ["probe"]},
        {
            "type": "object",
            "properties": {"probe": {"type": "string"}, "version": {"type": "string"}},
            "required": ["probe", "version"],
        },
    ),
}


def make_tool_source(name: str, description: str = "", in_field: str = "text", out_field: str = "result") -> str:
    """A minimal contract-conforming echo tool; input 'FAIL' forces a tool error."""
    description = description or f"Map the {in_field} input onto the {out_field} output unchanged."
    return f'''__TOOL_META__ = {{
    "name": "{name}",
    "description": "{description}",
    "dependencies": [],
}}

from pydantic import BaseModel, Field


class InputModel(BaseModel):
    {in_field}: str = Field(..., description="Input value")


class OutputModel(BaseModel):
    {out_field}: str = Field(..., description="Output value")


def run(input: InputModel) -> OutputModel:
    if input.{in_field} == "FAIL":
        raise RuntimeError("forced failure")
    return OutputModel({out_field}=input.{in_field})
'''


def make_tool_request(name: str, description: str = "", in_field: str = "text", out_field: str = "result") -> dict:
    return {
        "name": name,
        "description": description or f"Map the {in_field} input onto the {out_field} output unchanged.",
        "input_schema": {
            "type": "object",
            "properties": {in_field: {"type": "string", "description": "Input value"}},
            "required": [in_field],
        },
        "output_schema": {
            "type": "object",
            "properties": {out_field: {"type": "string", "description": "Output value"}},
            "required": [out_field],
        },
    }


def manager_reply(required=(), guidance: str = "", requests=()) -> str:
    body = json.dumps(
        {
            "required_tool_names": list(required),
            "tool_usage_guidance": guidance,
            "tool_requests": list(requests),
        },
        indent=2,
    )
    return f"```json\n{body}\n```"


def developer_reply(source: str) -> str:
    return f"```python\n{source}\n```"


def executor_action(tool: str, payload: dict) -> str:
    return "Calling a tool.\n```json\n" + json.dumps({"tool": tool, "input": payload}) + "\n```"


def executor_report(analysis: str, findings: str, conclusion: str) -> str:
    return (
        "## Reasoning & Plan\n"
        f"* **Analysis:** {analysis}\n"
        "* **Plan:** single step.\n\n"
        "## Key Findings & Evidence\n"
        f"* {findings}\n\n"
        "## Final Conclusion\n"
        f"{conclusion}\n"
    )


def integrator_reply(answer: str, summary: str = "extracted from the report") -> str:
    return "```json\n" + json.dumps({"final_answer": answer, "reasoning_summary": summary}) + "\n```"


def aggregator_reply(clusters: list[tuple[str, str, list[str]]]) -> str:
    payload = {
        "consolidated_tool_clusters": [
            {"cluster_id": cid, "suggested_master_tool_name": master, "tool_names": names}
            for cid, master, names in clusters
        ]
    }
    return "```json\n" + json.dumps(payload, indent=2) + "\n```"


def merger_reply(source: str) -> str:
    return f"```python\n{source}\n```"


def seq(role: str, index: int, text: str) -> dict:
    return {"role": role, "index": index, "response_text": text}


def digest_entry(digest: str, text: str) -> dict:
    return {"prompt_sha256": digest, "response_text": text}
