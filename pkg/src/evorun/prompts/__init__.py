"""The fixed prompt suite: six role templates plus the executor tool-call protocol.

Templates are shipped as Jinja text assets, one file per role, pinned by a
checksum manifest. Rendering is deterministic; optional blocks appear iff
their slot is supplied. A load-time check verifies that each template's
undeclared variables exactly match its declared required/optional slots.
"""

from __future__ import annotations

import hashlib
import json
from importlib import resources

import jinja2
from jinja2 import meta

from .parsing import (
    ClusterPlan,
    ExecutorAction,
    ExecutorReport,
    FinalAnswer,
    ManagerDecision,
    ParseError,
    ToolCluster,
    ToolRequest,
    fenced_blocks,
    parse_cluster_plan,
    parse_executor_action,
    parse_executor_report,
    parse_final_answer,
    parse_manager,
    parse_single_code_block,
)

__all__ = [
    "ClusterPlan",
    "ExecutorAction",
    "ExecutorReport",
    "FinalAnswer",
    "ManagerDecision",
    "ParseError",
    "PromptSuite",
    "RenderError",
    "ToolCluster",
    "ToolRequest",
    "fenced_blocks",
    "parse_cluster_plan",
    "parse_executor_action",
    "parse_executor_report",
    "parse_final_answer",
    "parse_manager",
    "parse_single_code_block",
    "tool_listing_slot",
]

# Declared slots per template: (required, optional). Optional slots render
# their block only when a truthy value is supplied.
TEMPLATE_SLOTS: dict[str, tuple[frozenset[str], frozenset[str]]] = {
    "manager": (
        frozenset({"user_query", "tools"}),
        frozenset({"failure_report", "additional_tool_requests"}),
    ),
    "tool_developer": (frozenset({"tool_request_json"}), frozenset()),
    "executor": (
        frozenset({"user_query"}),
        frozenset({"tool_usage_guidance", "context_summary"}),
    ),
    "integrator": (frozenset({"user_query", "executor_report"}), frozenset()),
    "aggregator": (frozenset({"tools"}), frozenset()),
    "merger": (frozenset({"tools", "suggest_name"}), frozenset()),
    "executor_protocol": (frozenset({"tools"}), frozenset()),
}

ROLE_TEMPLATES = ("manager", "tool_developer", "executor", "integrator", "aggregator", "merger")


class RenderError(Exception):
    """A template was rendered without one of its required slots."""


class PromptSuiteError(Exception):
    """Template assets failed load-time verification."""


def _template_dir():
    return resources.files(__package__) / "templates"


def _read_template(name: str) -> str:
    return (_template_dir() / f"{name}.md.j2").read_text(encoding="utf-8")


def compute_manifest() -> dict[str, str]:
    """Checksums of every template asset, keyed by template name."""
    return {
        name: hashlib.sha256(_read_template(name).encode("utf-8")).hexdigest()
        for name in sorted(TEMPLATE_SLOTS)
    }


class PromptSuite:
    """Loads, verifies, and renders the fixed templates."""

    def __init__(self, verify_checksums: bool = True):
        self._env = jinja2.Environment(
            undefined=jinja2.StrictUndefined,
            trim_blocks=True,
            lstrip_blocks=True,
            keep_trailing_newline=False,
            autoescape=False,
        )
        self._sources: dict[str, str] = {}
        self._templates: dict[str, jinja2.Template] = {}
        for name, (required, optional) in TEMPLATE_SLOTS.items():
            source = _read_template(name)
            found = meta.find_undeclared_variables(self._env.parse(source))
            declared = required | optional
            if found != declared:
                raise PromptSuiteError(
                    f"template {name}: slots in body {sorted(found)} != declared {sorted(declared)}"
                )
            self._sources[name] = source
            self._templates[name] = self._env.from_string(source)
        if verify_checksums:
            manifest_path = _template_dir() / "manifest.json"
            pinned = json.loads(manifest_path.read_text(encoding="utf-8"))
            actual = compute_manifest()
            if pinned != actual:
                drifted = sorted(k for k in set(pinned) | set(actual) if pinned.get(k) != actual.get(k))
                raise PromptSuiteError(f"template checksum mismatch: {drifted}")

    def source(self, name: str) -> str:
        return self._sources[name]

    def render(self, name: str, slots: dict) -> str:
        if name not in self._templates:
            raise RenderError(f"unknown template: {name!r}")
        required, optional = TEMPLATE_SLOTS[name]
        missing = sorted(k for k in required if k not in slots)
        if missing:
            raise RenderError(f"missing required slot: {missing[0]} (template {name})")
        values = {key: None for key in optional}
        values.update(slots)
        try:
            return self._templates[name].render(**values)
        except jinja2.UndefinedError as exc:  # pragma: no cover - guarded by slot check
            raise RenderError(f"template {name}: {exc}") from exc


def tool_listing_slot(entries) -> list[dict]:
    """Convert (name, description, input_schema) triples into template slot items.

    Schemas are serialized to compact JSON so rendered prompts are stable.
    """
    slot = []
    for name, description, input_schema in entries:
        slot.append(
            {
                "name": name,
                "description": description,
                "input_schema": json.dumps(input_schema, sort_keys=True, separators=(", ", ": ")),
            }
        )
    return slot
