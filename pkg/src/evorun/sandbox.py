"""Static validation and isolated execution of synthesized tool modules.

`validate_artifact` statically checks a generated module against the tool
contract (meta mapping, pydantic I/O models, run entrypoint, no in-script
dependency installation) without importing it. `Sandbox.invoke` then runs an
artifact as a one-shot subprocess: the harness script is spawned in a
provisioned environment inside a fresh scratch workspace, receives
`{"input": payload}` on stdin, and answers with a single JSON document on
stdout. Results map onto the ok / tool_error / protocol_error / timeout
taxonomy; oversized outputs are truncated before they reach the executor's
context.
"""

from __future__ import annotations

import ast
import hashlib
import importlib.util
import json
import os
import re
import shutil
import subprocess
import sys
import threading
import time
import uuid
import venv
from dataclasses import dataclass, field
from pathlib import Path

from .prompts.parsing import ToolRequest
from .schemas import check_payload, is_well_formed_schema

STATUS_OK = "ok"
STATUS_TOOL_ERROR = "tool_error"
STATUS_PROTOCOL_ERROR = "protocol_error"
STATUS_TIMEOUT = "timeout"

_DEPENDENCY_NAME = re.compile(r"^[A-Za-z0-9]([A-Za-z0-9._-]*[A-Za-z0-9])?$")

_SELF_INSTALL_PATTERNS = (
    re.compile(r"pip\s+install"),
    re.compile(r"['\"]pip['\"]\s*,\s*['\"]install['\"]"),
    re.compile(r"\bpip\.main\b"),
    re.compile(r"\bensurepip\b"),
    re.compile(r"\beasy_install\b"),
)


class SandboxError(Exception):
    """Base class for sandbox failures."""


class ArtifactValidationError(SandboxError):
    """A generated module violates the tool contract; drives a developer retry."""

    def __init__(self, category: str, message: str):
        super().__init__(message)
        self.category = category


class ProvisioningError(SandboxError):
    """A declared dependency could not be resolved or installed."""


class InputSchemaError(SandboxError):
    """The invocation payload failed the host-side input schema check; no spawn."""

    def __init__(self, violations: list[str]):
        super().__init__("; ".join(violations))
        self.violations = violations


class HarnessNotFoundError(SandboxError):
    """No harness runner script could be located."""


@dataclass(frozen=True)
class ToolArtifact:
    """A validated tool module ready for registration and execution."""

    name: str
    description: str
    dependencies: tuple[str, ...]
    source: str
    digest: str
    input_schema: dict
    output_schema: dict

    @property
    def meta(self) -> dict:
        return {
            "name": self.name,
            "description": self.description,
            "dependencies": list(self.dependencies),
        }


@dataclass(frozen=True)
class InvocationResult:
    status: str
    payload: dict
    wall_time: float
    output_text: str

    @property
    def ok(self) -> bool:
        return self.status == STATUS_OK


# ---------------------------------------------------------------------------
# Static artifact validation
# ---------------------------------------------------------------------------


@dataclass
class _ModelInfo:
    fields: dict[str, str] = field(default_factory=dict)  # name -> json type ("" = any)
    optional: set[str] = field(default_factory=set)


_ANNOTATION_TYPES = {
    "str": "string",
    "int": "integer",
    "float": "number",
    "bool": "boolean",
    "list": "array",
    "List": "array",
    "dict": "object",
    "Dict": "object",
    "Any": "",
}


def _annotation_json_type(node: ast.expr) -> str:
    text = ast.unparse(node).strip()
    if text.endswith("| None"):
        text = text[: -len("| None")].strip()
    match = re.match(r"(?:typing\.)?Optional\[(.+)\]$", text)
    if match:
        text = match.group(1).strip()
    base = text.split("[", 1)[0].split(".")[-1]
    return _ANNOTATION_TYPES.get(base, "")


def _field_has_default(node: ast.AnnAssign) -> bool:
    if node.value is None:
        return False
    value = node.value
    if isinstance(value, ast.Call):
        callee = ast.unparse(value.func).split(".")[-1]
        if callee == "Field":
            if value.args and isinstance(value.args[0], ast.Constant) and value.args[0].value is Ellipsis:
                return False
            if not value.args and not any(k.arg in ("default", "default_factory") for k in value.keywords):
                return False
            return True
    if isinstance(value, ast.Constant) and value.value is Ellipsis:
        return False
    return True


def _extract_model(tree: ast.Module, class_name: str) -> _ModelInfo | None:
    for node in tree.body:
        if isinstance(node, ast.ClassDef) and node.name == class_name:
            info = _ModelInfo()
            for item in node.body:
                if isinstance(item, ast.AnnAssign) and isinstance(item.target, ast.Name):
                    name = item.target.id
                    info.fields[name] = _annotation_json_type(item.annotation)
                    if _field_has_default(item):
                        info.optional.add(name)
            return info
    return None


@dataclass
class _SourceInspection:
    meta: dict
    input_model: _ModelInfo
    output_model: _ModelInfo


def _inspect_source(source: str) -> _SourceInspection:
    try:
        tree = ast.parse(source)
    except SyntaxError as exc:
        raise ArtifactValidationError("syntax error", f"tool source does not parse: {exc}") from exc

    meta = None
    for node in tree.body:
        if isinstance(node, ast.Assign):
            targets = [t.id for t in node.targets if isinstance(t, ast.Name)]
            if "__TOOL_META__" in targets:
                try:
                    meta = ast.literal_eval(node.value)
                except ValueError as exc:
                    raise ArtifactValidationError(
                        "missing meta", f"__TOOL_META__ is not a literal mapping: {exc}"
                    ) from exc
    if not isinstance(meta, dict):
        raise ArtifactValidationError("missing meta", "no __TOOL_META__ mapping declared")
    for key in ("name", "description", "dependencies"):
        if key not in meta:
            raise ArtifactValidationError("missing meta", f"__TOOL_META__ lacks {key!r}")
    if not isinstance(meta["dependencies"], list):
        raise ArtifactValidationError("missing meta", "__TOOL_META__ dependencies must be a list")
    for dep in meta["dependencies"]:
        if not isinstance(dep, str) or not _DEPENDENCY_NAME.match(dep):
            raise ArtifactValidationError("invalid dependency", f"bad dependency name: {dep!r}")

    input_model = _extract_model(tree, "InputModel")
    if input_model is None:
        raise ArtifactValidationError("missing input model", "no InputModel class declared")
    output_model = _extract_model(tree, "OutputModel")
    if output_model is None:
        raise ArtifactValidationError("missing output model", "no OutputModel class declared")

    has_run = any(
        isinstance(node, (ast.FunctionDef, ast.AsyncFunctionDef)) and node.name == "run"
        for node in tree.body
    )
    if not has_run:
        raise ArtifactValidationError("missing entrypoint", "no run entrypoint declared")

    for pattern in _SELF_INSTALL_PATTERNS:
        if pattern.search(source):
            raise ArtifactValidationError(
                "self-install forbidden",
                f"in-script dependency installation detected ({pattern.pattern})",
            )

    return _SourceInspection(meta=meta, input_model=input_model, output_model=output_model)


def _schema_from_model(info: _ModelInfo) -> dict:
    properties = {}
    for name, json_type in info.fields.items():
        properties[name] = {"type": json_type} if json_type else {}
    required = [name for name in info.fields if name not in info.optional]
    return {"type": "object", "properties": properties, "required": required}


def _cross_check_fields(label: str, declared: _ModelInfo, schema: dict) -> None:
    expected = set(schema.get("properties", {}))
    actual = set(declared.fields)
    if expected != actual:
        missing = sorted(expected - actual)
        extra = sorted(actual - expected)
        raise ArtifactValidationError(
            "schema mismatch",
            f"{label} fields {sorted(actual)} do not match schema properties "
            f"{sorted(expected)} (missing {missing}, extra {extra})",
        )


def validate_artifact(source: str, request: ToolRequest) -> ToolArtifact:
    """Validate a developer-generated module against its originating request.

    The request's schemas are authoritative; the declared model fields are
    cross-checked against them by name. Raises `ArtifactValidationError` with
    a category that is fed back into the developer retry prompt.
    """
    inspection = _inspect_source(source)
    meta_name = inspection.meta["name"]
    if meta_name != request.name:
        raise ArtifactValidationError(
            "name mismatch",
            f"__TOOL_META__ name {meta_name!r} does not match requested {request.name!r}",
        )
    if not is_well_formed_schema(request.input_schema) or not is_well_formed_schema(request.output_schema):
        raise ArtifactValidationError("schema mismatch", "request schemas must carry a properties map")
    _cross_check_fields("InputModel", inspection.input_model, request.input_schema)
    _cross_check_fields("OutputModel", inspection.output_model, request.output_schema)
    return ToolArtifact(
        name=request.name,
        description=str(inspection.meta["description"]),
        dependencies=tuple(inspection.meta["dependencies"]),
        source=source,
        digest=hashlib.sha256(source.encode("utf-8")).hexdigest(),
        input_schema=request.input_schema,
        output_schema=request.output_schema,
    )


def validate_merged_source(source: str, expected_name: str) -> ToolArtifact:
    """Validate a merger-generated module; schemas derive from its declared models."""
    inspection = _inspect_source(source)
    meta_name = inspection.meta["name"]
    if meta_name != expected_name:
        raise ArtifactValidationError(
            "name mismatch",
            f"__TOOL_META__ name {meta_name!r} does not match master name {expected_name!r}",
        )
    return ToolArtifact(
        name=expected_name,
        description=str(inspection.meta["description"]),
        dependencies=tuple(inspection.meta["dependencies"]),
        source=source,
        digest=hashlib.sha256(source.encode("utf-8")).hexdigest(),
        input_schema=_schema_from_model(inspection.input_model),
        output_schema=_schema_from_model(inspection.output_model),
    )


def validate_standalone(source: str) -> ToolArtifact:
    """Validate a tool module on its own terms (CLI verdicts, warm-started sources)."""
    inspection = _inspect_source(source)
    return ToolArtifact(
        name=str(inspection.meta["name"]),
        description=str(inspection.meta["description"]),
        dependencies=tuple(inspection.meta["dependencies"]),
        source=source,
        digest=hashlib.sha256(source.encode("utf-8")).hexdigest(),
        input_schema=_schema_from_model(inspection.input_model),
        output_schema=_schema_from_model(inspection.output_model),
    )


# ---------------------------------------------------------------------------
# Environment provisioning
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EnvironmentRef:
    key: frozenset[str]
    python: str


def _default_resolver(name: str) -> bool:
    try:
        return importlib.util.find_spec(name.replace("-", "_")) is not None
    except (ImportError, ValueError):
        return False


def _checked_dependency_set(dependencies) -> frozenset[str]:
    deps = frozenset(dependencies)
    for dep in deps:
        if not _DEPENDENCY_NAME.match(dep):
            raise ProvisioningError(f"invalid dependency name: {dep!r}")
    return deps


class SharedEnvProvisioner:
    """Resolve dependencies against the current interpreter's environment.

    The desk-scale default: every dependency set maps to the running
    interpreter after each declared name resolves against the index (by
    default, importability). Identical sets share one environment ref;
    unresolvable names raise, attributed to the requesting tool.
    """

    def __init__(self, resolver=None):
        self._resolver = resolver or _default_resolver
        self._cache: dict[frozenset[str], EnvironmentRef] = {}
        self._lock = threading.Lock()

    def provision(self, dependencies) -> EnvironmentRef:
        deps = _checked_dependency_set(dependencies)
        with self._lock:
            ref = self._cache.get(deps)
            if ref is not None:
                return ref
            unresolved = sorted(d for d in deps if not self._resolver(d))
            if unresolved:
                raise ProvisioningError(f"unresolvable dependencies: {unresolved}")
            ref = EnvironmentRef(key=deps, python=sys.executable)
            self._cache[deps] = ref
            return ref


class VenvProvisioner:
    """Build real virtual environments containing exactly the declared dependencies.

    Environments are cached on disk keyed by the sorted dependency set, so
    identical sets across tools and merge generations share one venv.
    pydantic is always installed: the harness needs it to load any tool.
    Creation is single-flight per key.
    """

    def __init__(self, cache_dir: str | Path, pip_args: tuple[str, ...] = ()):
        self._cache_dir = Path(cache_dir)
        self._pip_args = tuple(pip_args)
        self._locks: dict[frozenset[str], threading.Lock] = {}
        self._guard = threading.Lock()

    def _key_dir(self, deps: frozenset[str]) -> Path:
        digest = hashlib.sha256("\n".join(sorted(deps)).encode("utf-8")).hexdigest()[:16]
        return self._cache_dir / f"env-{digest}"

    def provision(self, dependencies) -> EnvironmentRef:
        deps = _checked_dependency_set(dependencies)
        with self._guard:
            lock = self._locks.setdefault(deps, threading.Lock())
        with lock:
            env_dir = self._key_dir(deps)
            python = env_dir / "bin" / "python"
            if not python.exists():
                try:
                    venv.create(env_dir, with_pip=True, clear=True)
                    packages = sorted(deps | {"pydantic"})
                    subprocess.run(
                        [str(python), "-m", "pip", "install", "--quiet", *self._pip_args, *packages],
                        check=True,
                        capture_output=True,
                    )
                except (subprocess.CalledProcessError, OSError) as exc:
                    shutil.rmtree(env_dir, ignore_errors=True)
                    detail = ""
                    if isinstance(exc, subprocess.CalledProcessError) and exc.stderr:
                        detail = f": {exc.stderr.decode(errors='replace')[-300:]}"
                    raise ProvisioningError(f"failed to provision {sorted(deps)}{detail}") from exc
            return EnvironmentRef(key=deps, python=str(python))


# ---------------------------------------------------------------------------
# Invocation
# ---------------------------------------------------------------------------


def locate_harness() -> Path:
    """Find the harness runner script: env var, installed module, repo layout."""
    override = os.environ.get("EVORUN_HARNESS_PATH", "").strip()
    if override:
        path = Path(override)
        if path.is_file():
            return path
        raise HarnessNotFoundError(f"EVORUN_HARNESS_PATH does not exist: {override}")
    try:
        spec = importlib.util.find_spec("tool_harness.runner")
    except (ImportError, ValueError):
        spec = None
    if spec is not None and spec.origin:
        return Path(spec.origin)
    probe = Path.cwd()
    for candidate in (probe, *probe.parents):
        runner = candidate / "harness" / "src" / "tool_harness" / "runner.py"
        if runner.is_file():
            return runner
    raise HarnessNotFoundError(
        "no harness runner found; set EVORUN_HARNESS_PATH or install the tool-harness package"
    )


@dataclass(frozen=True)
class SandboxLimits:
    timeout: float = 120.0
    max_output_bytes: int = 65536


TRUNCATION_MARKER = "...[truncated]"


def _canonical_text(payload) -> str:
    return json.dumps(payload, sort_keys=True, separators=(",", ":"), ensure_ascii=True)


def _truncate(text: str, max_bytes: int) -> str:
    raw = text.encode("utf-8")
    if len(raw) <= max_bytes:
        return text
    keep = max(0, max_bytes - len(TRUNCATION_MARKER))
    return raw[:keep].decode("utf-8", errors="ignore") + TRUNCATION_MARKER


class Sandbox:
    """Runs validated artifacts as one-shot subprocesses over the wire protocol."""

    def __init__(
        self,
        harness_path: str | Path | None = None,
        provisioner=None,
        limits: SandboxLimits | None = None,
        passthrough_env: tuple[str, ...] = (),
        max_concurrent: int = 8,
        root: str | Path | None = None,
        keep_workspaces: bool = False,
    ):
        self.harness_path = Path(harness_path) if harness_path else locate_harness()
        self.provisioner = provisioner or SharedEnvProvisioner()
        self.limits = limits or SandboxLimits()
        self.passthrough_env = tuple(passthrough_env)
        self.keep_workspaces = keep_workspaces
        self._semaphore = threading.BoundedSemaphore(max(1, max_concurrent))
        if root is None:
            import tempfile

            root = tempfile.mkdtemp(prefix="evorun-sandbox-")
        self.root = Path(root)
        (self.root / "workspaces").mkdir(parents=True, exist_ok=True)

    def _child_env(self, workspace: Path) -> dict[str, str]:
        env = {
            "PATH": os.environ.get("PATH", "/usr/bin:/bin"),
            "HOME": str(workspace),
            "TMPDIR": str(workspace / "tmp"),
            "PYTHONIOENCODING": "utf-8",
        }
        for name in self.passthrough_env:
            value = os.environ.get(name)
            if value is not None:
                env[name] = value
        return env

    def invoke(self, artifact: ToolArtifact, payload: dict, limits: SandboxLimits | None = None) -> InvocationResult:
        limits = limits or self.limits
        violations = check_payload(payload, artifact.input_schema)
        if violations:
            raise InputSchemaError(violations)

        environment = self.provisioner.provision(artifact.dependencies)
        workspace = self.root / "workspaces" / f"{artifact.name}-{uuid.uuid4().hex}"
        (workspace / "tmp").mkdir(parents=True)
        tool_path = workspace / "tool.py"
        tool_path.write_text(artifact.source, encoding="utf-8")
        request = json.dumps({"input": payload}, ensure_ascii=True)

        started = time.monotonic()
        try:
            with self._semaphore:
                proc = subprocess.Popen(
                    [environment.python, str(self.harness_path), str(tool_path)],
                    stdin=subprocess.PIPE,
                    stdout=subprocess.PIPE,
                    stderr=subprocess.PIPE,
                    cwd=workspace,
                    env=self._child_env(workspace),
                    text=True,
                )
                try:
                    stdout, stderr = proc.communicate(request, timeout=limits.timeout)
                except subprocess.TimeoutExpired:
                    proc.kill()
                    proc.communicate()
                    wall = time.monotonic() - started
                    report = {"kind": "timeout", "message": f"invocation exceeded {limits.timeout}s"}
                    return InvocationResult(
                        status=STATUS_TIMEOUT,
                        payload=report,
                        wall_time=wall,
                        output_text=_truncate(_canonical_text(report), limits.max_output_bytes),
                    )
        finally:
            if not self.keep_workspaces:
                shutil.rmtree(workspace, ignore_errors=True)

        wall = time.monotonic() - started
        return self._classify(proc.returncode, stdout, stderr, artifact, wall, limits)

    def _classify(
        self,
        returncode: int,
        stdout: str,
        stderr: str,
        artifact: ToolArtifact,
        wall: float,
        limits: SandboxLimits,
    ) -> InvocationResult:
        def protocol_error(kind: str, message: str) -> InvocationResult:
            report = {"kind": kind, "message": message}
            return InvocationResult(
                status=STATUS_PROTOCOL_ERROR,
                payload=report,
                wall_time=wall,
                output_text=_truncate(_canonical_text(report), limits.max_output_bytes),
            )

        if returncode != 0:
            return protocol_error("harness_exit", f"exit {returncode}; stderr: {stderr[-500:]}")
        try:
            document = json.loads(stdout)
        except json.JSONDecodeError:
            return protocol_error("unparseable_output", f"stdout: {stdout[:300]!r}")
        if not isinstance(document, dict):
            return protocol_error("unparseable_output", "protocol document is not an object")

        if document.get("status") == "ok" and "output" in document:
            output = document["output"]
            violations = check_payload(output, artifact.output_schema)
            if violations:
                return protocol_error("output_schema_violation", "; ".join(violations))
            return InvocationResult(
                status=STATUS_OK,
                payload=output,
                wall_time=wall,
                output_text=_truncate(_canonical_text(output), limits.max_output_bytes),
            )
        if document.get("status") == "error" and "kind" in document and "message" in document:
            report = {"kind": str(document["kind"]), "message": str(document["message"])}
            return InvocationResult(
                status=STATUS_TOOL_ERROR,
                payload=report,
                wall_time=wall,
                output_text=_truncate(_canonical_text(report), limits.max_output_bytes),
            )
        return protocol_error("malformed_document", f"unexpected document shape: {stdout[:200]!r}")
