"""Run configuration: provider profile, budgets, sandbox limits, and paths.

Config files are JSON; command-line flags override file values. Secrets never
appear in config — only the name of the environment variable holding them.
The effective config is echoed into the trace header so every run is
self-describing.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .workflow import WorkflowConfig

MODE_ZERO = "zero-start"
MODE_WARM = "warm-start"


class ConfigError(Exception):
    def __init__(self, problems: list[str]):
        super().__init__("; ".join(problems))
        self.problems = problems


@dataclass
class ProviderProfile:
    kind: str = "scripted"  # scripted | openai
    script_path: str | None = None
    endpoint: str | None = None
    model: str | None = None
    credential_env: str = "OPENAI_API_KEY"
    role_models: dict[str, str] = field(default_factory=dict)
    temperature: float = 0.7

    def validate(self) -> list[str]:
        problems = []
        if self.kind not in ("scripted", "openai"):
            problems.append(f"provider.kind must be scripted or openai, got {self.kind!r}")
        if self.kind == "scripted" and not self.script_path:
            problems.append("provider.script_path is required for the scripted provider")
        if self.kind == "openai":
            if not self.endpoint:
                problems.append("provider.endpoint is required for the openai provider")
            if not self.model:
                problems.append("provider.model is required for the openai provider")
        if not 0.0 <= self.temperature <= 2.0:
            problems.append("provider.temperature must be in [0, 2]")
        return problems


@dataclass
class SandboxProfile:
    timeout: float = 120.0
    max_output_bytes: int = 65536
    provisioner: str = "shared"  # shared | venv
    venv_cache_dir: str | None = None
    passthrough_env: list[str] = field(default_factory=list)
    harness_path: str | None = None
    max_concurrent: int = 8

    def validate(self) -> list[str]:
        problems = []
        if self.provisioner not in ("shared", "venv"):
            problems.append(f"sandbox.provisioner must be shared or venv, got {self.provisioner!r}")
        if self.timeout <= 0:
            problems.append("sandbox.timeout must be positive")
        if self.max_output_bytes < 64:
            problems.append("sandbox.max_output_bytes must be at least 64")
        return problems


@dataclass
class RunConfig:
    provider: ProviderProfile = field(default_factory=ProviderProfile)
    budgets: WorkflowConfig = field(default_factory=WorkflowConfig)
    sandbox: SandboxProfile = field(default_factory=SandboxProfile)
    batch_size: int = 16
    worker_cap: int = 8
    mode: str = MODE_ZERO
    stream_path: str | None = None
    library_in: str | None = None
    out_dir: str = "run-out"
    clock: str | None = None  # logical | wall; default follows the provider kind

    def validate(self) -> list[str]:
        problems = []
        problems.extend(self.provider.validate())
        problems.extend(self.sandbox.validate())
        problems.extend(self.budgets.validate())
        if self.batch_size < 1:
            problems.append("batch_size must be >= 1")
        if self.worker_cap < 1:
            problems.append("worker_cap must be >= 1")
        if self.mode not in (MODE_ZERO, MODE_WARM):
            problems.append(f"mode must be {MODE_ZERO} or {MODE_WARM}, got {self.mode!r}")
        if self.mode == MODE_WARM and not self.library_in:
            problems.append("warm-start requires library_in")
        if self.clock not in (None, "logical", "wall"):
            problems.append("clock must be logical or wall")
        return problems

    # Derived output locations.
    @property
    def trace_path(self) -> Path:
        return Path(self.out_dir) / "trace.ndjson"

    @property
    def answers_path(self) -> Path:
        return Path(self.out_dir) / "answers.jsonl"

    @property
    def library_out(self) -> Path:
        return Path(self.out_dir) / "library"

    @property
    def exports_dir(self) -> Path:
        return Path(self.out_dir) / "exports"

    @property
    def checkpoint_path(self) -> Path:
        return Path(self.out_dir) / "checkpoint.json"

    def effective_clock(self) -> str:
        if self.clock:
            return self.clock
        return "logical" if self.provider.kind == "scripted" else "wall"

    def echo(self) -> dict:
        """Plain-value view of the effective config for the trace header."""
        data = asdict(self)
        data["clock"] = self.effective_clock()
        return data

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        raw = dict(raw)
        provider = ProviderProfile(**raw.pop("provider", {}))
        budgets = WorkflowConfig(**raw.pop("budgets", {}))
        sandbox = SandboxProfile(**raw.pop("sandbox", {}))
        known = {f for f in cls.__dataclass_fields__}
        unknown = sorted(set(raw) - known)
        if unknown:
            raise ConfigError([f"unknown config field: {name}" for name in unknown])
        return cls(provider=provider, budgets=budgets, sandbox=sandbox, **raw)

    @classmethod
    def from_file(cls, path: str | Path) -> "RunConfig":
        try:
            raw = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError([f"unreadable config file {path}: {exc}"]) from exc
        if not isinstance(raw, dict):
            raise ConfigError([f"config file {path} must contain a JSON object"])
        return cls.from_dict(raw)
