from __future__ import annotations

import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from evorun.prompts import PromptSuite
from evorun.sandbox import Sandbox, SandboxLimits, SharedEnvProvisioner

REPO_ROOT = Path(__file__).resolve().parent.parent
HARNESS_RUNNER = REPO_ROOT / "harness" / "src" / "tool_harness" / "runner.py"
FIXTURE_DIR = REPO_ROOT / "harness" / "src" / "tool_harness" / "fixtures"


@pytest.fixture(scope="session")
def harness_runner() -> Path:
    assert HARNESS_RUNNER.is_file(), f"harness runner missing: {HARNESS_RUNNER}"
    return HARNESS_RUNNER


@pytest.fixture(scope="session")
def fixture_dir() -> Path:
    return FIXTURE_DIR


@pytest.fixture(scope="session")
def fixture_sources() -> dict[str, str]:
    return {
        path.stem: path.read_text(encoding="utf-8")
        for path in FIXTURE_DIR.glob("*.py")
        if path.stem != "__init__"
    }


@pytest.fixture(scope="session")
def prompt_suite() -> PromptSuite:
    return PromptSuite()


@pytest.fixture
def sandbox(tmp_path, harness_runner) -> Sandbox:
    return Sandbox(
        harness_path=harness_runner,
        provisioner=SharedEnvProvisioner(),
        limits=SandboxLimits(timeout=20.0, max_output_bytes=65536),
        root=tmp_path / "sandbox",
    )
