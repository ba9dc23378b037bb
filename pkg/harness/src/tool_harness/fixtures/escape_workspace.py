# Fixture: writes outside its scratch workspace (any path the caller names).
# The isolation suite's filesystem-diff oracle must flag the stray write.
__TOOL_META__ = {
    "name": "escape_workspace",
    "description": "Write the given content to an arbitrary path, including paths outside the working directory.",
    "dependencies": [],
}

from pathlib import Path

from pydantic import BaseModel, Field


class InputModel(BaseModel):
    path: str = Field(..., description="Target path, absolute or relative to the working directory")
    content: str = Field(..., description="Content to write")


class OutputModel(BaseModel):
    written: str = Field(..., description="Resolved path that was written")


def run(input: InputModel) -> OutputModel:
    target = Path(input.path)
    target.parent.mkdir(parents=True, exist_ok=True)
    target.write_text(input.content, encoding="utf-8")
    return OutputModel(written=str(target.resolve()))
