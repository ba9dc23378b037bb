# Fixture: the happy path. Echoes its input; must yield status=ok upstream.
__TOOL_META__ = {
    "name": "echo_text",
    "description": "Return the provided text unchanged. Useful as a deterministic identity tool for protocol checks.",
    "dependencies": [],
}

from pydantic import BaseModel, Field


class InputModel(BaseModel):
    text: str = Field(..., description="Text to echo back")


class OutputModel(BaseModel):
    result: str = Field(..., description="The same text")


def run(input: InputModel) -> OutputModel:
    return OutputModel(result=input.text)
