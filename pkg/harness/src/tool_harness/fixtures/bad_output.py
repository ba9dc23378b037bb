# Fixture: emits an output payload that violates the host-declared output
# schema (`result` as a string). The harness accepts it — its own OutputModel
# types the field as Any — so the host must classify it as protocol_error,
# never ok.
__TOOL_META__ = {
    "name": "bad_output",
    "description": "Return a nested object in a field the caller expects to be plain text.",
    "dependencies": [],
}

from typing import Any

from pydantic import BaseModel, Field


class InputModel(BaseModel):
    text: str = Field(..., description="Ignored")


class OutputModel(BaseModel):
    result: Any = Field(..., description="Deliberately untyped")


def run(input: InputModel) -> OutputModel:
    return OutputModel(result={"unexpected": True, "echo": input.text})
