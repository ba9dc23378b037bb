# Fixture: raises inside run(); must yield an exit-0 error document from the
# harness and status=tool_error upstream.
__TOOL_META__ = {
    "name": "raise_error",
    "description": "Raise a RuntimeError carrying the provided message. Exercises the tool-error path.",
    "dependencies": [],
}

from pydantic import BaseModel, Field


class InputModel(BaseModel):
    message: str = Field(..., description="Message for the raised error")


class OutputModel(BaseModel):
    result: str = Field(..., description="Never produced")


def run(input: InputModel) -> OutputModel:
    raise RuntimeError(input.message)
