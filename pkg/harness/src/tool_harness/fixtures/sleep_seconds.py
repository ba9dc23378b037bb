# Fixture: overruns the invocation timeout; must yield status=timeout upstream
# when invoked with a limit below the requested duration.
__TOOL_META__ = {
    "name": "sleep_seconds",
    "description": "Sleep for the requested number of seconds, then report how long it slept.",
    "dependencies": [],
}

import time

from pydantic import BaseModel, Field


class InputModel(BaseModel):
    seconds: float = Field(..., description="How long to sleep")


class OutputModel(BaseModel):
    slept: float = Field(..., description="Seconds actually slept")


def run(input: InputModel) -> OutputModel:
    time.sleep(input.seconds)
    return OutputModel(slept=input.seconds)
