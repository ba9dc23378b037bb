# Fixture: declares and imports a third-party dependency (no network use).
# Exercises environment provisioning keyed by the declared dependency set.
__TOOL_META__ = {
    "name": "uses_dependency",
    "description": "Report the version of the requests library available in the provisioned environment.",
    "dependencies": ["requests"],
}

import requests
from pydantic import BaseModel, Field


class InputModel(BaseModel):
    probe: str = Field(..., description="Opaque marker echoed back")


class OutputModel(BaseModel):
    probe: str = Field(..., description="The marker from the input")
    version: str = Field(..., description="Installed requests version")


def run(input: InputModel) -> OutputModel:
    return OutputModel(probe=input.probe, version=requests.__version__)
