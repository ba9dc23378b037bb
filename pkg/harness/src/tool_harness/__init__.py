"""One-shot execution shim for sandboxed tool modules.

`tool_harness.runner` is invoked as a script inside a provisioned
environment with the tool source path as its argument. It reads one request
document from standard input, runs the tool's entrypoint through its
declared pydantic models, and writes exactly one protocol document to
standard output.
"""

__version__ = "0.1.0"
