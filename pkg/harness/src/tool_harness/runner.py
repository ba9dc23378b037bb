"""Execute one sandboxed tool invocation over the JSON stdin/stdout protocol.

Usage: python runner.py /path/to/tool.py

Request document on stdin:   {"input": <payload>}
Success document on stdout:  {"status": "ok", "output": <payload>}
Error document on stdout:    {"status": "error", "kind": <str>, "message": <str>}

Both documents exit 0; the error path covers input-validation failures and
exceptions raised by the tool (the exception class name becomes the error
kind). Load failures — unreadable source, import-time errors, a module
missing InputModel/OutputModel/run — print diagnostics to stderr and exit
nonzero, which the host classifies as a protocol error.

This module is deliberately self-contained (stdlib + pydantic) so any
provisioned interpreter can run it by file path. Exactly one request is
served per process; nothing but the protocol document is ever written to
real stdout (tool chatter is redirected to stderr).
"""

from __future__ import annotations

import contextlib
import importlib.util
import json
import sys
import traceback

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_LOAD_FAILURE = 3


def _emit(stdout, document: dict) -> None:
    stdout.write(json.dumps(document, sort_keys=True, separators=(",", ":"), ensure_ascii=True))
    stdout.write("\n")
    stdout.flush()


def _error_document(kind: str, message: str) -> dict:
    return {"status": "error", "kind": kind, "message": message}


def _load_tool_module(source_path: str):
    spec = importlib.util.spec_from_file_location("sandboxed_tool", source_path)
    if spec is None or spec.loader is None:
        raise ImportError(f"cannot load tool module from {source_path}")
    module = importlib.util.module_from_spec(spec)
    spec.loader.exec_module(module)
    return module


def execute(source_path: str, stdin=None, stdout=None, stderr=None) -> int:
    """Run one invocation; returns the process exit code."""
    stdin = stdin if stdin is not None else sys.stdin
    stdout = stdout if stdout is not None else sys.stdout
    stderr = stderr if stderr is not None else sys.stderr

    try:
        request = json.loads(stdin.read())
        if not isinstance(request, dict) or "input" not in request:
            raise ValueError("request document must be an object with an 'input' key")
        payload = request["input"]
    except (ValueError, json.JSONDecodeError) as exc:
        print(f"harness: malformed request document: {exc}", file=stderr)
        return EXIT_USAGE

    # Library chatter must never reach the protocol stream.
    with contextlib.redirect_stdout(stderr):
        try:
            module = _load_tool_module(source_path)
            input_model = getattr(module, "InputModel")
            output_model = getattr(module, "OutputModel")
            run = getattr(module, "run")
        except BaseException:
            print("harness: tool module failed to load:", file=stderr)
            traceback.print_exc(file=stderr)
            return EXIT_LOAD_FAILURE

        try:
            tool_input = input_model(**payload) if isinstance(payload, dict) else input_model(payload)
        except Exception as exc:
            _emit(stdout, _error_document(type(exc).__name__, str(exc)))
            return EXIT_OK

        try:
            result = run(tool_input)
            if not isinstance(result, output_model):
                result = output_model.model_validate(result)
            output_payload = result.model_dump(mode="json")
        except Exception as exc:
            _emit(stdout, _error_document(type(exc).__name__, str(exc)))
            return EXIT_OK

    _emit(stdout, {"status": "ok", "output": output_payload})
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    if len(argv) != 1:
        print("usage: runner.py <tool-source-path>", file=sys.stderr)
        return EXIT_USAGE
    return execute(argv[0])


if __name__ == "__main__":
    sys.exit(main())
