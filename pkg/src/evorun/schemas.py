"""Host-side validator for the tool-request schema dialect.

Tool I/O schemas follow the manager protocol's JSON-schema subset: objects
with a `properties` map, a `required` list, and scalar/array/object property
types. The checker is deliberately small and strict about JSON types (no
string-to-number coercion) so host-side verdicts are predictable; the
harness's pydantic models remain the authority for model-level coercions.
"""

from __future__ import annotations

_TYPE_CHECKS = {
    "string": lambda v: isinstance(v, str),
    "integer": lambda v: isinstance(v, int) and not isinstance(v, bool),
    "number": lambda v: isinstance(v, (int, float)) and not isinstance(v, bool),
    "boolean": lambda v: isinstance(v, bool),
    "array": lambda v: isinstance(v, list),
    "object": lambda v: isinstance(v, dict),
    "null": lambda v: v is None,
}


def _check_type(value, declared, path: str, errors: list[str]) -> None:
    types = declared if isinstance(declared, list) else [declared]
    for t in types:
        check = _TYPE_CHECKS.get(t)
        if check is not None and check(value):
            return
    errors.append(f"{path}: expected {declared}, got {type(value).__name__}")


def _check_value(value, schema: dict, path: str, errors: list[str]) -> None:
    if not isinstance(schema, dict):
        return
    declared = schema.get("type")
    if declared is not None:
        _check_type(value, declared, path, errors)
    if isinstance(value, dict) and isinstance(schema.get("properties"), dict):
        properties = schema["properties"]
        for name in schema.get("required", []):
            if name not in value:
                errors.append(f"{path}.{name}: required field missing")
        for name, sub in properties.items():
            if name in value:
                _check_value(value[name], sub, f"{path}.{name}", errors)
    if isinstance(value, list) and isinstance(schema.get("items"), dict):
        for i, item in enumerate(value):
            _check_value(item, schema["items"], f"{path}[{i}]", errors)


def check_payload(payload, schema: dict) -> list[str]:
    """Return a list of violations of `payload` against `schema` (empty when valid)."""
    errors: list[str] = []
    _check_value(payload, schema, "$", errors)
    return errors


def is_well_formed_schema(schema) -> bool:
    """A usable tool schema is an object with a properties map."""
    return isinstance(schema, dict) and isinstance(schema.get("properties"), dict)
