"""Immutable, versioned snapshots of the global toolset.

A snapshot is never mutated: committing a batch's tools returns a new
snapshot at the next step, retiring merged-away members through an alias map
so traces and usage stats stay attributable. Snapshots persist to a directory
(manifest plus one source file per tool) and round-trip bit-exactly, which is
what makes warm starts byte-identical to the run that produced them.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

PERSIST_FORMAT_VERSION = "1.0"

PROVENANCE_KINDS = ("synthesized", "merged", "imported")


class RegistryError(Exception):
    """Base class for registry failures."""


class UnionError(RegistryError):
    """A direct union would collide on a tool name; route through absorbing."""


class ResolutionError(RegistryError):
    """Exact, case-sensitive lookup failed."""


class LibraryLoadError(RegistryError):
    """A persisted library is missing, corrupt, or from an unknown format."""


def source_digest(source: str) -> str:
    return hashlib.sha256(source.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class ToolStats:
    invocations: int = 0
    successes: int = 0
    tool_output_tokens: int = 0

    def __post_init__(self) -> None:
        if min(self.invocations, self.successes, self.tool_output_tokens) < 0:
            raise ValueError("stats must be nonnegative")
        if self.successes > self.invocations:
            raise ValueError("successes cannot exceed invocations")

    def merged(self, invocations: int = 0, successes: int = 0, tool_output_tokens: int = 0) -> "ToolStats":
        return ToolStats(
            invocations=self.invocations + invocations,
            successes=self.successes + successes,
            tool_output_tokens=self.tool_output_tokens + tool_output_tokens,
        )


@dataclass(frozen=True)
class Provenance:
    kind: str
    step: int | None = None
    query_id: str | None = None
    member_names: tuple[str, ...] = ()
    origin: str | None = None

    def __post_init__(self) -> None:
        if self.kind not in PROVENANCE_KINDS:
            raise ValueError(f"unknown provenance kind: {self.kind!r}")

    @classmethod
    def synthesized(cls, step: int, query_id: str) -> "Provenance":
        return cls(kind="synthesized", step=step, query_id=query_id)

    @classmethod
    def merged(cls, step: int, member_names) -> "Provenance":
        return cls(kind="merged", step=step, member_names=tuple(member_names))

    @classmethod
    def imported(cls, origin: str) -> "Provenance":
        return cls(kind="imported", origin=origin)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "step": self.step,
            "query_id": self.query_id,
            "member_names": list(self.member_names),
            "origin": self.origin,
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "Provenance":
        return cls(
            kind=raw["kind"],
            step=raw.get("step"),
            query_id=raw.get("query_id"),
            member_names=tuple(raw.get("member_names", [])),
            origin=raw.get("origin"),
        )


@dataclass(frozen=True)
class ToolRecord:
    name: str
    description: str
    input_schema: dict
    output_schema: dict
    dependencies: tuple[str, ...]
    source: str
    digest: str
    provenance: Provenance
    stats: ToolStats = field(default_factory=ToolStats)

    def __post_init__(self) -> None:
        if self.digest != source_digest(self.source):
            raise ValueError(f"artifact digest mismatch for tool {self.name!r}")

    @classmethod
    def create(
        cls,
        name: str,
        description: str,
        input_schema: dict,
        output_schema: dict,
        dependencies,
        source: str,
        provenance: Provenance,
        stats: ToolStats | None = None,
    ) -> "ToolRecord":
        return cls(
            name=name,
            description=description,
            input_schema=input_schema,
            output_schema=output_schema,
            dependencies=tuple(dependencies),
            source=source,
            digest=source_digest(source),
            provenance=provenance,
            stats=stats or ToolStats(),
        )


@dataclass(frozen=True)
class Resolution:
    record: ToolRecord
    aliased: bool = False


@dataclass(frozen=True)
class RegistrySnapshot:
    step: int
    records: tuple[ToolRecord, ...]
    alias_map: tuple[tuple[str, str], ...] = ()

    def __post_init__(self) -> None:
        names = [r.name for r in self.records]
        if len(set(names)) != len(names):
            raise ValueError("duplicate tool names in snapshot")
        live = set(names)
        for old, new in self.alias_map:
            if new not in live:
                raise ValueError(f"alias target {new!r} is not a live record")
        ordered = tuple(sorted(self.records, key=lambda r: r.name))
        object.__setattr__(self, "records", ordered)
        object.__setattr__(self, "_by_name", {r.name: r for r in ordered})
        object.__setattr__(self, "_aliases", dict(self.alias_map))

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(r.name for r in self.records)

    @property
    def aliases(self) -> dict[str, str]:
        return dict(self._aliases)

    def get(self, name: str) -> ToolRecord | None:
        return self._by_name.get(name)

    def __len__(self) -> int:
        return len(self.records)


def empty_snapshot() -> RegistrySnapshot:
    return RegistrySnapshot(step=0, records=())


def commit_union(
    prev: RegistrySnapshot,
    new_tools,
    aliases: dict[str, str] | None = None,
    stats_deltas: dict[str, ToolStats] | None = None,
) -> RegistrySnapshot:
    """Fold a batch's surviving tools into a new snapshot at step+1.

    `aliases` retires merged-away record names (old -> master). New tool names
    must be pairwise distinct and distinct from surviving names; a collision
    means the caller skipped the absorbing pipeline. `stats_deltas` merges
    per-tool usage tallies gathered during the batch into the committed
    records.
    """
    aliases = dict(aliases or {})
    new_tools = list(new_tools)
    new_names = [t.name for t in new_tools]
    if len(set(new_names)) != len(new_names):
        raise UnionError(f"new tools carry duplicate names: {sorted(new_names)}")
    for old, target in aliases.items():
        if old == target and target not in new_names:
            raise UnionError(f"self-alias {old!r} retires a record without replacing it")
    surviving = {r.name: r for r in prev.records if r.name not in aliases}
    for name in new_names:
        if name in surviving:
            raise UnionError(f"tool name collision on union: {name!r}")
    merged: dict[str, ToolRecord] = dict(surviving)
    merged.update({t.name: t for t in new_tools})

    # Re-point old alias chains at their new targets before extending.
    combined: dict[str, str] = {}
    for old, target in prev.aliases.items():
        combined[old] = aliases.get(target, target)
    combined.update(aliases)
    # A self-alias marks an in-place replacement: it already retired the old
    # record above and carries no lookup value once the new record is live.
    combined = {old: target for old, target in combined.items() if old != target}
    for old, target in combined.items():
        if target not in merged:
            raise UnionError(f"alias target {target!r} does not survive the union")

    if stats_deltas:
        for name, delta in stats_deltas.items():
            resolved = combined.get(name, name)
            record = merged.get(resolved)
            if record is None:
                raise RegistryError(f"stats delta for unknown tool {name!r}")
            merged[resolved] = replace(
                record,
                stats=record.stats.merged(
                    invocations=delta.invocations,
                    successes=delta.successes,
                    tool_output_tokens=delta.tool_output_tokens,
                ),
            )

    return RegistrySnapshot(
        step=prev.step + 1,
        records=tuple(merged.values()),
        alias_map=tuple(sorted(combined.items())),
    )


def listing(snapshot: RegistrySnapshot) -> list[tuple[str, str, dict]]:
    """Deterministic (name, description, input_schema) listing, lexicographic by name."""
    return [(r.name, r.description, r.input_schema) for r in snapshot.records]


def listing_text(snapshot: RegistrySnapshot) -> str:
    """Canonical serialized listing; byte-stable for replay and warm-start checks."""
    return "\n".join(
        json.dumps(
            {"name": n, "description": d, "input_schema": s},
            sort_keys=True,
            separators=(",", ":"),
            ensure_ascii=True,
        )
        for n, d, s in listing(snapshot)
    )


def listing_digest(snapshot: RegistrySnapshot) -> str:
    return hashlib.sha256(listing_text(snapshot).encode("utf-8")).hexdigest()


def resolve(snapshot: RegistrySnapshot, name: str) -> Resolution:
    """Exact, case-sensitive lookup, falling through the alias map for retired names."""
    record = snapshot.get(name)
    if record is not None:
        return Resolution(record=record, aliased=False)
    target = snapshot.aliases.get(name)
    if target is not None:
        master = snapshot.get(target)
        if master is not None:
            return Resolution(record=master, aliased=True)
    raise ResolutionError(f"unknown tool name: {name!r}")


def _record_to_manifest(record: ToolRecord) -> dict:
    return {
        "name": record.name,
        "description": record.description,
        "input_schema": record.input_schema,
        "output_schema": record.output_schema,
        "dependencies": list(record.dependencies),
        "digest": record.digest,
        "source_file": f"tools/{record.name}.py",
        "provenance": record.provenance.to_dict(),
        "stats": {
            "invocations": record.stats.invocations,
            "successes": record.stats.successes,
            "tool_output_tokens": record.stats.tool_output_tokens,
        },
    }


def persist(snapshot: RegistrySnapshot, path: str | Path) -> Path:
    """Write a snapshot as a directory: manifest.json plus one source file per tool."""
    root = Path(path)
    (root / "tools").mkdir(parents=True, exist_ok=True)
    for record in snapshot.records:
        (root / "tools" / f"{record.name}.py").write_text(record.source, encoding="utf-8")
    manifest = {
        "format_version": PERSIST_FORMAT_VERSION,
        "step": snapshot.step,
        "aliases": dict(sorted(snapshot.aliases.items())),
        "records": [_record_to_manifest(r) for r in snapshot.records],
    }
    (root / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True, ensure_ascii=True) + "\n",
        encoding="utf-8",
    )
    return root


def load(path: str | Path) -> RegistrySnapshot:
    """Load a persisted snapshot, verifying per-tool source digests."""
    root = Path(path)
    manifest_path = root / "manifest.json"
    if not manifest_path.is_file():
        raise LibraryLoadError(f"no manifest.json under {root}")
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise LibraryLoadError(f"unreadable manifest: {exc}") from exc
    version = str(manifest.get("format_version", ""))
    if version.split(".")[0] != PERSIST_FORMAT_VERSION.split(".")[0]:
        raise LibraryLoadError(f"unsupported library format version: {version!r}")
    records = []
    for raw in manifest.get("records", []):
        source_path = root / raw["source_file"]
        try:
            source = source_path.read_text(encoding="utf-8")
        except OSError as exc:
            raise LibraryLoadError(f"missing tool source: {raw['source_file']}") from exc
        actual = source_digest(source)
        if actual != raw["digest"]:
            raise LibraryLoadError(
                f"digest mismatch for {raw['name']}: manifest {raw['digest'][:12]}… "
                f"!= source {actual[:12]}…"
            )
        stats = raw.get("stats", {})
        records.append(
            ToolRecord(
                name=raw["name"],
                description=raw["description"],
                input_schema=raw["input_schema"],
                output_schema=raw["output_schema"],
                dependencies=tuple(raw.get("dependencies", [])),
                source=source,
                digest=raw["digest"],
                provenance=Provenance.from_dict(raw["provenance"]),
                stats=ToolStats(
                    invocations=stats.get("invocations", 0),
                    successes=stats.get("successes", 0),
                    tool_output_tokens=stats.get("tool_output_tokens", 0),
                ),
            )
        )
    try:
        return RegistrySnapshot(
            step=int(manifest.get("step", 0)),
            records=tuple(records),
            alias_map=tuple(sorted(manifest.get("aliases", {}).items())),
        )
    except ValueError as exc:
        raise LibraryLoadError(f"invalid persisted snapshot: {exc}") from exc
