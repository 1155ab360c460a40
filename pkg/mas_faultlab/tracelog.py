"""Execution traces: event schema, append-only sinks, replay and manifests.

A trace file holds one task run. The first line is a header record, every
following line is one event, all written as canonical JSON (sorted keys,
compact separators) so identical runs produce identical bytes.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
from collections.abc import Iterable, Iterator, Mapping
from dataclasses import dataclass, field, replace
from enum import StrEnum
from pathlib import Path
from typing import Any, Self
from urllib.parse import quote

from .const import (
    ANNOTATIONS_FILE,
    BASELINE_DIR,
    BASELINE_SPEC_ID,
    HASH_ALGO,
    MANIFEST_FILE,
    MEMORY_LOSS_UNIT,
    SCHEMA_VERSION,
    TRACE_SUFFIX,
    TRACES_DIR,
)
from .errors import ConfigurationError, ExecutionError
from .taxonomy import FaultType, FtTier, InterceptionPoint

_LOGGER = logging.getLogger(__name__)

MANIFEST_COMPLETE = "complete"
MANIFEST_PARTIAL = "partial"


class InvariantViolation(ExecutionError):
    """Raised when an event breaks the ordering rules of its task trace."""


class TraceIOError(ExecutionError):
    """Raised when a trace or manifest cannot be written."""


class CorruptTrace(ExecutionError):
    """Raised when a stored trace cannot be replayed faithfully."""

    def __init__(self, path: str | os.PathLike[str], line: int | None, reason: str):
        self.path = str(path)
        self.line = line
        self.reason = reason
        where = f"{self.path}:{line}" if line is not None else self.path
        super().__init__(f"{where}: {reason}")


class ManifestExists(ConfigurationError):
    """Raised when an output directory already holds a campaign manifest."""


class EventKind(StrEnum):
    """Kinds of trace events."""

    MSG_SENT = "msg_sent"
    MSG_RECEIVED = "msg_received"
    MSG_FILTERED = "msg_filtered"
    LOOP_DETECTED = "loop_detected"
    FAULT_INJECTED = "fault_injected"
    INJECTION_ATTEMPT = "injection_attempt"
    FT_TRIGGERED = "ft_triggered"
    FT_FIXED = "ft_fixed"
    TASK_RESULT = "task_result"


_TIERED_KINDS = frozenset({EventKind.FT_TRIGGERED, EventKind.FT_FIXED})


def payload_digest(payload: str | bytes) -> str:
    """Hex digest of a payload under the trace hash algorithm."""
    if isinstance(payload, str):
        payload = payload.encode("utf-8")
    return hashlib.new(HASH_ALGO, payload).hexdigest()


def canonical_json(data: Any) -> str:
    """Serialize to the canonical one-line JSON form used on disk."""
    return json.dumps(data, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


@dataclass(frozen=True)
class TraceEvent:
    """One logical step of a task execution."""

    seq: int
    task_id: str
    kind: EventKind
    agent_id: str
    spec_id: str | None = None
    point: InterceptionPoint | None = None
    tier: FtTier | None = None
    success: bool | None = None
    payload_digest: str | None = None
    detail: Mapping[str, Any] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        """Return the record form of the event (unset optionals omitted)."""
        out: dict[str, Any] = {
            "seq": self.seq,
            "task_id": self.task_id,
            "kind": str(self.kind),
            "agent_id": self.agent_id,
        }
        if self.spec_id is not None:
            out["spec_id"] = self.spec_id
        if self.point is not None:
            out["point"] = str(self.point)
        if self.tier is not None:
            out["tier"] = str(self.tier)
        if self.success is not None:
            out["success"] = self.success
        if self.payload_digest is not None:
            out["payload_digest"] = self.payload_digest
        if self.detail:
            out["detail"] = dict(self.detail)
        return out

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> TraceEvent:
        """Build an event from its record form.

        Raises:
            ValueError: a field is missing or malformed.

        """
        allowed = {
            "seq",
            "task_id",
            "kind",
            "agent_id",
            "spec_id",
            "point",
            "tier",
            "success",
            "payload_digest",
            "detail",
        }
        unknown = set(data) - allowed
        if unknown:
            raise ValueError(f"unknown event fields {sorted(unknown)}")
        seq = data["seq"]
        if not isinstance(seq, int) or isinstance(seq, bool) or seq < 0:
            raise ValueError("seq must be a non-negative integer")
        if not isinstance(data["task_id"], str) or not isinstance(
            data["agent_id"], str
        ):
            raise ValueError("task_id and agent_id must be strings")
        success = data.get("success")
        if success is not None and not isinstance(success, bool):
            raise ValueError("success must be a boolean")
        detail = data.get("detail", {})
        if not isinstance(detail, dict):
            raise ValueError("detail must be an object")
        return cls(
            seq=seq,
            task_id=data["task_id"],
            kind=EventKind(data["kind"]),
            agent_id=data["agent_id"],
            spec_id=data.get("spec_id"),
            point=InterceptionPoint(data["point"]) if "point" in data else None,
            tier=FtTier(data["tier"]) if "tier" in data else None,
            success=success,
            payload_digest=data.get("payload_digest"),
            detail=detail,
        )


@dataclass(frozen=True)
class TierSummary:
    """Whether a tier triggered and fixed at least once in a task."""

    triggered: bool = False
    fixed: bool = False


@dataclass(frozen=True)
class TaskOutcome:
    """Result of one task run, derivable from its event stream."""

    task_id: str
    spec_id: str
    success: bool
    ft_summary: Mapping[FtTier, TierSummary]
    applicable: bool = True
    fault_type: FaultType | None = None

    @property
    def is_baseline(self) -> bool:
        """True for fault-free runs."""
        return self.spec_id == BASELINE_SPEC_ID

    @property
    def triggered(self) -> bool:
        """True when any tier triggered."""
        return any(s.triggered for s in self.ft_summary.values())

    @property
    def fixed(self) -> bool:
        """True when any tier fixed."""
        return any(s.fixed for s in self.ft_summary.values())

    def summary_dict(self) -> dict[str, dict[str, bool]]:
        """Per-tier summary in catalog tier order."""
        return {
            str(tier): {
                "triggered": self.ft_summary[tier].triggered,
                "fixed": self.ft_summary[tier].fixed,
            }
            for tier in FtTier
        }

    def to_dict(self) -> dict[str, Any]:
        """Return the record form used for the task_result digest."""
        return {
            "task_id": self.task_id,
            "spec_id": self.spec_id,
            "success": self.success,
            "applicable": self.applicable,
            "fault_type": str(self.fault_type) if self.fault_type else None,
            "ft_summary": self.summary_dict(),
        }

    def digest(self) -> str:
        """Digest of the canonical outcome record."""
        return payload_digest(canonical_json(self.to_dict()))


def summarize_tiers(events: list[TraceEvent]) -> dict[FtTier, TierSummary]:
    """Fold ft_triggered / ft_fixed events into a per-tier summary."""
    triggered: set[FtTier] = set()
    fixed: set[FtTier] = set()
    for event in events:
        if event.kind is EventKind.FT_TRIGGERED and event.tier is not None:
            triggered.add(event.tier)
        elif event.kind is EventKind.FT_FIXED and event.tier is not None:
            fixed.add(event.tier)
    return {
        tier: TierSummary(triggered=tier in triggered, fixed=tier in fixed)
        for tier in FtTier
    }


def derive_outcome(events: list[TraceEvent]) -> TaskOutcome | None:
    """Re-derive the task outcome from an event stream (None without a result)."""
    result = next((e for e in events if e.kind is EventKind.TASK_RESULT), None)
    if result is None:
        return None
    fault_type = result.detail.get("fault_type")
    return TaskOutcome(
        task_id=result.task_id,
        spec_id=result.spec_id or BASELINE_SPEC_ID,
        success=bool(result.success),
        ft_summary=summarize_tiers(events),
        applicable=bool(result.detail.get("applicable", True)),
        fault_type=FaultType(fault_type) if fault_type else None,
    )


class TaskInvariants:
    """Ordering rules of one task's event stream."""

    def __init__(self, task_id: str) -> None:
        self.task_id = task_id
        self._last_seq: int | None = None
        self._triggered: set[FtTier] = set()
        self._has_result = False

    def check(self, event: TraceEvent) -> None:
        """Raise InvariantViolation when the event may not follow the stream."""
        if event.task_id != self.task_id:
            raise InvariantViolation(
                f"event for task {event.task_id!r} in stream of {self.task_id!r}"
            )
        if self._last_seq is not None and event.seq <= self._last_seq:
            raise InvariantViolation(
                f"seq {event.seq} does not follow {self._last_seq}"
            )
        if event.kind in _TIERED_KINDS:
            if event.tier is None:
                raise InvariantViolation(f"{event.kind} without a tier")
            if self._has_result:
                raise InvariantViolation(f"{event.kind} after task_result")
            if (
                event.kind is EventKind.FT_FIXED
                and event.tier not in self._triggered
            ):
                raise InvariantViolation(
                    f"ft_fixed({event.tier}) without prior ft_triggered"
                )
        if event.kind is EventKind.TASK_RESULT:
            if self._has_result:
                raise InvariantViolation("duplicate task_result")
            if event.success is None:
                raise InvariantViolation("task_result without success flag")

    def accept(self, event: TraceEvent) -> None:
        """Check the event and advance the stream state."""
        self.check(event)
        self._last_seq = event.seq
        if event.kind is EventKind.FT_TRIGGERED and event.tier is not None:
            self._triggered.add(event.tier)
        elif event.kind is EventKind.TASK_RESULT:
            self._has_result = True


# ----------------------------------------------------------------------
# Sinks
# ----------------------------------------------------------------------


class MemorySink:
    """In-memory sink keeping events per task."""

    def __init__(self) -> None:
        self._streams: dict[str, list[TraceEvent]] = {}
        self._invariants: dict[str, TaskInvariants] = {}

    def append(self, event: TraceEvent) -> None:
        """Check and store one event."""
        invariants = self._invariants.setdefault(
            event.task_id, TaskInvariants(event.task_id)
        )
        invariants.accept(event)
        self._streams.setdefault(event.task_id, []).append(event)

    def events_for(self, task_id: str) -> list[TraceEvent]:
        """Events of one task in append order."""
        return list(self._streams.get(task_id, []))

    @property
    def task_ids(self) -> list[str]:
        """Tasks with at least one event."""
        return list(self._streams)


@dataclass(frozen=True)
class TraceHeader:
    """First line of every trace file."""

    task_id: str
    spec_id: str
    campaign_seed: int | None = None
    fault_type: FaultType | None = None
    verbose: bool = False
    schema_version: int = SCHEMA_VERSION
    hash_algo: str = HASH_ALGO

    def to_dict(self) -> dict[str, Any]:
        """Return the header record."""
        return {
            "schema_version": self.schema_version,
            "campaign_seed": self.campaign_seed,
            "hash_algo": self.hash_algo,
            "task_id": self.task_id,
            "spec_id": self.spec_id,
            "fault_type": str(self.fault_type) if self.fault_type else None,
            "verbose": self.verbose,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> TraceHeader:
        """Build a header from its record form."""
        fault_type = data.get("fault_type")
        return cls(
            task_id=data["task_id"],
            spec_id=data["spec_id"],
            campaign_seed=data.get("campaign_seed"),
            fault_type=FaultType(fault_type) if fault_type else None,
            verbose=bool(data.get("verbose", False)),
            schema_version=data["schema_version"],
            hash_algo=data["hash_algo"],
        )


class TraceWriter:
    """Append-only writer of one task's trace file."""

    def __init__(self, path: str | os.PathLike[str], header: TraceHeader) -> None:
        self._path = Path(path)
        self._header = header
        self._invariants = TaskInvariants(header.task_id)
        try:
            self._path.parent.mkdir(parents=True, exist_ok=True)
            self._handle = self._path.open("w", encoding="utf-8", newline="\n")
        except OSError as err:
            raise TraceIOError(f"Cannot open trace {self._path}: {err}") from err
        try:
            self._handle.write(canonical_json(header.to_dict()) + "\n")
        except OSError as err:
            self._handle.close()
            raise TraceIOError(f"Cannot write trace {self._path}: {err}") from err
        except BaseException:
            self._handle.close()
            raise

    @property
    def path(self) -> Path:
        """Location of the trace file."""
        return self._path

    def append(self, event: TraceEvent) -> None:
        """Check and write one event line."""
        self._invariants.accept(event)
        try:
            self._handle.write(canonical_json(event.to_dict()) + "\n")
        except (OSError, ValueError) as err:
            raise TraceIOError(f"Cannot write trace {self._path}: {err}") from err

    def flush(self) -> None:
        """Flush buffered lines to disk."""
        try:
            self._handle.flush()
            os.fsync(self._handle.fileno())
        except OSError as err:
            raise TraceIOError(f"Cannot flush trace {self._path}: {err}") from err

    def close(self) -> None:
        """Flush and close the file."""
        if self._handle.closed:
            return
        self.flush()
        self._handle.close()

    def __enter__(self) -> Self:
        return self

    def __exit__(self, *exc: object) -> None:
        self.close()


TraceSink = MemorySink | TraceWriter


def append(sink: TraceSink, event: TraceEvent) -> None:
    """Append one event to a sink after checking it against prior events."""
    sink.append(event)


class TraceRecorder:
    """Numbers and records the events of one task run."""

    def __init__(
        self,
        task_id: str,
        spec_id: str,
        sink: TraceSink,
        *,
        verbose: bool = False,
    ) -> None:
        self.task_id = task_id
        self.spec_id = spec_id
        self._sink = sink
        self._verbose = verbose
        self._events: list[TraceEvent] = []

    @property
    def events(self) -> list[TraceEvent]:
        """Events recorded so far."""
        return list(self._events)

    def record(
        self,
        kind: EventKind,
        agent_id: str,
        *,
        point: InterceptionPoint | None = None,
        tier: FtTier | None = None,
        success: bool | None = None,
        payload: str | bytes | None = None,
        detail: Mapping[str, Any] | None = None,
        with_spec: bool = True,
    ) -> TraceEvent:
        """Record one event with the next sequence number."""
        data = dict(detail or {})
        if payload is not None and self._verbose:
            if isinstance(payload, bytes):
                data["payload"] = payload.decode("utf-8", "replace")
            else:
                data["payload"] = payload
        spec_id = None
        if with_spec and self.spec_id != BASELINE_SPEC_ID:
            spec_id = self.spec_id
        event = TraceEvent(
            seq=len(self._events),
            task_id=self.task_id,
            kind=kind,
            agent_id=agent_id,
            spec_id=spec_id,
            point=point,
            tier=tier,
            success=success,
            payload_digest=payload_digest(payload) if payload is not None else None,
            detail=data,
        )
        append(self._sink, event)
        self._events.append(event)
        return event

    def extend(self, events: Iterable[TraceEvent]) -> None:
        """Append events recorded elsewhere, renumbered into this stream."""
        for event in events:
            moved = replace(
                event,
                seq=len(self._events),
                task_id=self.task_id,
                spec_id=self.spec_id if event.spec_id is not None else None,
            )
            append(self._sink, moved)
            self._events.append(moved)

    def finish(
        self,
        success: bool,
        *,
        agent_id: str,
        applicable: bool = True,
        fault_type: FaultType | None = None,
    ) -> TaskOutcome:
        """Record the task_result event and return the outcome it encodes."""
        outcome = TaskOutcome(
            task_id=self.task_id,
            spec_id=self.spec_id,
            success=success,
            ft_summary=summarize_tiers(self._events),
            applicable=applicable,
            fault_type=fault_type,
        )
        event = TraceEvent(
            seq=len(self._events),
            task_id=self.task_id,
            kind=EventKind.TASK_RESULT,
            agent_id=agent_id,
            spec_id=self.spec_id,
            success=success,
            payload_digest=outcome.digest(),
            detail={
                "applicable": applicable,
                "fault_type": str(fault_type) if fault_type else None,
                "ft_summary": outcome.summary_dict(),
            },
        )
        append(self._sink, event)
        self._events.append(event)
        return outcome


# ----------------------------------------------------------------------
# Replay
# ----------------------------------------------------------------------


@dataclass(frozen=True)
class ReplayedTrace:
    """A trace file read back from disk."""

    path: Path
    header: TraceHeader
    events: list[TraceEvent]
    outcome: TaskOutcome | None


def replay(path: str | os.PathLike[str]) -> ReplayedTrace:
    """Read a trace file, check every event and re-derive the outcome.

    Raises:
        CorruptTrace: a line does not parse, an event breaks the ordering
            rules, or the stored task_result disagrees with the events
            (reason ``OutcomeMismatch``). Line numbers are 1-based.

    """
    trace_path = Path(path)
    try:
        text = trace_path.read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as err:
        raise CorruptTrace(trace_path, None, f"unreadable: {err}") from err

    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    elif lines:
        raise CorruptTrace(trace_path, len(lines), "truncated line")
    if not lines:
        raise CorruptTrace(trace_path, 1, "missing header")

    try:
        header = TraceHeader.from_dict(json.loads(lines[0]))
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as err:
        raise CorruptTrace(trace_path, 1, f"bad header: {err}") from err
    if header.hash_algo != HASH_ALGO:
        raise CorruptTrace(trace_path, 1, f"unsupported hash {header.hash_algo}")

    invariants = TaskInvariants(header.task_id)
    events: list[TraceEvent] = []
    result_line: int | None = None
    for number, line in enumerate(lines[1:], start=2):
        try:
            event = TraceEvent.from_dict(json.loads(line))
            invariants.accept(event)
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as err:
            raise CorruptTrace(trace_path, number, f"bad event: {err}") from err
        except InvariantViolation as err:
            raise CorruptTrace(trace_path, number, str(err)) from err
        events.append(event)
        if event.kind is EventKind.TASK_RESULT:
            result_line = number

    outcome = derive_outcome(events)
    if outcome is not None:
        stored = next(e for e in events if e.kind is EventKind.TASK_RESULT)
        if stored.payload_digest != outcome.digest() or stored.detail.get(
            "ft_summary"
        ) != outcome.summary_dict():
            raise CorruptTrace(
                trace_path, result_line, "OutcomeMismatch"
            )
    return ReplayedTrace(path=trace_path, header=header, events=events, outcome=outcome)


def task_trace_path(
    output_dir: str | os.PathLike[str], spec_id: str | None, task_id: str
) -> Path:
    """Location of one task trace: baseline/<task> or traces/<spec>/<task>."""
    name = quote(task_id, safe="-_.") + TRACE_SUFFIX
    if spec_id is None or spec_id == BASELINE_SPEC_ID:
        return Path(output_dir) / BASELINE_DIR / name
    return Path(output_dir) / TRACES_DIR / quote(spec_id, safe="-_.") / name


def iter_trace_files(directory: str | os.PathLike[str]) -> Iterator[Path]:
    """Trace files under a directory tree in sorted order.

    Annotation files share the suffix and are skipped.
    """
    for path in sorted(Path(directory).rglob(f"*{TRACE_SUFFIX}")):
        if path.name != ANNOTATIONS_FILE:
            yield path


def load_traces(directory: str | os.PathLike[str]) -> list[ReplayedTrace]:
    """Replay every trace file under a directory tree."""
    return [replay(path) for path in iter_trace_files(directory)]


def load_outcomes(directory: str | os.PathLike[str]) -> list[TaskOutcome]:
    """Replay every trace under a directory and collect the task outcomes."""
    outcomes: list[TaskOutcome] = []
    for trace in load_traces(directory):
        if trace.outcome is None:
            _LOGGER.warning("Trace %s has no task_result; skipped", trace.path)
            continue
        outcomes.append(trace.outcome)
    return outcomes


# ----------------------------------------------------------------------
# Manifest
# ----------------------------------------------------------------------


def file_digest(path: str | os.PathLike[str]) -> str:
    """Digest of a file's bytes."""
    hasher = hashlib.new(HASH_ALGO)
    with open(path, "rb") as handle:
        for chunk in iter(lambda: handle.read(65536), b""):
            hasher.update(chunk)
    return hasher.hexdigest()


@dataclass
class Manifest:
    """Index of a campaign's output directory."""

    campaign_seed: int | None
    status: str = MANIFEST_COMPLETE
    error: str | None = None
    files: list[dict[str, Any]] = field(default_factory=list)
    specs: list[dict[str, Any]] = field(default_factory=list)
    injector: dict[str, Any] = field(default_factory=dict)
    notes: dict[str, Any] = field(
        default_factory=lambda: {"memory_loss_unit": MEMORY_LOSS_UNIT}
    )
    annotations: list[dict[str, Any]] = field(default_factory=list)

    def add_file(
        self, root: str | os.PathLike[str], path: str | os.PathLike[str], **info: Any
    ) -> None:
        """Register a written file with its digest, relative to root."""
        relative = Path(path).relative_to(root).as_posix()
        self.files.append({"path": relative, HASH_ALGO: file_digest(path), **info})

    def to_dict(self) -> dict[str, Any]:
        """Return the document form."""
        return {
            "schema_version": SCHEMA_VERSION,
            "hash_algo": HASH_ALGO,
            "campaign_seed": self.campaign_seed,
            "status": self.status,
            "error": self.error,
            "files": sorted(self.files, key=lambda f: f["path"]),
            "specs": self.specs,
            "injector": self.injector,
            "notes": self.notes,
            "annotations": self.annotations,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> Manifest:
        """Build a manifest from its document form."""
        return cls(
            campaign_seed=data.get("campaign_seed"),
            status=data.get("status", MANIFEST_COMPLETE),
            error=data.get("error"),
            files=list(data.get("files", [])),
            specs=list(data.get("specs", [])),
            injector=dict(data.get("injector", {})),
            notes=dict(data.get("notes", {})),
            annotations=list(data.get("annotations", [])),
        )


def manifest_path(output_dir: str | os.PathLike[str]) -> Path:
    """Location of the manifest inside an output directory."""
    return Path(output_dir) / MANIFEST_FILE


def ensure_fresh_output(output_dir: str | os.PathLike[str], *, force: bool) -> None:
    """Refuse to reuse an output directory that already has a manifest."""
    path = manifest_path(output_dir)
    if path.exists() and not force:
        raise ManifestExists(f"{path} already exists; pass --force to overwrite")


def write_manifest(output_dir: str | os.PathLike[str], manifest: Manifest) -> Path:
    """Write the manifest document into an output directory."""
    path = manifest_path(output_dir)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(
            json.dumps(manifest.to_dict(), sort_keys=True, indent=2) + "\n",
            encoding="utf-8",
        )
    except OSError as err:
        raise TraceIOError(f"Cannot write manifest {path}: {err}") from err
    _LOGGER.debug("Wrote manifest %s (%s)", path, manifest.status)
    return path


def read_manifest(output_dir: str | os.PathLike[str]) -> Manifest:
    """Read the manifest of an output directory."""
    path = manifest_path(output_dir)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError as err:
        raise ConfigurationError(f"No manifest at {path}") from err
    except (OSError, json.JSONDecodeError) as err:
        raise CorruptTrace(path, None, f"unreadable manifest: {err}") from err
    return Manifest.from_dict(data)


def append_annotations(
    output_dir: str | os.PathLike[str], entry: Mapping[str, Any]
) -> None:
    """Append one annotation record to an existing manifest."""
    manifest = read_manifest(output_dir)
    manifest.annotations.append(dict(entry))
    write_manifest(output_dir, manifest)
