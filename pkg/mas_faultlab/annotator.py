"""Fault-tolerance behavior annotation and annotator agreement.

Traces from the simulator carry tier labels on their ft_triggered / ft_fixed
events and are annotated by rule. Traces from real systems are rendered to a
transcript and classified by a judge model answering in a fixed line grammar.
"""

from __future__ import annotations

import asyncio
import json
import logging
import os
import re
from collections import Counter
from collections.abc import Hashable, Iterable, Mapping, Sequence
from dataclasses import dataclass, field
from enum import StrEnum
from fractions import Fraction
from functools import cache
from importlib import resources
from pathlib import Path
from typing import Any

import jinja2
import voluptuous as vol

from .const import (
    DEFAULT_CONTEXT_BUDGET,
    DEFAULT_JUDGE_MODEL,
    DEFAULT_KEEP_LAST_EVENTS,
    DEFAULT_MAX_IN_FLIGHT,
    DEFAULT_MAX_RETRIES,
    SCHEMA_VERSION,
)
from .errors import AnalysisError, ConfigurationError
from .injector import InjectorEndpoint, InjectorUnavailable
from .taxonomy import FaultType, FtTier
from .tracelog import (
    CorruptTrace,
    EventKind,
    InvariantViolation,
    ReplayedTrace,
    TaskInvariants,
    TraceEvent,
    canonical_json,
)

_LOGGER = logging.getLogger(__name__)

CATALOG_FILE = "behavior_catalog.json"
JUDGE_TEMPLATE_FILE = "judge_prompt.md.j2"

MODE_RULE = "rule"
MODE_JUDGE = "judge"

TIER_DEFINITIONS: dict[FtTier, str] = {
    FtTier.MECHANISM: (
        "structural design and temporal redundancy of the system, such as "
        "critique loops, voting, retries and redundant execution paths"
    ),
    FtTier.RULE: (
        "explicit procedural logic and heuristic rules, such as filters, "
        "format validation and loop guards"
    ),
    FtTier.PROMPT: (
        "semantic robustness of the prompts, such as role specifications "
        "that keep an agent on its task"
    ),
    FtTier.REASONING: (
        "the agent's own high-level reflection, such as noticing and "
        "correcting wrong inputs"
    ),
}


class CatalogError(ConfigurationError):
    """Raised when the behavior catalog is malformed."""


class JudgeUnavailable(AnalysisError):
    """Raised when the judge endpoint cannot be reached."""


class UnparseableVerdict(AnalysisError):
    """Raised when the judge never answers in the verdict grammar."""


class LengthMismatch(AnalysisError):
    """Raised when two label sequences differ in length."""


class EmptyInput(AnalysisError):
    """Raised when agreement is asked for over no labels."""


class TierOutcome(StrEnum):
    """Outcome of one fault-tolerance tier in one task."""

    SUCCESS = "Success"
    FAILURE = "Failure"
    INACTIVE = "Inactive"

    @property
    def code(self) -> str:
        """One-letter form used by the catalog and the verdict grammar."""
        return self.value[0]

    @classmethod
    def from_code(cls, code: str) -> TierOutcome:
        """Parse S, F or I."""
        for outcome in cls:
            if outcome.code == code:
                return outcome
        raise ValueError(f"unknown outcome code {code!r}")


@dataclass(frozen=True)
class BehaviorTag:
    """Per-tier outcomes of one task plus an optional behavior label."""

    outcomes: Mapping[FtTier, TierOutcome]
    label: str | None = None
    provenance: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if set(self.outcomes) != set(FtTier):
            raise ValueError("a behavior tag needs exactly one outcome per tier")

    @property
    def labels(self) -> tuple[TierOutcome, ...]:
        """Outcomes in tier order."""
        return tuple(self.outcomes[tier] for tier in FtTier)

    def to_dict(self) -> dict[str, Any]:
        """Return the record form."""
        return {
            "outcomes": {str(t): str(self.outcomes[t]) for t in FtTier},
            "label": self.label,
            "provenance": dict(self.provenance),
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> BehaviorTag:
        """Build a tag from its record form."""
        return cls(
            outcomes={
                FtTier(tier): TierOutcome(outcome)
                for tier, outcome in data["outcomes"].items()
            },
            label=data.get("label"),
            provenance=data.get("provenance") or {},
        )


# ----------------------------------------------------------------------
# Behavior catalog
# ----------------------------------------------------------------------

_OUTCOME_CODE = vol.In([o.code for o in TierOutcome])

CATALOG_SCHEMA = vol.Schema(
    {
        vol.Required("schema_version"): SCHEMA_VERSION,
        vol.Required("catalog_version"): str,
        vol.Required("groups"): [
            {
                vol.Required("name"): vol.All(str, vol.Length(min=1)),
                vol.Required("fault_types"): vol.All(
                    [vol.In([str(f) for f in FaultType])], vol.Length(min=1)
                ),
                vol.Required("behaviors"): [
                    {
                        vol.Required("label"): vol.All(str, vol.Length(min=1)),
                        vol.Required("signature"): {
                            vol.Optional(str(t)): _OUTCOME_CODE for t in FtTier
                        },
                    }
                ],
            }
        ],
    }
)


@dataclass(frozen=True)
class Behavior:
    """One catalogued behavior and its tier-outcome signature."""

    label: str
    signature: Mapping[FtTier, TierOutcome]

    def matches(self, tag: BehaviorTag) -> bool:
        """True when the tag's outcomes equal this signature."""
        return all(tag.outcomes[t] is self.signature[t] for t in FtTier)

    @property
    def signature_text(self) -> str:
        """Compact ``Tier=Code`` rendering, inactive tiers omitted."""
        parts = [
            f"{t}={self.signature[t].code}"
            for t in FtTier
            if self.signature[t] is not TierOutcome.INACTIVE
        ]
        return ", ".join(parts) or "no tier active"


@dataclass(frozen=True)
class BehaviorGroup:
    """Catalogued behaviors of one fault group."""

    name: str
    fault_types: tuple[FaultType, ...]
    behaviors: tuple[Behavior, ...]


def _reject_duplicate_keys(pairs: list[tuple[str, Any]]) -> dict[str, Any]:
    keys = [key for key, _ in pairs]
    duplicates = sorted({k for k in keys if keys.count(k) > 1})
    if duplicates:
        raise CatalogError(f"duplicate key(s) {', '.join(duplicates)} in catalog")
    return dict(pairs)


class BehaviorCatalog:
    """Versioned catalog of fault-tolerance behaviors per fault group."""

    def __init__(self, document: Mapping[str, Any]) -> None:
        try:
            checked = CATALOG_SCHEMA(dict(document))
        except vol.Invalid as err:
            raise CatalogError(f"Malformed behavior catalog: {err}") from err
        self.version: str = checked["catalog_version"]
        self.groups = tuple(
            BehaviorGroup(
                name=group["name"],
                fault_types=tuple(FaultType(f) for f in group["fault_types"]),
                behaviors=tuple(
                    Behavior(
                        label=b["label"],
                        signature={
                            t: TierOutcome.from_code(b["signature"].get(str(t), "I"))
                            for t in FtTier
                        },
                    )
                    for b in group["behaviors"]
                ),
            )
            for group in checked["groups"]
        )
        self._by_type: dict[FaultType, BehaviorGroup] = {}
        for group in self.groups:
            for fault_type in group.fault_types:
                if fault_type in self._by_type:
                    raise CatalogError(f"{fault_type} appears in two groups")
                self._by_type[fault_type] = group
        missing = [str(f) for f in FaultType if f not in self._by_type]
        if missing:
            raise CatalogError(f"catalog lacks fault type(s) {', '.join(missing)}")

    @classmethod
    def from_json(cls, text: str) -> BehaviorCatalog:
        """Parse a catalog document; a tier given twice in one cell is an error."""
        try:
            document = json.loads(text, object_pairs_hook=_reject_duplicate_keys)
        except json.JSONDecodeError as err:
            raise CatalogError(f"Behavior catalog is not JSON: {err}") from err
        return cls(document)

    @classmethod
    def load(cls) -> BehaviorCatalog:
        """Load the catalog shipped with the package."""
        return _shipped_catalog()

    def group(self, fault_type: FaultType) -> BehaviorGroup:
        """The group a fault type belongs to."""
        return self._by_type[fault_type]

    def behaviors(self, fault_type: FaultType | None) -> tuple[Behavior, ...]:
        """Catalogued behaviors of a fault type (none for baseline runs)."""
        if fault_type is None:
            return ()
        return self.group(fault_type).behaviors

    def match(self, fault_type: FaultType | None, tag: BehaviorTag) -> str | None:
        """Label of the first behavior whose signature equals the tag."""
        return next(
            (b.label for b in self.behaviors(fault_type) if b.matches(tag)), None
        )


@cache
def _shipped_catalog() -> BehaviorCatalog:
    text = resources.files(__package__).joinpath(CATALOG_FILE).read_text("utf-8")
    return BehaviorCatalog.from_json(text)


# ----------------------------------------------------------------------
# Rule-based annotation
# ----------------------------------------------------------------------


def _checked_events(
    trace: ReplayedTrace | Sequence[TraceEvent],
) -> tuple[list[TraceEvent], FaultType | None]:
    if isinstance(trace, ReplayedTrace):
        fault_type = trace.header.fault_type
        if fault_type is None and trace.outcome is not None:
            fault_type = trace.outcome.fault_type
        return trace.events, fault_type

    events = list(trace)
    if events:
        invariants = TaskInvariants(events[0].task_id)
        for event in events:
            try:
                invariants.accept(event)
            except InvariantViolation as err:
                raise CorruptTrace("<events>", event.seq, str(err)) from err
    result = next((e for e in events if e.kind is EventKind.TASK_RESULT), None)
    raw = result.detail.get("fault_type") if result is not None else None
    return events, FaultType(raw) if raw else None


def annotate_rule_based(
    trace: ReplayedTrace | Sequence[TraceEvent],
    catalog: BehaviorCatalog | None = None,
) -> BehaviorTag:
    """Tag a trace from its tier-labeled fault-tolerance events.

    A tier is Inactive without an ft_triggered event, Success when it also
    fixed and Failure otherwise. The label is the first catalogued behavior
    of the trace's fault type with the same signature.

    Raises:
        CorruptTrace: the events break the trace ordering rules.
    """
    events, fault_type = _checked_events(trace)
    triggered = {e.tier for e in events if e.kind is EventKind.FT_TRIGGERED}
    fixed = {e.tier for e in events if e.kind is EventKind.FT_FIXED}
    outcomes = {
        tier: (
            TierOutcome.INACTIVE
            if tier not in triggered
            else TierOutcome.SUCCESS
            if tier in fixed
            else TierOutcome.FAILURE
        )
        for tier in FtTier
    }
    tag = BehaviorTag(outcomes=outcomes, provenance={"mode": MODE_RULE})
    if catalog is None:
        catalog = BehaviorCatalog.load()
    label = catalog.match(fault_type, tag)
    return BehaviorTag(outcomes=outcomes, label=label, provenance=tag.provenance)


# ----------------------------------------------------------------------
# Judge annotation
# ----------------------------------------------------------------------

_VERDICT = re.compile(
    r"MECHANISM=([SFI])\s+RULE=([SFI])\s+PROMPT=([SFI])\s+REASONING=([SFI])"
    r"(?:\s+LABEL=([^\n]*))?"
)


def parse_verdict(text: str) -> BehaviorTag | None:
    """Parse a judge answer; None when no line matches the grammar."""
    match = _VERDICT.search(text)
    if match is None:
        return None
    outcomes = {
        tier: TierOutcome.from_code(code)
        for tier, code in zip(FtTier, match.groups()[:4], strict=True)
    }
    label = (match.group(5) or "").strip()
    if label.lower() in ("", "none"):
        label = ""
    return BehaviorTag(outcomes=outcomes, label=label or None)


def _event_line(event: TraceEvent) -> str:
    parts = [f"[{event.seq}] {event.kind} agent={event.agent_id}"]
    if event.point is not None:
        parts.append(f"point={event.point}")
    if event.tier is not None:
        parts.append(f"tier={event.tier}")
    if event.success is not None:
        parts.append(f"success={str(event.success).lower()}")
    if event.detail:
        parts.append(canonical_json(event.detail))
    return " ".join(parts)


def render_transcript(events: Sequence[TraceEvent]) -> str:
    """One line per event, in stream order."""
    return "\n".join(_event_line(e) for e in events)


@dataclass(frozen=True)
class Transcript:
    """A rendered trace and how much of it was kept."""

    text: str
    events_kept: int
    events_total: int

    @property
    def summarized(self) -> bool:
        return self.events_kept < self.events_total


def fit_transcript(
    events: Sequence[TraceEvent],
    *,
    budget: int = DEFAULT_CONTEXT_BUDGET,
    keep_last: int = DEFAULT_KEEP_LAST_EVENTS,
) -> Transcript:
    """Render a trace within a character budget.

    Over budget, only the last ``keep_last`` events are kept, halving that
    count until the text fits.
    """
    text = render_transcript(events)
    if len(text) <= budget:
        return Transcript(text, len(events), len(events))
    kept = min(keep_last, len(events))
    while True:
        text = render_transcript(events[len(events) - kept :])
        if len(text) <= budget or kept == 0:
            break
        kept //= 2
    if len(text) > budget:
        text = text[:budget]
    return Transcript(text, kept, len(events))


@cache
def _judge_template() -> jinja2.Template:
    source = resources.files(__package__).joinpath(JUDGE_TEMPLATE_FILE)
    env = jinja2.Environment(
        autoescape=False,
        undefined=jinja2.StrictUndefined,
        trim_blocks=True,
        lstrip_blocks=True,
    )
    return env.from_string(source.read_text("utf-8"))


def render_judge_prompt(
    fault_type: FaultType | None,
    catalog: BehaviorCatalog,
    transcript: Transcript,
) -> str:
    """Judge prompt with tier definitions, catalog rows and the transcript."""
    return _judge_template().render(
        fault_type=str(fault_type) if fault_type else "none (baseline)",
        tiers=[(str(t), TIER_DEFINITIONS[t]) for t in FtTier],
        behaviors=catalog.behaviors(fault_type),
        transcript=transcript.text,
        summarized=transcript.summarized,
        events_kept=transcript.events_kept,
        events_total=transcript.events_total,
    )


async def annotate_llm(
    trace: ReplayedTrace | Sequence[TraceEvent],
    catalog: BehaviorCatalog,
    judge: InjectorEndpoint,
    *,
    model: str = DEFAULT_JUDGE_MODEL,
    max_retries: int = DEFAULT_MAX_RETRIES,
    context_budget: int = DEFAULT_CONTEXT_BUDGET,
    keep_last: int = DEFAULT_KEEP_LAST_EVENTS,
    seed: int = 0,
) -> BehaviorTag:
    """Ask a judge model for the trace's tier outcomes.

    Unparseable answers are retried up to ``max_retries`` times, each attempt
    with ``seed + attempt``.

    Raises:
        JudgeUnavailable: the endpoint failed.
        UnparseableVerdict: no attempt matched the verdict grammar.
    """
    events, fault_type = _checked_events(trace)
    transcript = fit_transcript(events, budget=context_budget, keep_last=keep_last)
    prompt = render_judge_prompt(fault_type, catalog, transcript)
    provenance: dict[str, Any] = {
        "mode": MODE_JUDGE,
        "model": model,
        "summarized": transcript.summarized,
        "events_kept": transcript.events_kept,
        "events_total": transcript.events_total,
        "transcript_chars": len(transcript.text),
    }
    for attempt in range(max_retries + 1):
        payload = {
            "model": model,
            "messages": [{"role": "user", "content": prompt}],
            "seed": seed + attempt,
            "temperature": 0,
        }
        try:
            answer = await judge.complete(payload)
        except InjectorUnavailable as err:
            raise JudgeUnavailable(f"Judge request failed: {err}") from err
        tag = parse_verdict(answer)
        if tag is not None:
            provenance["attempts"] = attempt + 1
            return BehaviorTag(
                outcomes=tag.outcomes, label=tag.label, provenance=provenance
            )
        _LOGGER.warning(
            "Unparseable judge verdict (attempt %d of %d)", attempt + 1, max_retries + 1
        )
    raise UnparseableVerdict(
        f"judge gave no parseable verdict in {max_retries + 1} attempt(s)"
    )


# ----------------------------------------------------------------------
# Annotation files
# ----------------------------------------------------------------------


@dataclass(frozen=True)
class AnnotationRecord:
    """The tag of one trace, keyed by spec and task."""

    spec_id: str
    task_id: str
    fault_type: FaultType | None
    tag: BehaviorTag

    @property
    def key(self) -> tuple[str, str]:
        return (self.spec_id, self.task_id)

    def to_dict(self) -> dict[str, Any]:
        return {
            "spec_id": self.spec_id,
            "task_id": self.task_id,
            "fault_type": str(self.fault_type) if self.fault_type else None,
            **self.tag.to_dict(),
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> AnnotationRecord:
        fault_type = data.get("fault_type")
        return cls(
            spec_id=data["spec_id"],
            task_id=data["task_id"],
            fault_type=FaultType(fault_type) if fault_type else None,
            tag=BehaviorTag.from_dict(data),
        )


def _record(trace: ReplayedTrace, tag: BehaviorTag) -> AnnotationRecord:
    fault_type = trace.header.fault_type
    return AnnotationRecord(trace.header.spec_id, trace.header.task_id, fault_type, tag)


def annotate_traces(
    traces: Iterable[ReplayedTrace], catalog: BehaviorCatalog | None = None
) -> list[AnnotationRecord]:
    """Rule-based annotation of every trace."""
    catalog = catalog or BehaviorCatalog.load()
    return [_record(t, annotate_rule_based(t, catalog)) for t in traces]


async def annotate_traces_llm(
    traces: Sequence[ReplayedTrace],
    judge: InjectorEndpoint,
    *,
    catalog: BehaviorCatalog | None = None,
    max_in_flight: int = DEFAULT_MAX_IN_FLIGHT,
    **options: Any,
) -> list[AnnotationRecord]:
    """Judge annotation of every trace with at most max_in_flight calls."""
    catalog = catalog or BehaviorCatalog.load()
    gate = asyncio.Semaphore(max_in_flight)

    async def one(trace: ReplayedTrace) -> AnnotationRecord:
        async with gate:
            tag = await annotate_llm(trace, catalog, judge, **options)
        return _record(trace, tag)

    return list(await asyncio.gather(*(one(t) for t in traces)))


def write_annotations(
    path: str | os.PathLike[str], records: Iterable[AnnotationRecord]
) -> Path:
    """Write records as JSON lines sorted by spec and task."""
    target = Path(path)
    ordered = sorted(records, key=lambda r: r.key)
    target.write_text(
        "".join(canonical_json(r.to_dict()) + "\n" for r in ordered), encoding="utf-8"
    )
    return target


def read_annotations(path: str | os.PathLike[str]) -> list[AnnotationRecord]:
    """Read an annotation file."""
    records: list[AnnotationRecord] = []
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as err:
        raise ConfigurationError(f"Cannot read annotations {path}: {err}") from err
    for number, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            records.append(AnnotationRecord.from_dict(json.loads(line)))
        except (json.JSONDecodeError, KeyError, ValueError) as err:
            raise CorruptTrace(path, number, f"bad annotation: {err}") from err
    return records


# ----------------------------------------------------------------------
# Agreement
# ----------------------------------------------------------------------


def cohen_kappa(a: Sequence[Hashable], b: Sequence[Hashable]) -> float:
    """Cohen's kappa of two label sequences.

    Defined as 1.0 when chance agreement is 1 and the raters agree fully.
    """
    if len(a) != len(b):
        raise LengthMismatch(f"sequences differ in length ({len(a)} != {len(b)})")
    if not a:
        raise EmptyInput("no labels to compare")
    n = len(a)
    observed = Fraction(sum(x == y for x, y in zip(a, b, strict=True)), n)
    counts_a, counts_b = Counter(a), Counter(b)
    expected = sum(
        (Fraction(counts_a[k] * counts_b[k], n * n) for k in counts_a), Fraction(0)
    )
    if expected == 1:
        return 1.0 if observed == 1 else 0.0
    return float((observed - expected) / (1 - expected))


def _tier_labels(
    tags_a: Sequence[BehaviorTag], tags_b: Sequence[BehaviorTag], tier: FtTier
) -> tuple[list[TierOutcome], list[TierOutcome]]:
    return [t.outcomes[tier] for t in tags_a], [t.outcomes[tier] for t in tags_b]


def per_tier_kappa(
    tags_a: Sequence[BehaviorTag], tags_b: Sequence[BehaviorTag]
) -> dict[FtTier, float]:
    """Kappa over the three-valued outcome of each tier."""
    return {tier: cohen_kappa(*_tier_labels(tags_a, tags_b, tier)) for tier in FtTier}


def pooled_kappa(tags_a: Sequence[BehaviorTag], tags_b: Sequence[BehaviorTag]) -> float:
    """Kappa over all (task, tier) outcomes together."""
    if len(tags_a) != len(tags_b):
        raise LengthMismatch(f"tag lists differ ({len(tags_a)} != {len(tags_b)})")
    return cohen_kappa(
        [o for t in tags_a for o in t.labels], [o for t in tags_b for o in t.labels]
    )


@dataclass(frozen=True)
class Agreement:
    """Pooled and per-tier kappa between two annotation sets."""

    pooled: float
    per_tier: Mapping[FtTier, float]
    items: int

    def to_dict(self) -> dict[str, Any]:
        return {
            "pooled": self.pooled,
            "per_tier": {str(t): self.per_tier[t] for t in FtTier},
            "items": self.items,
        }


def compare_annotations(
    a: Sequence[AnnotationRecord], b: Sequence[AnnotationRecord]
) -> Agreement:
    """Agreement between two annotation sets covering the same traces."""
    by_key_a = {r.key: r.tag for r in a}
    by_key_b = {r.key: r.tag for r in b}
    if by_key_a.keys() != by_key_b.keys():
        raise LengthMismatch("annotation sets cover different traces")
    keys = sorted(by_key_a)
    tags_a = [by_key_a[k] for k in keys]
    tags_b = [by_key_b[k] for k in keys]
    return Agreement(
        pooled=pooled_kappa(tags_a, tags_b),
        per_tier=per_tier_kappa(tags_a, tags_b),
        items=len(keys),
    )
