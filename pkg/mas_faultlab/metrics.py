"""System-level and process-level robustness metrics."""

from __future__ import annotations

import json
import logging
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field
from enum import StrEnum
from typing import Any

from .const import MEMORY_LOSS_UNIT, SCHEMA_VERSION
from .errors import AnalysisError, ConfigurationError
from .taxonomy import FaultType
from .tracelog import TaskOutcome

_LOGGER = logging.getLogger(__name__)


class EmptyBaseline(AnalysisError):
    """Raised when no task succeeds at baseline."""


class MissingInjectedRun(AnalysisError):
    """Raised when a baseline-successful task lacks an injected outcome."""


class EmptyTraceSet(AnalysisError):
    """Raised when process metrics are asked for over no tasks."""


class UnknownReportFormat(ConfigurationError):
    """Raised for a report format other than json or table."""


class ReportFormat(StrEnum):
    """Supported report renderings."""

    JSON = "json"
    TABLE = "table"


# ----------------------------------------------------------------------
# Robustness score
# ----------------------------------------------------------------------


def baseline_tasks(baseline: Iterable[TaskOutcome]) -> set[str]:
    """T_base: ids of the tasks that succeed without any fault."""
    return {o.task_id for o in baseline if o.success}


def robustness_score(
    baseline: Iterable[TaskOutcome],
    injected: Iterable[TaskOutcome],
    fault_type: FaultType,
    *,
    applicable_only: bool = False,
) -> float:
    """Share of baseline-successful tasks that still succeed under a fault.

    Every spec of the fault type must cover every task of T_base; with several
    specs the score is taken over all (spec, task) pairs.

    Raises:
        EmptyBaseline: no task succeeds at baseline.
        MissingInjectedRun: a T_base task has no injected outcome.
    """
    t_base = baseline_tasks(baseline)
    if not t_base:
        raise EmptyBaseline("no task succeeds at baseline")

    by_spec: dict[str, dict[str, TaskOutcome]] = {}
    for outcome in injected:
        if outcome.fault_type is fault_type and outcome.task_id in t_base:
            by_spec.setdefault(outcome.spec_id, {})[outcome.task_id] = outcome
    if not by_spec:
        raise MissingInjectedRun(f"no injected outcome for {fault_type}")

    runs: list[TaskOutcome] = []
    for spec_id, outcomes in sorted(by_spec.items()):
        missing = sorted(t_base - outcomes.keys())
        if missing:
            raise MissingInjectedRun(
                f"spec {spec_id} has no outcome for task(s) {', '.join(missing)}"
            )
        runs.extend(outcomes[task_id] for task_id in sorted(t_base))

    if applicable_only:
        runs = [o for o in runs if o.applicable]
        if not runs:
            raise EmptyBaseline(f"no T_base task is applicable to {fault_type}")
    return sum(o.success for o in runs) / len(runs)


# ----------------------------------------------------------------------
# Process metrics
# ----------------------------------------------------------------------


@dataclass(frozen=True)
class ProcessMetrics:
    """Observation, localization and success rates with their counters.

    ``localization`` and ``success`` are None when nothing triggered.
    """

    n_total: int
    n_trigger: int
    n_fixed: int
    n_final_success: int

    def __post_init__(self) -> None:
        assert 0 <= self.n_fixed <= self.n_trigger <= self.n_total
        assert self.n_final_success <= self.n_trigger

    @property
    def observation(self) -> float:
        return self.n_trigger / self.n_total

    @property
    def localization(self) -> float | None:
        return self.n_fixed / self.n_trigger if self.n_trigger else None

    @property
    def success(self) -> float | None:
        return self.n_final_success / self.n_trigger if self.n_trigger else None


def process_metrics(outcomes: Iterable[TaskOutcome]) -> ProcessMetrics:
    """Fold task outcomes of one fault type into O, L and S.

    A task counts as fixed when any tier fixed, and as a final success only
    when it also triggered.
    """
    items = list(outcomes)
    if not items:
        raise EmptyTraceSet("no task outcomes to measure")
    triggered = [o for o in items if o.triggered]
    return ProcessMetrics(
        n_total=len(items),
        n_trigger=len(triggered),
        n_fixed=sum(o.fixed for o in triggered),
        n_final_success=sum(o.success for o in triggered),
    )


# ----------------------------------------------------------------------
# Reports
# ----------------------------------------------------------------------


@dataclass(frozen=True)
class MetricsReport:
    """Metrics and raw counters of one fault type."""

    fault_type: FaultType
    robustness: float
    process: ProcessMetrics
    t_base: int
    n_success: int
    n_total_all: int
    n_total_applicable: int
    applicable_only: bool = False
    spec_ids: tuple[str, ...] = ()
    offline_fallback: bool = False
    notes: Mapping[str, Any] = field(default_factory=dict)

    @property
    def n_inapplicable(self) -> int:
        """Tasks excluded as fault-inapplicable."""
        return self.n_total_all - self.n_total_applicable

    def to_dict(self) -> dict[str, Any]:
        """Return the structured report row."""
        return {
            "fault_type": str(self.fault_type),
            "RS": self.robustness,
            "O": self.process.observation,
            "L": self.process.localization,
            "S": self.process.success,
            "counters": {
                "T_base": self.t_base,
                "N_success": self.n_success,
                "N_total": self.process.n_total,
                "N_total_all": self.n_total_all,
                "N_total_applicable": self.n_total_applicable,
                "N_trigger": self.process.n_trigger,
                "N_fixed": self.process.n_fixed,
                "N_final_success": self.process.n_final_success,
            },
            "applicability": {
                "applicable_only": self.applicable_only,
                "inapplicable_tasks": self.n_inapplicable,
            },
            "spec_ids": list(self.spec_ids),
            "offline_fallback": self.offline_fallback,
            "notes": dict(self.notes),
        }


def build_reports(
    baseline: Sequence[TaskOutcome],
    injected: Sequence[TaskOutcome],
    *,
    applicable_only: bool = False,
    offline_fallback: Mapping[str, bool] | None = None,
) -> list[MetricsReport]:
    """One report per injected fault type, in catalog order.

    ``offline_fallback`` maps spec ids to the flag recorded in the manifest.
    """
    flags = offline_fallback or {}
    t_base = baseline_tasks(baseline)
    reports: list[MetricsReport] = []
    for fault_type in FaultType:
        outcomes = [o for o in injected if o.fault_type is fault_type]
        if not outcomes:
            continue
        applicable = [o for o in outcomes if o.applicable]
        measured = applicable if applicable_only else outcomes
        if not measured:
            _LOGGER.warning("No applicable task for %s; report skipped", fault_type)
            continue
        rs = robustness_score(
            baseline, injected, fault_type, applicable_only=applicable_only
        )
        spec_ids = tuple(sorted({o.spec_id for o in outcomes}))
        notes: dict[str, Any] = {}
        if fault_type is FaultType.MEMORY_LOSS:
            notes["memory_loss_unit"] = MEMORY_LOSS_UNIT
        reports.append(
            MetricsReport(
                fault_type=fault_type,
                robustness=rs,
                process=process_metrics(measured),
                t_base=len(t_base),
                n_success=sum(o.success for o in measured if o.task_id in t_base),
                n_total_all=len(outcomes),
                n_total_applicable=len(applicable),
                applicable_only=applicable_only,
                spec_ids=spec_ids,
                offline_fallback=any(flags.get(s, False) for s in spec_ids),
                notes=notes,
            )
        )
    _LOGGER.debug("Built %d report(s)", len(reports))
    return reports


def _fmt(value: float | None) -> str:
    return "n/a" if value is None else f"{value:.3f}"


_COLUMNS = (
    "fault_type",
    "RS",
    "O",
    "L",
    "S",
    "T_base",
    "N_success",
    "N_total",
    "N_applicable",
    "N_trigger",
    "N_fixed",
    "N_final",
    "offline",
)


def _table(reports: Sequence[MetricsReport]) -> str:
    rows = [list(_COLUMNS)]
    for r in reports:
        rows.append(
            [
                str(r.fault_type),
                _fmt(r.robustness),
                _fmt(r.process.observation),
                _fmt(r.process.localization),
                _fmt(r.process.success),
                str(r.t_base),
                str(r.n_success),
                str(r.n_total_all),
                str(r.n_total_applicable),
                str(r.process.n_trigger),
                str(r.process.n_fixed),
                str(r.process.n_final_success),
                "yes" if r.offline_fallback else "no",
            ]
        )
    widths = [max(len(row[i]) for row in rows) for i in range(len(_COLUMNS))]
    lines = [
        "  ".join(
            cell.ljust(w) if i == 0 else cell.rjust(w)
            for i, (cell, w) in enumerate(zip(row, widths, strict=True))
        ).rstrip()
        for row in rows
    ]
    lines.insert(1, "  ".join("-" * w for w in widths))
    excluded = sum(r.n_inapplicable for r in reports)
    lines.append("")
    note = f"Fault-inapplicable tasks: {excluded}"
    if any(r.applicable_only for r in reports):
        note += " (excluded from N_total)"
    lines.append(note)
    lines.append(f"Memory loss counted in {MEMORY_LOSS_UNIT}.")
    return "\n".join(lines) + "\n"


def render_report(
    reports: Sequence[MetricsReport], fmt: ReportFormat | str = ReportFormat.JSON
) -> bytes:
    """Render reports as a structured document or a plain-text table."""
    try:
        fmt = ReportFormat(fmt)
    except ValueError as err:
        raise UnknownReportFormat(f"Unknown report format: {fmt}") from err
    ordered = sorted(reports, key=lambda r: list(FaultType).index(r.fault_type))
    if fmt is ReportFormat.TABLE:
        return _table(ordered).encode("utf-8")
    document = {
        "schema_version": SCHEMA_VERSION,
        "memory_loss_unit": MEMORY_LOSS_UNIT,
        "reports": [r.to_dict() for r in ordered],
    }
    return (json.dumps(document, indent=2, sort_keys=True) + "\n").encode("utf-8")
