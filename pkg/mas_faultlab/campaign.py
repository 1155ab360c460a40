"""Campaign documents: strict parsing, validation and canonical serialization."""

from __future__ import annotations

import json
import logging
from collections.abc import Mapping
from dataclasses import dataclass, field
from typing import Any

import voluptuous as vol

from .const import (
    CONF_AGENT,
    CONF_AGENT_MAPPING,
    CONF_BASELINE_REF,
    CONF_CAMPAIGN_SEED,
    CONF_ENDPOINT,
    CONF_EXECUTION_TARGET,
    CONF_FAULT_SPECS,
    CONF_FAULT_TYPE,
    CONF_HEADER,
    CONF_INJECTOR,
    CONF_KIND,
    CONF_MATCH,
    CONF_MAX_RETRIES,
    CONF_MODE,
    CONF_MODEL,
    CONF_OUTPUT_DIR,
    CONF_PARAMS,
    CONF_PATTERNS,
    CONF_POINT,
    CONF_PRESET,
    CONF_RECIPIENT,
    CONF_SCENARIO,
    CONF_SCHEMA_VERSION,
    CONF_SEED,
    CONF_SENDER,
    CONF_SPEC_ID,
    CONF_TARGET,
    CONF_TASK_ID,
    CONF_TASK_INPUT,
    CONF_TASK_SOLVABLE,
    CONF_TASKS,
    CONF_THRESHOLDS,
    CONF_TIMEOUT,
    CONF_UPSTREAM,
    DEFAULT_INJECTOR_MODEL,
    DEFAULT_KEYWORDS_RETAINED_AMBIGUITY,
    DEFAULT_KEYWORDS_RETAINED_CONFLICT,
    DEFAULT_MAX_RETRIES,
    HEADER_AGENT,
    READ_TIMEOUT,
    SCHEMA_VERSION,
    SEED_MAX,
    TARGET_KIND_AGENT,
    TARGET_KIND_EDGE,
    TARGET_KIND_GATEWAY,
    TARGET_KIND_SIMULATOR,
)
from .errors import ConfigurationError
from .scenarios import Scenario, resolve_scenario, scenario_to_dict
from .taxonomy import (
    FaultSpec,
    FaultType,
    InjectionMode,
    InterceptionPoint,
    TargetKind,
    TargetSelector,
    Violation,
    ViolationCode,
    default_mode,
    interception_point_of,
    validate_spec,
)

_LOGGER = logging.getLogger(__name__)

MAPPING_MODE_HEADER = "header"
MAPPING_MODE_PREFIX = "prefix"

THRESHOLD_CONFLICT = "conflict"
THRESHOLD_AMBIGUITY = "ambiguity"


class ParseError(ConfigurationError):
    """Raised when a campaign document is not well-formed JSON."""


class SchemaError(ConfigurationError):
    """Raised when a campaign document has missing or unknown fields."""


class ValidationError(ConfigurationError):
    """Raised when fault specs or ids violate campaign invariants."""

    def __init__(self, violations: list[Violation]) -> None:
        self.violations = violations
        super().__init__("; ".join(str(v) for v in violations))


# ----------------------------------------------------------------------
# Schemas
# ----------------------------------------------------------------------

def _not_bool(value: Any) -> Any:
    if isinstance(value, bool):
        raise vol.Invalid("expected an integer, got a boolean")
    return value


_SEED = vol.All(_not_bool, int, vol.Range(min=0, max=SEED_MAX))
_TEXT = vol.All(str, vol.Length(min=1))

TASK_SCHEMA = vol.Schema(
    {
        vol.Required(CONF_TASK_ID): _TEXT,
        vol.Required(CONF_TASK_INPUT): str,
        vol.Optional(CONF_TASK_SOLVABLE, default=True): bool,
    }
)

TARGET_SCHEMA = vol.Schema(
    {
        vol.Required(CONF_KIND): vol.In([TARGET_KIND_AGENT, TARGET_KIND_EDGE]),
        vol.Optional(CONF_AGENT): str,
        vol.Optional(CONF_POINT): vol.In([p.value for p in InterceptionPoint]),
        vol.Optional(CONF_SENDER): str,
        vol.Optional(CONF_RECIPIENT): str,
    }
)

SPEC_SCHEMA = vol.Schema(
    {
        vol.Required(CONF_SPEC_ID): str,
        vol.Required(CONF_FAULT_TYPE): vol.In([f.value for f in FaultType]),
        vol.Required(CONF_TARGET): TARGET_SCHEMA,
        vol.Optional(CONF_PARAMS, default=dict): {str: object},
        vol.Optional(CONF_MODE): vol.In([m.value for m in InjectionMode]),
        vol.Optional(CONF_SEED): _SEED,
    }
)

PATTERN_SCHEMA = vol.Schema(
    {
        vol.Required(CONF_MATCH): _TEXT,
        vol.Required(CONF_AGENT): _TEXT,
    }
)

AGENT_MAPPING_SCHEMA = vol.Schema(
    {
        vol.Required(CONF_MODE, default=MAPPING_MODE_HEADER): vol.In(
            [MAPPING_MODE_HEADER, MAPPING_MODE_PREFIX]
        ),
        vol.Optional(CONF_HEADER, default=HEADER_AGENT): _TEXT,
        vol.Optional(CONF_PATTERNS, default=list): [PATTERN_SCHEMA],
    }
)

SIMULATOR_TARGET_SCHEMA = vol.Schema(
    {
        vol.Required(CONF_KIND): TARGET_KIND_SIMULATOR,
        vol.Exclusive(CONF_PRESET, "scenario"): _TEXT,
        vol.Exclusive(CONF_SCENARIO, "scenario"): dict,
    }
)

GATEWAY_TARGET_SCHEMA = vol.Schema(
    {
        vol.Required(CONF_KIND): TARGET_KIND_GATEWAY,
        vol.Required(CONF_UPSTREAM): vol.All(str, vol.Match(r"^https?://")),
        vol.Optional(CONF_AGENT_MAPPING, default=dict): AGENT_MAPPING_SCHEMA,
    }
)

INJECTOR_SCHEMA = vol.Schema(
    {
        vol.Optional(CONF_ENDPOINT): vol.Any(
            None, vol.All(str, vol.Match(r"^https?://"))
        ),
        vol.Optional(CONF_MODEL, default=DEFAULT_INJECTOR_MODEL): _TEXT,
        vol.Optional(CONF_MAX_RETRIES, default=DEFAULT_MAX_RETRIES): vol.All(
            int, vol.Range(min=0)
        ),
        vol.Optional(CONF_TIMEOUT, default=READ_TIMEOUT): vol.All(
            vol.Coerce(float), vol.Range(min=0, min_included=False)
        ),
        vol.Optional(CONF_THRESHOLDS, default=dict): {
            vol.Optional(
                THRESHOLD_CONFLICT, default=DEFAULT_KEYWORDS_RETAINED_CONFLICT
            ): vol.All(vol.Coerce(float), vol.Range(min=0, max=1)),
            vol.Optional(
                THRESHOLD_AMBIGUITY, default=DEFAULT_KEYWORDS_RETAINED_AMBIGUITY
            ): vol.All(vol.Coerce(float), vol.Range(min=0, max=1)),
        },
    }
)

CAMPAIGN_SCHEMA = vol.Schema(
    {
        vol.Required(CONF_SCHEMA_VERSION): vol.All(int, vol.In([SCHEMA_VERSION])),
        vol.Required(CONF_CAMPAIGN_SEED): _SEED,
        vol.Required(CONF_TASKS): vol.All([TASK_SCHEMA], vol.Length(min=1)),
        vol.Optional(CONF_FAULT_SPECS, default=list): [SPEC_SCHEMA],
        vol.Required(CONF_EXECUTION_TARGET): dict,
        vol.Optional(CONF_BASELINE_REF): vol.Any(None, str),
        vol.Required(CONF_OUTPUT_DIR): _TEXT,
        vol.Optional(CONF_INJECTOR, default=dict): INJECTOR_SCHEMA,
    }
)


# ----------------------------------------------------------------------
# Model
# ----------------------------------------------------------------------


@dataclass(frozen=True)
class TaskDescriptor:
    """One task of a campaign."""

    id: str
    input: str
    solvable: bool = True


@dataclass(frozen=True)
class AgentPattern:
    """Maps a system prompt substring to an agent id."""

    match: str
    agent: str


@dataclass(frozen=True)
class AgentMapping:
    """How the gateway recovers agent identity from a request."""

    mode: str = MAPPING_MODE_HEADER
    header: str = HEADER_AGENT
    patterns: tuple[AgentPattern, ...] = ()


@dataclass(frozen=True)
class SimulatorTarget:
    """Run the campaign on a simulated topology."""

    scenario: Scenario
    preset: str | None = None


@dataclass(frozen=True)
class GatewayTarget:
    """Run the campaign through the intercepting gateway."""

    upstream: str
    agent_mapping: AgentMapping = field(default_factory=AgentMapping)


ExecutionTarget = SimulatorTarget | GatewayTarget


@dataclass(frozen=True)
class InjectorSettings:
    """Secondary model used for delegated mutations."""

    endpoint: str | None = None
    model: str = DEFAULT_INJECTOR_MODEL
    max_retries: int = DEFAULT_MAX_RETRIES
    timeout: float = float(READ_TIMEOUT)
    conflict_threshold: float = DEFAULT_KEYWORDS_RETAINED_CONFLICT
    ambiguity_threshold: float = DEFAULT_KEYWORDS_RETAINED_AMBIGUITY

    @property
    def offline(self) -> bool:
        """True when no injector endpoint is configured."""
        return self.endpoint is None


@dataclass(frozen=True)
class CampaignConfig:
    """A full experiment, immutable after parsing."""

    campaign_seed: int
    tasks: tuple[TaskDescriptor, ...]
    fault_specs: tuple[FaultSpec, ...]
    execution_target: ExecutionTarget
    output_dir: str
    baseline_ref: str | None = None
    injector: InjectorSettings = field(default_factory=InjectorSettings)

    def spec(self, spec_id: str) -> FaultSpec:
        """Return the fault spec with the given id."""
        for spec in self.fault_specs:
            if spec.id == spec_id:
                return spec
        raise KeyError(spec_id)


# ----------------------------------------------------------------------
# Parsing
# ----------------------------------------------------------------------


def _schema_error(err: vol.Invalid, where: str) -> SchemaError:
    path = "/".join(str(p) for p in err.path)
    location = f"{where}/{path}" if path else where
    return SchemaError(f"{location}: {err.msg}")


def _run_schema(schema: vol.Schema, data: Any, where: str) -> dict[str, Any]:
    try:
        return schema(data)
    except vol.MultipleInvalid as err:
        raise _schema_error(err.errors[0], where) from err
    except vol.Invalid as err:
        raise _schema_error(err, where) from err


def _build_target(data: Mapping[str, Any], fault_type: FaultType) -> TargetSelector:
    if data[CONF_KIND] == TARGET_KIND_EDGE:
        return TargetSelector(
            kind=TargetKind.EDGE,
            agent=data.get(CONF_AGENT),
            point=InterceptionPoint(data[CONF_POINT]) if CONF_POINT in data else None,
            sender=data.get(CONF_SENDER),
            recipient=data.get(CONF_RECIPIENT),
        )
    point = data.get(CONF_POINT)
    resolved = (
        InterceptionPoint(point) if point else interception_point_of(fault_type)
    )
    return TargetSelector(
        kind=TargetKind.AGENT,
        agent=data.get(CONF_AGENT),
        point=resolved,
        sender=data.get(CONF_SENDER),
        recipient=data.get(CONF_RECIPIENT),
    )


def _build_spec(data: Mapping[str, Any]) -> FaultSpec:
    fault_type = FaultType(data[CONF_FAULT_TYPE])
    mode = data.get(CONF_MODE)
    return FaultSpec(
        id=data[CONF_SPEC_ID],
        fault_type=fault_type,
        target=_build_target(data[CONF_TARGET], fault_type),
        params=dict(data[CONF_PARAMS]),
        mode=InjectionMode(mode) if mode else default_mode(fault_type),
        seed=data.get(CONF_SEED),
    )


def _build_execution_target(data: Mapping[str, Any]) -> ExecutionTarget:
    kind = data.get(CONF_KIND)
    if kind == TARGET_KIND_SIMULATOR:
        checked = _run_schema(SIMULATOR_TARGET_SCHEMA, data, CONF_EXECUTION_TARGET)
        preset = checked.get(CONF_PRESET)
        if preset is None and CONF_SCENARIO not in checked:
            raise SchemaError(
                f"{CONF_EXECUTION_TARGET}: simulator needs '{CONF_PRESET}' "
                f"or '{CONF_SCENARIO}'"
            )
        scenario = resolve_scenario(preset=preset, data=checked.get(CONF_SCENARIO))
        return SimulatorTarget(scenario=scenario, preset=preset)

    if kind == TARGET_KIND_GATEWAY:
        checked = _run_schema(GATEWAY_TARGET_SCHEMA, data, CONF_EXECUTION_TARGET)
        mapping = checked[CONF_AGENT_MAPPING]
        if mapping[CONF_MODE] == MAPPING_MODE_PREFIX and not mapping[CONF_PATTERNS]:
            raise SchemaError(
                f"{CONF_EXECUTION_TARGET}/{CONF_AGENT_MAPPING}: "
                "prefix mode needs at least one pattern"
            )
        return GatewayTarget(
            upstream=checked[CONF_UPSTREAM],
            agent_mapping=AgentMapping(
                mode=mapping[CONF_MODE],
                header=mapping[CONF_HEADER].lower(),
                patterns=tuple(
                    AgentPattern(match=p[CONF_MATCH], agent=p[CONF_AGENT])
                    for p in mapping[CONF_PATTERNS]
                ),
            ),
        )

    raise SchemaError(
        f"{CONF_EXECUTION_TARGET}/{CONF_KIND}: expected "
        f"'{TARGET_KIND_SIMULATOR}' or '{TARGET_KIND_GATEWAY}'"
    )


def _build_injector(data: Mapping[str, Any]) -> InjectorSettings:
    thresholds = data[CONF_THRESHOLDS]
    return InjectorSettings(
        endpoint=data.get(CONF_ENDPOINT),
        model=data[CONF_MODEL],
        max_retries=data[CONF_MAX_RETRIES],
        timeout=float(data[CONF_TIMEOUT]),
        conflict_threshold=float(thresholds[THRESHOLD_CONFLICT]),
        ambiguity_threshold=float(thresholds[THRESHOLD_AMBIGUITY]),
    )


def _check_unique(ids: list[str], what: str) -> list[Violation]:
    seen: set[str] = set()
    violations: list[Violation] = []
    for item in ids:
        if item in seen:
            violations.append(
                Violation(ViolationCode.DUPLICATE_ID, f"duplicate {what} id {item!r}")
            )
        seen.add(item)
    return violations


def parse_campaign(raw: bytes | str) -> CampaignConfig:
    """Parse and fully validate a campaign document.

    Raises:
        ParseError: the document is not a JSON object.
        SchemaError: a field is missing, unknown or of the wrong shape.
        ValidationError: a spec fails validate_spec or an id is duplicated.

    """
    try:
        document = json.loads(raw)
    except (UnicodeDecodeError, json.JSONDecodeError) as err:
        raise ParseError(f"Malformed campaign document: {err}") from err
    if not isinstance(document, dict):
        raise ParseError("Campaign document must be a JSON object")

    data = _run_schema(CAMPAIGN_SCHEMA, document, "campaign")

    tasks = tuple(
        TaskDescriptor(
            id=t[CONF_TASK_ID], input=t[CONF_TASK_INPUT], solvable=t[CONF_TASK_SOLVABLE]
        )
        for t in data[CONF_TASKS]
    )
    specs = tuple(_build_spec(s) for s in data[CONF_FAULT_SPECS])

    violations = _check_unique([t.id for t in tasks], "task")
    violations += _check_unique([s.id for s in specs], "spec")
    for spec in specs:
        violations += [
            Violation(v.code, f"{spec.id}: {v.message}") for v in validate_spec(spec)
        ]
    if violations:
        raise ValidationError(violations)

    config = CampaignConfig(
        campaign_seed=data[CONF_CAMPAIGN_SEED],
        tasks=tasks,
        fault_specs=specs,
        execution_target=_build_execution_target(data[CONF_EXECUTION_TARGET]),
        output_dir=data[CONF_OUTPUT_DIR],
        baseline_ref=data.get(CONF_BASELINE_REF),
        injector=_build_injector(data[CONF_INJECTOR]),
    )
    _LOGGER.debug(
        "Parsed campaign: %d task(s), %d spec(s)", len(tasks), len(specs)
    )
    return config


def load_campaign(path: str) -> CampaignConfig:
    """Read and parse a campaign file."""
    try:
        with open(path, "rb") as handle:
            raw = handle.read()
    except OSError as err:
        raise ConfigurationError(f"Cannot read campaign file {path}: {err}") from err
    return parse_campaign(raw)


# ----------------------------------------------------------------------
# Serialization
# ----------------------------------------------------------------------


def _target_to_dict(target: TargetSelector) -> dict[str, Any]:
    out: dict[str, Any] = {CONF_KIND: str(target.kind)}
    for key, value in (
        (CONF_AGENT, target.agent),
        (CONF_POINT, target.point),
        (CONF_SENDER, target.sender),
        (CONF_RECIPIENT, target.recipient),
    ):
        if value is not None:
            out[key] = str(value)
    return out


def spec_to_dict(spec: FaultSpec) -> dict[str, Any]:
    """Return the document form of a fault spec."""
    out: dict[str, Any] = {
        CONF_SPEC_ID: spec.id,
        CONF_FAULT_TYPE: str(spec.fault_type),
        CONF_TARGET: _target_to_dict(spec.target),
        CONF_PARAMS: dict(spec.params),
        CONF_MODE: str(spec.mode),
    }
    if spec.seed is not None:
        out[CONF_SEED] = spec.seed
    return out


def _execution_target_to_dict(target: ExecutionTarget) -> dict[str, Any]:
    if isinstance(target, SimulatorTarget):
        if target.preset is not None:
            return {CONF_KIND: TARGET_KIND_SIMULATOR, CONF_PRESET: target.preset}
        return {
            CONF_KIND: TARGET_KIND_SIMULATOR,
            CONF_SCENARIO: scenario_to_dict(target.scenario),
        }
    mapping = target.agent_mapping
    return {
        CONF_KIND: TARGET_KIND_GATEWAY,
        CONF_UPSTREAM: target.upstream,
        CONF_AGENT_MAPPING: {
            CONF_MODE: mapping.mode,
            CONF_HEADER: mapping.header,
            CONF_PATTERNS: [
                {CONF_MATCH: p.match, CONF_AGENT: p.agent} for p in mapping.patterns
            ],
        },
    }


def campaign_to_dict(config: CampaignConfig) -> dict[str, Any]:
    """Return the document form of a campaign with every default spelled out."""
    injector = config.injector
    out: dict[str, Any] = {
        CONF_SCHEMA_VERSION: SCHEMA_VERSION,
        CONF_CAMPAIGN_SEED: config.campaign_seed,
        CONF_TASKS: [
            {
                CONF_TASK_ID: t.id,
                CONF_TASK_INPUT: t.input,
                CONF_TASK_SOLVABLE: t.solvable,
            }
            for t in config.tasks
        ],
        CONF_FAULT_SPECS: [spec_to_dict(s) for s in config.fault_specs],
        CONF_EXECUTION_TARGET: _execution_target_to_dict(config.execution_target),
        CONF_OUTPUT_DIR: config.output_dir,
        CONF_INJECTOR: {
            CONF_ENDPOINT: injector.endpoint,
            CONF_MODEL: injector.model,
            CONF_MAX_RETRIES: injector.max_retries,
            CONF_TIMEOUT: injector.timeout,
            CONF_THRESHOLDS: {
                THRESHOLD_CONFLICT: injector.conflict_threshold,
                THRESHOLD_AMBIGUITY: injector.ambiguity_threshold,
            },
        },
    }
    if config.baseline_ref is not None:
        out[CONF_BASELINE_REF] = config.baseline_ref
    return out


def serialize_campaign(config: CampaignConfig) -> bytes:
    """Serialize a campaign to canonical JSON (sorted keys, fixed separators)."""
    return json.dumps(
        campaign_to_dict(config), sort_keys=True, indent=2, ensure_ascii=False
    ).encode("utf-8")
