"""Canonical fault model for multi-agent systems.

Fifteen injectable fault types, grouped into seven categories. Each type is
injected through exactly one of three mechanisms at exactly one interception
point (routing faults act on bus edges instead of points).
"""

from __future__ import annotations

import hashlib
from collections.abc import Mapping
from dataclasses import dataclass, field
from enum import StrEnum
from typing import Any

from .const import SEED_MAX, TARGET_KIND_AGENT, TARGET_KIND_EDGE


class FaultType(StrEnum):
    """The fifteen injectable fault types, in catalog order."""

    INEXECUTABLE_PLAN = "InexecutablePlan"
    CRITICAL_INFO_LOSS = "CriticalInfoLoss"
    MEMORY_LOSS = "MemoryLoss"
    CONTEXT_LENGTH_VIOLATION = "ContextLengthViolation"
    HALLUCINATION = "Hallucination"
    TOOL_SELECTION_ERROR = "ToolSelectionError"
    PARAMETER_FILLING_ERROR = "ParameterFillingError"
    PARAMETER_FORMAT_ERROR = "ParameterFormatError"
    ROLE_AMBIGUITY = "RoleAmbiguity"
    BLIND_TRUST = "BlindTrust"
    INSTRUCTION_LOGIC_CONFLICT = "InstructionLogicConflict"
    INSTRUCTION_AMBIGUITY = "InstructionAmbiguity"
    MESSAGE_CYCLE = "MessageCycle"
    MESSAGE_STORM = "MessageStorm"
    MESSAGE_BROADCAST_AMPLIFICATION = "MessageBroadcastAmplification"


class FaultCategory(StrEnum):
    """Where in the system a fault arises."""

    PLANNING = "Planning"
    MEMORY = "Memory"
    REASONING = "Reasoning"
    ACTION = "Action"
    CONFIGURATION = "Configuration"
    INSTRUCTION = "Instruction"
    COMMUNICATION = "Communication"


class Locus(StrEnum):
    """Intra-agent (own pipeline) or inter-agent (coordination)."""

    INTRA = "Intra"
    INTER = "Inter"


class InjectionMechanism(StrEnum):
    """The three non-invasive injection mechanisms."""

    PROMPT_MODIFICATION = "PromptModification"
    INTERCEPTION_REWRITE = "InterceptionRewrite"
    ROUTING_MANIPULATION = "RoutingManipulation"


class InterceptionPoint(StrEnum):
    """Positions in the request/response/history flow where faults apply."""

    SYSTEM_PROMPT_INIT = "SystemPromptInit"
    USER_PROMPT_INGRESS = "UserPromptIngress"
    HISTORY_WINDOW_INGRESS = "HistoryWindowIngress"
    AGENT_OUTPUT_EGRESS = "AgentOutputEgress"
    TOOL_CALL_EGRESS = "ToolCallEgress"


# Ingress points are applied before the agent acts, egress points after.
POINT_ORDER: tuple[InterceptionPoint, ...] = tuple(InterceptionPoint)


class InjectionMode(StrEnum):
    """Deterministic (algorithmic) or Delegated (secondary model) mutation."""

    DETERMINISTIC = "Deterministic"
    DELEGATED = "Delegated"


class FtTier(StrEnum):
    """Source of a fault-tolerant behavior."""

    MECHANISM = "Mechanism"
    RULE = "Rule"
    PROMPT = "Prompt"
    REASONING = "Reasoning"


class TargetKind(StrEnum):
    """What a fault spec points at."""

    AGENT = TARGET_KIND_AGENT
    EDGE = TARGET_KIND_EDGE


class CorruptionKind(StrEnum):
    """Structure-level corruptions of serialized tool calls."""

    DROP_CLOSING_DELIMITER = "drop_closing_delimiter"
    REMOVE_REQUIRED_FIELD = "remove_required_field"
    TYPE_FLIP = "type_flip"


_CATEGORY: dict[FaultType, FaultCategory] = {
    FaultType.INEXECUTABLE_PLAN: FaultCategory.PLANNING,
    FaultType.CRITICAL_INFO_LOSS: FaultCategory.PLANNING,
    FaultType.MEMORY_LOSS: FaultCategory.MEMORY,
    FaultType.CONTEXT_LENGTH_VIOLATION: FaultCategory.MEMORY,
    FaultType.HALLUCINATION: FaultCategory.REASONING,
    FaultType.TOOL_SELECTION_ERROR: FaultCategory.ACTION,
    FaultType.PARAMETER_FILLING_ERROR: FaultCategory.ACTION,
    FaultType.PARAMETER_FORMAT_ERROR: FaultCategory.ACTION,
    FaultType.ROLE_AMBIGUITY: FaultCategory.CONFIGURATION,
    FaultType.BLIND_TRUST: FaultCategory.CONFIGURATION,
    FaultType.INSTRUCTION_LOGIC_CONFLICT: FaultCategory.INSTRUCTION,
    FaultType.INSTRUCTION_AMBIGUITY: FaultCategory.INSTRUCTION,
    FaultType.MESSAGE_CYCLE: FaultCategory.COMMUNICATION,
    FaultType.MESSAGE_STORM: FaultCategory.COMMUNICATION,
    FaultType.MESSAGE_BROADCAST_AMPLIFICATION: FaultCategory.COMMUNICATION,
}

_CATEGORY_MECHANISM: dict[FaultCategory, InjectionMechanism] = {
    FaultCategory.PLANNING: InjectionMechanism.INTERCEPTION_REWRITE,
    FaultCategory.MEMORY: InjectionMechanism.INTERCEPTION_REWRITE,
    FaultCategory.REASONING: InjectionMechanism.INTERCEPTION_REWRITE,
    FaultCategory.ACTION: InjectionMechanism.INTERCEPTION_REWRITE,
    FaultCategory.CONFIGURATION: InjectionMechanism.PROMPT_MODIFICATION,
    FaultCategory.INSTRUCTION: InjectionMechanism.PROMPT_MODIFICATION,
    FaultCategory.COMMUNICATION: InjectionMechanism.ROUTING_MANIPULATION,
}

_CATEGORY_POINT: dict[FaultCategory, InterceptionPoint] = {
    FaultCategory.CONFIGURATION: InterceptionPoint.SYSTEM_PROMPT_INIT,
    FaultCategory.INSTRUCTION: InterceptionPoint.USER_PROMPT_INGRESS,
    FaultCategory.MEMORY: InterceptionPoint.HISTORY_WINDOW_INGRESS,
    FaultCategory.PLANNING: InterceptionPoint.AGENT_OUTPUT_EGRESS,
    FaultCategory.REASONING: InterceptionPoint.AGENT_OUTPUT_EGRESS,
    FaultCategory.ACTION: InterceptionPoint.TOOL_CALL_EGRESS,
}

SEMANTIC_FAULT_TYPES: frozenset[FaultType] = frozenset(
    {
        FaultType.INEXECUTABLE_PLAN,
        FaultType.CRITICAL_INFO_LOSS,
        FaultType.HALLUCINATION,
        FaultType.TOOL_SELECTION_ERROR,
        FaultType.PARAMETER_FILLING_ERROR,
        FaultType.INSTRUCTION_LOGIC_CONFLICT,
        FaultType.INSTRUCTION_AMBIGUITY,
    }
)

# Faults that remove information an agent needs; a shared pool can restore it.
INFORMATION_LOSS_FAULT_TYPES: frozenset[FaultType] = frozenset(
    {
        FaultType.CRITICAL_INFO_LOSS,
        FaultType.MEMORY_LOSS,
        FaultType.CONTEXT_LENGTH_VIOLATION,
    }
)


def category_of(fault_type: FaultType) -> FaultCategory:
    """Return the category a fault type belongs to."""
    return _CATEGORY[fault_type]


def locus_of(category: FaultCategory) -> Locus:
    """Return whether a category is intra- or inter-agent."""
    if category in (
        FaultCategory.CONFIGURATION,
        FaultCategory.INSTRUCTION,
        FaultCategory.COMMUNICATION,
    ):
        return Locus.INTER
    return Locus.INTRA


def mechanism_of(fault_type: FaultType) -> InjectionMechanism:
    """Return the injection mechanism of a fault type."""
    return _CATEGORY_MECHANISM[_CATEGORY[fault_type]]


def interception_point_of(fault_type: FaultType) -> InterceptionPoint | None:
    """Return the interception point of a fault type (None for routing faults)."""
    return _CATEGORY_POINT.get(_CATEGORY[fault_type])


def default_mode(fault_type: FaultType) -> InjectionMode:
    """Semantic faults default to delegation, everything else is algorithmic."""
    if fault_type in SEMANTIC_FAULT_TYPES:
        return InjectionMode.DELEGATED
    return InjectionMode.DETERMINISTIC


def derive_seed(*parts: object) -> int:
    """Derive a 64-bit seed from an ordered tuple of parts."""
    hasher = hashlib.sha256()
    for part in parts:
        encoded = str(part).encode("utf-8")
        hasher.update(len(encoded).to_bytes(8, "big"))
        hasher.update(encoded)
    return int.from_bytes(hasher.digest()[:8], "big")


@dataclass(frozen=True)
class TargetSelector:
    """What a fault spec points at: an agent (with point) or a bus edge."""

    kind: TargetKind
    agent: str | None = None
    point: InterceptionPoint | None = None
    sender: str | None = None
    recipient: str | None = None

    @classmethod
    def for_agent(
        cls, agent: str, point: InterceptionPoint | None = None
    ) -> TargetSelector:
        """Build an agent target."""
        return cls(kind=TargetKind.AGENT, agent=agent, point=point)

    @classmethod
    def for_edge(cls, sender: str, recipient: str) -> TargetSelector:
        """Build a bus edge target."""
        return cls(kind=TargetKind.EDGE, sender=sender, recipient=recipient)

    def matches_agent(self, agent_id: str, role: str | None = None) -> bool:
        """Return True when this agent target selects the given agent."""
        if self.kind is not TargetKind.AGENT or self.agent is None:
            return False
        return self.agent in ("*", agent_id) or (
            role is not None and self.agent == role
        )

    def matches_edge(self, sender: str, recipient: str) -> bool:
        """Return True when this edge target selects sender → recipient."""
        if self.kind is not TargetKind.EDGE:
            return False
        return self.sender in ("*", sender) and self.recipient in ("*", recipient)

    def describe(self) -> str:
        """Human-readable form used in logs and traces."""
        if self.kind is TargetKind.EDGE:
            return f"{self.sender}->{self.recipient}"
        return f"{self.agent}@{self.point or '-'}"


@dataclass(frozen=True)
class FaultSpec:
    """One injectable fault."""

    id: str
    fault_type: FaultType
    target: TargetSelector
    params: Mapping[str, Any] = field(default_factory=dict)
    mode: InjectionMode = InjectionMode.DETERMINISTIC
    seed: int | None = None

    @property
    def mechanism(self) -> InjectionMechanism:
        """Mechanism this spec is injected through."""
        return mechanism_of(self.fault_type)

    @property
    def point(self) -> InterceptionPoint | None:
        """Interception point of the spec (None for routing faults)."""
        return self.target.point or interception_point_of(self.fault_type)

    @property
    def offline_fallback(self) -> bool:
        """True when a semantic fault runs through its algorithmic fallback."""
        return (
            self.fault_type in SEMANTIC_FAULT_TYPES
            and self.mode is InjectionMode.DETERMINISTIC
        )


class ViolationCode(StrEnum):
    """Reasons a fault spec is rejected."""

    EMPTY_ID = "EmptyId"
    MECHANISM_MISMATCH = "MechanismMismatch"
    POINT_MISMATCH = "PointMismatch"
    EMPTY_TARGET = "EmptyTarget"
    MODE_NOT_PERMITTED = "ModeNotPermitted"
    MISSING_PARAMETER = "MissingParameter"
    UNKNOWN_PARAMETER = "UnknownParameter"
    PARAMETER_TYPE = "ParameterType"
    PARAMETER_RANGE = "ParameterRange"
    NO_OP_PARAMETER = "NoOpParameter"
    SEED_RANGE = "SeedRange"
    DUPLICATE_ID = "DuplicateId"


@dataclass(frozen=True)
class Violation:
    """One reason a spec (or campaign) is invalid."""

    code: ViolationCode
    message: str

    def __str__(self) -> str:
        return f"{self.code}: {self.message}"


# Allowed parameters per fault type; values are the required subset.
_ALLOWED_PARAMS: dict[FaultType, frozenset[str]] = {
    FaultType.INEXECUTABLE_PLAN: frozenset({"missing_tool"}),
    FaultType.CRITICAL_INFO_LOSS: frozenset(),
    FaultType.MEMORY_LOSS: frozenset({"drop_first_n", "drop_agent"}),
    FaultType.CONTEXT_LENGTH_VIOLATION: frozenset({"char_budget"}),
    FaultType.HALLUCINATION: frozenset(),
    FaultType.TOOL_SELECTION_ERROR: frozenset({"catalog"}),
    FaultType.PARAMETER_FILLING_ERROR: frozenset(),
    FaultType.PARAMETER_FORMAT_ERROR: frozenset({"corruption_kind", "field"}),
    FaultType.ROLE_AMBIGUITY: frozenset({"secondary_role"}),
    FaultType.BLIND_TRUST: frozenset({"trusted_agent"}),
    FaultType.INSTRUCTION_LOGIC_CONFLICT: frozenset(),
    FaultType.INSTRUCTION_AMBIGUITY: frozenset(),
    FaultType.MESSAGE_CYCLE: frozenset(),
    FaultType.MESSAGE_STORM: frozenset({"replication_factor"}),
    FaultType.MESSAGE_BROADCAST_AMPLIFICATION: frozenset(),
}

_REQUIRED_PARAMS: dict[FaultType, frozenset[str]] = {
    FaultType.CONTEXT_LENGTH_VIOLATION: frozenset({"char_budget"}),
    FaultType.PARAMETER_FORMAT_ERROR: frozenset({"corruption_kind"}),
    FaultType.ROLE_AMBIGUITY: frozenset({"secondary_role"}),
    FaultType.BLIND_TRUST: frozenset({"trusted_agent"}),
    FaultType.MESSAGE_STORM: frozenset({"replication_factor"}),
}


def _is_int(value: Any) -> bool:
    return isinstance(value, int) and not isinstance(value, bool)


def _non_empty_text(value: Any) -> bool:
    return isinstance(value, str) and bool(value.strip())


def _check_target(spec: FaultSpec) -> list[Violation]:
    violations: list[Violation] = []
    target = spec.target
    routing = spec.mechanism is InjectionMechanism.ROUTING_MANIPULATION

    if routing and target.kind is not TargetKind.EDGE:
        violations.append(
            Violation(
                ViolationCode.MECHANISM_MISMATCH,
                f"{spec.fault_type} is injected by routing and must target a bus edge",
            )
        )
    elif not routing and target.kind is not TargetKind.AGENT:
        violations.append(
            Violation(
                ViolationCode.MECHANISM_MISMATCH,
                f"{spec.fault_type} is injected by {spec.mechanism} "
                "and must target an agent",
            )
        )

    if target.kind is TargetKind.EDGE:
        if not _non_empty_text(target.sender) or not _non_empty_text(
            target.recipient
        ):
            violations.append(
                Violation(ViolationCode.EMPTY_TARGET, "edge needs sender and recipient")
            )
        if target.point is not None:
            violations.append(
                Violation(
                    ViolationCode.MECHANISM_MISMATCH,
                    "bus edges have no interception point",
                )
            )
    else:
        if not _non_empty_text(target.agent):
            violations.append(
                Violation(ViolationCode.EMPTY_TARGET, "agent target needs an agent id")
            )
        expected = interception_point_of(spec.fault_type)
        if target.point is not None and target.point != expected:
            violations.append(
                Violation(
                    ViolationCode.POINT_MISMATCH,
                    f"{spec.fault_type} is injected at {expected}, not {target.point}",
                )
            )
    return violations


def _check_params(spec: FaultSpec) -> list[Violation]:
    violations: list[Violation] = []
    params = spec.params
    allowed = _ALLOWED_PARAMS[spec.fault_type]
    required = _REQUIRED_PARAMS.get(spec.fault_type, frozenset())

    for key in sorted(set(params) - allowed):
        violations.append(
            Violation(
                ViolationCode.UNKNOWN_PARAMETER,
                f"{key!r} is not a parameter of {spec.fault_type}",
            )
        )
    for key in sorted(required - set(params)):
        violations.append(
            Violation(
                ViolationCode.MISSING_PARAMETER,
                f"{spec.fault_type} requires {key!r}",
            )
        )

    ft = spec.fault_type
    if ft is FaultType.MEMORY_LOSS:
        has_n = "drop_first_n" in params
        has_agent = "drop_agent" in params
        if has_n == has_agent:
            violations.append(
                Violation(
                    ViolationCode.MISSING_PARAMETER,
                    "MemoryLoss takes exactly one of 'drop_first_n' or 'drop_agent'",
                )
            )
        if has_n:
            value = params["drop_first_n"]
            if not _is_int(value):
                violations.append(
                    Violation(ViolationCode.PARAMETER_TYPE, "drop_first_n must be int")
                )
            elif value < 0:
                violations.append(
                    Violation(ViolationCode.PARAMETER_RANGE, "drop_first_n < 0")
                )
            elif value == 0:
                violations.append(
                    Violation(
                        ViolationCode.NO_OP_PARAMETER, "drop_first_n=0 drops nothing"
                    )
                )
        if has_agent and not _non_empty_text(params["drop_agent"]):
            violations.append(
                Violation(ViolationCode.PARAMETER_TYPE, "drop_agent must be non-empty")
            )

    if "char_budget" in params:
        value = params["char_budget"]
        if not _is_int(value):
            violations.append(
                Violation(ViolationCode.PARAMETER_TYPE, "char_budget must be int")
            )
        elif value <= 0:
            violations.append(
                Violation(ViolationCode.PARAMETER_RANGE, "char_budget must be positive")
            )

    if "replication_factor" in params:
        value = params["replication_factor"]
        if not _is_int(value):
            violations.append(
                Violation(ViolationCode.PARAMETER_TYPE, "replication_factor not int")
            )
        elif value < 1:
            violations.append(
                Violation(
                    ViolationCode.PARAMETER_RANGE, "replication_factor must be positive"
                )
            )
        elif value == 1:
            violations.append(
                Violation(
                    ViolationCode.NO_OP_PARAMETER,
                    "replication_factor=1 replicates nothing",
                )
            )

    for key in ("secondary_role", "trusted_agent", "missing_tool"):
        if key in params and not _non_empty_text(params[key]):
            violations.append(
                Violation(ViolationCode.PARAMETER_TYPE, f"{key} must be non-empty text")
            )

    if "catalog" in params:
        catalog = params["catalog"]
        if not isinstance(catalog, list | tuple) or not all(
            _non_empty_text(item) for item in catalog
        ):
            violations.append(
                Violation(ViolationCode.PARAMETER_TYPE, "catalog must list tool names")
            )
        elif len(set(catalog)) < 2:
            violations.append(
                Violation(
                    ViolationCode.PARAMETER_RANGE,
                    "catalog needs at least two distinct tools",
                )
            )

    if "corruption_kind" in params:
        kind = params["corruption_kind"]
        if kind not in set(CorruptionKind):
            violations.append(
                Violation(
                    ViolationCode.PARAMETER_RANGE,
                    f"corruption_kind must be one of {sorted(CorruptionKind)}",
                )
            )
        elif kind != CorruptionKind.DROP_CLOSING_DELIMITER and "field" in params:
            if not _non_empty_text(params["field"]):
                violations.append(
                    Violation(ViolationCode.PARAMETER_TYPE, "field must be non-empty")
                )
        elif kind == CorruptionKind.DROP_CLOSING_DELIMITER and "field" in params:
            violations.append(
                Violation(
                    ViolationCode.UNKNOWN_PARAMETER,
                    "drop_closing_delimiter takes no field",
                )
            )
    return violations


def validate_spec(spec: FaultSpec) -> list[Violation]:
    """Check a fault spec; an empty list means the spec is valid.

    Covers mechanism/target compatibility, parameter ranges and the
    delegated-mode restriction. Never raises.
    """
    violations: list[Violation] = []

    if not _non_empty_text(spec.id):
        violations.append(Violation(ViolationCode.EMPTY_ID, "spec id is empty"))

    violations.extend(_check_target(spec))
    violations.extend(_check_params(spec))

    if (
        spec.mode is InjectionMode.DELEGATED
        and spec.fault_type not in SEMANTIC_FAULT_TYPES
    ):
        violations.append(
            Violation(
                ViolationCode.MODE_NOT_PERMITTED,
                f"{spec.fault_type} is structure-level and cannot be delegated",
            )
        )

    if spec.seed is not None and (
        not _is_int(spec.seed) or not 0 <= spec.seed <= SEED_MAX
    ):
        violations.append(
            Violation(ViolationCode.SEED_RANGE, "seed must be a 64-bit unsigned int")
        )
    return violations
