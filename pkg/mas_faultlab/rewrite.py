"""Interception and response rewriting.

Semantic-level mutations of agent outputs and tool calls are delegated to the
injector; structure-level mutations (history windows, tool-call bytes) are
pure algorithmic transformations. Every semantic fault type also has a
deterministic offline fallback so simulated campaigns need no model access.
"""

from __future__ import annotations

import json
import logging
import re
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field, replace
from enum import StrEnum
from typing import Any

from .const import CONTEXT_TRUNCATED_MARKER
from .errors import ExecutionError, NotApplicable
from .injector import InjectorClient
from .taxonomy import (
    CorruptionKind,
    FaultCategory,
    FaultSpec,
    FaultType,
    InterceptionPoint,
    category_of,
)
from .tracelog import TraceRecorder

_LOGGER = logging.getLogger(__name__)

REWRITE_FAULT_TYPES: frozenset[FaultType] = frozenset(
    {
        FaultType.INEXECUTABLE_PLAN,
        FaultType.CRITICAL_INFO_LOSS,
        FaultType.HALLUCINATION,
        FaultType.TOOL_SELECTION_ERROR,
        FaultType.PARAMETER_FILLING_ERROR,
    }
)

MARKER_SENDER = "context"


class OutputKind(StrEnum):
    """What an intercepted agent output carries."""

    REASONING = "Reasoning"
    PLAN = "Plan"
    TOOL_CALL = "ToolCall"
    PLAIN_MESSAGE = "PlainMessage"


class KindMismatch(NotApplicable):
    """Raised when a fault is applied to an output of the wrong kind."""


class CatalogTooSmall(NotApplicable):
    """Raised when a tool catalog offers no alternative tool."""


class WouldEmptyHistory(NotApplicable):
    """Raised when a memory fault would remove every non-system message."""


class UnknownAgent(NotApplicable):
    """Raised when DropAgent matches no message."""


class BudgetNotBinding(NotApplicable):
    """Raised when the character budget already fits the whole history."""


class FieldNotFound(NotApplicable):
    """Raised when the named field is absent from the payload."""


class AlreadyInvalid(ExecutionError):
    """Raised when a payload to corrupt does not parse in the first place."""


@dataclass(frozen=True)
class ToolCall:
    """A tool invocation: tool name plus structured arguments."""

    tool_name: str
    arguments: Mapping[str, Any] = field(default_factory=dict)

    def to_json(self) -> str:
        """Compact serialized form, argument order preserved."""
        return json.dumps(
            {"tool_name": self.tool_name, "arguments": dict(self.arguments)},
            separators=(",", ":"),
            ensure_ascii=False,
        )

    def arguments_json(self) -> str:
        """Wire form of the arguments (the chat-completions `arguments` string)."""
        return json.dumps(
            dict(self.arguments), separators=(",", ":"), ensure_ascii=False
        )

    @classmethod
    def from_json(cls, text: str | bytes) -> ToolCall:
        """Parse a serialized tool call.

        Raises:
            AlreadyInvalid: the text is not a tool-call object.

        """
        try:
            document = json.loads(text)
        except (json.JSONDecodeError, UnicodeDecodeError) as err:
            raise AlreadyInvalid(f"tool call does not parse: {err}") from err
        if not isinstance(document, dict):
            raise AlreadyInvalid("tool call is not an object")
        name = document.get("tool_name", document.get("name"))
        arguments = document.get("arguments", {})
        if not isinstance(name, str) or not isinstance(arguments, dict):
            raise AlreadyInvalid("tool call lacks tool_name or arguments")
        return cls(tool_name=name, arguments=arguments)


@dataclass(frozen=True)
class AgentOutput:
    """An intercepted agent output.

    For ToolCall outputs ``content`` is the wire form of the arguments; a
    format fault may leave it malformed while ``tool_call`` keeps the name.
    """

    producer: str
    kind: OutputKind
    content: str
    tool_call: ToolCall | None = None

    def __post_init__(self) -> None:
        if self.kind is OutputKind.TOOL_CALL and self.tool_call is None:
            raise KindMismatch("ToolCall output without a tool call")


@dataclass(frozen=True)
class HistoryMessage:
    """One entry of a conversation history."""

    sender: str
    role: str
    text: str
    is_system: bool = False


@dataclass(frozen=True)
class HistoryWindow:
    """Ordered conversation history seen by an agent."""

    messages: tuple[HistoryMessage, ...]

    @property
    def non_system(self) -> list[HistoryMessage]:
        """Non-system messages in order."""
        return [m for m in self.messages if not m.is_system]


@dataclass(frozen=True)
class DropFirstN:
    """Drop the first n non-system messages."""

    n: int


@dataclass(frozen=True)
class DropAgent:
    """Drop every message sent by one agent."""

    agent: str


MemoryPolicy = DropFirstN | DropAgent


@dataclass(frozen=True)
class Corruption:
    """A structure-level corruption; field is None for DropClosingDelimiter."""

    kind: CorruptionKind
    field: str | None = None


# ----------------------------------------------------------------------
# Output kinds
# ----------------------------------------------------------------------

_COMPATIBLE_KINDS: dict[FaultCategory, frozenset[OutputKind]] = {
    FaultCategory.PLANNING: frozenset({OutputKind.PLAN}),
    FaultCategory.REASONING: frozenset(
        {OutputKind.REASONING, OutputKind.PLAIN_MESSAGE}
    ),
    FaultCategory.ACTION: frozenset({OutputKind.TOOL_CALL}),
}


def output_kind_for(fault_type: FaultType) -> OutputKind:
    """The output kind an egress fault of this type acts on."""
    category = category_of(fault_type)
    if category is FaultCategory.PLANNING:
        return OutputKind.PLAN
    if category is FaultCategory.ACTION:
        return OutputKind.TOOL_CALL
    return OutputKind.REASONING


def check_kind(output: AgentOutput, fault_type: FaultType) -> None:
    """Raise KindMismatch when the output cannot carry this fault."""
    allowed = _COMPATIBLE_KINDS.get(category_of(fault_type))
    if allowed is None or output.kind not in allowed:
        raise KindMismatch(f"{fault_type} cannot act on a {output.kind} output")


# ----------------------------------------------------------------------
# Semantic-level mutation
# ----------------------------------------------------------------------


async def rewrite_semantic(
    output: AgentOutput,
    fault_type: FaultType,
    injector: InjectorClient,
    spec: FaultSpec,
    *,
    seed: int,
    recorder: TraceRecorder | None = None,
    catalog: Sequence[str] = (),
) -> AgentOutput:
    """Delegate a semantic mutation of an agent output to the injector.

    ``catalog`` lists the tools of the intercepted request; without it the
    spec's ``catalog`` parameter is used.

    Raises:
        KindMismatch: the output kind does not fit the fault type.
        InjectorUnavailable: the injector cannot be reached.
        IntegrityCheckFailed: every attempt was rejected.

    """
    if fault_type not in REWRITE_FAULT_TYPES:
        raise ValueError(f"{fault_type} is not an output rewrite fault")
    check_kind(output, fault_type)
    _LOGGER.debug(
        "Delegating %s rewrite of %s output from %s",
        fault_type,
        output.kind,
        output.producer,
    )
    point = spec.point
    tools = list(catalog or spec.params.get("catalog") or ()) or None

    if output.tool_call is not None and output.kind is OutputKind.TOOL_CALL:
        mutated = await injector.mutate(
            fault_type,
            output.tool_call.to_json(),
            seed,
            recorder=recorder,
            agent_id=output.producer,
            point=point or InterceptionPoint.TOOL_CALL_EGRESS,
            catalog_tools=tools,
        )
        call = ToolCall.from_json(mutated)
        return replace(output, content=call.arguments_json(), tool_call=call)

    mutated = await injector.mutate(
        fault_type,
        output.content,
        seed,
        recorder=recorder,
        agent_id=output.producer,
        point=point or InterceptionPoint.AGENT_OUTPUT_EGRESS,
        catalog_tools=tools,
    )
    return replace(output, content=mutated)


def rewrite_offline(
    output: AgentOutput,
    fault_type: FaultType,
    *,
    seed: int,
    params: Mapping[str, Any] | None = None,
    catalog: Sequence[str] = (),
) -> AgentOutput:
    """Apply the deterministic fallback of a semantic output fault.

    ``catalog`` is the tool list known for the producer; a ``catalog``
    parameter on the spec takes precedence.
    """
    check_kind(output, fault_type)
    params = params or {}
    tools = list(params.get("catalog") or catalog)

    match fault_type:
        case FaultType.INEXECUTABLE_PLAN:
            text = plan_inexecutable(
                output.content, catalog=tools, missing_tool=params.get("missing_tool")
            )
            return replace(output, content=text)
        case FaultType.CRITICAL_INFO_LOSS:
            return replace(output, content=drop_critical_info(output.content))
        case FaultType.HALLUCINATION:
            return replace(output, content=assert_unsupported(output.content))
        case FaultType.TOOL_SELECTION_ERROR:
            assert output.tool_call is not None
            call = swap_tool_deterministic(output.tool_call, tools, seed)
            return replace(output, content=call.arguments_json(), tool_call=call)
        case FaultType.PARAMETER_FILLING_ERROR:
            assert output.tool_call is not None
            call = swap_parameters_deterministic(output.tool_call)
            return replace(output, content=call.arguments_json(), tool_call=call)
    raise ValueError(f"{fault_type} is not an output rewrite fault")


# ----------------------------------------------------------------------
# Deterministic fallbacks
# ----------------------------------------------------------------------

DEFAULT_MISSING_TOOL = "external_solver"

_STEP_NUMBER = re.compile(r"^\s*(\d+)[.)]", re.M)
_SENTENCE_END = re.compile(r"(?<=[.!?])\s+")
_LIST_MARKER = re.compile(r"\d+[.)]")
_LIST_PREFIX = re.compile(r"^\d+[.)]\s+")
_CONSTRAINT = re.compile(r"\d|\b(?:must|at least|at most|only|exactly)\b", re.I)
_FIRST_INT = re.compile(r"\b(\d+)\b")

# Applied in order, whole words only.
_QUALIFIERS: tuple[tuple[str, str], ...] = (
    ("likely", "certainly"),
    ("probably", "definitely"),
    ("possibly", "certainly"),
    ("perhaps", "clearly"),
    ("might", "will"),
    ("may", "will"),
    ("could be", "is"),
    ("seems to be", "is"),
    ("appears to be", "is"),
    ("i think", "it is certain that"),
)


def plan_inexecutable(
    plan: str, *, catalog: Sequence[str] = (), missing_tool: str | None = None
) -> str:
    """Append a self-dependent step that calls a tool absent from the catalog."""
    if not plan.strip():
        raise NotApplicable("plan is empty")
    tool = missing_tool or DEFAULT_MISSING_TOOL
    while tool in catalog:
        tool = f"{tool}_unavailable"
    numbers = [int(n) for n in _STEP_NUMBER.findall(plan)]
    step = max(numbers, default=0) + 1
    return (
        f"{plan.rstrip()}\n{step}. Wait until step {step} has finished, "
        f"then pass its result to {tool}."
    )


def _sentences(text: str) -> list[str]:
    sentences: list[str] = []
    for part in _SENTENCE_END.split(text.strip()):
        if not part:
            continue
        if sentences and _LIST_MARKER.fullmatch(sentences[-1]):
            sentences[-1] = f"{sentences[-1]} {part}"
        else:
            sentences.append(part)
    return sentences


def _carries_constraint(sentence: str) -> bool:
    return _CONSTRAINT.search(_LIST_PREFIX.sub("", sentence)) is not None


def drop_critical_info(text: str) -> str:
    """Remove the first sentence carrying a number or a constraint keyword.

    List markers count as part of their step, not as numbers. Falls back
    to the last sentence when no sentence carries one.

    Raises:
        NotApplicable: the text has a single sentence.

    """
    sentences = _sentences(text)
    if len(sentences) < 2:
        raise NotApplicable("text has a single sentence")
    index = next(
        (i for i, s in enumerate(sentences) if _carries_constraint(s)),
        len(sentences) - 1,
    )
    return " ".join(sentences[:index] + sentences[index + 1 :])


def _match_case(replacement: str, original: str) -> str:
    if original[:1].isupper():
        return replacement[:1].upper() + replacement[1:]
    return replacement


def assert_unsupported(text: str) -> str:
    """Turn hedged statements into definitive ones.

    Without any hedge, the first integer is bumped by one.

    Raises:
        NotApplicable: the text has neither a hedge nor a number.

    """
    result = text
    for hedge, firm in _QUALIFIERS:
        pattern = re.compile(rf"\b{re.escape(hedge)}\b", re.I)
        result = pattern.sub(lambda m, firm=firm: _match_case(firm, m.group(0)), result)
    if result != text:
        return result
    match = _FIRST_INT.search(text)
    if match is None:
        raise NotApplicable("text has no hedge and no number")
    bumped = str(int(match.group(1)) + 1)
    return text[: match.start(1)] + bumped + text[match.end(1) :]


def swap_tool_deterministic(
    call: ToolCall, catalog: Sequence[str], seed: int
) -> ToolCall:
    """Replace the tool by another catalog entry; arguments are unchanged.

    The replacement is ``catalog[(i + 1 + seed mod (n - 1)) mod n]`` where
    ``i`` is the index of the current tool, which never lands on ``i``.

    Raises:
        CatalogTooSmall: fewer than two distinct tools, or the current tool
            is not in the catalog.

    """
    tools = list(dict.fromkeys(catalog))
    if len(tools) < 2:
        raise CatalogTooSmall("catalog needs at least two distinct tools")
    if call.tool_name not in tools:
        raise CatalogTooSmall(f"{call.tool_name!r} is not in the catalog")
    size = len(tools)
    index = tools.index(call.tool_name)
    replacement = tools[(index + 1 + seed % (size - 1)) % size]
    return ToolCall(tool_name=replacement, arguments=dict(call.arguments))


def _type_key(value: Any) -> str:
    return type(value).__name__


def swap_parameters_deterministic(call: ToolCall) -> ToolCall:
    """Swap the values of the two lexicographically first same-typed fields.

    Pairs holding equal values are skipped since swapping them changes nothing.

    Raises:
        NotApplicable: no two same-typed fields hold different values.

    """
    keys = sorted(call.arguments)
    for i, first in enumerate(keys):
        for second in keys[i + 1 :]:
            a = call.arguments[first]
            b = call.arguments[second]
            if _type_key(a) == _type_key(b) and a != b:
                arguments = dict(call.arguments)
                arguments[first], arguments[second] = b, a
                return ToolCall(tool_name=call.tool_name, arguments=arguments)
    raise NotApplicable("no two same-typed argument fields to swap")


# ----------------------------------------------------------------------
# History windows
# ----------------------------------------------------------------------


def drop_memory(history: HistoryWindow, policy: MemoryPolicy) -> HistoryWindow:
    """Remove messages from a history; system messages are always kept.

    Raises:
        WouldEmptyHistory: no non-system message would survive.
        UnknownAgent: DropAgent matches no message.

    """
    non_system = history.non_system
    if isinstance(policy, DropFirstN):
        if policy.n < 1:
            raise ValueError("DropFirstN needs n >= 1")
        if policy.n >= len(non_system):
            raise WouldEmptyHistory(
                f"dropping {policy.n} of {len(non_system)} messages empties history"
            )
        dropped = {id(m) for m in non_system[: policy.n]}
    else:
        matched = [m for m in non_system if m.sender == policy.agent]
        if not matched:
            raise UnknownAgent(f"no message from {policy.agent!r}")
        if len(matched) == len(non_system):
            raise WouldEmptyHistory(f"every message is from {policy.agent!r}")
        dropped = {id(m) for m in matched}
    return HistoryWindow(
        messages=tuple(m for m in history.messages if id(m) not in dropped)
    )


def violate_context(history: HistoryWindow, char_budget: int) -> HistoryWindow:
    """Keep the newest whole messages that fit the budget, behind a marker.

    Raises:
        BudgetNotBinding: the budget already covers every message.

    """
    if char_budget < 1:
        raise ValueError("char_budget must be positive")
    non_system = history.non_system
    total = sum(len(m.text) for m in non_system)
    if char_budget >= total:
        raise BudgetNotBinding(f"budget {char_budget} covers all {total} chars")

    kept: set[int] = set()
    used = 0
    for message in reversed(non_system):
        if used + len(message.text) > char_budget:
            break
        used += len(message.text)
        kept.add(id(message))

    marker = HistoryMessage(
        sender=MARKER_SENDER,
        role="system",
        text=CONTEXT_TRUNCATED_MARKER,
        is_system=True,
    )
    survivors = [m for m in history.messages if m.is_system or id(m) in kept]
    position = next(
        (i for i, m in enumerate(survivors) if not m.is_system), len(survivors)
    )
    survivors.insert(position, marker)
    return HistoryWindow(messages=tuple(survivors))


# ----------------------------------------------------------------------
# Serialized tool calls
# ----------------------------------------------------------------------


def _dump(document: Mapping[str, Any]) -> bytes:
    return json.dumps(document, separators=(",", ":"), ensure_ascii=False).encode(
        "utf-8"
    )


def _is_number(value: Any) -> bool:
    return isinstance(value, int | float) and not isinstance(value, bool)


def corrupt_format(
    payload: str | bytes, corruption: Corruption, seed: int = 0
) -> bytes:
    """Corrupt the structure of a serialized tool call.

    Without an explicit field, the seed picks one among the sorted keys
    (numeric keys only for TypeFlip).

    Raises:
        AlreadyInvalid: the payload is not a structured object.
        FieldNotFound: the named field is absent, or no field qualifies.
        NotApplicable: TypeFlip on a non-numeric field.

    """
    raw = payload.encode("utf-8") if isinstance(payload, str) else payload
    try:
        document = json.loads(raw)
    except (json.JSONDecodeError, UnicodeDecodeError) as err:
        raise AlreadyInvalid(f"payload does not parse: {err}") from err
    if not isinstance(document, dict):
        raise AlreadyInvalid("payload is not an object")

    if corruption.kind is CorruptionKind.DROP_CLOSING_DELIMITER:
        return raw.rstrip()[:-1]

    name = corruption.field
    if name is None:
        candidates = sorted(
            k
            for k, v in document.items()
            if corruption.kind is not CorruptionKind.TYPE_FLIP or _is_number(v)
        )
        if not candidates:
            raise FieldNotFound(f"no field qualifies for {corruption.kind}")
        name = candidates[seed % len(candidates)]
    if name not in document:
        raise FieldNotFound(f"field {name!r} not in payload")

    if corruption.kind is CorruptionKind.REMOVE_REQUIRED_FIELD:
        return _dump({k: v for k, v in document.items() if k != name})

    value = document[name]
    if not _is_number(value):
        raise NotApplicable(f"field {name!r} is not numeric")
    flipped = dict(document)
    flipped[name] = json.dumps(value)
    return _dump(flipped)
