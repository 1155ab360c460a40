"""Prompt modification: configuration faults and instruction faults.

Configuration faults corrupt a system prompt at initialization, instruction
faults corrupt a user prompt at ingestion. Deterministic templates are
additive: the original prompt text is always kept verbatim. Injection markers
are tracked in an :class:`InjectionLedger` and in the trace, never in text.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from enum import StrEnum

from .errors import ExecutionError, NotApplicable
from .injector import InjectorClient, TemplateCatalog
from .taxonomy import FaultType, InterceptionPoint
from .tracelog import TraceRecorder, payload_digest


class PromptRole(StrEnum):
    """Which prompt of a request a document is."""

    SYSTEM = "SystemPrompt"
    USER = "UserPrompt"


@dataclass(frozen=True)
class PromptDoc:
    """A prompt targeted by a prompt-modification fault."""

    role: PromptRole
    text: str
    origin_agent: str | None = None


class PromptError(ExecutionError):
    """Base class for prompt-modification precondition failures."""


class EmptyPrompt(PromptError):
    """Raised when the targeted prompt has no text."""


class EmptyRole(PromptError):
    """Raised when the secondary role is empty."""


class EmptyAgentId(PromptError):
    """Raised when the trusted agent id is empty."""


class PromptRoleMismatch(PromptError):
    """Raised when a fault is applied to the wrong kind of prompt."""


class AlreadyInjected(PromptError):
    """Raised when a directive is applied twice to the same prompt."""


class InjectionLedger:
    """Markers of injections already applied, keyed by (spec id, scope)."""

    def __init__(self) -> None:
        self._claimed: set[tuple[str, str]] = set()

    def claim(self, spec_id: str, scope: str) -> str:
        """Claim a marker; raise AlreadyInjected when it is taken."""
        key = (spec_id, scope)
        if key in self._claimed:
            raise AlreadyInjected(f"{spec_id} already applied to {scope}")
        self._claimed.add(key)
        return f"{spec_id}@{scope}"

    def __contains__(self, key: object) -> bool:
        return key in self._claimed


def prompt_scope(prompt: PromptDoc) -> str:
    """Ledger scope of a prompt: its origin agent, else its text digest."""
    return prompt.origin_agent or payload_digest(prompt.text)[:16]


def _require(prompt: PromptDoc, role: PromptRole) -> None:
    if prompt.role is not role:
        raise PromptRoleMismatch(f"expected a {role}, got a {prompt.role}")
    if not prompt.text.strip():
        raise EmptyPrompt("target prompt is empty")


def _claim(
    ledger: InjectionLedger | None, spec_id: str | None, prompt: PromptDoc
) -> None:
    if ledger is not None and spec_id is not None:
        ledger.claim(spec_id, prompt_scope(prompt))


def _append_block(
    prompt: PromptDoc,
    block: str,
    ledger: InjectionLedger | None,
    spec_id: str | None,
) -> PromptDoc:
    if block in prompt.text:
        raise AlreadyInjected("prompt already carries this directive")
    _claim(ledger, spec_id, prompt)
    return PromptDoc(
        role=prompt.role,
        text=f"{prompt.text}\n\n{block}",
        origin_agent=prompt.origin_agent,
    )


def inject_role_ambiguity(
    prompt: PromptDoc,
    secondary_role: str,
    *,
    spec_id: str | None = None,
    ledger: InjectionLedger | None = None,
    catalog: TemplateCatalog | None = None,
) -> PromptDoc:
    """Merge a second role into a system prompt."""
    _require(prompt, PromptRole.SYSTEM)
    if not secondary_role.strip():
        raise EmptyRole("secondary role is empty")
    block = (catalog or TemplateCatalog.load()).render_prompt(
        "role_ambiguity", secondary_role=secondary_role.strip()
    )
    return _append_block(prompt, block, ledger, spec_id)


def inject_blind_trust(
    prompt: PromptDoc,
    trusted_agent: str,
    *,
    spec_id: str | None = None,
    ledger: InjectionLedger | None = None,
    catalog: TemplateCatalog | None = None,
) -> PromptDoc:
    """Append an unconditional-trust directive to a system prompt."""
    _require(prompt, PromptRole.SYSTEM)
    if not trusted_agent.strip():
        raise EmptyAgentId("trusted agent id is empty")
    block = (catalog or TemplateCatalog.load()).render_prompt(
        "blind_trust", trusted_agent=trusted_agent.strip()
    )
    return _append_block(prompt, block, ledger, spec_id)


async def conflict_instruction(
    prompt: PromptDoc,
    injector: InjectorClient,
    seed: int,
    *,
    recorder: TraceRecorder | None = None,
    agent_id: str | None = None,
) -> PromptDoc:
    """Add a constraint that contradicts an existing one (delegated)."""
    return await _delegate_user_prompt(
        prompt,
        FaultType.INSTRUCTION_LOGIC_CONFLICT,
        injector,
        seed,
        recorder=recorder,
        agent_id=agent_id,
    )


async def ambiguate_instruction(
    prompt: PromptDoc,
    injector: InjectorClient,
    seed: int,
    *,
    recorder: TraceRecorder | None = None,
    agent_id: str | None = None,
) -> PromptDoc:
    """Replace concrete terms with vague language (delegated)."""
    return await _delegate_user_prompt(
        prompt,
        FaultType.INSTRUCTION_AMBIGUITY,
        injector,
        seed,
        recorder=recorder,
        agent_id=agent_id,
    )


async def _delegate_user_prompt(
    prompt: PromptDoc,
    fault_type: FaultType,
    injector: InjectorClient,
    seed: int,
    *,
    recorder: TraceRecorder | None,
    agent_id: str | None,
) -> PromptDoc:
    _require(prompt, PromptRole.USER)
    kwargs = {} if agent_id is None else {"agent_id": agent_id}
    mutated = await injector.mutate(
        fault_type,
        prompt.text,
        seed,
        recorder=recorder,
        point=InterceptionPoint.USER_PROMPT_INGRESS,
        **kwargs,
    )
    return PromptDoc(
        role=PromptRole.USER, text=mutated, origin_agent=prompt.origin_agent
    )


# ----------------------------------------------------------------------
# Offline fallbacks
# ----------------------------------------------------------------------

_CLAUSE_END = re.compile(r"[.;!?\n]|,\s+(?:and|but|then)\b")

# Applied in order; each entry is (pattern, vague replacement).
_VAGUE_TERMS: tuple[tuple[re.Pattern[str], str], ...] = (
    (
        re.compile(r"\b(?:sort|order|rank)\s+(?:the\s+\w+\s+)?by\s+[\w-]+", re.I),
        "organize the data",
    ),
    (
        re.compile(r"\b(?:ascending|descending)\b(?:\s+order)?", re.I),
        "in a suitable order",
    ),
    (re.compile(r"\"[^\"]+\"|'[^']+'"), "the relevant item"),
    (
        re.compile(
            r"\$?\d+(?:[.,]\d+)*(?:\s*(?:%|percent\b|ms\b|seconds?\b|minutes?\b|"
            r"hours?\b|days?\b|kb\b|mb\b|gb\b|items?\b|rows?\b))?",
            re.I,
        ),
        "a reasonable amount",
    ),
)


def _first_imperative(text: str) -> str:
    clause = _CLAUSE_END.split(text.strip(), maxsplit=1)[0].strip()
    clause = re.sub(r"^(?:please|kindly)\s+", "", clause, flags=re.I)
    if not clause:
        raise NotApplicable("prompt has no leading instruction")
    return clause[0].lower() + clause[1:]


def conflict_instruction_offline(
    prompt: PromptDoc, catalog: TemplateCatalog | None = None
) -> PromptDoc:
    """Append the fixed contradictory constraint built from the first imperative."""
    _require(prompt, PromptRole.USER)
    imperative = _first_imperative(prompt.text)
    block = (catalog or TemplateCatalog.load()).render_prompt(
        "conflict_fallback", imperative=imperative
    )
    base = prompt.text.rstrip().rstrip(".")
    return PromptDoc(
        role=PromptRole.USER,
        text=f"{base}, {block}.",
        origin_agent=prompt.origin_agent,
    )


def ambiguate_instruction_offline(prompt: PromptDoc) -> PromptDoc:
    """Replace concrete terms with vague phrases from a fixed table.

    Raises:
        NotApplicable: no concrete term was found.

    """
    _require(prompt, PromptRole.USER)
    text = prompt.text
    for pattern, vague in _VAGUE_TERMS:
        text = pattern.sub(vague, text)
    text = re.sub(r"\s{2,}", " ", text).strip()
    if text == prompt.text.strip():
        raise NotApplicable("prompt has no concrete term to make vague")
    if prompt.text[:1].isupper():
        text = text[0].upper() + text[1:]
    return PromptDoc(
        role=PromptRole.USER, text=text, origin_agent=prompt.origin_agent
    )
