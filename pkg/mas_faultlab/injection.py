"""Dispatch of fault specs onto prompts, histories and agent outputs.

The dispatcher is the single place that decides between the delegated and
the offline path, and the single place that records fault_injected events:
every mutation it returns is paired with exactly one such event. Faults with
nothing to act on are recorded as an injection_attempt with
``applicable=false`` and leave the input untouched.
"""

from __future__ import annotations

import logging
from collections.abc import Sequence
from typing import Any

from .errors import NotApplicable
from .injector import InjectorClient, TemplateCatalog
from .prompt_mod import (
    InjectionLedger,
    PromptDoc,
    ambiguate_instruction,
    ambiguate_instruction_offline,
    conflict_instruction,
    conflict_instruction_offline,
    inject_blind_trust,
    inject_role_ambiguity,
    prompt_scope,
)
from .rewrite import (
    AgentOutput,
    Corruption,
    DropAgent,
    DropFirstN,
    HistoryWindow,
    check_kind,
    corrupt_format,
    drop_memory,
    rewrite_offline,
    rewrite_semantic,
    violate_context,
)
from .taxonomy import (
    CorruptionKind,
    FaultSpec,
    FaultType,
    InjectionMode,
    InterceptionPoint,
)
from .tracelog import EventKind, TraceRecorder

_LOGGER = logging.getLogger(__name__)


def record_injection(
    recorder: TraceRecorder | None,
    spec: FaultSpec,
    agent_id: str,
    payload: str | bytes,
    *,
    offline_fallback: bool,
    marker: str | None = None,
    point: InterceptionPoint | None = None,
    extra: dict[str, Any] | None = None,
) -> None:
    """Record the fault_injected event that accompanies one mutation."""
    _LOGGER.debug("Injected %s (%s) at %s", spec.id, spec.fault_type, agent_id)
    if recorder is None:
        return
    recorder.record(
        EventKind.FAULT_INJECTED,
        agent_id,
        point=point or spec.point,
        payload=payload,
        detail={
            "fault_type": str(spec.fault_type),
            "mode": str(spec.mode),
            "offline_fallback": offline_fallback,
            "marker": marker or f"{spec.id}@{agent_id}",
            **(extra or {}),
        },
    )


def record_inapplicable(
    recorder: TraceRecorder | None,
    spec: FaultSpec,
    agent_id: str,
    reason: str,
    *,
    point: InterceptionPoint | None = None,
) -> None:
    """Record that a spec matched but had nothing to act on."""
    _LOGGER.debug("%s not applicable at %s: %s", spec.id, agent_id, reason)
    if recorder is None:
        return
    recorder.record(
        EventKind.INJECTION_ATTEMPT,
        agent_id,
        point=point or spec.point,
        detail={
            "fault_type": str(spec.fault_type),
            "applicable": False,
            "reason": reason,
        },
    )


class FaultDispatcher:
    """Applies fault specs through the matching mechanism.

    Without an injector client every semantic spec runs through its offline
    fallback and is flagged as such in the trace.
    """

    def __init__(
        self,
        injector: InjectorClient | None = None,
        *,
        catalog: TemplateCatalog | None = None,
    ) -> None:
        self.injector = injector
        if catalog is None:
            catalog = injector.catalog if injector is not None else None
        self.catalog = catalog or TemplateCatalog.load()

    def delegated(self, spec: FaultSpec) -> bool:
        """True when the spec is sent to the injector model."""
        return spec.mode is InjectionMode.DELEGATED and self.injector is not None

    def offline_fallback(self, spec: FaultSpec) -> bool:
        """True when a semantic spec runs through its algorithmic fallback."""
        return spec.offline_fallback or (
            spec.mode is InjectionMode.DELEGATED and self.injector is None
        )

    # ------------------------------------------------------------------
    # Prompt modification
    # ------------------------------------------------------------------

    async def apply_prompt(
        self,
        spec: FaultSpec,
        prompt: PromptDoc,
        *,
        seed: int,
        recorder: TraceRecorder | None = None,
        agent_id: str,
        ledger: InjectionLedger | None = None,
    ) -> PromptDoc | None:
        """Apply a configuration or instruction fault; None when inapplicable."""
        ledger = ledger if ledger is not None else InjectionLedger()
        params = spec.params
        try:
            match spec.fault_type:
                case FaultType.ROLE_AMBIGUITY:
                    mutated = inject_role_ambiguity(
                        prompt,
                        params["secondary_role"],
                        spec_id=spec.id,
                        ledger=ledger,
                        catalog=self.catalog,
                    )
                case FaultType.BLIND_TRUST:
                    mutated = inject_blind_trust(
                        prompt,
                        params["trusted_agent"],
                        spec_id=spec.id,
                        ledger=ledger,
                        catalog=self.catalog,
                    )
                case FaultType.INSTRUCTION_LOGIC_CONFLICT:
                    ledger.claim(spec.id, prompt_scope(prompt))
                    if self.delegated(spec):
                        assert self.injector is not None
                        mutated = await conflict_instruction(
                            prompt,
                            self.injector,
                            seed,
                            recorder=recorder,
                            agent_id=agent_id,
                        )
                    else:
                        mutated = conflict_instruction_offline(prompt, self.catalog)
                case FaultType.INSTRUCTION_AMBIGUITY:
                    ledger.claim(spec.id, prompt_scope(prompt))
                    if self.delegated(spec):
                        assert self.injector is not None
                        mutated = await ambiguate_instruction(
                            prompt,
                            self.injector,
                            seed,
                            recorder=recorder,
                            agent_id=agent_id,
                        )
                    else:
                        mutated = ambiguate_instruction_offline(prompt)
                case _:
                    raise ValueError(f"{spec.fault_type} is not a prompt fault")
        except NotApplicable as err:
            record_inapplicable(recorder, spec, agent_id, str(err))
            return None

        record_injection(
            recorder,
            spec,
            agent_id,
            mutated.text,
            offline_fallback=self.offline_fallback(spec),
            marker=f"{spec.id}@{prompt_scope(prompt)}",
        )
        return mutated

    # ------------------------------------------------------------------
    # History windows
    # ------------------------------------------------------------------

    def apply_history(
        self,
        spec: FaultSpec,
        history: HistoryWindow,
        *,
        recorder: TraceRecorder | None = None,
        agent_id: str,
    ) -> HistoryWindow | None:
        """Apply a memory fault; None when inapplicable."""
        params = spec.params
        try:
            match spec.fault_type:
                case FaultType.MEMORY_LOSS:
                    policy: DropFirstN | DropAgent
                    if "drop_first_n" in params:
                        policy = DropFirstN(params["drop_first_n"])
                    else:
                        policy = DropAgent(params["drop_agent"])
                    mutated = drop_memory(history, policy)
                case FaultType.CONTEXT_LENGTH_VIOLATION:
                    mutated = violate_context(history, params["char_budget"])
                case _:
                    raise ValueError(f"{spec.fault_type} is not a memory fault")
        except NotApplicable as err:
            record_inapplicable(recorder, spec, agent_id, str(err))
            return None

        dropped = len(history.messages) - len(mutated.messages)
        record_injection(
            recorder,
            spec,
            agent_id,
            "\n".join(m.text for m in mutated.messages),
            offline_fallback=False,
            extra={"messages_removed": dropped},
        )
        return mutated

    # ------------------------------------------------------------------
    # Agent outputs and tool calls
    # ------------------------------------------------------------------

    async def apply_output(
        self,
        spec: FaultSpec,
        output: AgentOutput,
        *,
        seed: int,
        recorder: TraceRecorder | None = None,
        catalog: Sequence[str] = (),
    ) -> AgentOutput | None:
        """Apply a planning, reasoning or action fault; None when inapplicable."""
        agent_id = output.producer
        try:
            check_kind(output, spec.fault_type)
            if spec.fault_type is FaultType.PARAMETER_FORMAT_ERROR:
                corruption = Corruption(
                    kind=CorruptionKind(spec.params["corruption_kind"]),
                    field=spec.params.get("field"),
                )
                corrupted = corrupt_format(output.content, corruption, seed)
                mutated = AgentOutput(
                    producer=output.producer,
                    kind=output.kind,
                    content=corrupted.decode("utf-8"),
                    tool_call=output.tool_call,
                )
            elif self.delegated(spec):
                assert self.injector is not None
                mutated = await rewrite_semantic(
                    output,
                    spec.fault_type,
                    self.injector,
                    spec,
                    seed=seed,
                    recorder=recorder,
                    catalog=catalog,
                )
            else:
                mutated = rewrite_offline(
                    output,
                    spec.fault_type,
                    seed=seed,
                    params=spec.params,
                    catalog=catalog,
                )
        except NotApplicable as err:
            record_inapplicable(recorder, spec, agent_id, str(err))
            return None

        record_injection(
            recorder,
            spec,
            agent_id,
            mutated.content,
            offline_fallback=self.offline_fallback(spec),
        )
        return mutated
