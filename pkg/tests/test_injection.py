"""Tests for the fault dispatcher."""

from __future__ import annotations

import json
from unittest.mock import AsyncMock

import pytest

from mas_faultlab.injection import FaultDispatcher
from mas_faultlab.injector import InjectorClient
from mas_faultlab.prompt_mod import (
    AlreadyInjected,
    InjectionLedger,
    PromptDoc,
    PromptRole,
)
from mas_faultlab.rewrite import (
    AgentOutput,
    HistoryMessage,
    HistoryWindow,
    OutputKind,
    ToolCall,
)
from mas_faultlab.taxonomy import (
    FaultSpec,
    FaultType,
    InjectionMode,
    InterceptionPoint,
    TargetSelector,
)
from mas_faultlab.tracelog import EventKind, MemorySink, TraceRecorder


def _spec(
    fault_type: FaultType,
    params: dict[str, object] | None = None,
    *,
    mode: InjectionMode = InjectionMode.DETERMINISTIC,
    point: InterceptionPoint | None = None,
) -> FaultSpec:
    return FaultSpec(
        id="s1",
        fault_type=fault_type,
        target=TargetSelector.for_agent("a1", point),
        params=params or {},
        mode=mode,
    )


def _recorder() -> TraceRecorder:
    return TraceRecorder("t1", "s1", MemorySink())


def _kinds(recorder: TraceRecorder) -> list[EventKind]:
    return [e.kind for e in recorder.events]


class TestApplyPrompt:
    """Tests for prompt-modification dispatch."""

    @pytest.mark.asyncio
    async def test_blind_trust_recorded(self) -> None:
        """A prompt mutation is paired with one fault_injected event."""
        recorder = _recorder()
        prompt = PromptDoc(PromptRole.SYSTEM, "You are the QA.", origin_agent="a1")
        spec = _spec(FaultType.BLIND_TRUST, {"trusted_agent": "a0"})

        result = await FaultDispatcher().apply_prompt(
            spec, prompt, seed=0, recorder=recorder, agent_id="a1"
        )

        assert result is not None
        assert "a0" in result.text
        assert _kinds(recorder) == [EventKind.FAULT_INJECTED]
        event = recorder.events[0]
        assert event.point is InterceptionPoint.SYSTEM_PROMPT_INIT
        assert event.detail["marker"] == "s1@a1"
        assert event.detail["offline_fallback"] is False

    @pytest.mark.asyncio
    async def test_offline_instruction_flagged(self) -> None:
        """A delegated spec without an injector runs offline and says so."""
        recorder = _recorder()
        spec = _spec(FaultType.INSTRUCTION_LOGIC_CONFLICT, mode=InjectionMode.DELEGATED)
        prompt = PromptDoc(PromptRole.USER, "Summarize the report.")

        result = await FaultDispatcher().apply_prompt(
            spec, prompt, seed=0, recorder=recorder, agent_id="a1"
        )

        assert result is not None
        assert result.text.endswith("do not summarize the report.")
        assert recorder.events[0].detail["offline_fallback"] is True

    @pytest.mark.asyncio
    async def test_delegated_instruction(self) -> None:
        """With an injector the delegated path is taken."""
        endpoint = AsyncMock()
        endpoint.complete.return_value = "Summarize the report somewhat briefly."
        dispatcher = FaultDispatcher(InjectorClient(endpoint))
        spec = _spec(FaultType.INSTRUCTION_AMBIGUITY, mode=InjectionMode.DELEGATED)
        prompt = PromptDoc(PromptRole.USER, "Summarize the report in 3 lines.")
        recorder = _recorder()

        result = await dispatcher.apply_prompt(
            spec, prompt, seed=4, recorder=recorder, agent_id="a1"
        )

        assert result is not None
        assert result.text == "Summarize the report somewhat briefly."
        assert _kinds(recorder) == [
            EventKind.INJECTION_ATTEMPT,
            EventKind.FAULT_INJECTED,
        ]

    @pytest.mark.asyncio
    async def test_inapplicable(self) -> None:
        """Nothing to act on leaves the prompt alone and records why."""
        recorder = _recorder()
        spec = _spec(FaultType.INSTRUCTION_AMBIGUITY)
        prompt = PromptDoc(PromptRole.USER, "Write a poem.")

        result = await FaultDispatcher().apply_prompt(
            spec, prompt, seed=0, recorder=recorder, agent_id="a1"
        )

        assert result is None
        event = recorder.events[0]
        assert event.kind is EventKind.INJECTION_ATTEMPT
        assert event.detail["applicable"] is False

    @pytest.mark.asyncio
    async def test_shared_ledger(self) -> None:
        """One spec is applied once per prompt scope."""
        ledger = InjectionLedger()
        spec = _spec(FaultType.INSTRUCTION_LOGIC_CONFLICT)
        prompt = PromptDoc(PromptRole.USER, "Summarize the report.", origin_agent="a1")
        dispatcher = FaultDispatcher()
        await dispatcher.apply_prompt(
            spec, prompt, seed=0, agent_id="a1", ledger=ledger
        )
        with pytest.raises(AlreadyInjected):
            await dispatcher.apply_prompt(
                spec, prompt, seed=0, agent_id="a1", ledger=ledger
            )


class TestApplyHistory:
    """Tests for memory-fault dispatch."""

    HISTORY = HistoryWindow(
        messages=(
            HistoryMessage("system", "system", "Rules.", is_system=True),
            HistoryMessage("user", "user", "Build it."),
            HistoryMessage("a0", "assistant", "Plan ready."),
            HistoryMessage("a2", "assistant", "Tests ready."),
        )
    )

    def test_memory_loss(self) -> None:
        """The removed message count is recorded."""
        recorder = _recorder()
        spec = _spec(FaultType.MEMORY_LOSS, {"drop_agent": "a0"})
        result = FaultDispatcher().apply_history(
            spec, self.HISTORY, recorder=recorder, agent_id="a1"
        )
        assert result is not None
        assert [m.sender for m in result.messages] == ["system", "user", "a2"]
        assert recorder.events[0].detail["messages_removed"] == 1

    def test_context_violation_not_binding(self) -> None:
        """A budget that fits everything is recorded as inapplicable."""
        recorder = _recorder()
        spec = _spec(FaultType.CONTEXT_LENGTH_VIOLATION, {"char_budget": 1000})
        result = FaultDispatcher().apply_history(
            spec, self.HISTORY, recorder=recorder, agent_id="a1"
        )
        assert result is None
        assert recorder.events[0].detail["applicable"] is False

    def test_wrong_fault(self) -> None:
        """Only memory faults act on histories."""
        with pytest.raises(ValueError):
            FaultDispatcher().apply_history(
                _spec(FaultType.HALLUCINATION), self.HISTORY, agent_id="a1"
            )


class TestApplyOutput:
    """Tests for output and tool-call dispatch."""

    CALL = ToolCall("search", {"query": "weather", "limit": 3})

    def _tool_output(self) -> AgentOutput:
        return AgentOutput(
            "a1", OutputKind.TOOL_CALL, self.CALL.arguments_json(), self.CALL
        )

    @pytest.mark.asyncio
    async def test_format_corruption(self) -> None:
        """Format faults change the wire bytes and keep the tool name."""
        recorder = _recorder()
        spec = _spec(
            FaultType.PARAMETER_FORMAT_ERROR,
            {"corruption_kind": "type_flip", "field": "limit"},
        )
        result = await FaultDispatcher().apply_output(
            spec, self._tool_output(), seed=0, recorder=recorder
        )
        assert result is not None
        assert json.loads(result.content) == {"query": "weather", "limit": "3"}
        assert result.tool_call == self.CALL
        assert recorder.events[0].point is InterceptionPoint.TOOL_CALL_EGRESS

    @pytest.mark.asyncio
    async def test_offline_tool_swap_uses_agent_catalog(self) -> None:
        """The producer's tools serve as catalog when the spec has none."""
        spec = _spec(FaultType.TOOL_SELECTION_ERROR)
        result = await FaultDispatcher().apply_output(
            spec, self._tool_output(), seed=0, catalog=["search", "calculator"]
        )
        assert result is not None
        assert result.tool_call is not None
        assert result.tool_call.tool_name == "calculator"

    @pytest.mark.asyncio
    async def test_delegated_tool_swap_sees_agent_catalog(self) -> None:
        """The injector directive names the tools of the intercepted request."""
        endpoint = AsyncMock()
        endpoint.complete.return_value = (
            '{"tool_name": "calculator", "arguments": {"query": "weather"}}'
        )
        spec = _spec(FaultType.TOOL_SELECTION_ERROR, mode=InjectionMode.DELEGATED)
        result = await FaultDispatcher(InjectorClient(endpoint)).apply_output(
            spec, self._tool_output(), seed=0, catalog=["search", "calculator"]
        )
        assert result is not None
        directive = endpoint.complete.await_args.args[0]["messages"][0]["content"]
        assert "from: search, calculator" in directive

    @pytest.mark.asyncio
    async def test_kind_mismatch_is_inapplicable(self) -> None:
        """A plan fault on a tool call is recorded, not raised."""
        recorder = _recorder()
        result = await FaultDispatcher().apply_output(
            _spec(FaultType.INEXECUTABLE_PLAN),
            self._tool_output(),
            seed=0,
            recorder=recorder,
        )
        assert result is None
        assert recorder.events[0].detail["applicable"] is False
