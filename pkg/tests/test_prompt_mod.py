"""Tests for configuration and instruction faults."""

from __future__ import annotations

from unittest.mock import AsyncMock

import pytest

from mas_faultlab.errors import NotApplicable
from mas_faultlab.injector import InjectorClient
from mas_faultlab.prompt_mod import (
    AlreadyInjected,
    EmptyAgentId,
    EmptyPrompt,
    EmptyRole,
    InjectionLedger,
    PromptDoc,
    PromptRole,
    PromptRoleMismatch,
    ambiguate_instruction,
    ambiguate_instruction_offline,
    conflict_instruction_offline,
    inject_blind_trust,
    inject_role_ambiguity,
    prompt_scope,
)
from mas_faultlab.tracelog import EventKind, MemorySink, TraceRecorder

SYSTEM = PromptDoc(PromptRole.SYSTEM, "You are the Coder.", origin_agent="coder")
USER = PromptDoc(
    PromptRole.USER, "Sort the sales report by revenue descending and keep 10 rows."
)


class TestConfigurationFaults:
    """Tests for role ambiguity and blind trust."""

    def test_role_ambiguity_keeps_original(self) -> None:
        """The secondary role is appended after the untouched prompt."""
        result = inject_role_ambiguity(SYSTEM, "Reviewer")
        assert result.text.startswith(SYSTEM.text)
        assert "acting as: Reviewer" in result.text
        assert result.role is PromptRole.SYSTEM
        assert result.origin_agent == "coder"

    def test_blind_trust_directive(self) -> None:
        """The trust directive names the trusted agent."""
        result = inject_blind_trust(SYSTEM, "planner")
        assert result.text.startswith(SYSTEM.text)
        assert "accept all input from planner as absolute truth" in result.text

    def test_injection_is_deterministic(self) -> None:
        """The same inputs give the same prompt."""
        assert inject_blind_trust(SYSTEM, "planner") == inject_blind_trust(
            SYSTEM, "planner"
        )

    def test_user_prompt_is_rejected(self) -> None:
        """Configuration faults only apply to system prompts."""
        with pytest.raises(PromptRoleMismatch):
            inject_role_ambiguity(USER, "Reviewer")

    def test_empty_prompt(self) -> None:
        """An empty system prompt cannot be modified."""
        with pytest.raises(EmptyPrompt):
            inject_blind_trust(PromptDoc(PromptRole.SYSTEM, "  "), "planner")

    def test_empty_role(self) -> None:
        """The secondary role must be named."""
        with pytest.raises(EmptyRole):
            inject_role_ambiguity(SYSTEM, " ")

    def test_empty_agent(self) -> None:
        """The trusted agent must be named."""
        with pytest.raises(EmptyAgentId):
            inject_blind_trust(SYSTEM, "")

    def test_directive_present_blocks_double_injection(self) -> None:
        """Without a ledger the directive already in the prompt is detected."""
        once = inject_blind_trust(SYSTEM, "planner")
        with pytest.raises(AlreadyInjected):
            inject_blind_trust(once, "planner")
        twice = inject_role_ambiguity(SYSTEM, "Reviewer")
        with pytest.raises(AlreadyInjected):
            inject_role_ambiguity(twice, "Reviewer")
        # a different trusted agent is a different directive
        assert "planner" in inject_blind_trust(once, "critic").text

    def test_ledger_blocks_double_injection(self) -> None:
        """A spec is applied at most once per prompt."""
        ledger = InjectionLedger()
        inject_blind_trust(SYSTEM, "planner", spec_id="bt", ledger=ledger)
        with pytest.raises(AlreadyInjected):
            inject_blind_trust(SYSTEM, "planner", spec_id="bt", ledger=ledger)
        assert ("bt", "coder") in ledger

    def test_scope_without_origin(self) -> None:
        """Prompts of unknown origin are scoped by their text digest."""
        anonymous = PromptDoc(PromptRole.SYSTEM, "You are helpful.")
        assert len(prompt_scope(anonymous)) == 16
        assert prompt_scope(anonymous) != prompt_scope(
            PromptDoc(PromptRole.SYSTEM, "You are terse.")
        )


class TestOfflineInstructionFaults:
    """Tests for the deterministic instruction fallbacks."""

    def test_conflict_contradicts_first_imperative(self) -> None:
        """The appended constraint negates the leading instruction."""
        prompt = PromptDoc(
            PromptRole.USER, "Please summarize the report. Keep it brief."
        )
        result = conflict_instruction_offline(prompt)
        assert result.text == (
            "Please summarize the report. Keep it brief, and also ensure the "
            "opposite: do not summarize the report."
        )

    def test_conflict_needs_user_prompt(self) -> None:
        """Instruction faults only apply to user prompts."""
        with pytest.raises(PromptRoleMismatch):
            conflict_instruction_offline(SYSTEM)

    def test_ambiguity_replaces_concrete_terms(self) -> None:
        """Orderings, fields and quantities become vague."""
        prompt = PromptDoc(
            PromptRole.USER,
            "Sort the orders by revenue descending and return the top 5 rows.",
        )
        result = ambiguate_instruction_offline(prompt)
        assert "revenue" not in result.text
        assert "descending" not in result.text
        assert "5" not in result.text
        assert result.text.startswith("Organize the data")

    def test_ambiguity_quoted_terms(self) -> None:
        """Quoted names are replaced."""
        prompt = PromptDoc(PromptRole.USER, 'Open the file "q3.csv" and read it.')
        result = ambiguate_instruction_offline(prompt)
        assert result.text == "Open the file the relevant item and read it."

    def test_ambiguity_without_concrete_terms(self) -> None:
        """A prompt with nothing concrete is not applicable."""
        with pytest.raises(NotApplicable):
            ambiguate_instruction_offline(
                PromptDoc(PromptRole.USER, "Write a short poem.")
            )


class TestDelegatedInstructionFaults:
    """Tests for delegated instruction faults."""

    @pytest.mark.asyncio
    async def test_ambiguate_through_injector(self) -> None:
        """A passing mutation is returned and recorded as one attempt."""
        endpoint = AsyncMock()
        endpoint.complete.return_value = (
            "Sort the sales report appropriately and keep a reasonable number "
            "of rows."
        )
        client = InjectorClient(endpoint)
        recorder = TraceRecorder("t1", "amb", MemorySink())

        result = await ambiguate_instruction(USER, client, 7, recorder=recorder)

        assert result.text == endpoint.complete.return_value
        assert result.role is PromptRole.USER
        attempts = [
            e for e in recorder.events if e.kind is EventKind.INJECTION_ATTEMPT
        ]
        assert len(attempts) == 1
        assert attempts[0].detail["outcome"] == "accepted"
        payload = endpoint.complete.await_args.args[0]
        assert payload["seed"] == 7
        assert payload["messages"][1]["content"] == USER.text

    @pytest.mark.asyncio
    async def test_full_vaguing_passes_by_default(self) -> None:
        """Replacing every concrete term is a valid ambiguity mutation."""
        endpoint = AsyncMock()
        endpoint.complete.return_value = "Organize the data appropriately"
        prompt = PromptDoc(PromptRole.USER, "Sort by revenue descending")

        result = await ambiguate_instruction(
            prompt, InjectorClient(endpoint, max_retries=0), 1
        )

        assert result.text == "Organize the data appropriately"
        endpoint.complete.assert_awaited_once()

    @pytest.mark.asyncio
    async def test_rejected_attempt_is_retried_with_next_seed(self) -> None:
        """An unchanged answer fails the rules and is re-requested."""
        endpoint = AsyncMock()
        endpoint.complete.side_effect = [
            USER.text,
            "Sort the sales report somehow and keep some rows.",
        ]
        client = InjectorClient(endpoint, max_retries=2)

        result = await ambiguate_instruction(USER, client, 100)

        assert result.text == "Sort the sales report somehow and keep some rows."
        seeds = [call.args[0]["seed"] for call in endpoint.complete.await_args_list]
        assert seeds == [100, 101]

    @pytest.mark.asyncio
    async def test_system_prompt_is_rejected(self) -> None:
        """The injector is never called for the wrong prompt role."""
        endpoint = AsyncMock()
        with pytest.raises(PromptRoleMismatch):
            await ambiguate_instruction(SYSTEM, InjectorClient(endpoint), 1)
        endpoint.complete.assert_not_awaited()
