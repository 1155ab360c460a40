"""Tests for behavior annotation and annotator agreement."""

from __future__ import annotations

import json
import random
from pathlib import Path
from unittest.mock import AsyncMock

import pytest

from mas_faultlab.annotator import (
    AnnotationRecord,
    BehaviorCatalog,
    BehaviorTag,
    CatalogError,
    EmptyInput,
    JudgeUnavailable,
    LengthMismatch,
    TierOutcome,
    UnparseableVerdict,
    annotate_llm,
    annotate_rule_based,
    annotate_traces_llm,
    cohen_kappa,
    compare_annotations,
    fit_transcript,
    parse_verdict,
    read_annotations,
    write_annotations,
)
from mas_faultlab.injector import InjectorUnavailable
from mas_faultlab.taxonomy import FaultType, FtTier
from mas_faultlab.tracelog import (
    CorruptTrace,
    EventKind,
    MemorySink,
    ReplayedTrace,
    TraceEvent,
    TraceHeader,
    TraceRecorder,
)

VERDICT = (
    "MECHANISM=S RULE=I PROMPT=I REASONING=F "
    "LABEL=Uses external information sources to repair"
)


def _events(
    *tiers: tuple[FtTier, bool], fault_type: FaultType = FaultType.HALLUCINATION
) -> list[TraceEvent]:
    """A task trace with one trigger (and maybe a fix) per listed tier."""
    recorder = TraceRecorder("t1", "s1", MemorySink())
    recorder.record(EventKind.FAULT_INJECTED, "a1")
    for tier, fixed in tiers:
        recorder.record(EventKind.FT_TRIGGERED, "a2", tier=tier)
        if fixed:
            recorder.record(EventKind.FT_FIXED, "a2", tier=tier)
    recorder.finish(True, agent_id="sim", fault_type=fault_type)
    return recorder.events


def _trace(task_id: str, events: list[TraceEvent]) -> ReplayedTrace:
    header = TraceHeader(task_id, "s1", fault_type=FaultType.HALLUCINATION)
    return ReplayedTrace(Path(f"{task_id}.jsonl"), header, events, None)


def _tag(*codes: str) -> BehaviorTag:
    return BehaviorTag(
        outcomes={
            tier: TierOutcome.from_code(code)
            for tier, code in zip(FtTier, codes, strict=True)
        }
    )


class TestCatalog:
    """Tests for the behavior catalog."""

    def test_shipped_catalog_covers_every_fault(self) -> None:
        """Every fault type belongs to exactly one group."""
        catalog = BehaviorCatalog.load()
        for fault_type in FaultType:
            assert catalog.group(fault_type).behaviors

    def test_duplicate_tier_in_a_cell(self) -> None:
        """A signature giving one tier twice is rejected."""
        text = (
            '{"schema_version": 1, "catalog_version": "x", "groups": [{"name": "g",'
            ' "fault_types": ["Hallucination"], "behaviors": [{"label": "b",'
            ' "signature": {"Rule": "S", "Rule": "F"}}]}]}'
        )
        with pytest.raises(CatalogError, match="duplicate"):
            BehaviorCatalog.from_json(text)

    def test_missing_fault_types(self) -> None:
        """A catalog must cover all fifteen fault types."""
        document = {
            "schema_version": 1,
            "catalog_version": "x",
            "groups": [
                {"name": "g", "fault_types": ["Hallucination"], "behaviors": []}
            ],
        }
        with pytest.raises(CatalogError, match="lacks"):
            BehaviorCatalog(document)

    def test_signature_text(self) -> None:
        """Inactive tiers are left out of the rendered signature."""
        behavior = BehaviorCatalog.load().behaviors(FaultType.HALLUCINATION)[-1]
        assert behavior.signature_text == "Mechanism=S, Reasoning=F"


class TestRuleBased:
    """Tests for annotate_rule_based."""

    def test_fixed_tier_is_success(self) -> None:
        """A fixed tier is Success and the first matching row labels it."""
        tag = annotate_rule_based(_events((FtTier.REASONING, True)))
        assert tag.outcomes[FtTier.REASONING] is TierOutcome.SUCCESS
        assert tag.outcomes[FtTier.RULE] is TierOutcome.INACTIVE
        assert tag.label == "Infers true intent while executing misinformation"
        assert tag.provenance == {"mode": "rule"}

    def test_unfixed_tier_is_failure(self) -> None:
        """Triggered but unfixed is Failure."""
        tag = annotate_rule_based(
            _events((FtTier.MECHANISM, True), (FtTier.REASONING, False))
        )
        assert tag.labels == (
            TierOutcome.SUCCESS,
            TierOutcome.INACTIVE,
            TierOutcome.INACTIVE,
            TierOutcome.FAILURE,
        )
        assert tag.label == "Uses external information sources to repair"

    def test_no_events_all_inactive(self) -> None:
        """Without fault-tolerance events every tier is Inactive."""
        tag = annotate_rule_based([])
        assert set(tag.labels) == {TierOutcome.INACTIVE}
        assert tag.label is None

    def test_idempotent(self) -> None:
        """Annotating twice gives the same tag."""
        events = _events((FtTier.RULE, True))
        assert annotate_rule_based(events) == annotate_rule_based(events)

    def test_out_of_order_events(self) -> None:
        """Streams breaking the ordering rules are corrupt."""
        events = _events((FtTier.RULE, True))
        with pytest.raises(CorruptTrace):
            annotate_rule_based(list(reversed(events)))


class TestJudge:
    """Tests for verdict parsing and judge annotation."""

    def test_parse_verdict(self) -> None:
        """The verdict line may sit inside other text."""
        tag = parse_verdict(f"Here you go:\n{VERDICT}\nThanks")
        assert tag is not None
        assert tag.outcomes[FtTier.MECHANISM] is TierOutcome.SUCCESS
        assert tag.label == "Uses external information sources to repair"
        none = parse_verdict("MECHANISM=I RULE=I PROMPT=I REASONING=I LABEL=none")
        assert none is not None
        assert none.label is None
        assert parse_verdict("MECHANISM=X RULE=I PROMPT=I REASONING=I") is None

    @pytest.mark.asyncio
    async def test_retry_until_parseable(self) -> None:
        """Unparseable answers are retried with the next seed."""
        judge = AsyncMock()
        judge.complete.side_effect = ["I think it went fine.", VERDICT]
        tag = await annotate_llm(
            _events((FtTier.MECHANISM, True)),
            BehaviorCatalog.load(),
            judge,
            seed=5,
        )
        assert tag.provenance["attempts"] == 2
        assert tag.provenance["mode"] == "judge"
        seeds = [c.args[0]["seed"] for c in judge.complete.await_args_list]
        assert seeds == [5, 6]
        prompt = judge.complete.await_args.args[0]["messages"][0]["content"]
        assert "Injected fault type: Hallucination" in prompt
        assert "Ignores misinformation (Mechanism=S, Reasoning=S)" in prompt

    @pytest.mark.asyncio
    async def test_never_parseable(self) -> None:
        """The retry budget bounds the number of judge calls."""
        judge = AsyncMock()
        judge.complete.return_value = "no idea"
        with pytest.raises(UnparseableVerdict, match="3 attempt"):
            await annotate_llm(_events(), BehaviorCatalog.load(), judge)
        assert judge.complete.await_count == 3

    @pytest.mark.asyncio
    async def test_judge_down(self) -> None:
        """Transport failures surface as JudgeUnavailable."""
        judge = AsyncMock()
        judge.complete.side_effect = InjectorUnavailable("refused")
        with pytest.raises(JudgeUnavailable, match="refused"):
            await annotate_llm(_events(), BehaviorCatalog.load(), judge)

    def test_long_trace_is_summarized(self) -> None:
        """Over budget only the tail of the trace is rendered."""
        events = _events(*[(FtTier.RULE, True)] * 50)
        transcript = fit_transcript(events, budget=2000, keep_last=40)
        assert transcript.summarized
        assert len(transcript.text) <= 2000
        assert transcript.events_total == len(events)
        assert transcript.text.splitlines()[-1].startswith(f"[{len(events) - 1}]")

    @pytest.mark.asyncio
    async def test_annotate_many(self) -> None:
        """Every trace gets a record keyed by spec and task."""
        judge = AsyncMock()
        judge.complete.return_value = VERDICT
        traces = [_trace(f"t{i}", _events()) for i in range(5)]
        records = await annotate_traces_llm(traces, judge, max_in_flight=2)
        assert [r.key for r in records] == [("s1", f"t{i}") for i in range(5)]
        assert judge.complete.await_count == 5


class TestKappa:
    """Tests for Cohen's kappa and annotation comparison."""

    def test_identical(self) -> None:
        """Identical non-degenerate sequences agree perfectly."""
        labels = ["S", "F", "I", "S"]
        assert cohen_kappa(labels, labels) == 1.0

    def test_hand_example(self) -> None:
        """Half agreement at half chance agreement is zero."""
        assert cohen_kappa(["X", "X", "Y", "Y"], ["X", "Y", "X", "Y"]) == 0.0

    def test_degenerate_agreement(self) -> None:
        """One shared label everywhere counts as full agreement."""
        assert cohen_kappa(["I"] * 4, ["I"] * 4) == 1.0

    def test_symmetric(self) -> None:
        """Swapping the raters does not change kappa."""
        rng = random.Random(3)
        for _ in range(100):
            n = rng.randint(2, 30)
            a = [rng.choice("SFI") for _ in range(n)]
            b = [rng.choice("SFI") for _ in range(n)]
            assert cohen_kappa(a, b) == cohen_kappa(b, a)

    def test_errors(self) -> None:
        """Lengths must match and be positive."""
        with pytest.raises(LengthMismatch):
            cohen_kappa(["S"], ["S", "F"])
        with pytest.raises(EmptyInput):
            cohen_kappa([], [])

    def test_compare_annotation_files(self, tmp_path: Path) -> None:
        """Stored annotation sets compare pooled and per tier."""
        hallucination = FaultType.HALLUCINATION
        first = [
            AnnotationRecord("s1", "t1", hallucination, _tag("S", "I", "I", "F")),
            AnnotationRecord("s1", "t2", hallucination, _tag("I", "I", "I", "S")),
        ]
        path = write_annotations(tmp_path / "a.jsonl", reversed(first))
        assert [r.key for r in read_annotations(path)] == [("s1", "t1"), ("s1", "t2")]

        agreement = compare_annotations(read_annotations(path), first)
        assert agreement.pooled == 1.0
        assert agreement.items == 2
        assert json.loads(json.dumps(agreement.to_dict()))["per_tier"]["Rule"] == 1.0

    def test_compare_needs_same_traces(self) -> None:
        """Annotation sets over different traces cannot be compared."""
        a = [AnnotationRecord("s1", "t1", None, _tag("I", "I", "I", "I"))]
        b = [AnnotationRecord("s1", "t2", None, _tag("I", "I", "I", "I"))]
        with pytest.raises(LengthMismatch):
            compare_annotations(a, b)
