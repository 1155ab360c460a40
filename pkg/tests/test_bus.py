"""Tests for the simulated message bus and its routing faults."""

from __future__ import annotations

import pytest

from mas_faultlab.bus import (
    FILTER_DEDUP,
    FILTER_SUBSCRIPTION,
    GUARD_BUDGET,
    GUARD_LOOP,
    Bus,
    Delivery,
)
from mas_faultlab.scenarios import ScriptedAgent
from mas_faultlab.taxonomy import FaultSpec, FaultType, FtTier, TargetSelector
from mas_faultlab.tracelog import EventKind, MemorySink, TraceRecorder


def _agents(*agents: ScriptedAgent) -> dict[str, ScriptedAgent]:
    return {agent.id: agent for agent in agents}


def _edge_spec(
    fault_type: FaultType, sender: str = "a1", recipient: str = "a2", **params: int
) -> FaultSpec:
    return FaultSpec(
        id="route",
        fault_type=fault_type,
        target=TargetSelector.for_edge(sender, recipient),
        params=params,
    )


def _events(recorder: TraceRecorder, kind: EventKind) -> list:
    return [e for e in recorder.events if e.kind is kind]


class _Collector:
    """Delivery handler remembering what it saw."""

    def __init__(self) -> None:
        self.seen: list[Delivery] = []

    def __call__(self, delivery: Delivery) -> None:
        self.seen.append(delivery)

    @property
    def recipients(self) -> list[str]:
        return [d.recipient for d in self.seen]


class TestPlainDelivery:
    """Tests for fault-free delivery."""

    def test_fifo_and_conservation(self) -> None:
        """Messages arrive in order and every delivery is accounted for."""
        bus = Bus(_agents(ScriptedAgent("a1", "A"), ScriptedAgent("a2", "B")))
        collector = _Collector()
        first = bus.send("a1", "a2", "one")
        bus.send("a2", "a1", "two")
        bus.drain(collector)
        assert [d.payload for d in collector.seen] == ["one", "two"]
        assert bus.delivered(first)
        assert bus.stats.balanced
        assert bus.pending == 0

    def test_subscription_filter(self) -> None:
        """Senders outside the subscription list are filtered."""
        recorder = TraceRecorder("t1", "baseline", MemorySink())
        bus = Bus(
            _agents(
                ScriptedAgent("a1", "A"),
                ScriptedAgent("a2", "B", subscriptions=("a0",)),
            ),
            recorder=recorder,
        )
        bus.send("a1", "a2", "hello")
        bus.drain(_Collector())
        filtered = _events(recorder, EventKind.MSG_FILTERED)
        assert filtered[0].detail["filter"] == FILTER_SUBSCRIPTION
        assert not _events(recorder, EventKind.FT_TRIGGERED)


class TestMessageStorm:
    """Tests for MessageStorm."""

    @pytest.mark.parametrize("copies", [2, 5, 10])
    def test_dedup_absorbs_storm(self, copies: int) -> None:
        """Deduplication processes one copy and fixes the storm once."""
        recorder = TraceRecorder("t1", "route", MemorySink())
        bus = Bus(
            _agents(ScriptedAgent("a1", "A"), ScriptedAgent("a2", "B", dedup=True)),
            recorder=recorder,
            routing=[
                _edge_spec(FaultType.MESSAGE_STORM, replication_factor=copies)
            ],
        )
        collector = _Collector()
        bus.send("a1", "a2", "report")
        bus.drain(collector)

        assert len(collector.seen) == 1
        assert bus.stats.enqueued == copies
        assert bus.stats.filtered == copies - 1
        assert bus.stats.balanced
        filtered = _events(recorder, EventKind.MSG_FILTERED)
        assert {e.detail["filter"] for e in filtered} == {FILTER_DEDUP}
        triggered = _events(recorder, EventKind.FT_TRIGGERED)
        assert [e.tier for e in triggered] == [FtTier.RULE]
        assert len(_events(recorder, EventKind.FT_FIXED)) == 1
        injected = _events(recorder, EventKind.FAULT_INJECTED)
        assert injected[0].detail["copies"] == copies

    @pytest.mark.parametrize("copies", [2, 5, 10])
    def test_storm_without_dedup(self, copies: int) -> None:
        """Without deduplication every copy is processed."""
        recorder = TraceRecorder("t1", "route", MemorySink())
        bus = Bus(
            _agents(ScriptedAgent("a1", "A"), ScriptedAgent("a2", "B")),
            recorder=recorder,
            routing=[
                _edge_spec(FaultType.MESSAGE_STORM, replication_factor=copies)
            ],
        )
        collector = _Collector()
        bus.send("a1", "a2", "report")
        bus.drain(collector)

        assert len(collector.seen) == copies
        assert sum(d.duplicate for d in collector.seen) == copies - 1
        assert not _events(recorder, EventKind.FT_TRIGGERED)

    def test_large_storm_ignores_delivery_budget(self) -> None:
        """Storm copies beyond max_deliveries are still all processed."""
        recorder = TraceRecorder("t1", "route", MemorySink())
        bus = Bus(
            _agents(ScriptedAgent("a1", "A"), ScriptedAgent("a2", "B")),
            recorder=recorder,
            routing=[_edge_spec(FaultType.MESSAGE_STORM, replication_factor=100)],
            max_deliveries=64,
        )
        collector = _Collector()
        bus.send("a1", "a2", "report")
        bus.drain(collector)

        assert len(collector.seen) == 100
        assert bus.stats.dropped == 0
        assert not _events(recorder, EventKind.LOOP_DETECTED)

    def test_copies_are_one_hop_away(self) -> None:
        """Every storm copy counts as a further hop."""
        bus = Bus(
            _agents(ScriptedAgent("a1", "A"), ScriptedAgent("a2", "B")),
            routing=[_edge_spec(FaultType.MESSAGE_STORM, replication_factor=3)],
        )
        collector = _Collector()
        bus.send("a1", "a2", "report")
        bus.drain(collector)
        assert [d.hop for d in collector.seen] == [1, 1, 1]

    def test_bypass_skips_routing(self) -> None:
        """Bypassed sends are never replicated."""
        bus = Bus(
            _agents(ScriptedAgent("a1", "A"), ScriptedAgent("a2", "B")),
            routing=[_edge_spec(FaultType.MESSAGE_STORM, replication_factor=3)],
        )
        collector = _Collector()
        bus.send("a1", "a2", "report", bypass=True)
        bus.drain(collector)
        assert len(collector.seen) == 1


class TestMessageCycle:
    """Tests for MessageCycle and the loop guards."""

    def test_hop_guard_breaks_the_cycle(self) -> None:
        """Four cyclic deliveries, then the guard restores the route."""
        recorder = TraceRecorder("t1", "route", MemorySink())
        bus = Bus(
            _agents(
                ScriptedAgent("a1", "A", max_hops=4), ScriptedAgent("a2", "B")
            ),
            recorder=recorder,
            routing=[_edge_spec(FaultType.MESSAGE_CYCLE)],
        )
        collector = _Collector()
        root = bus.send("a1", "a2", "ping")
        bus.drain(collector)

        assert collector.recipients == ["a1"] * 4 + ["a2"]
        assert [d.hop for d in collector.seen[:4]] == [1, 2, 3, 4]
        loops = _events(recorder, EventKind.LOOP_DETECTED)
        assert len(loops) == 1
        assert loops[0].detail["guard"] == GUARD_LOOP
        assert collector.seen[-1].restored
        assert bus.delivered(root)
        assert bus.stats.balanced

    def test_dedup_breaks_the_cycle(self) -> None:
        """A deduplicating sender filters its own echo."""
        recorder = TraceRecorder("t1", "route", MemorySink())
        bus = Bus(
            _agents(
                ScriptedAgent("a1", "A", dedup=True), ScriptedAgent("a2", "B")
            ),
            recorder=recorder,
            routing=[_edge_spec(FaultType.MESSAGE_CYCLE)],
        )
        collector = _Collector()
        bus.send("a1", "a2", "ping")
        bus.drain(collector)

        assert collector.recipients == ["a1", "a2"]
        assert len(_events(recorder, EventKind.FT_FIXED)) == 1

    def test_delivery_budget(self) -> None:
        """Without guards the delivery budget ends the cycle and reports loss."""
        recorder = TraceRecorder("t1", "route", MemorySink())
        bus = Bus(
            _agents(
                ScriptedAgent("a1", "A", max_hops=None), ScriptedAgent("a2", "B")
            ),
            recorder=recorder,
            routing=[_edge_spec(FaultType.MESSAGE_CYCLE)],
            max_deliveries=5,
        )
        collector = _Collector()
        lost = _Collector()
        root = bus.send("a1", "a2", "ping")
        bus.drain(collector, lost)

        assert len(collector.seen) == 5
        assert len(lost.seen) == 1
        assert not bus.delivered(root)
        loops = _events(recorder, EventKind.LOOP_DETECTED)
        assert loops[0].detail["guard"] == GUARD_BUDGET
        assert not _events(recorder, EventKind.FT_TRIGGERED)

    def test_sender_must_be_an_agent(self) -> None:
        """A cycle from outside the agent set is inapplicable."""
        recorder = TraceRecorder("t1", "route", MemorySink())
        bus = Bus(
            _agents(ScriptedAgent("a1", "A"), ScriptedAgent("a2", "B")),
            recorder=recorder,
            routing=[_edge_spec(FaultType.MESSAGE_CYCLE, sender="user")],
        )
        collector = _Collector()
        bus.send("user", "a2", "task")
        bus.drain(collector)

        assert collector.recipients == ["a2"]
        attempt = _events(recorder, EventKind.INJECTION_ATTEMPT)[0]
        assert attempt.detail["applicable"] is False


class TestBroadcastAmplification:
    """Tests for MessageBroadcastAmplification."""

    def test_every_agent_receives(self) -> None:
        """The message also reaches every other agent, sender included."""
        bus = Bus(
            _agents(
                ScriptedAgent("a1", "A"),
                ScriptedAgent("a2", "B"),
                ScriptedAgent("a3", "C"),
            ),
            routing=[_edge_spec(FaultType.MESSAGE_BROADCAST_AMPLIFICATION)],
        )
        collector = _Collector()
        root = bus.send("a1", "a2", "note")
        bus.drain(collector)

        assert collector.recipients == ["a2", "a1", "a3"]
        assert [d.extra for d in collector.seen] == [False, True, True]
        assert [d.hop for d in collector.seen] == [0, 1, 1]
        assert bus.delivered(root)

    def test_subscription_rejects_extras(self) -> None:
        """A subscribing agent filters the extra copy and fixes it by rule."""
        recorder = TraceRecorder("t1", "route", MemorySink())
        bus = Bus(
            _agents(
                ScriptedAgent("a1", "A"),
                ScriptedAgent("a2", "B"),
                ScriptedAgent("a3", "C", subscriptions=("a2",)),
            ),
            recorder=recorder,
            routing=[_edge_spec(FaultType.MESSAGE_BROADCAST_AMPLIFICATION)],
        )
        collector = _Collector()
        bus.send("a1", "a2", "note")
        bus.drain(collector)

        assert collector.recipients == ["a2", "a1"]
        fixed = _events(recorder, EventKind.FT_FIXED)
        assert [e.agent_id for e in fixed] == ["a3"]
