"""In-process message bus of the simulator.

Routing faults are installed as hooks that act on a message when it is sent;
rule filters act on every delivery when it is drained. Delivery order is
FIFO. Every enqueued delivery ends up exactly once as processed, filtered or
dropped.
"""

from __future__ import annotations

import logging
from collections import deque
from collections.abc import Callable, Mapping, Sequence
from dataclasses import dataclass, replace

from .const import DEFAULT_MAX_DELIVERIES
from .injection import record_inapplicable, record_injection
from .scenarios import ScriptedAgent
from .taxonomy import FaultSpec, FaultType, FtTier
from .tracelog import EventKind, TraceRecorder, payload_digest

_LOGGER = logging.getLogger(__name__)

GUARD_LOOP = "loop_guard"
GUARD_BUDGET = "delivery_budget"
FILTER_DEDUP = "dedup"
FILTER_SUBSCRIPTION = "subscription"


@dataclass(frozen=True)
class Delivery:
    """One message on its way to a single recipient."""

    msg_id: str
    root_id: str
    sender: str
    recipient: str
    payload: str
    digest: str
    original_recipient: str
    hop: int = 0
    copy: int = 0
    cause: FaultType | None = None
    cyclic: bool = False
    extra: bool = False
    restored: bool = False

    @property
    def faulty(self) -> bool:
        """True when a routing fault produced or redirected this delivery."""
        return self.cause is not None and not self.restored

    @property
    def duplicate(self) -> bool:
        """True for the replicas of a storm beyond the first."""
        return self.copy > 0

    @property
    def replica(self) -> bool:
        """True for every storm copy; replicas never count against the budget."""
        return self.cause is FaultType.MESSAGE_STORM and not self.restored


@dataclass
class BusStats:
    """Delivery counters of one bus."""

    enqueued: int = 0
    processed: int = 0
    filtered: int = 0
    dropped: int = 0

    @property
    def balanced(self) -> bool:
        """Conservation: every enqueued delivery was accounted for once."""
        return self.enqueued == self.processed + self.filtered + self.dropped


DeliveryHandler = Callable[[Delivery], None]


class Bus:
    """FIFO bus with routing-fault hooks and rule filters."""

    def __init__(
        self,
        agents: Mapping[str, ScriptedAgent],
        *,
        recorder: TraceRecorder | None = None,
        routing: Sequence[FaultSpec] = (),
        max_deliveries: int = DEFAULT_MAX_DELIVERIES,
    ) -> None:
        self._agents = dict(agents)
        self._recorder = recorder
        self._routing = tuple(routing)
        self._max_deliveries = max_deliveries
        self._queue: deque[Delivery] = deque()
        self._next_id = 0
        self.stats = BusStats()

        self._seen: dict[str, set[tuple[str, str]]] = {}
        self._processed_per_root: dict[str, int] = {}
        self._delivered: set[str] = set()
        self._restored: set[str] = set()
        self._lost: set[str] = set()
        self._episodes: set[tuple[str, str]] = set()

    # ------------------------------------------------------------------
    # Sending
    # ------------------------------------------------------------------

    def _new_id(self) -> str:
        self._next_id += 1
        return f"m{self._next_id}"

    def _record(
        self,
        kind: EventKind,
        agent_id: str,
        *,
        payload: str | None = None,
        tier: FtTier | None = None,
        detail: Mapping[str, object] | None = None,
    ) -> None:
        if self._recorder is not None:
            self._recorder.record(
                kind, agent_id, payload=payload, tier=tier, detail=detail
            )

    def _enqueue(self, delivery: Delivery) -> None:
        self.stats.enqueued += 1
        self._queue.append(delivery)
        _LOGGER.debug(
            "→ %s %s->%s hop=%d",
            delivery.msg_id,
            delivery.sender,
            delivery.recipient,
            delivery.hop,
        )
        self._record(
            EventKind.MSG_SENT,
            delivery.sender,
            payload=delivery.payload,
            detail=_delivery_detail(delivery),
        )

    def routing_spec(self, sender: str, recipient: str) -> FaultSpec | None:
        """First installed routing fault whose edge matches."""
        return next(
            (s for s in self._routing if s.target.matches_edge(sender, recipient)),
            None,
        )

    def send(
        self, sender: str, recipient: str, payload: str, *, bypass: bool = False
    ) -> str:
        """Send a point-to-point message and return its root id.

        With ``bypass`` the routing hooks are skipped (restored routes and
        resends after a repair).
        """
        root = self._new_id()
        base = Delivery(
            msg_id=root,
            root_id=root,
            sender=sender,
            recipient=recipient,
            payload=payload,
            digest=payload_digest(payload),
            original_recipient=recipient,
        )
        spec = None if bypass else self.routing_spec(sender, recipient)
        if spec is None:
            self._enqueue(base)
            return root

        match spec.fault_type:
            case FaultType.MESSAGE_STORM:
                copies = int(spec.params["replication_factor"])
                for index in range(copies):
                    self._enqueue(
                        replace(
                            base,
                            msg_id=f"{root}.{index}",
                            copy=index,
                            hop=base.hop + 1,
                            cause=spec.fault_type,
                        )
                    )
                self._injected(spec, base, {"recipient": recipient, "copies": copies})
            case FaultType.MESSAGE_CYCLE:
                if sender not in self._agents:
                    record_inapplicable(
                        self._recorder, spec, sender, "sender is not an agent"
                    )
                    self._enqueue(base)
                    return root
                self._enqueue(
                    replace(
                        base,
                        recipient=sender,
                        hop=1,
                        cyclic=True,
                        cause=spec.fault_type,
                    )
                )
                self._injected(spec, base, {"recipient": sender})
            case FaultType.MESSAGE_BROADCAST_AMPLIFICATION:
                extras = [a for a in self._agents if a != recipient]
                if not extras:
                    record_inapplicable(
                        self._recorder, spec, sender, "no other agent to reach"
                    )
                    self._enqueue(base)
                    return root
                self._enqueue(base)
                for agent_id in extras:
                    self._enqueue(
                        replace(
                            base,
                            msg_id=self._new_id(),
                            recipient=agent_id,
                            hop=base.hop + 1,
                            extra=True,
                            cause=spec.fault_type,
                        )
                    )
                self._injected(spec, base, {"recipients": sorted(extras)})
            case _:
                raise ValueError(f"{spec.fault_type} is not a routing fault")
        return root

    def _injected(
        self, spec: FaultSpec, base: Delivery, extra: dict[str, object]
    ) -> None:
        record_injection(
            self._recorder,
            spec,
            base.sender,
            base.payload,
            offline_fallback=False,
            marker=f"{spec.id}@{base.sender}->{base.original_recipient}",
            extra={"msg_id": base.root_id, **extra},
        )

    # ------------------------------------------------------------------
    # Draining
    # ------------------------------------------------------------------

    @property
    def pending(self) -> int:
        """Deliveries waiting in the queue."""
        return len(self._queue)

    def delivered(self, root_id: str) -> bool:
        """True once a message reached its original recipient."""
        return root_id in self._delivered

    def drain(
        self,
        handler: DeliveryHandler,
        on_lost: DeliveryHandler | None = None,
    ) -> None:
        """Process the queue until empty.

        ``handler`` sees every processed delivery and may send more messages.
        ``on_lost`` is called once per message that was dropped by the
        delivery budget before ever reaching its original recipient.
        """
        while self._queue:
            delivery = self._queue.popleft()
            agent = self._agents.get(delivery.recipient)

            if (
                agent is not None
                and agent.max_hops is not None
                and delivery.hop > agent.max_hops
            ):
                self._drop(delivery, GUARD_LOOP, max_hops=agent.max_hops)
                self._rule_fix(delivery, GUARD_LOOP)
                self._restore(delivery)
                continue

            if not delivery.replica and self._processed_per_root.get(
                delivery.root_id, 0
            ) >= self._max_deliveries:
                self._drop(delivery, GUARD_BUDGET)
                root = delivery.root_id
                if root not in self._delivered and root not in self._lost:
                    self._lost.add(root)
                    if on_lost is not None:
                        on_lost(delivery)
                continue

            if agent is not None and agent.dedup:
                seen = self._seen.setdefault(delivery.recipient, set())
                key = (delivery.sender, delivery.digest)
                if key in seen:
                    self._filter(delivery, FILTER_DEDUP)
                    continue
                seen.add(key)

            if agent is not None and not agent.accepts_from(delivery.sender):
                self._filter(delivery, FILTER_SUBSCRIPTION)
                continue

            self._process(delivery, handler)

    def _process(self, delivery: Delivery, handler: DeliveryHandler) -> None:
        self.stats.processed += 1
        root = delivery.root_id
        if not delivery.replica:
            self._processed_per_root[root] = self._processed_per_root.get(root, 0) + 1
        if (
            not delivery.extra
            and not delivery.cyclic
            and delivery.recipient == delivery.original_recipient
        ):
            self._delivered.add(root)
        _LOGGER.debug("← %s at %s", delivery.msg_id, delivery.recipient)
        self._record(
            EventKind.MSG_RECEIVED,
            delivery.recipient,
            payload=delivery.payload,
            detail=_delivery_detail(delivery),
        )
        handler(delivery)
        if delivery.cyclic:
            self._enqueue(
                replace(delivery, msg_id=self._new_id(), hop=delivery.hop + 1)
            )

    def _filter(self, delivery: Delivery, reason: str) -> None:
        self.stats.filtered += 1
        _LOGGER.debug(
            "Filtered %s at %s (%s)", delivery.msg_id, delivery.recipient, reason
        )
        self._record(
            EventKind.MSG_FILTERED,
            delivery.recipient,
            payload=delivery.payload,
            detail={**_delivery_detail(delivery), "filter": reason},
        )
        if delivery.faulty:
            self._rule_fix(delivery, reason)
        if delivery.cyclic:
            self._restore(delivery)

    def _drop(self, delivery: Delivery, guard: str, **info: object) -> None:
        self.stats.dropped += 1
        _LOGGER.debug(
            "Dropped %s at %s (%s)", delivery.msg_id, delivery.recipient, guard
        )
        self._record(
            EventKind.LOOP_DETECTED,
            delivery.recipient,
            payload=delivery.payload,
            detail={**_delivery_detail(delivery), "guard": guard, **info},
        )

    def _rule_fix(self, delivery: Delivery, reason: str) -> None:
        episode = (delivery.root_id, delivery.recipient)
        if episode in self._episodes:
            return
        self._episodes.add(episode)
        detail = {"msg_id": delivery.msg_id, "filter": reason}
        if delivery.cause is not None:
            detail["cause"] = str(delivery.cause)
        self._record(
            EventKind.FT_TRIGGERED, delivery.recipient, tier=FtTier.RULE, detail=detail
        )
        self._record(
            EventKind.FT_FIXED, delivery.recipient, tier=FtTier.RULE, detail=detail
        )

    def _restore(self, delivery: Delivery) -> None:
        root = delivery.root_id
        if root in self._restored or root in self._delivered:
            return
        self._restored.add(root)
        self._enqueue(
            Delivery(
                msg_id=self._new_id(),
                root_id=root,
                sender=delivery.sender,
                recipient=delivery.original_recipient,
                payload=delivery.payload,
                digest=delivery.digest,
                original_recipient=delivery.original_recipient,
                restored=True,
            )
        )


def _delivery_detail(delivery: Delivery) -> dict[str, object]:
    detail: dict[str, object] = {
        "msg_id": delivery.msg_id,
        "root_id": delivery.root_id,
        "sender": delivery.sender,
        "recipient": delivery.recipient,
        "hop": delivery.hop,
    }
    if delivery.cause is not None:
        detail["cause"] = str(delivery.cause)
    for flag in ("cyclic", "extra", "restored"):
        if getattr(delivery, flag):
            detail[flag] = True
    if delivery.copy:
        detail["copy"] = delivery.copy
    return detail
