"""Deterministic simulation of multi-agent topologies with scripted agents.

A task run follows one artifact through the topology. The artifact is clean,
tainted by a fault, or repaired by an agent. Agents meet taints through
their scripted policy (detect, then fix) and every detection or repair is
traced with the agent's tier label. All randomness comes from per-(task,
agent) streams derived from the task seed.
"""

from __future__ import annotations

import asyncio
import logging
import os
import random
from collections.abc import Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import StrEnum
from pathlib import Path

from .bus import Bus, BusStats, Delivery
from .campaign import CampaignConfig, SimulatorTarget, TaskDescriptor, spec_to_dict
from .const import BASELINE_SPEC_ID, ENTRY_SENDER
from .errors import ConfigurationError, ExecutionError
from .injection import FaultDispatcher
from .prompt_mod import InjectionLedger, PromptDoc, PromptRole
from .rewrite import AgentOutput, HistoryMessage, HistoryWindow, OutputKind, ToolCall
from .rewrite import output_kind_for
from .scenarios import Scenario, ScriptedAgent, Topology
from .taxonomy import (
    INFORMATION_LOSS_FAULT_TYPES,
    FaultSpec,
    FaultType,
    FtTier,
    InjectionMechanism,
    InterceptionPoint,
    derive_seed,
)
from .tracelog import (
    MANIFEST_PARTIAL,
    EventKind,
    Manifest,
    MemorySink,
    TaskOutcome,
    TraceEvent,
    TraceHeader,
    TraceRecorder,
    TraceSink,
    TraceWriter,
    ensure_fresh_output,
    load_outcomes,
    task_trace_path,
    write_manifest,
)

_LOGGER = logging.getLogger(__name__)

RESULT_AGENT = "simulator"

_EGRESS_POINTS = (
    InterceptionPoint.AGENT_OUTPUT_EGRESS,
    InterceptionPoint.TOOL_CALL_EGRESS,
)


class SimulationError(ExecutionError):
    """Raised when a simulated run cannot complete."""


class ArtifactStatus(StrEnum):
    """State of the artifact travelling through a topology."""

    CLEAN = "clean"
    TAINTED = "tainted"
    REPAIRED = "repaired"


@dataclass(frozen=True)
class Artifact:
    """The artifact's state, with the fault behind a taint or the repairer."""

    status: ArtifactStatus = ArtifactStatus.CLEAN
    cause: FaultType | None = None
    repairer: str | None = None

    @classmethod
    def tainted(cls, cause: FaultType) -> Artifact:
        """An artifact carrying an unrepaired fault."""
        return cls(ArtifactStatus.TAINTED, cause=cause)

    @classmethod
    def repaired(cls, agent_id: str) -> Artifact:
        """An artifact repaired by an agent."""
        return cls(ArtifactStatus.REPAIRED, repairer=agent_id)


@dataclass(frozen=True)
class TaskRunResult:
    """Outcome, event stream and bus counters of one simulated task."""

    outcome: TaskOutcome
    events: list[TraceEvent]
    bus: BusStats


@dataclass(frozen=True)
class _Step:
    state: Artifact
    payload: str
    detected: bool


class _TaskRun:
    """Step machine of one task under one fault plan."""

    def __init__(
        self,
        scenario: Scenario,
        task: TaskDescriptor,
        plan: Sequence[FaultSpec],
        seed: int,
        recorder: TraceRecorder,
    ) -> None:
        self._scenario = scenario
        self._task = task
        self._seed = seed
        self._recorder = recorder
        self._agents = {agent.id: agent for agent in scenario.agents}
        self._rngs = {
            agent.id: random.Random(derive_seed(seed, "agent", agent.id))
            for agent in scenario.agents
        }
        self._outcome_rng = random.Random(derive_seed(seed, "outcome"))
        self._dispatcher = FaultDispatcher()
        self._ledger = InjectionLedger()

        routing = [
            s for s in plan if s.mechanism is InjectionMechanism.ROUTING_MANIPULATION
        ]
        self._specs = [s for s in plan if s not in routing]
        self.bus = Bus(
            self._agents,
            recorder=recorder,
            routing=routing,
            max_deliveries=scenario.max_deliveries,
        )

        self._blind: set[str] = set()
        self._pending: dict[str, list[FaultSpec]] = {}
        self._polluted: dict[str, FaultType] = {}
        self._transcript: list[tuple[str, HistoryMessage]] = []
        self._turn = 0

    # ------------------------------------------------------------------
    # Plumbing
    # ------------------------------------------------------------------

    def _matching(
        self, agent: ScriptedAgent, *points: InterceptionPoint
    ) -> list[FaultSpec]:
        return [
            s
            for s in self._specs
            if s.point in points and s.target.matches_agent(agent.id, agent.role)
        ]

    def _mutation_seed(self, agent_id: str) -> int:
        return derive_seed(self._seed, "mutation", agent_id, self._turn)

    def _encounter(self, agent: ScriptedAgent, tier: FtTier, cause: FaultType) -> bool:
        """Run the agent's detect/fix policy against one fault."""
        rng = self._rngs[agent.id]
        p_detect = 0.0 if agent.id in self._blind else agent.p_detect
        if rng.random() >= p_detect:
            return False
        detail = {"cause": str(cause)}
        self._recorder.record(
            EventKind.FT_TRIGGERED, agent.id, tier=tier, detail=detail
        )
        if rng.random() >= agent.p_fix:
            return False
        self._recorder.record(EventKind.FT_FIXED, agent.id, tier=tier, detail=detail)
        return True

    def _pool_recovers(self, agent: ScriptedAgent, cause: FaultType) -> bool:
        """Shared-pool retrieval of information lost to a fault."""
        if not self._scenario.shared_pool or cause not in INFORMATION_LOSS_FAULT_TYPES:
            return False
        if self._rngs[agent.id].random() >= self._scenario.pool_recovery:
            return False
        detail = {"cause": str(cause), "via": "shared_pool"}
        for kind in (EventKind.FT_TRIGGERED, EventKind.FT_FIXED):
            self._recorder.record(kind, agent.id, tier=FtTier.MECHANISM, detail=detail)
        return True

    def _own_fault(
        self, agent: ScriptedAgent, spec: FaultSpec, state: Artifact, tier: FtTier
    ) -> Artifact:
        """An agent meeting a fault injected into its own inputs."""
        if self._pool_recovers(agent, spec.fault_type) or self._encounter(
            agent, tier, spec.fault_type
        ):
            if state.status is ArtifactStatus.CLEAN:
                return Artifact.repaired(agent.id)
            return state
        return Artifact.tainted(spec.fault_type)

    def _history(self, agent: ScriptedAgent) -> HistoryWindow:
        messages = [
            HistoryMessage(
                sender=agent.id, role="system", text=agent.system_prompt, is_system=True
            )
        ]
        for recipient, message in self._transcript:
            if (
                self._scenario.shared_pool
                or recipient == agent.id
                or message.sender == ENTRY_SENDER
            ):
                messages.append(message)
        return HistoryWindow(messages=tuple(messages))

    def _produce(self, agent: ScriptedAgent, kind: OutputKind) -> AgentOutput:
        value = derive_seed(self._seed, "content", agent.id) % 90 + 10
        task_id = self._task.id
        if kind is OutputKind.TOOL_CALL and agent.tools:
            call = ToolCall(
                tool_name=agent.tools[0],
                arguments={"query": task_id, "limit": value, "offset": 0},
            )
            return AgentOutput(agent.id, kind, call.arguments_json(), call)
        if kind is OutputKind.PLAN:
            content = (
                f"1. Review the input of task {task_id} (step {self._turn}).\n"
                f"2. Prepare the {agent.role} deliverable.\n"
                "3. Hand the result to the next agent."
            )
            return AgentOutput(agent.id, kind, content)
        content = (
            f"Step {self._turn}: the {agent.role} result for task {task_id} "
            f"is likely {value}. It must meet every stated requirement."
        )
        return AgentOutput(agent.id, OutputKind.REASONING, content)

    # ------------------------------------------------------------------
    # Bus hand-offs
    # ------------------------------------------------------------------

    def _on_delivery(self, delivery: Delivery) -> None:
        if delivery.cyclic:
            return
        if not delivery.duplicate and not delivery.extra:
            role = "user" if delivery.sender == ENTRY_SENDER else "assistant"
            self._transcript.append(
                (
                    delivery.recipient,
                    HistoryMessage(delivery.sender, role, delivery.payload),
                )
            )
            return
        agent = self._agents.get(delivery.recipient)
        if agent is None or delivery.cause is None:
            return
        if not self._encounter(agent, agent.tier_label, delivery.cause):
            self._polluted.setdefault(agent.id, delivery.cause)

    def _handoff(
        self, sender: str, recipient: str, payload: str, state: Artifact
    ) -> Artifact:
        """Move the artifact from one agent to the next over the bus."""
        lost: list[Delivery] = []
        root = self.bus.send(sender, recipient, payload)
        self.bus.drain(self._on_delivery, lost.append)
        if self.bus.delivered(root):
            return state
        if not lost:
            raise SimulationError(
                f"message from {sender!r} never reached {recipient!r}; "
                "check the subscriptions of the scenario"
            )
        owner = self._agents.get(sender)
        if owner is not None and self._encounter(
            owner, owner.tier_label, FaultType.MESSAGE_CYCLE
        ):
            self.bus.send(sender, recipient, payload, bypass=True)
            self.bus.drain(self._on_delivery)
            return state
        return Artifact.tainted(FaultType.MESSAGE_CYCLE)

    # ------------------------------------------------------------------
    # Agent step
    # ------------------------------------------------------------------

    async def _init_prompts(self) -> None:
        for agent in self._scenario.agents:
            prompt = PromptDoc(PromptRole.SYSTEM, agent.system_prompt, agent.id)
            for spec in self._matching(agent, InterceptionPoint.SYSTEM_PROMPT_INIT):
                mutated = await self._dispatcher.apply_prompt(
                    spec,
                    prompt,
                    seed=self._mutation_seed(agent.id),
                    recorder=self._recorder,
                    agent_id=agent.id,
                    ledger=self._ledger,
                )
                if mutated is None:
                    continue
                prompt = mutated
                self._pending.setdefault(agent.id, []).append(spec)
                if spec.fault_type is FaultType.BLIND_TRUST:
                    self._blind.add(agent.id)

    async def _act(
        self,
        agent: ScriptedAgent,
        state: Artifact,
        text: str,
        *,
        inspect: bool = True,
    ) -> _Step:
        self._turn += 1
        detected = False
        if inspect and state.status is ArtifactStatus.TAINTED:
            assert state.cause is not None
            if self._pool_recovers(agent, state.cause):
                state = Artifact.repaired(agent.id)
            else:
                before = len(self._recorder.events)
                if self._encounter(agent, agent.tier_label, state.cause):
                    state = Artifact.repaired(agent.id)
                detected = len(self._recorder.events) > before

        for spec in self._pending.pop(agent.id, []):
            state = self._own_fault(agent, spec, state, FtTier.PROMPT)

        for spec in self._matching(agent, InterceptionPoint.USER_PROMPT_INGRESS):
            mutated = await self._dispatcher.apply_prompt(
                spec,
                PromptDoc(PromptRole.USER, text, agent.id),
                seed=self._mutation_seed(agent.id),
                recorder=self._recorder,
                agent_id=agent.id,
                ledger=self._ledger,
            )
            if mutated is not None:
                text = mutated.text
                state = self._own_fault(agent, spec, state, FtTier.PROMPT)

        for spec in self._matching(agent, InterceptionPoint.HISTORY_WINDOW_INGRESS):
            window = self._dispatcher.apply_history(
                spec,
                self._history(agent),
                recorder=self._recorder,
                agent_id=agent.id,
            )
            if window is not None:
                state = self._own_fault(agent, spec, state, agent.tier_label)

        cause = self._polluted.get(agent.id)
        if cause is not None and state.status is not ArtifactStatus.TAINTED:
            state = Artifact.tainted(cause)

        egress = self._matching(agent, *_EGRESS_POINTS)
        kind = output_kind_for(egress[0].fault_type) if egress else OutputKind.REASONING
        if kind is OutputKind.TOOL_CALL and not agent.tools:
            kind = OutputKind.REASONING
        output = self._produce(agent, kind)
        for spec in egress:
            mutated_output = await self._dispatcher.apply_output(
                spec,
                output,
                seed=self._mutation_seed(agent.id),
                recorder=self._recorder,
                catalog=agent.tools,
            )
            if mutated_output is not None:
                output = mutated_output
                state = Artifact.tainted(spec.fault_type)
        return _Step(state=state, payload=output.content, detected=detected)

    def _final(self, state: Artifact, last: ScriptedAgent) -> bool:
        if not self._task.solvable:
            return False
        if state.status is ArtifactStatus.CLEAN:
            return True
        if state.status is ArtifactStatus.REPAIRED:
            assert state.repairer is not None
            threshold = self._agents[state.repairer].p_succ_given_fix
        else:
            threshold = last.p_succ_given_unfixed
        return self._outcome_rng.random() < threshold

    # ------------------------------------------------------------------
    # Topologies
    # ------------------------------------------------------------------

    async def _linear(self) -> bool:
        state = Artifact()
        payload = self._task.input
        sender = ENTRY_SENDER
        for agent in self._scenario.agents:
            state = self._handoff(sender, agent.id, payload, state)
            step = await self._act(agent, state, payload)
            state, payload, sender = step.state, step.payload, agent.id
        return self._final(state, self._scenario.agents[-1])

    async def _review_loop(
        self,
        producer: ScriptedAgent,
        reviewer: ScriptedAgent,
        reviser: ScriptedAgent,
        reviews: int,
        *,
        state: Artifact,
        payload: str,
        sender: str,
    ) -> bool:
        """Produce, then review and revise until accepted or out of rounds."""
        state = self._handoff(sender, producer.id, payload, state)
        step = await self._act(producer, state, payload)
        state, payload, last = step.state, step.payload, producer
        for round_index in range(reviews):
            state = self._handoff(last.id, reviewer.id, payload, state)
            review = await self._act(reviewer, state, payload)
            state = review.state
            if not review.detected:
                return self._final(state, reviewer)
            if round_index == reviews - 1:
                break
            state = self._handoff(reviewer.id, reviser.id, review.payload, state)
            step = await self._act(reviser, state, payload, inspect=False)
            state, payload, last = step.state, step.payload, reviser
        return False

    async def _critic_refine(self) -> bool:
        generator, judge, refiner = self._scenario.agents
        return await self._review_loop(
            generator,
            judge,
            refiner,
            self._scenario.max_iterations + 1,
            state=Artifact(),
            payload=self._task.input,
            sender=ENTRY_SENDER,
        )

    async def _bilateral(self) -> bool:
        user, assistant = self._scenario.agents
        state = self._handoff(ENTRY_SENDER, user.id, self._task.input, Artifact())
        step = await self._act(user, state, self._task.input)
        reviews = max(1, (self._scenario.turn_limit - 1) // 2)
        return await self._review_loop(
            assistant,
            user,
            assistant,
            reviews,
            state=step.state,
            payload=step.payload,
            sender=user.id,
        )

    async def run(self) -> bool:
        """Run the topology and return the task's success."""
        await self._init_prompts()
        match self._scenario.topology:
            case Topology.LINEAR_PIPELINE:
                success = await self._linear()
            case Topology.CRITIC_REFINE_LOOP:
                success = await self._critic_refine()
            case Topology.BILATERAL_NEGOTIATION:
                success = await self._bilateral()
        if not self.bus.stats.balanced:
            raise SimulationError(f"bus counters do not balance: {self.bus.stats}")
        return success


# ----------------------------------------------------------------------
# Task and campaign runners
# ----------------------------------------------------------------------


def _injected(events: Sequence[TraceEvent]) -> bool:
    return any(e.kind is EventKind.FAULT_INJECTED for e in events)


async def run_task_async(
    scenario: Scenario,
    task: TaskDescriptor,
    fault_plan: Sequence[FaultSpec],
    seed: int,
    *,
    sink: TraceSink | None = None,
    spec_id: str | None = None,
    verbose: bool = False,
) -> TaskRunResult:
    """Simulate one task; see :func:`run_task`."""
    if spec_id is None:
        spec_id = fault_plan[0].id if fault_plan else BASELINE_SPEC_ID
    recorder = TraceRecorder(
        task.id, spec_id, sink if sink is not None else MemorySink(), verbose=verbose
    )
    run = _TaskRun(scenario, task, fault_plan, seed, recorder)
    success = await run.run()
    applicable = not fault_plan or _injected(recorder.events)
    outcome = recorder.finish(
        success,
        agent_id=RESULT_AGENT,
        applicable=applicable,
        fault_type=fault_plan[0].fault_type if fault_plan else None,
    )
    return TaskRunResult(outcome=outcome, events=recorder.events, bus=run.bus.stats)


def run_task(
    scenario: Scenario,
    task: TaskDescriptor,
    fault_plan: Sequence[FaultSpec],
    seed: int,
    *,
    sink: TraceSink | None = None,
    spec_id: str | None = None,
    verbose: bool = False,
) -> TaskRunResult:
    """Simulate one task under a fault plan (empty for the baseline).

    Semantic specs run through their offline fallbacks. A spec counts as
    applicable for the task when at least one fault_injected event occurred.
    """
    return asyncio.run(
        run_task_async(
            scenario,
            task,
            fault_plan,
            seed,
            sink=sink,
            spec_id=spec_id,
            verbose=verbose,
        )
    )


@dataclass(frozen=True)
class CampaignResult:
    """Where a campaign was written and what it produced."""

    output_dir: Path
    baseline: list[TaskOutcome]
    injected: list[TaskOutcome]
    manifest: Manifest


def task_seed(campaign_seed: int, spec: FaultSpec | None, task_id: str) -> int:
    """Seed of one task run: per-spec seed when set, else derived."""
    if spec is None:
        return derive_seed(campaign_seed, BASELINE_SPEC_ID, task_id)
    if spec.seed is not None:
        return derive_seed(spec.seed, task_id)
    return derive_seed(campaign_seed, spec.id, task_id)


@dataclass(frozen=True)
class _Job:
    task: TaskDescriptor
    spec: FaultSpec | None
    seed: int
    path: Path


def _run_job(
    scenario: Scenario, job: _Job, campaign_seed: int, verbose: bool
) -> TaskOutcome:
    spec_id = job.spec.id if job.spec is not None else BASELINE_SPEC_ID
    header = TraceHeader(
        task_id=job.task.id,
        spec_id=spec_id,
        campaign_seed=campaign_seed,
        fault_type=job.spec.fault_type if job.spec is not None else None,
        verbose=verbose,
    )
    plan = [job.spec] if job.spec is not None else []
    with TraceWriter(job.path, header) as writer:
        result = run_task(
            scenario,
            job.task,
            plan,
            job.seed,
            sink=writer,
            spec_id=spec_id,
            verbose=verbose,
        )
    return result.outcome


def _run_jobs(
    scenario: Scenario,
    jobs: list[_Job],
    campaign_seed: int,
    *,
    parallel: int,
    verbose: bool,
) -> list[TaskOutcome]:
    if parallel <= 1:
        return [_run_job(scenario, job, campaign_seed, verbose) for job in jobs]
    with ThreadPoolExecutor(max_workers=parallel) as pool:
        return list(
            pool.map(
                lambda job: _run_job(scenario, job, campaign_seed, verbose), jobs
            )
        )


def run_campaign(
    config: CampaignConfig,
    *,
    output_dir: str | os.PathLike[str] | None = None,
    parallel: int = 1,
    force: bool = False,
    verbose: bool = False,
) -> CampaignResult:
    """Run the baseline pass, then one pass per fault spec over T_base.

    Traces land in ``baseline/`` and ``traces/<spec>/`` under the output
    directory together with a manifest. On failure the manifest is written
    with status ``partial`` before the error propagates.
    """
    target = config.execution_target
    if not isinstance(target, SimulatorTarget):
        raise ConfigurationError("simulate needs a simulator execution target")
    out = Path(output_dir if output_dir is not None else config.output_dir)
    ensure_fresh_output(out, force=force)
    scenario = target.scenario
    seed = config.campaign_seed

    offline = FaultDispatcher()
    manifest = Manifest(
        campaign_seed=seed,
        specs=[
            {
                **spec_to_dict(spec),
                "offline_fallback": offline.offline_fallback(spec),
            }
            for spec in config.fault_specs
        ],
        injector={"mode": "offline"},
    )
    manifest.notes["topology"] = str(scenario.topology)
    if target.preset:
        manifest.notes["preset"] = target.preset

    _LOGGER.info(
        "Campaign started: %d task(s), %d spec(s), %s",
        len(config.tasks),
        len(config.fault_specs),
        scenario.topology,
    )
    baseline: list[TaskOutcome] = []
    injected: list[TaskOutcome] = []
    written: list[Path] = []
    try:
        if config.baseline_ref:
            baseline = load_outcomes(config.baseline_ref)
            manifest.notes["baseline_ref"] = config.baseline_ref
        else:
            jobs = [
                _Job(
                    t,
                    None,
                    task_seed(seed, None, t.id),
                    task_trace_path(out, None, t.id),
                )
                for t in config.tasks
            ]
            baseline = _run_jobs(
                scenario, jobs, seed, parallel=parallel, verbose=verbose
            )
            written.extend(job.path for job in jobs)

        passed = {o.task_id for o in baseline if o.success}
        t_base = [t for t in config.tasks if t.id in passed]
        _LOGGER.info("Baseline: %d of %d task(s) succeed", len(t_base), len(baseline))

        for spec in config.fault_specs:
            jobs = [
                _Job(
                    t,
                    spec,
                    task_seed(seed, spec, t.id),
                    task_trace_path(out, spec.id, t.id),
                )
                for t in t_base
            ]
            injected.extend(
                _run_jobs(scenario, jobs, seed, parallel=parallel, verbose=verbose)
            )
            written.extend(job.path for job in jobs)
            _LOGGER.info("Spec %s done (%d task(s))", spec.id, len(jobs))
    except Exception as err:
        manifest.status = MANIFEST_PARTIAL
        manifest.error = str(err)
        _register(manifest, out, written)
        write_manifest(out, manifest)
        raise

    _register(manifest, out, written)
    write_manifest(out, manifest)
    _LOGGER.info("Campaign written to %s", out)
    return CampaignResult(
        output_dir=out, baseline=baseline, injected=injected, manifest=manifest
    )


def _register(manifest: Manifest, root: Path, paths: list[Path]) -> None:
    for path in paths:
        if path.exists():
            manifest.add_file(root, path)
