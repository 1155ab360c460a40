"""Simulated topologies and scripted agent policies."""

from __future__ import annotations

import json
import logging
from collections.abc import Mapping
from dataclasses import dataclass
from enum import StrEnum
from functools import cache
from importlib import resources
from typing import Any

import voluptuous as vol

from .const import (
    CONF_AGENTS,
    CONF_AGENT_ID,
    CONF_DEDUP,
    CONF_MAX_DELIVERIES,
    CONF_MAX_HOPS,
    CONF_MAX_ITERATIONS,
    CONF_P_DETECT,
    CONF_P_FIX,
    CONF_P_SUCC_GIVEN_FIX,
    CONF_P_SUCC_GIVEN_UNFIXED,
    CONF_POOL_RECOVERY,
    CONF_PRESET,
    CONF_ROLE,
    CONF_SCHEMA_VERSION,
    CONF_SHARED_POOL,
    CONF_SUBSCRIPTIONS,
    CONF_TIER_LABEL,
    CONF_TOOLS,
    CONF_TOPOLOGY,
    CONF_TURN_LIMIT,
    DEFAULT_MAX_DELIVERIES,
    DEFAULT_MAX_HOPS,
    DEFAULT_MAX_ITERATIONS,
    DEFAULT_POOL_RECOVERY,
    DEFAULT_TURN_LIMIT,
    SCHEMA_VERSION,
)
from .errors import ConfigurationError
from .taxonomy import FtTier

_LOGGER = logging.getLogger(__name__)

PRESETS_FILE = "scenarios.json"


class ScenarioError(ConfigurationError):
    """Raised when a scenario document is malformed or unknown."""


class TopologyError(ScenarioError):
    """Raised when a scenario violates its topology's invariants."""


class Topology(StrEnum):
    """The three simulated architectural paradigms."""

    LINEAR_PIPELINE = "LinearPipeline"
    CRITIC_REFINE_LOOP = "CriticRefineLoop"
    BILATERAL_NEGOTIATION = "BilateralNegotiation"


@dataclass(frozen=True)
class ScriptedAgent:
    """A simulated agent with a probabilistic fault-tolerance policy.

    Filters: ``dedup`` drops repeated (sender, payload) deliveries,
    ``subscriptions`` (None accepts everyone) lists accepted senders and
    ``max_hops`` (None disables the guard) bounds cyclic re-deliveries.
    """

    id: str
    role: str
    p_detect: float = 0.0
    p_fix: float = 0.0
    p_succ_given_fix: float = 1.0
    p_succ_given_unfixed: float = 0.0
    tier_label: FtTier = FtTier.REASONING
    dedup: bool = False
    subscriptions: tuple[str, ...] | None = None
    max_hops: int | None = DEFAULT_MAX_HOPS
    tools: tuple[str, ...] = ()

    @property
    def system_prompt(self) -> str:
        """Role definition handed to the agent at initialization."""
        return (
            f"You are the {self.role}. Complete your part of the task "
            "and hand the result to the next agent."
        )

    def accepts_from(self, sender: str) -> bool:
        """Return True when the subscription filter lets the sender through."""
        return self.subscriptions is None or sender in self.subscriptions


@dataclass(frozen=True)
class Scenario:
    """A topology plus its agents and topology-level knobs."""

    topology: Topology
    agents: tuple[ScriptedAgent, ...]
    shared_pool: bool = False
    pool_recovery: float = DEFAULT_POOL_RECOVERY
    max_iterations: int = DEFAULT_MAX_ITERATIONS
    turn_limit: int = DEFAULT_TURN_LIMIT
    max_deliveries: int = DEFAULT_MAX_DELIVERIES

    @property
    def agent_ids(self) -> tuple[str, ...]:
        """Agent ids in declaration order."""
        return tuple(agent.id for agent in self.agents)

    def agent(self, agent_id: str) -> ScriptedAgent:
        """Return the agent with the given id."""
        for agent in self.agents:
            if agent.id == agent_id:
                return agent
        raise KeyError(agent_id)


_PROBABILITY = vol.All(vol.Coerce(float), vol.Range(min=0.0, max=1.0))

AGENT_SCHEMA = vol.Schema(
    {
        vol.Required(CONF_AGENT_ID): vol.All(str, vol.Length(min=1)),
        vol.Required(CONF_ROLE): vol.All(str, vol.Length(min=1)),
        vol.Optional(CONF_P_DETECT, default=0.0): _PROBABILITY,
        vol.Optional(CONF_P_FIX, default=0.0): _PROBABILITY,
        vol.Optional(CONF_P_SUCC_GIVEN_FIX, default=1.0): _PROBABILITY,
        vol.Optional(CONF_P_SUCC_GIVEN_UNFIXED, default=0.0): _PROBABILITY,
        vol.Optional(CONF_TIER_LABEL, default=FtTier.REASONING.value): vol.In(
            [t.value for t in FtTier]
        ),
        vol.Optional(CONF_DEDUP, default=False): bool,
        vol.Optional(CONF_SUBSCRIPTIONS, default=None): vol.Any(None, [str]),
        vol.Optional(CONF_MAX_HOPS, default=DEFAULT_MAX_HOPS): vol.Any(
            None, vol.All(int, vol.Range(min=1))
        ),
        vol.Optional(CONF_TOOLS, default=list): [str],
    }
)

SCENARIO_SCHEMA = vol.Schema(
    {
        vol.Required(CONF_TOPOLOGY): vol.In([t.value for t in Topology]),
        vol.Required(CONF_AGENTS): vol.All([AGENT_SCHEMA], vol.Length(min=1)),
        vol.Optional(CONF_SHARED_POOL, default=False): bool,
        vol.Optional(CONF_POOL_RECOVERY, default=DEFAULT_POOL_RECOVERY): _PROBABILITY,
        vol.Optional(CONF_MAX_ITERATIONS, default=DEFAULT_MAX_ITERATIONS): vol.All(
            int, vol.Range(min=1)
        ),
        vol.Optional(CONF_TURN_LIMIT, default=DEFAULT_TURN_LIMIT): vol.All(
            int, vol.Range(min=1)
        ),
        vol.Optional(CONF_MAX_DELIVERIES, default=DEFAULT_MAX_DELIVERIES): vol.All(
            int, vol.Range(min=1)
        ),
    }
)


def _check_topology(scenario: Scenario) -> None:
    count = len(scenario.agents)
    if len(set(scenario.agent_ids)) != count:
        raise TopologyError("Agent ids must be unique")
    if scenario.topology is Topology.LINEAR_PIPELINE and count < 2:
        raise TopologyError("LinearPipeline needs at least two agents")
    if scenario.topology is Topology.CRITIC_REFINE_LOOP and count != 3:
        raise TopologyError(
            "CriticRefineLoop needs exactly three agents: generator, judge, refiner"
        )
    if scenario.topology is Topology.BILATERAL_NEGOTIATION and count != 2:
        raise TopologyError(
            "BilateralNegotiation needs exactly two agents: user, assistant"
        )


def scenario_from_dict(data: Mapping[str, Any]) -> Scenario:
    """Validate a scenario mapping and build the Scenario."""
    try:
        checked = SCENARIO_SCHEMA(dict(data))
    except vol.Invalid as err:
        raise ScenarioError(f"Invalid scenario: {err}") from err

    agents = tuple(
        ScriptedAgent(
            id=a[CONF_AGENT_ID],
            role=a[CONF_ROLE],
            p_detect=a[CONF_P_DETECT],
            p_fix=a[CONF_P_FIX],
            p_succ_given_fix=a[CONF_P_SUCC_GIVEN_FIX],
            p_succ_given_unfixed=a[CONF_P_SUCC_GIVEN_UNFIXED],
            tier_label=FtTier(a[CONF_TIER_LABEL]),
            dedup=a[CONF_DEDUP],
            subscriptions=(
                tuple(a[CONF_SUBSCRIPTIONS])
                if a[CONF_SUBSCRIPTIONS] is not None
                else None
            ),
            max_hops=a[CONF_MAX_HOPS],
            tools=tuple(a[CONF_TOOLS]),
        )
        for a in checked[CONF_AGENTS]
    )
    scenario = Scenario(
        topology=Topology(checked[CONF_TOPOLOGY]),
        agents=agents,
        shared_pool=checked[CONF_SHARED_POOL],
        pool_recovery=checked[CONF_POOL_RECOVERY],
        max_iterations=checked[CONF_MAX_ITERATIONS],
        turn_limit=checked[CONF_TURN_LIMIT],
        max_deliveries=checked[CONF_MAX_DELIVERIES],
    )
    _check_topology(scenario)
    return scenario


def scenario_to_dict(scenario: Scenario) -> dict[str, Any]:
    """Return the document form of a scenario."""
    return {
        CONF_TOPOLOGY: str(scenario.topology),
        CONF_AGENTS: [
            {
                CONF_AGENT_ID: a.id,
                CONF_ROLE: a.role,
                CONF_P_DETECT: a.p_detect,
                CONF_P_FIX: a.p_fix,
                CONF_P_SUCC_GIVEN_FIX: a.p_succ_given_fix,
                CONF_P_SUCC_GIVEN_UNFIXED: a.p_succ_given_unfixed,
                CONF_TIER_LABEL: str(a.tier_label),
                CONF_DEDUP: a.dedup,
                CONF_SUBSCRIPTIONS: (
                    list(a.subscriptions) if a.subscriptions is not None else None
                ),
                CONF_MAX_HOPS: a.max_hops,
                CONF_TOOLS: list(a.tools),
            }
            for a in scenario.agents
        ],
        CONF_SHARED_POOL: scenario.shared_pool,
        CONF_POOL_RECOVERY: scenario.pool_recovery,
        CONF_MAX_ITERATIONS: scenario.max_iterations,
        CONF_TURN_LIMIT: scenario.turn_limit,
        CONF_MAX_DELIVERIES: scenario.max_deliveries,
    }


@cache
def _preset_documents() -> dict[str, dict[str, Any]]:
    text = resources.files(__package__).joinpath(PRESETS_FILE).read_text("utf-8")
    document = json.loads(text)
    if document.get(CONF_SCHEMA_VERSION) != SCHEMA_VERSION:
        raise ScenarioError(f"{PRESETS_FILE}: unsupported schema version")
    return document["presets"]


def preset_names() -> list[str]:
    """Names of the shipped scenario presets."""
    return sorted(_preset_documents())


def get_preset(name: str) -> Scenario:
    """Return a shipped scenario preset by name."""
    documents = _preset_documents()
    if name not in documents:
        raise ScenarioError(
            f"Unknown scenario preset {name!r}; expected one of {preset_names()}"
        )
    return scenario_from_dict(documents[name])


def resolve_scenario(
    *, preset: str | None = None, data: Mapping[str, Any] | None = None
) -> Scenario:
    """Build a scenario from a preset name or an inline mapping."""
    if preset is not None:
        return get_preset(preset)
    if data is None:
        raise ScenarioError("Either a preset or a scenario mapping is required")
    return scenario_from_dict(data)


def load_scenario(raw: bytes | str) -> Scenario:
    """Parse a scenario file.

    The document is either ``{"schema_version": 1, "preset": name}`` or
    ``{"schema_version": 1, ...scenario fields}``.
    """
    try:
        document = json.loads(raw)
    except (UnicodeDecodeError, json.JSONDecodeError) as err:
        raise ScenarioError(f"Malformed scenario document: {err}") from err
    if not isinstance(document, dict):
        raise ScenarioError("Scenario document must be a JSON object")
    if document.pop(CONF_SCHEMA_VERSION, None) != SCHEMA_VERSION:
        raise ScenarioError(f"'{CONF_SCHEMA_VERSION}' must be {SCHEMA_VERSION}")
    if CONF_PRESET in document:
        if len(document) != 1:
            raise ScenarioError("A preset reference takes no other fields")
        return get_preset(document[CONF_PRESET])
    return scenario_from_dict(document)
