"""Tests for campaign parsing, validation and serialization."""

from __future__ import annotations

import json
from pathlib import Path

import pytest

from mas_faultlab.campaign import (
    MAPPING_MODE_PREFIX,
    GatewayTarget,
    ParseError,
    SchemaError,
    SimulatorTarget,
    ValidationError,
    load_campaign,
    parse_campaign,
    serialize_campaign,
)
from mas_faultlab.errors import ConfigurationError
from mas_faultlab.taxonomy import (
    FaultType,
    InjectionMode,
    InterceptionPoint,
    ViolationCode,
)

from .common import campaign_document, gateway_document


def _raw(document: dict) -> bytes:
    return json.dumps(document).encode("utf-8")


class TestParseCampaign:
    """Tests for parse_campaign."""

    def test_valid_simulator_campaign(self) -> None:
        """A valid document parses into an immutable config."""
        config = parse_campaign(_raw(campaign_document()))
        assert config.campaign_seed == 42
        assert [t.id for t in config.tasks] == ["t1", "t2"]
        assert isinstance(config.execution_target, SimulatorTarget)
        assert config.execution_target.preset == "linear_pipeline"
        assert config.injector.offline

    def test_spec_defaults(self) -> None:
        """Agent targets get their fault's point and semantic faults delegate."""
        document = campaign_document(
            fault_specs=[
                {
                    "id": "h",
                    "fault_type": "Hallucination",
                    "target": {"kind": "agent", "agent": "architect"},
                }
            ]
        )
        spec = parse_campaign(_raw(document)).spec("h")
        assert spec.fault_type is FaultType.HALLUCINATION
        assert spec.target.point is InterceptionPoint.AGENT_OUTPUT_EGRESS
        assert spec.mode is InjectionMode.DELEGATED

    def test_malformed_json(self) -> None:
        """Malformed documents raise ParseError."""
        with pytest.raises(ParseError, match="Malformed"):
            parse_campaign(b"{not json")

    def test_not_an_object(self) -> None:
        """Top-level arrays are rejected."""
        with pytest.raises(ParseError, match="object"):
            parse_campaign(b"[]")

    def test_unknown_field(self) -> None:
        """Unknown top-level fields are schema errors."""
        with pytest.raises(SchemaError, match="surprise"):
            parse_campaign(_raw(campaign_document(surprise=1)))

    def test_missing_tasks(self) -> None:
        """At least one task is required."""
        with pytest.raises(SchemaError):
            parse_campaign(_raw(campaign_document(tasks=[])))

    def test_wrong_schema_version(self) -> None:
        """Only the current schema version is accepted."""
        with pytest.raises(SchemaError, match="schema_version"):
            parse_campaign(_raw(campaign_document(schema_version=2)))

    def test_seed_range(self) -> None:
        """Campaign seeds are 64-bit unsigned integers."""
        with pytest.raises(SchemaError):
            parse_campaign(_raw(campaign_document(campaign_seed=-1)))

    @pytest.mark.parametrize("seed", [True, False])
    def test_boolean_seed(self, seed: bool) -> None:
        """JSON booleans are not seeds."""
        with pytest.raises(SchemaError, match="boolean"):
            parse_campaign(_raw(campaign_document(campaign_seed=seed)))

    def test_duplicate_task_ids(self) -> None:
        """Task ids must be unique."""
        tasks = [{"id": "t1", "input": "a"}, {"id": "t1", "input": "b"}]
        with pytest.raises(ValidationError) as info:
            parse_campaign(_raw(campaign_document(tasks=tasks)))
        assert info.value.violations[0].code is ViolationCode.DUPLICATE_ID

    def test_invalid_spec_is_reported_with_its_id(self) -> None:
        """Spec violations carry the offending spec id."""
        specs = [
            {
                "id": "storm",
                "fault_type": "MessageStorm",
                "target": {"kind": "edge", "sender": "a", "recipient": "b"},
                "params": {"replication_factor": 1},
            }
        ]
        with pytest.raises(ValidationError, match="storm"):
            parse_campaign(_raw(campaign_document(fault_specs=specs)))

    def test_simulator_needs_scenario(self) -> None:
        """A simulator target names a preset or an inline scenario."""
        document = campaign_document(execution_target={"kind": "simulator"})
        with pytest.raises(SchemaError, match="preset"):
            parse_campaign(_raw(document))

    def test_unknown_preset(self) -> None:
        """Unknown presets are configuration errors."""
        document = campaign_document(
            execution_target={"kind": "simulator", "preset": "mesh"}
        )
        with pytest.raises(ConfigurationError, match="mesh"):
            parse_campaign(_raw(document))

    def test_gateway_target(self) -> None:
        """Gateway targets keep their upstream and agent mapping."""
        config = parse_campaign(_raw(gateway_document()))
        target = config.execution_target
        assert isinstance(target, GatewayTarget)
        assert target.upstream == "http://upstream.test"
        assert target.agent_mapping.header == "x-mas-agent"
        assert target.agent_mapping.patterns[0].agent == "reviewer"

    def test_prefix_mode_needs_patterns(self) -> None:
        """Prefix mapping without patterns cannot identify anyone."""
        document = gateway_document()
        document["execution_target"]["agent_mapping"] = {
            "mode": MAPPING_MODE_PREFIX
        }
        with pytest.raises(SchemaError, match="pattern"):
            parse_campaign(_raw(document))

    def test_injector_settings(self) -> None:
        """Injector thresholds and retries are parsed."""
        document = campaign_document(
            injector={
                "endpoint": "http://injector.test",
                "max_retries": 4,
                "thresholds": {"conflict": 0.6},
            }
        )
        injector = parse_campaign(_raw(document)).injector
        assert not injector.offline
        assert injector.max_retries == 4
        assert injector.conflict_threshold == 0.6
        assert injector.ambiguity_threshold == 0.0


class TestSerializeCampaign:
    """Tests for serialize_campaign."""

    def test_serialization_is_a_fixed_point(self) -> None:
        """Parsing the canonical form gives the same canonical form."""
        config = parse_campaign(_raw(campaign_document()))
        first = serialize_campaign(config)
        assert serialize_campaign(parse_campaign(first)) == first

    def test_defaults_are_spelled_out(self) -> None:
        """The canonical form spells out every default."""
        config = parse_campaign(_raw(gateway_document()))
        document = json.loads(serialize_campaign(config))
        assert document["injector"]["max_retries"] == 2
        assert document["execution_target"]["agent_mapping"]["mode"] == "header"


class TestLoadCampaign:
    """Tests for load_campaign."""

    def test_missing_file(self, tmp_path: Path) -> None:
        """An unreadable file is a configuration error."""
        with pytest.raises(ConfigurationError, match="Cannot read"):
            load_campaign(str(tmp_path / "missing.json"))

    def test_reads_file(self, write_campaign) -> None:
        """A campaign file on disk is parsed."""
        path = write_campaign(campaign_document())
        assert load_campaign(str(path)).campaign_seed == 42
