"""Shared helpers for the MAS FaultLab tests."""

from __future__ import annotations

from typing import Any


def campaign_document(**overrides: Any) -> dict[str, Any]:
    """A small valid simulator campaign, with top-level fields overridden."""
    document: dict[str, Any] = {
        "schema_version": 1,
        "campaign_seed": 42,
        "tasks": [
            {"id": "t1", "input": "Sum the numbers 3 and 4."},
            {"id": "t2", "input": "List three prime numbers."},
        ],
        "fault_specs": [
            {
                "id": "hallucinate",
                "fault_type": "Hallucination",
                "target": {"kind": "agent", "agent": "architect"},
                "mode": "Deterministic",
            }
        ],
        "execution_target": {"kind": "simulator", "preset": "linear_pipeline"},
        "output_dir": "out",
    }
    document.update(overrides)
    return document


def gateway_document(**overrides: Any) -> dict[str, Any]:
    """A small valid gateway campaign."""
    return campaign_document(
        fault_specs=[],
        execution_target={
            "kind": "gateway",
            "upstream": "http://upstream.test",
            "agent_mapping": {
                "mode": "header",
                "patterns": [{"match": "Reviewer", "agent": "reviewer"}],
            },
        },
        **overrides,
    )

