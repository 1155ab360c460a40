"""Shared fixtures for the MAS FaultLab tests."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Any

import pytest


@pytest.fixture
def write_campaign(tmp_path: Path):
    """Write a campaign document into tmp_path and return its path."""

    def _write(document: dict[str, Any], name: str = "campaign.json") -> Path:
        path = tmp_path / name
        path.write_text(json.dumps(document), encoding="utf-8")
        return path

    return _write
