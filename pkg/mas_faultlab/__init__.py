"""MAS FaultLab: fault injection and robustness evaluation for multi-agent systems."""

from __future__ import annotations

from .campaign import CampaignConfig, load_campaign, parse_campaign
from .errors import (
    AnalysisError,
    ConfigurationError,
    ExecutionError,
    FaultLabError,
    NotApplicable,
)
from .taxonomy import FaultSpec, FaultType, FtTier, InterceptionPoint

__all__ = [
    "AnalysisError",
    "CampaignConfig",
    "ConfigurationError",
    "ExecutionError",
    "FaultLabError",
    "FaultSpec",
    "FaultType",
    "FtTier",
    "InterceptionPoint",
    "NotApplicable",
    "load_campaign",
    "parse_campaign",
]
