"""Exception families for MAS FaultLab.

Every error raised by the toolkit belongs to exactly one family; the CLI maps
each family onto one exit code.
"""

from __future__ import annotations


class FaultLabError(Exception):
    """Base class for all MAS FaultLab errors."""


class ConfigurationError(FaultLabError):
    """Raised for usage, configuration and schema problems."""


class ExecutionError(FaultLabError):
    """Raised when injection, simulation or tracing fails."""


class AnalysisError(FaultLabError):
    """Raised when metrics or annotation cannot be computed."""


class NotApplicable(ExecutionError):
    """Raised when a fault has nothing to act on in the given input."""
