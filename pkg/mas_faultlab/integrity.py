"""Integrity checks for delegated mutations.

Each rule is a pure predicate over (original, mutated). Word-based checks
work on lowercase whitespace-delimited content words: punctuation is
stripped from word edges and a fixed stopword list is removed.
"""

from __future__ import annotations

import json
from collections.abc import Iterable, Sequence
from dataclasses import dataclass
from enum import StrEnum
from typing import Any

from .errors import ExecutionError

STOPWORDS: frozenset[str] = frozenset(
    {
        "the",
        "an",
        "and",
        "or",
        "of",
        "to",
        "in",
        "on",
        "for",
        "with",
        "by",
        "at",
        "from",
        "is",
        "are",
        "be",
        "it",
        "this",
        "that",
        "as",
        "into",
        "then",
        "than",
        "so",
        "all",
    }
)

_EDGE_PUNCTUATION = ".,;:!?\"'()[]{}<>`*"

_TOOL_NAME_KEYS = ("tool_name", "name")


class IntegrityCheck(StrEnum):
    """Predicates a delegated mutation must satisfy."""

    KEYWORDS_RETAINED = "KeywordsRetained"
    CONSTRAINT_ADDED = "ConstraintAdded"
    TERMS_VAGUED = "TermsVagued"
    SCHEMA_PARSEABLE = "SchemaParseable"
    NAME_CHANGED = "NameChanged"
    TOOL_CALL_SHAPE = "ToolCallShape"


@dataclass(frozen=True)
class IntegrityRule:
    """A named integrity predicate; min_fraction applies to KeywordsRetained."""

    id: str
    check: IntegrityCheck
    min_fraction: float | None = None


class IntegrityCheckFailed(ExecutionError):
    """Raised when every attempt of a delegation was rejected."""

    def __init__(self, failed: Sequence[str], attempts: int) -> None:
        self.failed = list(failed)
        self.attempts = attempts
        super().__init__(
            f"Integrity check failed after {attempts} attempt(s): "
            f"{', '.join(self.failed)}"
        )


def content_words(text: str) -> list[str]:
    """Lowercase content words of a text in order of appearance."""
    words = []
    for token in text.lower().split():
        word = token.strip(_EDGE_PUNCTUATION)
        if word and word not in STOPWORDS:
            words.append(word)
    return words


def keywords_retained(original: str, mutated: str) -> float:
    """Fraction of distinct original content words still present (1.0 if none)."""
    before = set(content_words(original))
    if not before:
        return 1.0
    after = set(content_words(mutated))
    return len(before & after) / len(before)


def _parse_object(text: str) -> dict[str, Any] | None:
    try:
        value = json.loads(text)
    except (json.JSONDecodeError, TypeError):
        return None
    return value if isinstance(value, dict) else None


def _tool_name(document: dict[str, Any]) -> Any:
    for key in _TOOL_NAME_KEYS:
        if key in document:
            return document[key]
    return None


def _tool_call_shaped(document: dict[str, Any] | None) -> bool:
    if document is None or not isinstance(_tool_name(document), str):
        return False
    return isinstance(document.get("arguments", {}), dict)


def _passes(rule: IntegrityRule, original: str, mutated: str) -> bool:
    match rule.check:
        case IntegrityCheck.KEYWORDS_RETAINED:
            threshold = rule.min_fraction if rule.min_fraction is not None else 1.0
            return keywords_retained(original, mutated) >= threshold
        case IntegrityCheck.CONSTRAINT_ADDED:
            return bool(set(content_words(mutated)) - set(content_words(original)))
        case IntegrityCheck.TERMS_VAGUED:
            if mutated.strip() == original.strip():
                return False
            return bool(set(content_words(original)) - set(content_words(mutated)))
        case IntegrityCheck.SCHEMA_PARSEABLE:
            return _parse_object(mutated) is not None
        case IntegrityCheck.NAME_CHANGED:
            before = _parse_object(original)
            after = _parse_object(mutated)
            if before is None or after is None:
                return False
            name = _tool_name(after)
            return name is not None and name != _tool_name(before)
        case IntegrityCheck.TOOL_CALL_SHAPE:
            return _tool_call_shaped(_parse_object(mutated))
    return False


def check_integrity(
    original: str, mutated: str, rules: Iterable[IntegrityRule]
) -> list[str]:
    """Return the ids of failed rules; an empty list means the mutation passes."""
    return [rule.id for rule in rules if not _passes(rule, original, mutated)]
