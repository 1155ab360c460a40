"""Delegation of semantic mutations to a secondary model endpoint.

The injector speaks the chat-completions subset also served by the gateway.
Every delegated mutation is checked against the integrity rules of its fault
template and re-requested (with the next attempt seed) until it passes or the
retry budget is spent.
"""

from __future__ import annotations

import asyncio
import json
import logging
import os
from collections.abc import Mapping
from dataclasses import dataclass, replace
from enum import StrEnum
from functools import cache
from importlib import resources
from typing import Any, Protocol

import httpx
import jinja2

from .const import (
    CHAT_COMPLETIONS_PATH,
    CONNECT_TIMEOUT,
    DEFAULT_INJECTOR_MODEL,
    DEFAULT_KEYWORDS_RETAINED_AMBIGUITY,
    DEFAULT_KEYWORDS_RETAINED_CONFLICT,
    DEFAULT_MAX_IN_FLIGHT,
    DEFAULT_MAX_RETRIES,
    ENV_INJECTOR_KEY,
    READ_TIMEOUT,
    SCHEMA_VERSION,
)
from .errors import ConfigurationError, ExecutionError
from .integrity import (
    IntegrityCheck,
    IntegrityCheckFailed,
    IntegrityRule,
    check_integrity,
)
from .taxonomy import SEMANTIC_FAULT_TYPES, FaultType, InterceptionPoint
from .tracelog import EventKind, TraceRecorder, canonical_json, payload_digest

_LOGGER = logging.getLogger(__name__)

TEMPLATES_FILE = "templates.json"
INJECTOR_AGENT_ID = "injector"

_RULE_CONFLICT_KEYWORDS = "conflict_keywords"
_RULE_AMBIGUITY_KEYWORDS = "ambiguity_keywords"


class InjectorUnavailable(ExecutionError):
    """Raised when the injector endpoint cannot produce a response."""


class FixtureMiss(InjectorUnavailable):
    """Raised when the mock endpoint has no canned response for a request."""

    def __init__(self, digest: str) -> None:
        self.digest = digest
        super().__init__(f"No fixture for request digest {digest}")


class TemplateCatalogError(ConfigurationError):
    """Raised when the template catalog is malformed."""


class OutputContract(StrEnum):
    """Shape the injector must answer in."""

    PLAIN = "Plain"
    STRUCTURED_OBJECT = "StructuredObject"


@dataclass(frozen=True)
class FaultTemplate:
    """Directive and integrity rules for one semantic fault type."""

    fault_type: FaultType
    instruction_text: str
    output_contract: OutputContract
    integrity_rules: tuple[IntegrityRule, ...]


class TemplateCatalog:
    """Versioned catalog of fault templates and fixed prompt templates."""

    def __init__(self, document: Mapping[str, Any]) -> None:
        if document.get("schema_version") != SCHEMA_VERSION:
            raise TemplateCatalogError("Unsupported template catalog version")
        self.version: str = document["catalog_version"]
        self._env = jinja2.Environment(
            autoescape=False,
            undefined=jinja2.StrictUndefined,
            keep_trailing_newline=False,
        )
        self._prompts: dict[str, str] = dict(document["prompt_templates"])
        try:
            rules = {
                rule_id: IntegrityRule(
                    id=rule_id,
                    check=IntegrityCheck(body["check"]),
                    min_fraction=body.get("min_fraction"),
                )
                for rule_id, body in document["integrity_rules"].items()
            }
            self._templates: dict[FaultType, FaultTemplate] = {
                FaultType(name): FaultTemplate(
                    fault_type=FaultType(name),
                    instruction_text=body["instruction"],
                    output_contract=OutputContract(body["output_contract"]),
                    integrity_rules=tuple(rules[r] for r in body["integrity_rules"]),
                )
                for name, body in document["fault_templates"].items()
            }
        except (KeyError, ValueError) as err:
            raise TemplateCatalogError(f"Malformed template catalog: {err}") from err
        if set(self._templates) != SEMANTIC_FAULT_TYPES:
            raise TemplateCatalogError(
                "Template catalog must cover exactly the semantic fault types"
            )

    @classmethod
    def load(cls) -> TemplateCatalog:
        """Load the catalog shipped with the package."""
        return cls(_shipped_catalog())

    def template(self, fault_type: FaultType) -> FaultTemplate:
        """Fault template of a semantic fault type."""
        try:
            return self._templates[fault_type]
        except KeyError as err:
            raise TemplateCatalogError(f"No template for {fault_type}") from err

    def render_instruction(self, template: FaultTemplate, **variables: Any) -> str:
        """Render a fault template's directive."""
        context = {"catalog": None, **variables}
        return self._env.from_string(template.instruction_text).render(**context)

    def render_prompt(self, name: str, **variables: Any) -> str:
        """Render one of the fixed prompt templates."""
        try:
            source = self._prompts[name]
        except KeyError as err:
            raise TemplateCatalogError(f"No prompt template {name!r}") from err
        try:
            return self._env.from_string(source).render(**variables)
        except jinja2.UndefinedError as err:
            raise TemplateCatalogError(f"{name}: {err}") from err

    def with_thresholds(
        self,
        *,
        conflict: float = DEFAULT_KEYWORDS_RETAINED_CONFLICT,
        ambiguity: float = DEFAULT_KEYWORDS_RETAINED_AMBIGUITY,
    ) -> TemplateCatalog:
        """Return a copy with the configured keyword retention thresholds."""
        overrides = {
            _RULE_CONFLICT_KEYWORDS: conflict,
            _RULE_AMBIGUITY_KEYWORDS: ambiguity,
        }
        clone = object.__new__(TemplateCatalog)
        clone.version = self.version
        clone._env = self._env
        clone._prompts = self._prompts
        clone._templates = {
            fault_type: replace(
                template,
                integrity_rules=tuple(
                    replace(rule, min_fraction=overrides[rule.id])
                    if rule.id in overrides
                    else rule
                    for rule in template.integrity_rules
                ),
            )
            for fault_type, template in self._templates.items()
        }
        return clone


@cache
def _shipped_catalog() -> dict[str, Any]:
    text = resources.files(__package__).joinpath(TEMPLATES_FILE).read_text("utf-8")
    return json.loads(text)


# ----------------------------------------------------------------------
# Requests and endpoints
# ----------------------------------------------------------------------


def build_request(
    instruction: str, original: str, *, model: str, seed: int
) -> dict[str, Any]:
    """Chat-completions request asking the injector for one mutation."""
    return {
        "model": model,
        "messages": [
            {"role": "system", "content": instruction},
            {"role": "user", "content": original},
        ],
        "seed": seed,
        "temperature": 0,
    }


def request_digest(payload: Mapping[str, Any]) -> str:
    """Fixture key of a request: digest over its model, messages and seed."""
    keyed = {
        "model": payload.get("model"),
        "messages": payload.get("messages"),
        "seed": payload.get("seed"),
    }
    return payload_digest(canonical_json(keyed))


def response_text(body: Mapping[str, Any]) -> str:
    """Extract choices[0].message.content from a chat-completions response."""
    try:
        content = body["choices"][0]["message"]["content"]
    except (KeyError, IndexError, TypeError) as err:
        raise InjectorUnavailable("Malformed chat-completions response") from err
    if not isinstance(content, str):
        raise InjectorUnavailable("Response message has no text content")
    return content


class InjectorEndpoint(Protocol):
    """Anything that answers a chat-completions request with text."""

    async def complete(self, payload: Mapping[str, Any]) -> str:
        """Return the assistant text for a request."""
        ...


class HttpInjectorEndpoint:
    """Chat-completions endpoint reached over HTTP."""

    def __init__(
        self,
        url: str,
        *,
        timeout: float = READ_TIMEOUT,
        api_key: str | None = None,
        client: httpx.AsyncClient | None = None,
    ) -> None:
        """Initialise the endpoint.

        Args:
            url: Base URL or full chat-completions URL.
            timeout: Read timeout in seconds.
            api_key: Bearer token, from the environment when omitted; never
                logged.
            client: Shared client (owned by the caller when given).

        """
        base = url.rstrip("/")
        self._url = base if base.endswith(CHAT_COMPLETIONS_PATH) else (
            base + CHAT_COMPLETIONS_PATH
        )
        self._api_key = api_key if api_key is not None else os.environ.get(
            ENV_INJECTOR_KEY
        )
        self._owns_client = client is None
        self._client = client or httpx.AsyncClient(
            timeout=httpx.Timeout(timeout, connect=CONNECT_TIMEOUT)
        )

    @property
    def url(self) -> str:
        """Return the chat-completions URL."""
        return self._url

    async def complete(self, payload: Mapping[str, Any]) -> str:
        """POST the request and return the assistant text."""
        headers = {"content-type": "application/json"}
        if self._api_key:
            headers["authorization"] = f"Bearer {self._api_key}"
        _LOGGER.debug("→ injector %s (model=%s)", self._url, payload.get("model"))
        try:
            response = await self._client.post(
                self._url, content=canonical_json(payload), headers=headers
            )
            response.raise_for_status()
            body = response.json()
        except httpx.HTTPError as err:
            raise InjectorUnavailable(f"Injector request failed: {err}") from err
        except ValueError as err:
            raise InjectorUnavailable("Injector returned invalid JSON") from err
        _LOGGER.debug("← injector %s", response.status_code)
        return response_text(body)

    async def close(self) -> None:
        """Close the underlying client when this endpoint owns it."""
        if self._owns_client:
            await self._client.aclose()


class MockInjectorEndpoint:
    """Deterministic endpoint answering from canned responses keyed by digest."""

    def __init__(self, responses: Mapping[str, str]) -> None:
        self._responses = dict(responses)

    @classmethod
    def from_file(cls, path: str | os.PathLike[str]) -> MockInjectorEndpoint:
        """Load a fixture file ``{"schema_version": 1, "responses": {...}}``."""
        return cls(load_fixture_file(path))

    async def complete(self, payload: Mapping[str, Any]) -> str:
        """Return the canned text for the request digest."""
        digest = request_digest(payload)
        try:
            return self._responses[digest]
        except KeyError:
            raise FixtureMiss(digest) from None


def load_fixture_file(path: str | os.PathLike[str]) -> dict[str, str]:
    """Read canned responses from a fixture file."""
    try:
        with open(path, encoding="utf-8") as handle:
            document = json.load(handle)
    except (OSError, json.JSONDecodeError) as err:
        raise ConfigurationError(f"Cannot read fixture file {path}: {err}") from err
    if (
        not isinstance(document, dict)
        or document.get("schema_version") != SCHEMA_VERSION
        or not isinstance(document.get("responses"), dict)
    ):
        raise ConfigurationError(f"{path}: not a fixture file")
    return {str(k): str(v) for k, v in document["responses"].items()}


# ----------------------------------------------------------------------
# Delegation
# ----------------------------------------------------------------------


async def delegate(
    original: str,
    template: FaultTemplate,
    endpoint: InjectorEndpoint,
    max_retries: int,
    seed: int,
    *,
    instruction: str | None = None,
    model: str = DEFAULT_INJECTOR_MODEL,
    recorder: TraceRecorder | None = None,
    agent_id: str = INJECTOR_AGENT_ID,
    point: InterceptionPoint | None = None,
) -> str:
    """Ask the injector for a mutation that passes the template's rules.

    Attempt ``n`` (0-based) is sent with seed ``seed + n``; each attempt is
    recorded as one injection_attempt event when a recorder is given.

    Raises:
        InjectorUnavailable: the last attempt failed in transport.
        IntegrityCheckFailed: every attempt was rejected by the rules.

    """
    if max_retries < 0:
        raise ValueError("max_retries must be >= 0")
    directive = instruction if instruction is not None else template.instruction_text
    failed: list[str] = []
    transport_error: InjectorUnavailable | None = None

    for attempt in range(max_retries + 1):
        payload = build_request(directive, original, model=model, seed=seed + attempt)
        detail: dict[str, Any] = {
            "attempt": attempt,
            "fault_type": str(template.fault_type),
            "request_digest": request_digest(payload),
        }
        try:
            mutated = await endpoint.complete(payload)
        except InjectorUnavailable as err:
            transport_error = err
            _LOGGER.warning(
                "Injector attempt %d for %s failed: %s",
                attempt,
                template.fault_type,
                err,
            )
            if recorder is not None:
                recorder.record(
                    EventKind.INJECTION_ATTEMPT,
                    agent_id,
                    point=point,
                    detail={**detail, "outcome": "unavailable"},
                )
            continue

        transport_error = None
        failed = check_integrity(original, mutated, template.integrity_rules)
        if recorder is not None:
            recorder.record(
                EventKind.INJECTION_ATTEMPT,
                agent_id,
                point=point,
                payload=mutated,
                detail={
                    **detail,
                    "outcome": "rejected" if failed else "accepted",
                    "failed_rules": failed,
                },
            )
        if not failed:
            return mutated
        _LOGGER.warning(
            "Injector attempt %d for %s rejected by %s",
            attempt,
            template.fault_type,
            ", ".join(failed),
        )

    if transport_error is not None:
        raise transport_error
    raise IntegrityCheckFailed(failed, max_retries + 1)


class InjectorClient:
    """Shared delegation client: endpoint, templates, retry budget and in-flight cap."""

    def __init__(
        self,
        endpoint: InjectorEndpoint,
        *,
        catalog: TemplateCatalog | None = None,
        model: str = DEFAULT_INJECTOR_MODEL,
        max_retries: int = DEFAULT_MAX_RETRIES,
        max_in_flight: int = DEFAULT_MAX_IN_FLIGHT,
    ) -> None:
        self.endpoint = endpoint
        self.catalog = catalog or TemplateCatalog.load()
        self.model = model
        self.max_retries = max_retries
        self._slots = asyncio.Semaphore(max_in_flight)

    async def mutate(
        self,
        fault_type: FaultType,
        original: str,
        seed: int,
        *,
        recorder: TraceRecorder | None = None,
        agent_id: str = INJECTOR_AGENT_ID,
        point: InterceptionPoint | None = None,
        catalog_tools: list[str] | None = None,
    ) -> str:
        """Delegate one mutation of a semantic fault type."""
        template = self.catalog.template(fault_type)
        instruction = self.catalog.render_instruction(template, catalog=catalog_tools)
        async with self._slots:
            return await delegate(
                original,
                template,
                self.endpoint,
                self.max_retries,
                seed,
                instruction=instruction,
                model=self.model,
                recorder=recorder,
                agent_id=agent_id,
                point=point,
            )

    async def close(self) -> None:
        """Release the endpoint's resources."""
        close = getattr(self.endpoint, "close", None)
        if close is not None:
            await close()
