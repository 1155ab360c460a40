"""Intercepting chat-completions gateway.

The gateway sits between a multi-agent system and its model endpoint. It
recovers which agent sent a request, applies the prompt and history faults
of the active plan before forwarding, and the output faults after the
upstream reply. Requests no spec touches are relayed byte for byte.
"""

from __future__ import annotations

import json
import logging
import os
import threading
from collections.abc import AsyncIterator, Mapping, Sequence
from contextlib import asynccontextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any
from urllib.parse import quote

import httpx
import uvicorn
import voluptuous as vol
from fastapi import FastAPI, Request
from fastapi.responses import Response

from .campaign import (
    MAPPING_MODE_HEADER,
    AgentMapping,
    CampaignConfig,
    GatewayTarget,
    InjectorSettings,
    spec_to_dict,
)
from .const import (
    BASELINE_SPEC_ID,
    CHAT_COMPLETIONS_PATH,
    CONNECT_TIMEOUT,
    DEFAULT_LISTEN,
    ENV_UPSTREAM_KEY,
    GATEWAY_DIR,
    HEADER_SPEC,
    HEADER_TASK,
    PLAN_SPEC_ID,
    READ_TIMEOUT,
    TRACE_SUFFIX,
    UNMAPPED_AGENT,
    UNTRACKED_TASK,
)
from .errors import ConfigurationError, ExecutionError
from .injection import FaultDispatcher, record_inapplicable
from .injector import HttpInjectorEndpoint, InjectorClient, TemplateCatalog
from .prompt_mod import InjectionLedger, PromptDoc, PromptRole
from .rewrite import (
    AgentOutput,
    HistoryMessage,
    HistoryWindow,
    OutputKind,
    ToolCall,
    output_kind_for,
)
from .taxonomy import (
    FaultSpec,
    FaultType,
    InjectionMechanism,
    InterceptionPoint,
    derive_seed,
)
from .tracelog import (
    EventKind,
    Manifest,
    MemorySink,
    TaskOutcome,
    TraceEvent,
    TraceHeader,
    TraceRecorder,
    TraceWriter,
    ensure_fresh_output,
    task_trace_path,
    write_manifest,
)

_LOGGER = logging.getLogger(__name__)

HARNESS_AGENT = "harness"

_HOP_HEADERS = frozenset(
    {
        "host",
        "content-length",
        "connection",
        "keep-alive",
        "proxy-authenticate",
        "proxy-authorization",
        "te",
        "trailer",
        "transfer-encoding",
        "upgrade",
        "accept-encoding",
    }
)
_PROMPT_POINTS = (
    InterceptionPoint.SYSTEM_PROMPT_INIT,
    InterceptionPoint.USER_PROMPT_INGRESS,
)
_EGRESS_ORDER = (
    InterceptionPoint.AGENT_OUTPUT_EGRESS,
    InterceptionPoint.TOOL_CALL_EGRESS,
)
_JSON = "application/json"
_SSE = "text/event-stream"

TASK_RESULT_SCHEMA = vol.Schema({vol.Required("success"): bool})


class UpstreamUnreachable(ExecutionError):
    """Raised when the upstream model endpoint cannot be reached."""


class MalformedRequest(ConfigurationError):
    """Raised for a request body the gateway cannot interpret."""


class TaskClosed(ExecutionError):
    """Raised when a request arrives for a task whose result is recorded."""


# ----------------------------------------------------------------------
# Agent identity
# ----------------------------------------------------------------------


def _system_text(messages: Sequence[Mapping[str, Any]]) -> str | None:
    for message in messages:
        if message.get("role") == "system" and isinstance(
            message.get("content"), str
        ):
            return message["content"]
    return None


def _identify(
    headers: Mapping[str, str],
    messages: Sequence[Mapping[str, Any]],
    mapping: AgentMapping,
) -> tuple[str, str]:
    if mapping.mode == MAPPING_MODE_HEADER:
        wanted = mapping.header.lower()
        for name, value in headers.items():
            if name.lower() == wanted and value.strip():
                return value.strip(), "header"
    system = _system_text(messages)
    if system is not None:
        for pattern in mapping.patterns:
            if pattern.match in system:
                return pattern.agent, "pattern"
    return UNMAPPED_AGENT, "none"


def identify_agent(
    headers: Mapping[str, str],
    messages: Sequence[Mapping[str, Any]],
    mapping: AgentMapping,
) -> str:
    """Recover the id of the agent that sent a request.

    Header mode reads the configured header and falls back to the system
    prompt patterns; prefix mode only uses the patterns. Requests matching
    neither belong to the reserved agent ``unmapped``.
    """
    return _identify(headers, messages, mapping)[0]


# ----------------------------------------------------------------------
# Fault plan
# ----------------------------------------------------------------------


@dataclass(frozen=True)
class ActivePlan:
    """The specs in force for one request and the stream they trace into."""

    spec_id: str
    specs: tuple[FaultSpec, ...]

    @property
    def fault_type(self) -> FaultType | None:
        """Fault type of a single-spec stream; None for baseline or plan."""
        return self.specs[0].fault_type if len(self.specs) == 1 else None


@dataclass(frozen=True)
class FaultPlan:
    """Fault specs and agent mapping served by one gateway."""

    specs: tuple[FaultSpec, ...]
    mapping: AgentMapping = field(default_factory=AgentMapping)
    campaign_seed: int = 0

    @classmethod
    def from_config(cls, config: CampaignConfig) -> FaultPlan:
        """Derive the plan of a campaign with a gateway target."""
        target = config.execution_target
        if not isinstance(target, GatewayTarget):
            raise ConfigurationError("serve needs a gateway execution target")
        return cls(
            specs=config.fault_specs,
            mapping=target.agent_mapping,
            campaign_seed=config.campaign_seed,
        )

    def select(self, spec_header: str | None) -> ActivePlan:
        """Pick the specs of a request from its spec header.

        Without a header a single-spec plan applies its spec and a
        multi-spec plan applies all of them into the ``plan`` stream.
        """
        if spec_header is not None:
            wanted = spec_header.strip()
            if wanted == BASELINE_SPEC_ID:
                return ActivePlan(BASELINE_SPEC_ID, ())
            for spec in self.specs:
                if spec.id == wanted:
                    return ActivePlan(spec.id, (spec,))
            raise MalformedRequest(f"Unknown fault spec {wanted!r}")
        if not self.specs:
            return ActivePlan(BASELINE_SPEC_ID, ())
        if len(self.specs) == 1:
            return ActivePlan(self.specs[0].id, self.specs)
        return ActivePlan(PLAN_SPEC_ID, self.specs)


def matching(
    active: ActivePlan, agent: str, point: InterceptionPoint
) -> list[FaultSpec]:
    """Specs of the active plan acting on this agent at this point."""
    return [
        spec
        for spec in active.specs
        if spec.mechanism is not InjectionMechanism.ROUTING_MANIPULATION
        and spec.point is point
        and spec.target.matches_agent(agent)
    ]


def _routing(active: ActivePlan, agent: str) -> list[FaultSpec]:
    return [
        spec
        for spec in active.specs
        if spec.mechanism is InjectionMechanism.ROUTING_MANIPULATION
        and spec.target.sender in ("*", agent)
    ]


# ----------------------------------------------------------------------
# Trace store
# ----------------------------------------------------------------------


class TraceStore:
    """One append-only trace per (spec, task) stream seen by the gateway."""

    def __init__(
        self,
        output_dir: str | os.PathLike[str],
        *,
        campaign_seed: int,
        manifest: Manifest,
        verbose: bool = False,
    ) -> None:
        self.output_dir = Path(output_dir)
        self.campaign_seed = campaign_seed
        self.manifest = manifest
        self.verbose = verbose
        self._lock = threading.RLock()
        self._writers: dict[tuple[str, str], TraceWriter] = {}
        self._recorders: dict[tuple[str, str], TraceRecorder] = {}
        self._finished: set[tuple[str, str]] = set()

    def path(self, spec_id: str, task_id: str) -> Path:
        """Trace file of a stream."""
        if spec_id == PLAN_SPEC_ID:
            name = quote(task_id, safe="-_.") + TRACE_SUFFIX
            return self.output_dir / GATEWAY_DIR / name
        return task_trace_path(self.output_dir, spec_id, task_id)

    def recorder(self, active: ActivePlan, task_id: str) -> TraceRecorder:
        """Recorder of a stream, opened on first use."""
        key = (active.spec_id, task_id)
        with self._lock:
            if key in self._finished:
                raise TaskClosed(f"Task {task_id} ({active.spec_id}) is closed")
            recorder = self._recorders.get(key)
            if recorder is None:
                header = TraceHeader(
                    task_id=task_id,
                    spec_id=active.spec_id,
                    campaign_seed=self.campaign_seed,
                    fault_type=active.fault_type,
                    verbose=self.verbose,
                )
                writer = TraceWriter(self.path(*key), header)
                recorder = TraceRecorder(
                    task_id, active.spec_id, writer, verbose=self.verbose
                )
                self._writers[key] = writer
                self._recorders[key] = recorder
                _LOGGER.debug("Opened trace %s", writer.path)
            return recorder

    def events(self, active: ActivePlan, task_id: str) -> list[TraceEvent]:
        """Events of a stream so far (empty when it is not open)."""
        with self._lock:
            recorder = self._recorders.get((active.spec_id, task_id))
            return recorder.events if recorder is not None else []

    def commit(
        self, active: ActivePlan, task_id: str, events: Sequence[TraceEvent]
    ) -> None:
        """Append the buffered events of one request to its stream."""
        with self._lock:
            self.recorder(active, task_id).extend(events)

    def finish(self, active: ActivePlan, task_id: str, success: bool) -> TaskOutcome:
        """Record the task result and close the stream."""
        key = (active.spec_id, task_id)
        with self._lock:
            recorder = self.recorder(active, task_id)
            applicable = not active.specs or any(
                e.kind is EventKind.FAULT_INJECTED for e in recorder.events
            )
            outcome = recorder.finish(
                success,
                agent_id=HARNESS_AGENT,
                applicable=applicable,
                fault_type=active.fault_type,
            )
            self._finished.add(key)
            self._writers[key].close()
        _LOGGER.info(
            "Task %s (%s) finished: success=%s", task_id, active.spec_id, success
        )
        return outcome

    def close(self) -> Path:
        """Flush every trace and write the manifest."""
        with self._lock:
            for writer in self._writers.values():
                writer.close()
            for key in sorted(self._writers):
                writer = self._writers[key]
                if writer.path.exists():
                    self.manifest.add_file(self.output_dir, writer.path)
            unfinished = sorted(
                f"{spec}/{task}"
                for spec, task in self._writers
                if (spec, task) not in self._finished
            )
            if unfinished:
                _LOGGER.warning("%d task(s) closed without a result", len(unfinished))
                self.manifest.notes["unfinished"] = unfinished
            return write_manifest(self.output_dir, self.manifest)


# ----------------------------------------------------------------------
# Request handling
# ----------------------------------------------------------------------


@dataclass(frozen=True)
class Reply:
    """What the gateway sends back downstream."""

    status: int
    body: bytes
    media_type: str = _JSON


def _error(status: int, kind: str, message: str) -> Reply:
    document = {"error": {"type": kind, "message": message}}
    return Reply(status, json.dumps(document).encode("utf-8"))


def _dump(document: Mapping[str, Any]) -> bytes:
    return json.dumps(document, ensure_ascii=False, separators=(",", ":")).encode(
        "utf-8"
    )


def _parse_request(body: bytes) -> dict[str, Any]:
    try:
        document = json.loads(body)
    except (json.JSONDecodeError, UnicodeDecodeError) as err:
        raise MalformedRequest(f"Request body is not JSON: {err}") from err
    if not isinstance(document, dict):
        raise MalformedRequest("Request body is not an object")
    messages = document.get("messages")
    if not isinstance(messages, list) or not messages:
        raise MalformedRequest("Request has no messages")
    for message in messages:
        if not isinstance(message, dict) or not isinstance(message.get("role"), str):
            raise MalformedRequest("Every message needs a role")
    return document


def _header(headers: Mapping[str, str], name: str) -> str | None:
    for key, value in headers.items():
        if key.lower() == name:
            return value
    return None


def _first(messages: list[dict[str, Any]], role: str) -> int | None:
    return next(
        (i for i, m in enumerate(messages) if m.get("role") == role), None
    )


def _tool_names(document: Mapping[str, Any]) -> list[str]:
    names = []
    for tool in document.get("tools") or []:
        if isinstance(tool, dict):
            name = (tool.get("function") or {}).get("name")
            if isinstance(name, str):
                names.append(name)
    return names


class _Exchange:
    """State of one request while it passes through the gateway."""

    def __init__(
        self,
        active: ActivePlan,
        agent: str,
        task_id: str,
        seed_base: int,
        recorder: TraceRecorder,
    ) -> None:
        self.active = active
        self.agent = agent
        self.task_id = task_id
        self.recorder = recorder
        self.ledger = InjectionLedger()
        self._seed_base = seed_base
        self._draws = 0

    def seed(self, spec: FaultSpec) -> int:
        self._draws += 1
        base = spec.seed if spec.seed is not None else self._seed_base
        return derive_seed(base, spec.id, self.task_id, self.agent, self._draws)


class Gateway:
    """Applies a fault plan to chat-completions traffic."""

    def __init__(
        self,
        plan: FaultPlan,
        *,
        upstream: str,
        store: TraceStore,
        client: httpx.AsyncClient | None = None,
        injector: InjectorClient | None = None,
        api_key: str | None = None,
    ) -> None:
        base = upstream.rstrip("/")
        self.upstream_url = (
            base
            if base.endswith(CHAT_COMPLETIONS_PATH)
            else base + CHAT_COMPLETIONS_PATH
        )
        self.plan = plan
        self.store = store
        self.dispatcher = FaultDispatcher(injector)
        self._injector = injector
        self._api_key = api_key if api_key is not None else os.environ.get(
            ENV_UPSTREAM_KEY
        )
        self._owns_client = client is None
        self._client = client or httpx.AsyncClient(
            timeout=httpx.Timeout(READ_TIMEOUT, connect=CONNECT_TIMEOUT)
        )
        self._was_available = True

    # ------------------------------------------------------------------
    # Ingress
    # ------------------------------------------------------------------

    async def _prompt(
        self,
        exchange: _Exchange,
        messages: list[dict[str, Any]],
        point: InterceptionPoint,
    ) -> bool:
        role, prompt_role = (
            ("system", PromptRole.SYSTEM)
            if point is InterceptionPoint.SYSTEM_PROMPT_INIT
            else ("user", PromptRole.USER)
        )
        changed = False
        for spec in matching(exchange.active, exchange.agent, point):
            index = _first(messages, role)
            content = messages[index].get("content") if index is not None else None
            if not isinstance(content, str) or not content.strip():
                record_inapplicable(
                    exchange.recorder,
                    spec,
                    exchange.agent,
                    f"request has no {role} message text",
                )
                continue
            assert index is not None
            mutated = await self.dispatcher.apply_prompt(
                spec,
                PromptDoc(prompt_role, content, origin_agent=exchange.agent),
                seed=exchange.seed(spec),
                recorder=exchange.recorder,
                agent_id=exchange.agent,
                ledger=exchange.ledger,
            )
            if mutated is not None:
                messages[index] = {**messages[index], "content": mutated.text}
                changed = True
        return changed

    def _history(
        self, exchange: _Exchange, messages: list[dict[str, Any]]
    ) -> list[dict[str, Any]] | None:
        specs = matching(
            exchange.active, exchange.agent, InterceptionPoint.HISTORY_WINDOW_INGRESS
        )
        if not specs:
            return None
        entries: list[tuple[HistoryMessage, dict[str, Any]]] = []
        for message in messages:
            content = message.get("content")
            text = content if isinstance(content, str) else json.dumps(content)
            entry = HistoryMessage(
                sender=str(message.get("name") or message["role"]),
                role=message["role"],
                text=text or "",
                is_system=message["role"] == "system",
            )
            entries.append((entry, message))
        originals = {id(entry): message for entry, message in entries}
        window = HistoryWindow(messages=tuple(entry for entry, _ in entries))
        changed = False
        for spec in specs:
            mutated = self.dispatcher.apply_history(
                spec, window, recorder=exchange.recorder, agent_id=exchange.agent
            )
            if mutated is not None:
                window = mutated
                changed = True
        if not changed:
            return None
        return [
            originals.get(id(entry)) or {"role": entry.role, "content": entry.text}
            for entry in window.messages
        ]

    # ------------------------------------------------------------------
    # Egress
    # ------------------------------------------------------------------

    async def _egress(
        self, exchange: _Exchange, reply: dict[str, Any], tools: list[str]
    ) -> bool:
        changed = False
        for point in _EGRESS_ORDER:
            for spec in matching(exchange.active, exchange.agent, point):
                if point is InterceptionPoint.AGENT_OUTPUT_EGRESS:
                    changed |= await self._rewrite_content(exchange, spec, reply)
                else:
                    changed |= await self._rewrite_tool_call(
                        exchange, spec, reply, tools
                    )
        return changed

    @staticmethod
    def _message(reply: Mapping[str, Any]) -> dict[str, Any] | None:
        choices = reply.get("choices")
        if not isinstance(choices, list) or not choices:
            return None
        message = choices[0].get("message") if isinstance(choices[0], dict) else None
        return message if isinstance(message, dict) else None

    async def _rewrite_content(
        self, exchange: _Exchange, spec: FaultSpec, reply: dict[str, Any]
    ) -> bool:
        message = self._message(reply)
        content = message.get("content") if message is not None else None
        if message is None or not isinstance(content, str) or not content.strip():
            record_inapplicable(
                exchange.recorder, spec, exchange.agent, "reply has no message text"
            )
            return False
        kind = output_kind_for(spec.fault_type)
        if kind is OutputKind.TOOL_CALL:
            kind = OutputKind.REASONING
        mutated = await self.dispatcher.apply_output(
            spec,
            AgentOutput(producer=exchange.agent, kind=kind, content=content),
            seed=exchange.seed(spec),
            recorder=exchange.recorder,
        )
        if mutated is None:
            return False
        message["content"] = mutated.content
        return True

    async def _rewrite_tool_call(
        self,
        exchange: _Exchange,
        spec: FaultSpec,
        reply: dict[str, Any],
        tools: list[str],
    ) -> bool:
        message = self._message(reply)
        calls = message.get("tool_calls") if message is not None else None
        function = None
        if isinstance(calls, list) and calls and isinstance(calls[0], dict):
            function = calls[0].get("function")
        if not isinstance(function, dict) or not isinstance(function.get("name"), str):
            record_inapplicable(
                exchange.recorder, spec, exchange.agent, "reply has no tool call"
            )
            return False
        raw = function.get("arguments") or "{}"
        try:
            arguments = json.loads(raw)
        except (TypeError, json.JSONDecodeError):
            arguments = None
        if not isinstance(arguments, dict):
            record_inapplicable(
                exchange.recorder,
                spec,
                exchange.agent,
                "tool call arguments are not a JSON object",
            )
            return False
        mutated = await self.dispatcher.apply_output(
            spec,
            AgentOutput(
                producer=exchange.agent,
                kind=OutputKind.TOOL_CALL,
                content=raw,
                tool_call=ToolCall(function["name"], arguments),
            ),
            seed=exchange.seed(spec),
            recorder=exchange.recorder,
            catalog=tools,
        )
        if mutated is None:
            return False
        assert mutated.tool_call is not None
        function["name"] = mutated.tool_call.tool_name
        function["arguments"] = mutated.content
        return True

    # ------------------------------------------------------------------
    # Forwarding
    # ------------------------------------------------------------------

    def _forward_headers(self, headers: Mapping[str, str]) -> dict[str, str]:
        forwarded = {
            name: value
            for name, value in headers.items()
            if name.lower() not in _HOP_HEADERS
            and not name.lower().startswith("x-mas-")
        }
        if self._api_key and not any(n.lower() == "authorization" for n in forwarded):
            forwarded["authorization"] = f"Bearer {self._api_key}"
        forwarded.setdefault("content-type", _JSON)
        return forwarded

    async def _forward(self, body: bytes, headers: Mapping[str, str]) -> httpx.Response:
        _LOGGER.debug("→ upstream %s (%d bytes)", self.upstream_url, len(body))
        try:
            response = await self._client.post(
                self.upstream_url, content=body, headers=self._forward_headers(headers)
            )
        except httpx.HTTPError as err:
            if self._was_available:
                _LOGGER.warning("Upstream %s unreachable: %s", self.upstream_url, err)
                self._was_available = False
            raise UpstreamUnreachable(f"Upstream request failed: {err}") from err
        if not self._was_available:
            self._was_available = True
            _LOGGER.info("Upstream %s reachable again", self.upstream_url)
        _LOGGER.debug("← upstream %s", response.status_code)
        return response

    # ------------------------------------------------------------------
    # Entry points
    # ------------------------------------------------------------------

    async def handle(self, body: bytes, headers: Mapping[str, str]) -> Reply:
        """Intercept one chat-completions request."""
        try:
            document = _parse_request(body)
            active = self.plan.select(_header(headers, HEADER_SPEC))
        except MalformedRequest as err:
            _LOGGER.debug("Rejected request: %s", err)
            return _error(400, "malformed_request", str(err))

        task_id = (_header(headers, HEADER_TASK) or "").strip() or UNTRACKED_TASK
        messages: list[dict[str, Any]] = list(document["messages"])
        agent, via = _identify(headers, messages, self.plan.mapping)
        try:
            self.store.recorder(active, task_id)
            seen = len(self.store.events(active, task_id))
        except TaskClosed as err:
            return _error(409, "task_closed", str(err))
        _LOGGER.debug(
            "Request of %s (via %s) for %s/%s", agent, via, active.spec_id, task_id
        )

        buffer = TraceRecorder(
            task_id, active.spec_id, MemorySink(), verbose=self.store.verbose
        )
        exchange = _Exchange(
            active,
            agent,
            task_id,
            derive_seed(self.plan.campaign_seed, active.spec_id, task_id, agent, seen),
            buffer,
        )
        buffer.record(
            EventKind.MSG_RECEIVED,
            agent,
            payload=body,
            detail={"messages": len(messages), "via": via},
            with_spec=False,
        )
        for spec in _routing(active, agent):
            record_inapplicable(
                buffer, spec, agent, "routing faults act on a message bus"
            )

        changed = False
        try:
            for point in _PROMPT_POINTS:
                changed |= await self._prompt(exchange, messages, point)
            history = self._history(exchange, messages)
        except ExecutionError as err:
            return self._injection_failed(exchange, err)
        if history is not None:
            messages = history
            changed = True

        tools = _tool_names(document)
        egress = any(matching(active, agent, point) for point in _EGRESS_ORDER)
        streaming = bool(document.get("stream")) and egress
        if changed or streaming:
            outgoing = {**document, "messages": messages}
            if streaming:
                outgoing["stream"] = False
            body = _dump(outgoing)

        try:
            response = await self._forward(body, headers)
        except UpstreamUnreachable as err:
            return _error(502, "upstream_unreachable", str(err))

        reply = Reply(
            response.status_code,
            response.content,
            response.headers.get("content-type", _JSON).split(";")[0],
        )
        if egress and response.is_success:
            try:
                reply = await self._apply_egress(exchange, reply, tools, streaming)
            except ExecutionError as err:
                return self._injection_failed(exchange, err)
        return self._finish(exchange, reply)

    def _injection_failed(self, exchange: _Exchange, err: ExecutionError) -> Reply:
        _LOGGER.warning(
            "Injection for %s/%s failed: %s",
            exchange.active.spec_id,
            exchange.task_id,
            err,
        )
        return self._finish(exchange, _error(502, "injection_failed", str(err)))

    def _finish(self, exchange: _Exchange, reply: Reply) -> Reply:
        """Record the reply and commit the request's buffered events."""
        exchange.recorder.record(
            EventKind.MSG_SENT,
            exchange.agent,
            payload=reply.body,
            detail={"status": reply.status},
            with_spec=False,
        )
        try:
            self.store.commit(
                exchange.active, exchange.task_id, exchange.recorder.events
            )
        except TaskClosed:
            _LOGGER.warning(
                "Task %s closed while a request was in flight", exchange.task_id
            )
        return reply

    async def _apply_egress(
        self, exchange: _Exchange, reply: Reply, tools: list[str], streaming: bool
    ) -> Reply:
        try:
            document = json.loads(reply.body)
        except (json.JSONDecodeError, UnicodeDecodeError):
            document = None
        if not isinstance(document, dict):
            for point in _EGRESS_ORDER:
                for spec in matching(exchange.active, exchange.agent, point):
                    record_inapplicable(
                        exchange.recorder, spec, exchange.agent, "reply is not JSON"
                    )
            return reply
        changed = await self._egress(exchange, document, tools)
        if streaming:
            return Reply(reply.status, _as_event_stream(document), _SSE)
        if not changed:
            return reply
        return Reply(reply.status, _dump(document), _JSON)

    def record_result(
        self, task_id: str, body: bytes, headers: Mapping[str, str]
    ) -> Reply:
        """Record the outcome of a task reported by the MAS harness."""
        try:
            data = TASK_RESULT_SCHEMA(json.loads(body))
            active = self.plan.select(_header(headers, HEADER_SPEC))
        except (json.JSONDecodeError, UnicodeDecodeError, vol.Invalid) as err:
            return _error(400, "malformed_request", f"Bad task result: {err}")
        except MalformedRequest as err:
            return _error(400, "malformed_request", str(err))
        try:
            outcome = self.store.finish(active, task_id, data["success"])
        except TaskClosed as err:
            return _error(409, "task_closed", str(err))
        return Reply(200, _dump(outcome.to_dict()))

    async def close(self) -> None:
        """Flush traces, write the manifest and release clients."""
        self.store.close()
        if self._owns_client:
            await self._client.aclose()
        if self._injector is not None:
            await self._injector.close()


def _as_event_stream(document: Mapping[str, Any]) -> bytes:
    choices = []
    for index, choice in enumerate(document.get("choices") or []):
        if isinstance(choice, dict):
            choices.append(
                {
                    "index": choice.get("index", index),
                    "delta": choice.get("message") or {},
                    "finish_reason": choice.get("finish_reason"),
                }
            )
    chunk = {
        key: value
        for key, value in document.items()
        if key not in ("choices", "object", "usage")
    }
    chunk["object"] = "chat.completion.chunk"
    chunk["choices"] = choices
    return b"data: " + _dump(chunk) + b"\n\ndata: [DONE]\n\n"


# ----------------------------------------------------------------------
# Service
# ----------------------------------------------------------------------


def create_app(gateway: Gateway) -> FastAPI:
    """ASGI application exposing the gateway."""

    @asynccontextmanager
    async def lifespan(_: FastAPI) -> AsyncIterator[None]:
        yield
        await gateway.close()

    app = FastAPI(title="MAS FaultLab gateway", lifespan=lifespan)

    @app.get("/healthz")
    async def healthz() -> dict[str, str]:
        return {"status": "ok"}

    @app.post(CHAT_COMPLETIONS_PATH)
    async def chat_completions(request: Request) -> Response:
        reply = await gateway.handle(await request.body(), dict(request.headers))
        return Response(reply.body, reply.status, media_type=reply.media_type)

    @app.post("/v1/tasks/{task_id}/result")
    async def task_result(task_id: str, request: Request) -> Response:
        reply = gateway.record_result(
            task_id, await request.body(), dict(request.headers)
        )
        return Response(reply.body, reply.status, media_type=reply.media_type)

    return app


def parse_listen(listen: str) -> tuple[str, int]:
    """Split a ``host:port`` listen address."""
    host, sep, port = listen.rpartition(":")
    if not sep or not host or not port.isdigit() or not 0 < int(port) < 65536:
        raise ConfigurationError(f"Invalid listen address {listen!r}")
    return host.strip("[]"), int(port)


def check_upstream(upstream: str) -> str:
    """Validate an upstream URL."""
    try:
        url = httpx.URL(upstream)
    except (httpx.InvalidURL, TypeError) as err:
        raise ConfigurationError(f"Invalid upstream URL {upstream!r}") from err
    if url.scheme not in ("http", "https") or not url.host:
        raise ConfigurationError(f"Invalid upstream URL {upstream!r}")
    return upstream


def build_injector(settings: InjectorSettings) -> InjectorClient | None:
    """Injector client of a campaign, or None when it runs offline."""
    if settings.offline:
        return None
    assert settings.endpoint is not None
    catalog = TemplateCatalog.load().with_thresholds(
        conflict=settings.conflict_threshold,
        ambiguity=settings.ambiguity_threshold,
    )
    return InjectorClient(
        HttpInjectorEndpoint(settings.endpoint, timeout=settings.timeout),
        catalog=catalog,
        model=settings.model,
        max_retries=settings.max_retries,
    )


def build_gateway(
    config: CampaignConfig,
    *,
    upstream: str | None = None,
    output_dir: str | os.PathLike[str] | None = None,
    force: bool = False,
    verbose: bool = False,
    client: httpx.AsyncClient | None = None,
) -> Gateway:
    """Validate a gateway campaign and assemble its gateway."""
    plan = FaultPlan.from_config(config)
    target = config.execution_target
    assert isinstance(target, GatewayTarget)
    url = check_upstream(upstream or target.upstream)
    out = Path(output_dir if output_dir is not None else config.output_dir)
    ensure_fresh_output(out, force=force)

    injector = build_injector(config.injector)
    dispatcher = FaultDispatcher(injector)
    manifest = Manifest(
        campaign_seed=config.campaign_seed,
        specs=[
            {
                **spec_to_dict(spec),
                "offline_fallback": dispatcher.offline_fallback(spec),
            }
            for spec in config.fault_specs
        ],
        injector=(
            {"mode": "offline"}
            if injector is None
            else {"mode": "delegated", "model": config.injector.model}
        ),
    )
    manifest.notes["target"] = "gateway"
    manifest.notes["upstream"] = url
    store = TraceStore(
        out, campaign_seed=config.campaign_seed, manifest=manifest, verbose=verbose
    )
    return Gateway(plan, upstream=url, store=store, client=client, injector=injector)


def serve(
    config: CampaignConfig,
    *,
    listen: str = DEFAULT_LISTEN,
    upstream: str | None = None,
    output_dir: str | os.PathLike[str] | None = None,
    force: bool = False,
    verbose: bool = False,
) -> None:
    """Run the gateway until interrupted; traces are flushed on shutdown."""
    host, port = parse_listen(listen)
    gateway = build_gateway(
        config,
        upstream=upstream,
        output_dir=output_dir,
        force=force,
        verbose=verbose,
    )
    _LOGGER.info(
        "Gateway listening on %s:%d → %s (%d spec(s))",
        host,
        port,
        gateway.upstream_url,
        len(gateway.plan.specs),
    )
    uvicorn.run(
        create_app(gateway),
        host=host,
        port=port,
        log_level="debug" if verbose else "info",
    )
