"""Tests for the injector client, endpoints and template catalog."""

from __future__ import annotations

import json
from pathlib import Path
from unittest.mock import AsyncMock

import httpx
import pytest

from mas_faultlab.errors import ConfigurationError
from mas_faultlab.injector import (
    FixtureMiss,
    HttpInjectorEndpoint,
    InjectorClient,
    InjectorUnavailable,
    MockInjectorEndpoint,
    TemplateCatalog,
    TemplateCatalogError,
    build_request,
    delegate,
    load_fixture_file,
    request_digest,
    response_text,
)
from mas_faultlab.integrity import IntegrityCheckFailed
from mas_faultlab.taxonomy import SEMANTIC_FAULT_TYPES, FaultType
from mas_faultlab.tracelog import EventKind, MemorySink, TraceRecorder

ORIGINAL = "The total is probably 42 units across both regions."
GOOD = "The total is exactly 57 units across both regions."


def _completion(text: str) -> dict:
    return {"choices": [{"message": {"role": "assistant", "content": text}}]}


def _attempts(recorder: TraceRecorder) -> list:
    return [e for e in recorder.events if e.kind is EventKind.INJECTION_ATTEMPT]


class TestTemplateCatalog:
    """Tests for the shipped template catalog."""

    def test_covers_semantic_faults(self) -> None:
        """Every semantic fault type has a template."""
        catalog = TemplateCatalog.load()
        for fault_type in SEMANTIC_FAULT_TYPES:
            assert catalog.template(fault_type).integrity_rules

    def test_structure_fault_has_no_template(self) -> None:
        """Structure-level faults are never delegated."""
        with pytest.raises(TemplateCatalogError):
            TemplateCatalog.load().template(FaultType.MEMORY_LOSS)

    def test_catalog_tools_are_rendered(self) -> None:
        """The tool catalog is interpolated into the directive."""
        catalog = TemplateCatalog.load()
        template = catalog.template(FaultType.TOOL_SELECTION_ERROR)
        text = catalog.render_instruction(template, catalog=["search", "lookup"])
        assert "from: search, lookup" in text
        assert "from:" not in catalog.render_instruction(template)

    def test_missing_prompt_variable(self) -> None:
        """Undefined template variables are errors, not blanks."""
        with pytest.raises(TemplateCatalogError, match="blind_trust"):
            TemplateCatalog.load().render_prompt("blind_trust")

    def test_with_thresholds(self) -> None:
        """Configured thresholds replace the keyword retention fractions."""
        catalog = TemplateCatalog.load().with_thresholds(conflict=0.9, ambiguity=0.2)
        rules = catalog.template(FaultType.INSTRUCTION_LOGIC_CONFLICT).integrity_rules
        assert rules[0].min_fraction == 0.9
        rules = catalog.template(FaultType.INSTRUCTION_AMBIGUITY).integrity_rules
        assert rules[0].min_fraction == 0.2

    def test_unsupported_version(self) -> None:
        """Catalog documents are versioned."""
        with pytest.raises(TemplateCatalogError):
            TemplateCatalog({"schema_version": 99})


class TestRequests:
    """Tests for request building and digests."""

    def test_digest_ignores_sampling_options(self) -> None:
        """Only model, messages and seed key a fixture."""
        payload = build_request("do it", "text", model="m", seed=1)
        assert request_digest(payload) == request_digest(
            {**payload, "temperature": 0.7}
        )
        assert request_digest(payload) != request_digest({**payload, "seed": 2})

    def test_response_text(self) -> None:
        """The first choice's content is the answer."""
        assert response_text(_completion("hi")) == "hi"
        with pytest.raises(InjectorUnavailable):
            response_text({"choices": []})
        with pytest.raises(InjectorUnavailable):
            response_text(_completion(None))  # type: ignore[arg-type]


class TestEndpoints:
    """Tests for the HTTP and fixture endpoints."""

    @pytest.mark.asyncio
    async def test_http_endpoint(self) -> None:
        """The endpoint posts to the chat-completions path with the key."""
        seen: list[httpx.Request] = []

        def handler(request: httpx.Request) -> httpx.Response:
            seen.append(request)
            return httpx.Response(200, json=_completion("mutated"))

        async with httpx.AsyncClient(transport=httpx.MockTransport(handler)) as client:
            endpoint = HttpInjectorEndpoint(
                "http://injector.test/", api_key="secret", client=client
            )
            text = await endpoint.complete(build_request("x", "y", model="m", seed=1))

        assert text == "mutated"
        assert str(seen[0].url) == "http://injector.test/v1/chat/completions"
        assert seen[0].headers["authorization"] == "Bearer secret"
        assert json.loads(seen[0].content)["seed"] == 1

    @pytest.mark.asyncio
    async def test_key_from_environment(self, monkeypatch: pytest.MonkeyPatch) -> None:
        """Without an explicit key the environment supplies one."""
        monkeypatch.setenv("MAS_FAULTLAB_INJECTOR_KEY", "from-env")
        seen: list[httpx.Request] = []

        def handler(request: httpx.Request) -> httpx.Response:
            seen.append(request)
            return httpx.Response(200, json=_completion("ok"))

        async with httpx.AsyncClient(transport=httpx.MockTransport(handler)) as client:
            endpoint = HttpInjectorEndpoint("http://injector.test", client=client)
            await endpoint.complete({"model": "m", "messages": []})
        assert seen[0].headers["authorization"] == "Bearer from-env"

    @pytest.mark.asyncio
    async def test_http_error(self) -> None:
        """Server errors surface as InjectorUnavailable."""
        transport = httpx.MockTransport(lambda request: httpx.Response(503))
        async with httpx.AsyncClient(transport=transport) as client:
            endpoint = HttpInjectorEndpoint("http://injector.test", client=client)
            with pytest.raises(InjectorUnavailable, match="failed"):
                await endpoint.complete({"model": "m", "messages": []})

    @pytest.mark.asyncio
    async def test_fixture_endpoint(self) -> None:
        """Canned responses are served by request digest."""
        payload = build_request("x", "y", model="m", seed=1)
        endpoint = MockInjectorEndpoint({request_digest(payload): "canned"})
        assert await endpoint.complete(payload) == "canned"
        with pytest.raises(FixtureMiss) as info:
            await endpoint.complete({**payload, "seed": 2})
        assert info.value.digest == request_digest({**payload, "seed": 2})

    def test_fixture_file(self, tmp_path: Path) -> None:
        """Fixture files carry a schema version and a responses object."""
        path = tmp_path / "fixtures.json"
        path.write_text(json.dumps({"schema_version": 1, "responses": {"d": "t"}}))
        assert load_fixture_file(path) == {"d": "t"}
        path.write_text(json.dumps({"responses": {}}))
        with pytest.raises(ConfigurationError, match="not a fixture file"):
            load_fixture_file(path)


class TestDelegate:
    """Tests for delegate and its retry budget."""

    @pytest.mark.asyncio
    @pytest.mark.parametrize(("rejections", "max_retries"), [(0, 2), (1, 2), (2, 2)])
    async def test_attempts_until_accepted(
        self, rejections: int, max_retries: int
    ) -> None:
        """Each rejected answer costs one attempt with the next seed."""
        endpoint = AsyncMock()
        endpoint.complete.side_effect = [ORIGINAL] * rejections + [GOOD]
        recorder = TraceRecorder("t1", "h", MemorySink())
        template = TemplateCatalog.load().template(FaultType.HALLUCINATION)

        result = await delegate(
            ORIGINAL, template, endpoint, max_retries, 10, recorder=recorder
        )

        assert result == GOOD
        attempts = _attempts(recorder)
        assert len(attempts) == min(rejections, max_retries) + 1
        assert [a.detail["attempt"] for a in attempts] == list(range(len(attempts)))
        seeds = [c.args[0]["seed"] for c in endpoint.complete.await_args_list]
        assert seeds == [10 + n for n in range(len(attempts))]

    @pytest.mark.asyncio
    async def test_budget_exhausted(self) -> None:
        """When every answer is rejected the last failures are reported."""
        endpoint = AsyncMock()
        endpoint.complete.return_value = ORIGINAL
        recorder = TraceRecorder("t1", "h", MemorySink())
        template = TemplateCatalog.load().template(FaultType.HALLUCINATION)

        with pytest.raises(IntegrityCheckFailed) as info:
            await delegate(ORIGINAL, template, endpoint, 1, 0, recorder=recorder)

        assert info.value.attempts == 2
        assert info.value.failed == ["claim_added"]
        assert len(_attempts(recorder)) == 2
        assert _attempts(recorder)[-1].detail["outcome"] == "rejected"

    @pytest.mark.asyncio
    async def test_transport_failure(self) -> None:
        """A transport failure on the last attempt is re-raised."""
        endpoint = AsyncMock()
        endpoint.complete.side_effect = InjectorUnavailable("down")
        template = TemplateCatalog.load().template(FaultType.HALLUCINATION)
        with pytest.raises(InjectorUnavailable, match="down"):
            await delegate(ORIGINAL, template, endpoint, 0, 0)

    @pytest.mark.asyncio
    async def test_transport_recovers(self) -> None:
        """A transient failure is retried."""
        endpoint = AsyncMock()
        endpoint.complete.side_effect = [InjectorUnavailable("blip"), GOOD]
        template = TemplateCatalog.load().template(FaultType.HALLUCINATION)
        assert await delegate(ORIGINAL, template, endpoint, 1, 0) == GOOD

    @pytest.mark.asyncio
    async def test_negative_budget(self) -> None:
        """The retry budget cannot be negative."""
        template = TemplateCatalog.load().template(FaultType.HALLUCINATION)
        with pytest.raises(ValueError):
            await delegate(ORIGINAL, template, AsyncMock(), -1, 0)


class TestInjectorClient:
    """Tests for InjectorClient."""

    @pytest.mark.asyncio
    async def test_mutate_uses_model(self) -> None:
        """Requests carry the configured model name."""
        endpoint = AsyncMock()
        endpoint.complete.return_value = GOOD
        client = InjectorClient(endpoint, model="mutator")
        assert await client.mutate(FaultType.HALLUCINATION, ORIGINAL, 5) == GOOD
        assert endpoint.complete.await_args.args[0]["model"] == "mutator"

    @pytest.mark.asyncio
    async def test_close(self) -> None:
        """Closing the client closes the endpoint."""
        endpoint = AsyncMock()
        await InjectorClient(endpoint).close()
        endpoint.close.assert_awaited_once()
