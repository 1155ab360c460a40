"""Local chat-completions endpoint answering from a fixture file.

Serves the canned injector and judge responses that ``MockInjectorEndpoint``
uses in-process, so recorded campaigns can run against a real socket.
"""

from __future__ import annotations

import json
import logging
import os
from collections.abc import Mapping
from typing import Any

import uvicorn
from fastapi import FastAPI, Request
from fastapi.responses import Response

from .const import CHAT_COMPLETIONS_PATH, DEFAULT_LISTEN
from .gateway import parse_listen
from .injector import load_fixture_file, request_digest

_LOGGER = logging.getLogger(__name__)

_JSON = "application/json"


def _body(document: Mapping[str, Any]) -> bytes:
    return json.dumps(document, sort_keys=True, separators=(",", ":")).encode("utf-8")


def completion(payload: Mapping[str, Any], text: str, digest: str) -> bytes:
    """Chat-completions response carrying one canned text."""
    return _body(
        {
            "id": f"fixture-{digest[:16]}",
            "object": "chat.completion",
            "model": payload.get("model"),
            "choices": [
                {
                    "index": 0,
                    "message": {"role": "assistant", "content": text},
                    "finish_reason": "stop",
                }
            ],
        }
    )


def create_fixture_app(responses: Mapping[str, str]) -> FastAPI:
    """ASGI application answering requests by their digest."""
    canned = dict(responses)
    app = FastAPI(title="MAS FaultLab fixtures")

    @app.get("/healthz")
    async def healthz() -> dict[str, Any]:
        return {"status": "ok", "responses": len(canned)}

    @app.post(CHAT_COMPLETIONS_PATH)
    async def chat_completions(request: Request) -> Response:
        try:
            payload = json.loads(await request.body())
        except (json.JSONDecodeError, UnicodeDecodeError):
            payload = None
        if not isinstance(payload, dict):
            error = {"error": {"type": "malformed_request"}}
            return Response(_body(error), 400, media_type=_JSON)
        digest = request_digest(payload)
        text = canned.get(digest)
        if text is None:
            _LOGGER.debug("Fixture miss %s", digest)
            error = {"error": {"type": "fixture_miss", "digest": digest}}
            return Response(_body(error), 404, media_type=_JSON)
        _LOGGER.debug("Fixture hit %s", digest)
        return Response(completion(payload, text, digest), media_type=_JSON)

    return app


def serve_fixtures(
    path: str | os.PathLike[str], *, listen: str = DEFAULT_LISTEN
) -> None:
    """Serve a fixture file until interrupted."""
    host, port = parse_listen(listen)
    responses = load_fixture_file(path)
    _LOGGER.info(
        "Serving %d fixture response(s) from %s on %s:%d",
        len(responses),
        path,
        host,
        port,
    )
    uvicorn.run(create_fixture_app(responses), host=host, port=port)
