"""HTTP/WebSocket surface: capture upload, device and analytics panels, /stream.

A /stream session is one query: the client sends a single JSON TrafficQuery,
the server answers with the newline-delimited frame stream. Frames pass
through a bounded per-session buffer; when a client stops reading, the
producer pauses (the replay clock stops) instead of dropping frames.
"""

from __future__ import annotations

import asyncio
import json
import logging
from contextlib import suppress
from typing import Any

from fastapi import FastAPI, HTTPException, Query, Request, WebSocket
from starlette.websockets import WebSocketDisconnect

from .identity import DeviceIdentity, DeviceKey
from .pcap import CaptureError, MalformedHeader, UnsupportedFormat, UnsupportedLinkType
from .service import SESSION_BUFFER_FRAMES, StreamService, parse_query_payload
from .store import InvalidQuery, IoFailure, NodeAnalytics
from .wire import StreamFrame, encode_frame, error_frame, hello_frame

logger = logging.getLogger(__name__)


def identity_payload(identity: DeviceIdentity) -> dict[str, Any]:
    return {
        "key": str(identity.key),
        "vendor": identity.vendor,
        "continent": identity.continent.value if identity.continent else None,
        "country": identity.country,
        "role": identity.role.value,
        "name": identity.display_name,
        "first_seen": identity.first_seen_ns,
        "last_seen": identity.last_seen_ns,
        "packets": identity.packets,
        "bytes": identity.bytes,
    }


def analytics_payload(analytics: NodeAnalytics) -> dict[str, Any]:
    return {
        "key": str(analytics.key),
        "packets": analytics.packets,
        "bytes": analytics.bytes,
        "protocols": {app.value: n for app, n in sorted(analytics.protocols.items())},
        "peers": [
            {"key": str(key), "packets": n} for key, n in analytics.top_peers
        ],
        "first_seen": analytics.first_seen_ns,
        "last_seen": analytics.last_seen_ns,
    }


def create_app(service: StreamService) -> FastAPI:
    app = FastAPI(title="lanwatch", docs_url=None, redoc_url=None)
    app.state.service = service

    @app.post("/ingest")
    async def ingest(request: Request) -> dict[str, Any]:
        body = await request.body()
        try:
            report = await asyncio.to_thread(service.ingest_capture, body)
        except (MalformedHeader, UnsupportedFormat, UnsupportedLinkType) as exc:
            raise HTTPException(status_code=400, detail=str(exc)) from exc
        except IoFailure as exc:
            raise HTTPException(status_code=500, detail=str(exc)) from exc
        return report.to_payload()

    @app.get("/devices")
    def devices() -> list[dict[str, Any]]:
        return [identity_payload(i) for i in service.store.list_devices()]

    @app.get("/analytics")
    def analytics(
        key: str,
        start: int | None = Query(default=None, alias="from"),
        end: int | None = Query(default=None, alias="to"),
    ) -> dict[str, Any]:
        try:
            device = DeviceKey.parse(key)
        except ValueError as exc:
            raise HTTPException(status_code=400, detail=str(exc)) from exc
        return analytics_payload(service.store.summarize(device, start, end))

    @app.websocket("/stream")
    async def stream(websocket: WebSocket) -> None:
        await websocket.accept()
        try:
            text = await websocket.receive_text()
        except WebSocketDisconnect:
            return
        try:
            query = parse_query_payload(json.loads(text))
        except json.JSONDecodeError as exc:
            await _reject(websocket, service, f"query is not JSON: {exc}")
            return
        except InvalidQuery as exc:
            await _reject(websocket, service, str(exc))
            return

        frames: asyncio.Queue[StreamFrame | None] = asyncio.Queue(
            maxsize=SESSION_BUFFER_FRAMES
        )

        async def pump() -> None:
            try:
                async for frame in service.handle_query(query):
                    await frames.put(frame)
                await frames.put(None)
            except asyncio.CancelledError:
                raise
            except Exception as exc:  # surface internal failures on the wire
                logger.exception("stream session failed")
                await frames.put(error_frame("internal", str(exc)))
                await frames.put(None)

        producer = asyncio.create_task(pump())
        try:
            while True:
                frame = await frames.get()
                if frame is None:
                    break
                await websocket.send_bytes(encode_frame(frame))
            await websocket.close()
        except (WebSocketDisconnect, RuntimeError):
            pass  # client went away mid-replay; producer cleanup below
        finally:
            producer.cancel()
            with suppress(asyncio.CancelledError):
                await producer

    return app


async def _reject(websocket: WebSocket, service: StreamService, message: str) -> None:
    """Invalid query: still a grammatical session (hello, then one error)."""
    bounds = service.store.time_bounds()
    with suppress(WebSocketDisconnect, RuntimeError):
        await websocket.send_bytes(
            encode_frame(hello_frame(*(bounds if bounds else (None, None))))
        )
        await websocket.send_bytes(
            encode_frame(error_frame("invalid_query", message))
        )
        await websocket.close()
