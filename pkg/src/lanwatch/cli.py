"""Command line entry points: serve, ingest, query."""

from __future__ import annotations

import asyncio
import json
import sys
from datetime import datetime, timezone
from pathlib import Path

import click

from .identity import GeoRegistry, LanConfig, OuiRegistry
from .pcap import CaptureError
from .server import create_app
from .service import StreamService
from .store import DeviceKey, InvalidQuery, TrafficQuery, TrafficStore
from .wire import encode_frame


def _parse_ts(text: str | None) -> int | None:
    """Integer nanoseconds, or an ISO-8601 instant (naive = UTC)."""
    if text is None:
        return None
    try:
        return int(text)
    except ValueError:
        pass
    dt = datetime.fromisoformat(text)
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return int(dt.timestamp() * 1_000_000_000)


def _store_options(fn):
    fn = click.option(
        "--data-dir",
        type=click.Path(path_type=Path),
        default=Path("lanwatch-data"),
        show_default=True,
        help="Store directory (created if missing).",
    )(fn)
    fn = click.option(
        "--lan-cidr",
        "lan_cidrs",
        multiple=True,
        help="LAN prefix; repeatable. Defaults to RFC1918 + fe80::/10 + fc00::/7.",
    )(fn)
    fn = click.option("--gateway-mac", default=None, help="Known gateway MAC.")(fn)
    fn = click.option(
        "--oui-db",
        type=click.Path(exists=True, path_type=Path),
        default=None,
        help="OUI snapshot path (defaults to the bundled one).",
    )(fn)
    fn = click.option(
        "--geo-db",
        type=click.Path(exists=True, path_type=Path),
        default=None,
        help="Geo snapshot path (defaults to the bundled one).",
    )(fn)
    return fn


def _open_store(data_dir, lan_cidrs, gateway_mac, oui_db, geo_db) -> TrafficStore:
    lan = LanConfig.from_cidrs(lan_cidrs or None, gateway_mac)
    oui = OuiRegistry.load(oui_db) if oui_db else OuiRegistry.bundled()
    geo = GeoRegistry.load(geo_db) if geo_db else GeoRegistry.bundled()
    return TrafficStore(data_dir, lan, oui, geo)


@click.group()
def main() -> None:
    """Home-network traffic capture backend and replay streamer."""


@main.command()
@click.option(
    "--listen", default="127.0.0.1:8765", show_default=True, help="host:port to bind."
)
@_store_options
def serve(listen, data_dir, lan_cidrs, gateway_mac, oui_db, geo_db) -> None:
    """Run the streaming server (WebSocket /stream, HTTP /ingest /devices /analytics)."""
    import uvicorn

    host, _, port = listen.rpartition(":")
    store = _open_store(data_dir, lan_cidrs, gateway_mac, oui_db, geo_db)
    app = create_app(StreamService(store))
    try:
        uvicorn.run(app, host=host or "127.0.0.1", port=int(port), log_level="info")
    finally:
        store.close()


@main.command()
@click.argument("capture", type=click.Path(exists=True, path_type=Path))
@_store_options
def ingest(capture, data_dir, lan_cidrs, gateway_mac, oui_db, geo_db) -> None:
    """Ingest one classic pcap file into the store."""
    store = _open_store(data_dir, lan_cidrs, gateway_mac, oui_db, geo_db)
    try:
        report = StreamService(store).ingest_capture(capture.read_bytes())
    except CaptureError as exc:
        raise click.ClickException(str(exc))
    finally:
        store.close()
    click.echo(json.dumps(report.to_payload(), sort_keys=True))


@main.command()
@click.option("--from", "start", default=None, help="Range start (int ns or ISO-8601).")
@click.option("--to", "end", default=None, help="Range end, exclusive.")
@click.option("--device", default=None, help="Device key, e.g. mac:aa:bb:cc:dd:ee:ff.")
@click.option(
    "--proto",
    "protocols",
    multiple=True,
    help="App protocol or transport name; repeatable.",
)
@click.option("--scale", default=0.0, show_default=True, help="Replay time scale.")
@click.option("--limit", default=None, type=int, help="Maximum events.")
@_store_options
def query(
    start, end, device, protocols, scale, limit,
    data_dir, lan_cidrs, gateway_mac, oui_db, geo_db,
) -> None:
    """Stream a query's frames as NDJSON to stdout."""
    store = _open_store(data_dir, lan_cidrs, gateway_mac, oui_db, geo_db)
    try:
        q = TrafficQuery(
            start_ns=_parse_ts(start),
            end_ns=_parse_ts(end),
            device=DeviceKey.parse(device) if device else None,
            protocols=frozenset(protocols) if protocols else None,
            limit=limit,
            time_scale=scale,
        )
        q.validate()
    except (InvalidQuery, ValueError) as exc:
        store.close()
        raise click.ClickException(str(exc))

    async def run() -> None:
        service = StreamService(store)
        async for frame in service.handle_query(q):
            sys.stdout.buffer.write(encode_frame(frame))
            sys.stdout.buffer.flush()

    try:
        asyncio.run(run())
    finally:
        store.close()


if __name__ == "__main__":
    main()
