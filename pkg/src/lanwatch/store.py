"""Durable packet-record store with ordered, filtered, lazily streamed queries.

On disk the store is a directory of append-only segment files of
length-prefixed binary records, each with a JSON sidecar holding the
segment's record count and min/max timestamps (see docs/STORAGE.md). All
record bytes are mirrored in memory, so queries never touch the disk: the
files exist for durability and crash recovery.

Ordering is total on (timestamp, sequence). Appends maintain a list of
already-sorted runs; a query lazily k-way merges the runs captured at query
start, so the first result is produced long before the scan finishes and
concurrent appends never disturb a running query.
"""

from __future__ import annotations

import errno
import heapq
import json
import logging
import os
import re
import struct
import threading
from bisect import bisect_left
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

from .identity import (
    DeviceIdentity,
    DeviceKey,
    GeoRegistry,
    IdentityCache,
    IdentitySnapshot,
    LanConfig,
    OuiRegistry,
    record_keys,
)
from .pcap import AppProtocol, PacketRecord, Scope, Transport

logger = logging.getLogger(__name__)

SEGMENT_SUFFIX = ".log"
SIDECAR_SUFFIX = ".idx"
_SEGMENT_RE = re.compile(r"^seg-(\d{8})\.log$")

DEFAULT_SEGMENT_BYTES = 16 * 1024 * 1024

# Fixed binary layout, little-endian, behind a u32 length prefix.
_RECORD = struct.Struct("<Qq6s6sHB16s16sBHHBIBB")
_LEN_PREFIX = struct.Struct("<I")

_F_MALFORMED = 1 << 0
_F_SRC_MAC = 1 << 1
_F_DST_MAC = 1 << 2
_F_ETHER_TYPE = 1 << 3
_F_SRC_PORT = 1 << 4
_F_DST_PORT = 1 << 5

_TRANSPORT_CODES = {
    None: 0,
    Transport.TCP: 1,
    Transport.UDP: 2,
    Transport.ICMP: 3,
    Transport.ICMPV6: 4,
    Transport.OTHER: 5,
}
_TRANSPORT_BY_CODE = {v: k for k, v in _TRANSPORT_CODES.items()}
# Codes are baked into segment files; enum definition order must not change.
_APP_CODES = {app: i for i, app in enumerate(AppProtocol)}
_APP_BY_CODE = {i: app for app, i in _APP_CODES.items()}
_SCOPE_CODES = {None: 0, **{s: i + 1 for i, s in enumerate(Scope)}}
_SCOPE_BY_CODE = {v: k for k, v in _SCOPE_CODES.items()}


class StoreError(Exception):
    pass


class InvalidQuery(StoreError):
    pass


class StorageFull(StoreError):
    pass


class IoFailure(StoreError):
    pass


@dataclass(frozen=True)
class TrafficQuery:
    """User-customizable record filter: time range, device, protocols, pacing."""

    start_ns: int | None = None
    end_ns: int | None = None  # half-open [start, end)
    device: DeviceKey | None = None
    protocols: frozenset[str] | None = None  # app protocol and/or transport names
    scopes: frozenset[Scope] | None = None
    limit: int | None = None
    time_scale: float = 0.0  # 0 = no pacing, 1 = real time

    def validate(self) -> None:
        if (
            self.start_ns is not None
            and self.end_ns is not None
            and not self.start_ns < self.end_ns
        ):
            raise InvalidQuery("time range start must precede end")
        if self.limit is not None and self.limit < 1:
            raise InvalidQuery("limit must be at least 1")
        if not self.time_scale >= 0:
            raise InvalidQuery("time scale must be nonnegative")
        if self.protocols is not None:
            known = {p.value for p in AppProtocol} | {t.value for t in Transport}
            unknown = set(self.protocols) - known
            if unknown:
                raise InvalidQuery(f"unknown protocols: {sorted(unknown)}")

    def matches(self, record: PacketRecord, lan: LanConfig) -> bool:
        if self.start_ns is not None and record.timestamp_ns < self.start_ns:
            return False
        if self.end_ns is not None and record.timestamp_ns >= self.end_ns:
            return False
        if self.scopes is not None and record.scope not in self.scopes:
            return False
        if self.protocols is not None:
            app_hit = record.app.value in self.protocols
            transport_hit = (
                record.transport is not None
                and record.transport.value in self.protocols
            )
            if not (app_hit or transport_hit):
                return False
        if self.device is not None:
            src_key, dst_key = record_keys(record, lan)
            if self.device != src_key and self.device != dst_key:
                return False
        return True


@dataclass(frozen=True)
class AppendReceipt:
    count: int
    first_seq: int | None
    last_seq: int | None


@dataclass
class NodeAnalytics:
    """Per-device aggregate over a time range."""

    key: DeviceKey
    packets: int = 0
    bytes: int = 0
    protocols: dict[AppProtocol, int] = field(default_factory=dict)
    top_peers: list[tuple[DeviceKey, int]] = field(default_factory=list)
    first_seen_ns: int | None = None
    last_seen_ns: int | None = None


def encode_record(record: PacketRecord) -> bytes:
    """Fixed-layout binary encoding; requires an assigned sequence number."""
    if record.seq is None:
        raise ValueError("cannot encode an unsequenced record")
    flags = 0
    if record.malformed:
        flags |= _F_MALFORMED
    if record.src_mac is not None:
        flags |= _F_SRC_MAC
    if record.dst_mac is not None:
        flags |= _F_DST_MAC
    if record.ether_type is not None:
        flags |= _F_ETHER_TYPE
    if record.src_port is not None:
        flags |= _F_SRC_PORT
    if record.dst_port is not None:
        flags |= _F_DST_PORT
    return _RECORD.pack(
        record.seq,
        record.timestamp_ns,
        _mac_bytes(record.src_mac),
        _mac_bytes(record.dst_mac),
        record.ether_type or 0,
        record.ip_version or 0,
        _ip_bytes(record.src_ip, record.ip_version),
        _ip_bytes(record.dst_ip, record.ip_version),
        _TRANSPORT_CODES[record.transport],
        record.src_port or 0,
        record.dst_port or 0,
        _APP_CODES[record.app],
        record.length,
        _SCOPE_CODES[record.scope],
        flags,
    )


def decode_record(blob: bytes) -> PacketRecord:
    (
        seq,
        ts,
        src_mac,
        dst_mac,
        ether_type,
        ip_version,
        src_ip,
        dst_ip,
        transport_code,
        src_port,
        dst_port,
        app_code,
        length,
        scope_code,
        flags,
    ) = _RECORD.unpack(blob)
    return PacketRecord(
        timestamp_ns=ts,
        src_mac=_mac_str(src_mac) if flags & _F_SRC_MAC else None,
        dst_mac=_mac_str(dst_mac) if flags & _F_DST_MAC else None,
        ether_type=ether_type if flags & _F_ETHER_TYPE else None,
        ip_version=ip_version or None,
        src_ip=_ip_str(src_ip, ip_version),
        dst_ip=_ip_str(dst_ip, ip_version),
        transport=_TRANSPORT_BY_CODE[transport_code],
        src_port=src_port if flags & _F_SRC_PORT else None,
        dst_port=dst_port if flags & _F_DST_PORT else None,
        app=_APP_BY_CODE[app_code],
        length=length,
        malformed=bool(flags & _F_MALFORMED),
        scope=_SCOPE_BY_CODE[scope_code],
        seq=seq,
    )


def _mac_bytes(mac: str | None) -> bytes:
    return bytes.fromhex(mac.replace(":", "")) if mac else b"\x00" * 6


def _mac_str(raw: bytes) -> str:
    return ":".join(f"{b:02x}" for b in raw)


def _ip_bytes(ip: str | None, version: int | None) -> bytes:
    if ip is None or version is None:
        return b"\x00" * 16
    import ipaddress

    packed = ipaddress.ip_address(ip).packed
    return packed.ljust(16, b"\x00")


def _ip_str(raw: bytes, version: int) -> str | None:
    import ipaddress

    if version == 4:
        return str(ipaddress.IPv4Address(raw[:4]))
    if version == 6:
        return ipaddress.IPv6Address(raw).compressed
    return None


@dataclass
class _Run:
    """Entries sorted by (ts, seq); the tail may grow, never change."""

    entries: list[tuple[int, int, int, int]] = field(default_factory=list)
    min_ts: int = 0
    max_ts: int = 0


class TrafficStore:
    """Single-writer, many-reader packet record store over a data directory."""

    def __init__(
        self,
        data_dir: str | Path,
        lan: LanConfig,
        oui: OuiRegistry | None = None,
        geo: GeoRegistry | None = None,
        segment_bytes: int = DEFAULT_SEGMENT_BYTES,
    ):
        self.data_dir = Path(data_dir)
        self.data_dir.mkdir(parents=True, exist_ok=True)
        self.lan = lan
        self.identity = IdentityCache(
            lan, oui or OuiRegistry.bundled(), geo or GeoRegistry.bundled()
        )
        self._segment_bytes = segment_bytes
        self._lock = threading.Lock()
        self._runs: list[_Run] = []
        self._mirrors: list[bytearray] = []  # one per segment, same order
        self._segment_names: list[str] = []
        self._seg_stats: list[dict] = []  # sidecar contents, kept current
        self._next_seq = 0
        self._count = 0
        self._writer = None
        self._recover()

    # ── recovery ─────────────────────────────────────────────────────

    def _recover(self) -> None:
        names = sorted(
            p.name for p in self.data_dir.iterdir() if _SEGMENT_RE.match(p.name)
        )
        for name in names:
            path = self.data_dir / name
            data = path.read_bytes()
            mirror = bytearray()
            good_end = 0
            entries: list[tuple[int, PacketRecord]] = []
            pos = 0
            while pos + _LEN_PREFIX.size <= len(data):
                (rec_len,) = _LEN_PREFIX.unpack_from(data, pos)
                body_start = pos + _LEN_PREFIX.size
                if rec_len != _RECORD.size or body_start + rec_len > len(data):
                    break
                record = decode_record(data[body_start : body_start + rec_len])
                entries.append((len(mirror), record))
                mirror += data[pos : body_start + rec_len]
                good_end = body_start + rec_len
                pos = good_end
            if good_end < len(data):
                logger.warning(
                    "truncating %s: %d trailing bytes are not a whole record",
                    name,
                    len(data) - good_end,
                )
                with open(path, "r+b") as fh:
                    fh.truncate(good_end)
            seg_idx = len(self._segment_names)
            self._segment_names.append(name)
            self._mirrors.append(mirror)
            self._seg_stats.append({"count": 0, "min_ts": None, "max_ts": None})
            for offset, record in entries:
                self._index_entry(record.timestamp_ns, record.seq, seg_idx, offset)
                self.identity.apply(record)
                self._next_seq = max(self._next_seq, record.seq + 1)
                self._count += 1
            self._check_sidecar(name, seg_idx)
        if self._segment_names:
            last = self.data_dir / self._segment_names[-1]
            self._writer = open(last, "ab")

    def _check_sidecar(self, name: str, seg_idx: int) -> None:
        sidecar = self.data_dir / (name[: -len(SEGMENT_SUFFIX)] + SIDECAR_SUFFIX)
        stats = self._seg_stats[seg_idx]
        if sidecar.exists():
            try:
                on_disk = json.loads(sidecar.read_text())
            except json.JSONDecodeError:
                on_disk = None
            if on_disk != stats:
                logger.warning("sidecar %s stale after recovery; rewriting", sidecar.name)
                _write_sidecar(sidecar, stats)
        else:
            _write_sidecar(sidecar, stats)

    # ── writes ───────────────────────────────────────────────────────

    def append_batch(self, records: Iterable[PacketRecord]) -> AppendReceipt:
        """Sequence, persist, and index a batch; fold the identity cache.

        Records are durable (fsynced) before the receipt returns. The batch
        becomes visible to new queries as a whole.
        """
        batch = list(records)
        if not batch:
            return AppendReceipt(count=0, first_seq=None, last_seq=None)
        with self._lock:
            first_seq = self._next_seq
            for record in batch:
                record.seq = self._next_seq
                self._next_seq += 1
            payload = bytearray()
            for record in batch:
                blob = encode_record(record)
                payload += _LEN_PREFIX.pack(len(blob)) + blob
            try:
                seg_idx, base_offset = self._write_payload(payload)
            except OSError as exc:
                if exc.errno == errno.ENOSPC:
                    raise StorageFull(str(exc)) from exc
                raise IoFailure(str(exc)) from exc
            offset = base_offset
            for record in batch:
                self._index_entry(record.timestamp_ns, record.seq, seg_idx, offset)
                offset += _LEN_PREFIX.size + _RECORD.size
                self.identity.apply(record)
            self._count += len(batch)
            self._rewrite_current_sidecar()
        return AppendReceipt(
            count=len(batch), first_seq=first_seq, last_seq=batch[-1].seq
        )

    def _write_payload(self, payload: bytes) -> tuple[int, int]:
        if self._writer is None or len(self._mirrors[-1]) >= self._segment_bytes:
            self._roll_segment()
        assert self._writer is not None
        seg_idx = len(self._segment_names) - 1
        base_offset = len(self._mirrors[seg_idx])
        self._writer.write(payload)
        self._writer.flush()
        os.fsync(self._writer.fileno())
        self._mirrors[seg_idx] += payload
        return seg_idx, base_offset

    def _roll_segment(self) -> None:
        if self._writer is not None:
            self._writer.close()
        name = f"seg-{len(self._segment_names) + 1:08d}{SEGMENT_SUFFIX}"
        self._segment_names.append(name)
        self._mirrors.append(bytearray())
        self._seg_stats.append({"count": 0, "min_ts": None, "max_ts": None})
        self._writer = open(self.data_dir / name, "ab")

    def _index_entry(self, ts: int, seq: int, seg_idx: int, offset: int) -> None:
        stats = self._seg_stats[seg_idx]
        stats["count"] += 1
        stats["min_ts"] = ts if stats["min_ts"] is None else min(stats["min_ts"], ts)
        stats["max_ts"] = ts if stats["max_ts"] is None else max(stats["max_ts"], ts)
        entry = (ts, seq, seg_idx, offset)
        if self._runs:
            last = self._runs[-1]
            tail = last.entries[-1]
            if (ts, seq) >= (tail[0], tail[1]):
                last.entries.append(entry)
                last.max_ts = max(last.max_ts, ts)
                return
        self._runs.append(_Run(entries=[entry], min_ts=ts, max_ts=ts))

    def _rewrite_current_sidecar(self) -> None:
        name = self._segment_names[-1]
        _write_sidecar(
            self.data_dir / (name[: -len(SEGMENT_SUFFIX)] + SIDECAR_SUFFIX),
            self._seg_stats[-1],
        )

    # ── reads ────────────────────────────────────────────────────────

    def query(self, q: TrafficQuery) -> Iterator[PacketRecord]:
        """Stream records matching every filter, ordered by (timestamp, seq).

        The result is bound to a snapshot taken now; later appends are not
        seen. Records stream lazily from a k-way merge over sorted runs.
        """
        q.validate()
        with self._lock:
            snapshot = [(run, len(run.entries), run.min_ts, run.max_ts) for run in self._runs]
        return self._scan(snapshot, q)

    def snapshot_view(
        self, q: TrafficQuery
    ) -> tuple[Iterator[PacketRecord], IdentitySnapshot]:
        """A record stream and the identity snapshot from the same instant."""
        q.validate()
        with self._lock:
            snapshot = [(run, len(run.entries), run.min_ts, run.max_ts) for run in self._runs]
            identities = self.identity.snapshot()
        return self._scan(snapshot, q), identities

    def _scan(
        self,
        snapshot: list[tuple[_Run, int, int, int]],
        q: TrafficQuery,
    ) -> Iterator[PacketRecord]:
        def run_slice(run: _Run, length: int) -> Iterator[tuple[int, int, int, int]]:
            entries = run.entries
            lo = 0
            if q.start_ns is not None:
                lo = bisect_left(entries, q.start_ns, 0, length, key=lambda e: e[0])
            for i in range(lo, length):
                entry = entries[i]
                if q.end_ns is not None and entry[0] >= q.end_ns:
                    return
                yield entry

        streams = [
            run_slice(run, length)
            for run, length, min_ts, max_ts in snapshot
            if (q.start_ns is None or max_ts >= q.start_ns)
            and (q.end_ns is None or min_ts < q.end_ns)
        ]
        emitted = 0
        for ts, seq, seg_idx, offset in heapq.merge(*streams):
            blob = bytes(
                self._mirrors[seg_idx][
                    offset + _LEN_PREFIX.size : offset + _LEN_PREFIX.size + _RECORD.size
                ]
            )
            record = decode_record(blob)
            if not q.matches(record, self.lan):
                continue
            yield record
            emitted += 1
            if q.limit is not None and emitted >= q.limit:
                return

    def summarize(
        self,
        key: DeviceKey,
        start_ns: int | None = None,
        end_ns: int | None = None,
    ) -> NodeAnalytics:
        """Aggregate the records where ``key`` is either endpoint of the packet."""
        analytics = NodeAnalytics(key=key)
        peers: dict[str, tuple[DeviceKey, int]] = {}
        q = TrafficQuery(start_ns=start_ns, end_ns=end_ns, device=key)
        for record in self.query(q):
            analytics.packets += 1
            analytics.bytes += record.length
            analytics.protocols[record.app] = analytics.protocols.get(record.app, 0) + 1
            ts = record.timestamp_ns
            analytics.first_seen_ns = (
                ts if analytics.first_seen_ns is None else min(analytics.first_seen_ns, ts)
            )
            analytics.last_seen_ns = (
                ts if analytics.last_seen_ns is None else max(analytics.last_seen_ns, ts)
            )
            src_key, dst_key = record_keys(record, self.lan)
            peer = dst_key if src_key == key else src_key
            if peer is not None:
                name = str(peer)
                prev = peers.get(name)
                peers[name] = (peer, (prev[1] if prev else 0) + 1)
        analytics.top_peers = sorted(
            peers.values(), key=lambda kv: (-kv[1], str(kv[0]))
        )[:5]
        return analytics

    def list_devices(self) -> list[DeviceIdentity]:
        """Snapshot-consistent identity listing sorted by key."""
        return self.identity.snapshot().sorted_identities()

    def time_bounds(self) -> tuple[int, int] | None:
        with self._lock:
            if not self._runs:
                return None
            return (
                min(run.min_ts for run in self._runs),
                max(run.max_ts for run in self._runs),
            )

    def __len__(self) -> int:
        return self._count

    @property
    def next_seq(self) -> int:
        return self._next_seq

    def close(self) -> None:
        if self._writer is not None:
            self._writer.close()
            self._writer = None

    def __enter__(self) -> "TrafficStore":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def _write_sidecar(path: Path, stats: dict) -> None:
    tmp = path.with_suffix(".idx.tmp")
    tmp.write_text(json.dumps(stats, sort_keys=True))
    tmp.replace(path)
