"""Device identity cache: vendor from MAC OUI, location from IP, LAN scope.

Local devices are keyed by MAC (remote MACs are always the gateway's), remote
endpoints by IP. Both lookups run against versioned snapshot files bundled
with the package, so results are reproducible offline.
"""

from __future__ import annotations

import ipaddress
import logging
import threading
from dataclasses import dataclass, field, replace
from enum import Enum
from importlib import resources
from pathlib import Path
from typing import Iterable, TYPE_CHECKING

from .pcap import PacketRecord, Scope

if TYPE_CHECKING:
    from ipaddress import IPv4Address, IPv6Address

logger = logging.getLogger(__name__)

UNKNOWN_VENDOR = "UNKNOWN"

# RFC1918 plus v6 link-local and unique-local: the default LAN boundary.
DEFAULT_LAN_CIDRS = (
    "10.0.0.0/8",
    "172.16.0.0/12",
    "192.168.0.0/16",
    "fe80::/10",
    "fc00::/7",
)


class InvalidMac(ValueError):
    pass


class InvalidIp(ValueError):
    pass


class KeyKind(str, Enum):
    LOCAL_MAC = "mac"
    REMOTE_IP = "ip"


class Role(str, Enum):
    LOCAL = "LOCAL"
    REMOTE = "REMOTE"
    GATEWAY = "GATEWAY"
    SPECIAL = "SPECIAL"


class Continent(str, Enum):
    AFRICA = "AF"
    ANTARCTICA = "AN"
    ASIA = "AS"
    EUROPE = "EU"
    NORTH_AMERICA = "NA"
    OCEANIA = "OC"
    SOUTH_AMERICA = "SA"
    UNKNOWN = "unknown"


_CONTINENT_BY_CODE = {c.value: c for c in Continent if c is not Continent.UNKNOWN}


@dataclass(frozen=True, order=True)
class DeviceKey:
    """Stable node key: a normalized MAC for local devices, an IP for remote."""

    kind: KeyKind
    value: str

    def __str__(self) -> str:
        return f"{self.kind.value}:{self.value}"

    @classmethod
    def parse(cls, text: str) -> "DeviceKey":
        prefix, _, value = text.partition(":")
        if prefix == KeyKind.LOCAL_MAC.value and value:
            return cls(KeyKind.LOCAL_MAC, normalize_mac(value))
        if prefix == KeyKind.REMOTE_IP.value and value:
            return cls(KeyKind.REMOTE_IP, canonical_ip(value))
        raise ValueError(f"unparseable device key {text!r}")


@dataclass
class DeviceIdentity:
    """Cached per-device facts accumulated while folding packet records."""

    key: DeviceKey
    vendor: str = UNKNOWN_VENDOR
    continent: Continent | None = None
    country: str | None = None
    role: Role = Role.LOCAL
    display_name: str = ""
    first_seen_ns: int | None = None
    last_seen_ns: int | None = None
    packets: int = 0
    bytes: int = 0


@dataclass(frozen=True)
class LanConfig:
    """Which prefixes count as the home network, plus the known gateway MAC."""

    prefixes: tuple[ipaddress.IPv4Network | ipaddress.IPv6Network, ...]
    gateway_mac: str | None = None
    _local_cache: dict = field(default_factory=dict, compare=False, repr=False)
    _broadcasts: frozenset = field(default=frozenset(), compare=False, repr=False)

    def __post_init__(self) -> None:
        if not self.prefixes:
            raise ValueError("LAN configuration needs at least one prefix")
        v4_broadcasts = frozenset(
            net.broadcast_address for net in self.prefixes if net.version == 4
        )
        object.__setattr__(self, "_broadcasts", v4_broadcasts)

    @classmethod
    def from_cidrs(
        cls, cidrs: Iterable[str] | None = None, gateway_mac: str | None = None
    ) -> "LanConfig":
        cidrs = tuple(cidrs) if cidrs else DEFAULT_LAN_CIDRS
        prefixes = tuple(ipaddress.ip_network(c) for c in cidrs)
        gw = normalize_mac(gateway_mac) if gateway_mac else None
        return cls(prefixes=prefixes, gateway_mac=gw)

    def is_local(self, ip: str) -> bool:
        cached = self._local_cache.get(ip)
        if cached is None:
            addr = ipaddress.ip_address(ip)
            cached = any(
                addr in net for net in self.prefixes if net.version == addr.version
            )
            self._local_cache[ip] = cached
        return cached

    def is_group(self, ip: str) -> bool:
        """Multicast or broadcast destination (limited or any configured prefix's)."""
        addr = ipaddress.ip_address(ip)
        if addr.is_multicast:
            return True
        if addr.version == 4:
            return addr == ipaddress.IPv4Address("255.255.255.255") or addr in self._broadcasts
        return False


def normalize_mac(mac: str) -> str:
    """Lowercase colon form; raises InvalidMac unless exactly 6 hex octets."""
    cleaned = mac.strip().lower().replace(":", "").replace("-", "").replace(".", "")
    if len(cleaned) != 12:
        raise InvalidMac(f"{mac!r} is not a 6-octet MAC address")
    try:
        int(cleaned, 16)
    except ValueError:
        raise InvalidMac(f"{mac!r} contains non-hex digits") from None
    return ":".join(cleaned[i : i + 2] for i in range(0, 12, 2))


def canonical_ip(ip: str) -> str:
    try:
        return ipaddress.ip_address(ip.strip()).compressed
    except ValueError:
        raise InvalidIp(f"{ip!r} is not an IP address") from None


def is_locally_administered(mac: str) -> bool:
    return bool(int(mac[0:2], 16) & 0x02)


def is_group_mac(mac: str) -> bool:
    return bool(int(mac[0:2], 16) & 0x01)


class OuiRegistry:
    """Vendor lookup over a bundled OUI snapshot (``XXXXXX<TAB>Vendor`` lines)."""

    def __init__(self, entries: dict[str, str]):
        self._entries = entries

    @classmethod
    def load(cls, path: str | Path) -> "OuiRegistry":
        entries: dict[str, str] = {}
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.rstrip("\n")
                if not line or line.startswith("#"):
                    continue
                oui, sep, vendor = line.partition("\t")
                if not sep or len(oui) != 6 or not vendor:
                    raise ValueError(f"{path}:{lineno}: bad OUI line {line!r}")
                entries[oui.upper()] = vendor
        return cls(entries)

    @classmethod
    def bundled(cls) -> "OuiRegistry":
        with resources.as_file(resources.files("lanwatch.data") / "oui.tsv") as p:
            return cls.load(p)

    def lookup_vendor(self, mac: str) -> str:
        """Registry entry for the 24-bit OUI, or UNKNOWN.

        Locally-administered addresses are never looked up: their OUI bits
        carry no vendor meaning.
        """
        mac = normalize_mac(mac)
        if is_locally_administered(mac):
            return UNKNOWN_VENDOR
        oui = mac.replace(":", "")[:6].upper()
        return self._entries.get(oui, UNKNOWN_VENDOR)

    def __len__(self) -> int:
        return len(self._entries)


class GeoRegistry:
    """Longest-prefix IP location lookup over the bundled geo snapshot.

    Snapshot lines are ``CIDR<TAB>continent-code<TAB>country-code``. Prefixes
    are indexed per (ip version, prefix length) so a lookup is one masked
    dict probe per distinct prefix length, longest first.
    """

    def __init__(self, entries: list[tuple[ipaddress.IPv4Network | ipaddress.IPv6Network, Continent, str | None]]):
        self._tables: dict[tuple[int, int], dict[int, tuple[Continent, str | None]]] = {}
        for net, continent, country in entries:
            table = self._tables.setdefault((net.version, net.prefixlen), {})
            table[int(net.network_address)] = (continent, country)
        self._plens = {
            4: sorted({pl for (v, pl) in self._tables if v == 4}, reverse=True),
            6: sorted({pl for (v, pl) in self._tables if v == 6}, reverse=True),
        }
        self._count = len(entries)

    @classmethod
    def load(cls, path: str | Path) -> "GeoRegistry":
        entries = []
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.rstrip("\n")
                if not line or line.startswith("#"):
                    continue
                parts = line.split("\t")
                if len(parts) != 3:
                    raise ValueError(f"{path}:{lineno}: bad geo line {line!r}")
                cidr, code, country = parts
                if code not in _CONTINENT_BY_CODE:
                    raise ValueError(f"{path}:{lineno}: unknown continent {code!r}")
                entries.append(
                    (
                        ipaddress.ip_network(cidr),
                        _CONTINENT_BY_CODE[code],
                        country.lower() or None,
                    )
                )
        return cls(entries)

    @classmethod
    def bundled(cls) -> "GeoRegistry":
        with resources.as_file(resources.files("lanwatch.data") / "geo.tsv") as p:
            return cls.load(p)

    def locate(self, ip: str) -> tuple[Continent, str | None] | None:
        """Continent (and country when known) for a public IP; None otherwise."""
        try:
            addr = ipaddress.ip_address(ip.strip())
        except ValueError:
            raise InvalidIp(f"{ip!r} is not an IP address") from None
        if (
            addr.is_multicast
            or addr.is_private
            or addr.is_loopback
            or addr.is_link_local
            or addr.is_reserved
            or addr.is_unspecified
        ):
            return None
        max_len = 32 if addr.version == 4 else 128
        ip_int = int(addr)
        for plen in self._plens[addr.version]:
            table = self._tables[(addr.version, plen)]
            hit = table.get(ip_int >> (max_len - plen) << (max_len - plen))
            if hit is not None:
                return hit
        return (Continent.UNKNOWN, None)

    def __len__(self) -> int:
        return self._count


def classify_scope(src_ip: str, dst_ip: str, lan: LanConfig) -> Scope:
    """Leaves / enters / stays inside / bypasses the LAN, per the two IPs.

    Multicast or broadcast destinations are SPECIAL regardless of source.
    """
    if lan.is_group(dst_ip):
        return Scope.SPECIAL
    src_local = lan.is_local(src_ip)
    dst_local = lan.is_local(dst_ip)
    if src_local and dst_local:
        return Scope.INTERNAL
    if src_local:
        return Scope.LOCAL_TO_REMOTE
    if dst_local:
        return Scope.REMOTE_TO_LOCAL
    return Scope.EXTERNAL


def classify_record(record: PacketRecord, lan: LanConfig) -> Scope:
    """Scope for a decoded record; anything without both IPs is SPECIAL."""
    if record.src_ip is None or record.dst_ip is None:
        return Scope.SPECIAL
    return classify_scope(record.src_ip, record.dst_ip, lan)


def endpoint_key(
    mac: str | None, ip: str | None, lan: LanConfig
) -> tuple[DeviceKey, Role] | None:
    """Key one packet endpoint, or None when the side is unkeyable.

    Group (multicast/broadcast) addresses key to the group value with the
    SPECIAL role so scenes stay referentially closed without inventing
    devices for them. An unspecified address (a DHCP client's 0.0.0.0)
    counts as no address at all.
    """
    if ip in ("0.0.0.0", "::"):
        ip = None
    if ip is not None:
        if lan.is_group(ip):
            return DeviceKey(KeyKind.REMOTE_IP, ip), Role.SPECIAL
        if not lan.is_local(ip):
            return DeviceKey(KeyKind.REMOTE_IP, ip), Role.REMOTE
        # fall through: local addresses are keyed by their MAC
    if mac is None:
        return None
    if is_group_mac(mac):
        return DeviceKey(KeyKind.LOCAL_MAC, mac), Role.SPECIAL
    role = Role.GATEWAY if lan.gateway_mac == mac else Role.LOCAL
    return DeviceKey(KeyKind.LOCAL_MAC, mac), role


def record_keys(
    record: PacketRecord, lan: LanConfig
) -> tuple[DeviceKey | None, DeviceKey | None]:
    """(src key, dst key) for a record; either side may be None."""
    src = endpoint_key(record.src_mac, record.src_ip, lan)
    dst = endpoint_key(record.dst_mac, record.dst_ip, lan)
    return (src[0] if src else None, dst[0] if dst else None)


def _display_name(key: DeviceKey, vendor: str, role: Role) -> str:
    if key.kind is KeyKind.REMOTE_IP:
        return key.value
    suffix = key.value[-5:]
    if role is Role.SPECIAL:
        return f"group {key.value}"
    if vendor != UNKNOWN_VENDOR:
        return f"{vendor} {suffix}"
    return f"device {suffix}"


@dataclass(frozen=True)
class IdentitySnapshot:
    """Point-in-time view of the cache, safe to read while ingestion continues."""

    identities: dict[str, DeviceIdentity]
    lan: LanConfig

    def get(self, key: DeviceKey) -> DeviceIdentity | None:
        return self.identities.get(str(key))

    def sorted_identities(self) -> list[DeviceIdentity]:
        return [self.identities[k] for k in sorted(self.identities)]


class IdentityCache:
    """Single-writer cache of device identities folded from packet records.

    Folding is order-independent for any permutation of distinct sequence
    numbers, and replaying a sequence number is a no-op, so the cache can be
    rebuilt exactly from stored records.
    """

    def __init__(self, lan: LanConfig, oui: OuiRegistry, geo: GeoRegistry):
        self.lan = lan
        self._oui = oui
        self._geo = geo
        self._identities: dict[str, DeviceIdentity] = {}
        self._applied_seqs: set[int] = set()
        # Gateway detection state: remote IPs fronted per MAC, and the
        # sighting bounds for MACs seen only as L2 forwarders so far.
        self._fronted_ips: dict[str, set[str]] = {}
        self._l2_seen: dict[str, tuple[int, int]] = {}
        self._lock = threading.Lock()

    def __len__(self) -> int:
        return len(self._identities)

    def apply(self, record: PacketRecord) -> tuple[DeviceIdentity | None, DeviceIdentity | None]:
        """Create or merge identities for the record's two endpoints."""
        if record.seq is None:
            raise ValueError("records must be sequenced before identity folding")
        with self._lock:
            if record.seq in self._applied_seqs:
                src = endpoint_key(record.src_mac, record.src_ip, self.lan)
                dst = endpoint_key(record.dst_mac, record.dst_ip, self.lan)
                return (
                    self._identities.get(str(src[0])) if src else None,
                    self._identities.get(str(dst[0])) if dst else None,
                )
            self._applied_seqs.add(record.seq)
            src_id = self._fold_side(record, record.src_mac, record.src_ip)
            dst_id = self._fold_side(record, record.dst_mac, record.dst_ip)
            return src_id, dst_id

    def _fold_side(
        self, record: PacketRecord, mac: str | None, ip: str | None
    ) -> DeviceIdentity | None:
        keyed = endpoint_key(mac, ip, self.lan)
        if (
            ip is not None
            and mac is not None
            and not is_group_mac(mac)
            and not self.lan.is_group(ip)
            and not self.lan.is_local(ip)
        ):
            # The MAC fronts a remote IP at layer 2: gateway evidence.
            self._note_l2_forwarding(mac, ip, record.timestamp_ns)
        if keyed is None:
            return None
        key, role = keyed
        identity = self._ensure_identity(key, role, record.timestamp_ns)
        identity.packets += 1
        identity.bytes += record.length
        identity.first_seen_ns = min(identity.first_seen_ns, record.timestamp_ns)
        identity.last_seen_ns = max(identity.last_seen_ns, record.timestamp_ns)
        return identity

    def _ensure_identity(self, key: DeviceKey, role: Role, ts: int) -> DeviceIdentity:
        name = str(key)
        identity = self._identities.get(name)
        if identity is None:
            vendor = UNKNOWN_VENDOR
            continent: Continent | None = None
            country: str | None = None
            if key.kind is KeyKind.LOCAL_MAC and role is not Role.SPECIAL:
                vendor = self._oui.lookup_vendor(key.value)
            elif key.kind is KeyKind.REMOTE_IP and role is Role.REMOTE:
                located = self._geo.locate(key.value)
                if located is not None:
                    continent, country = located
            first = last = ts
            if key.kind is KeyKind.LOCAL_MAC and key.value in self._l2_seen:
                lo, hi = self._l2_seen[key.value]
                first, last = min(first, lo), max(last, hi)
            identity = DeviceIdentity(
                key=key,
                vendor=vendor,
                continent=continent,
                country=country,
                role=role,
                display_name=_display_name(key, vendor, role),
                first_seen_ns=first,
                last_seen_ns=last,
            )
            self._identities[name] = identity
        if role is Role.GATEWAY and identity.role is Role.LOCAL:
            identity.role = Role.GATEWAY
        return identity

    def _note_l2_forwarding(self, mac: str, ip: str, ts: int) -> None:
        fronted = self._fronted_ips.setdefault(mac, set())
        fronted.add(ip)
        seen = self._l2_seen.get(mac)
        self._l2_seen[mac] = (
            (min(seen[0], ts), max(seen[1], ts)) if seen else (ts, ts)
        )
        identity = self._identities.get(str(DeviceKey(KeyKind.LOCAL_MAC, mac)))
        if identity is not None:
            identity.first_seen_ns = min(identity.first_seen_ns, ts)
            identity.last_seen_ns = max(identity.last_seen_ns, ts)
        if len(fronted) >= 2:
            # Fronting two or more distinct remote IPs marks the gateway.
            self._ensure_identity(DeviceKey(KeyKind.LOCAL_MAC, mac), Role.GATEWAY, ts)

    def snapshot(self) -> IdentitySnapshot:
        """Consistent copy for readers; ingestion may keep writing."""
        with self._lock:
            copies = {name: replace(ident) for name, ident in self._identities.items()}
        return IdentitySnapshot(identities=copies, lan=self.lan)
