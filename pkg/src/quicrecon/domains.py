"""Per-domain measurement: resolve, handshake with SNI, classify into
the six-way verdict taxonomy, and summarize zones.

Verdict precedence: resolution failure first, then the all-bogon
check, then the handshake outcome against the first routable address
(IPv4 preferred).  Certificate validity is a flag on QuicEnabled
domains, not a category of its own.
"""

from __future__ import annotations

import enum
import ipaddress
import socket
from collections import Counter
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from decimal import ROUND_HALF_EVEN, Decimal
from operator import attrgetter
from typing import Callable, Iterable, Iterator, Mapping, Protocol, Union

from .certs import CertVerdict, ParseError, validate_certificate
from .handshake import HandshakeParams, HandshakeResult, HandshakeStatus, perform_handshake
from .probe import ProbeTarget

_ZERO_NET = ipaddress.ip_network("0.0.0.0/8")


class ResolutionStatus(enum.Enum):
    OK = "ok"
    NXDOMAIN = "nxdomain"
    SERVFAIL = "servfail"
    TIMEOUT = "timeout"


@dataclass(frozen=True)
class DomainRecord:
    name: str
    addresses: tuple[str, ...]
    resolution_status: ResolutionStatus

    def __post_init__(self) -> None:
        if bool(self.addresses) != (self.resolution_status is ResolutionStatus.OK):
            raise ValueError("addresses must be non-empty exactly when resolution is Ok")


class Resolver(Protocol):
    def resolve(self, name: str) -> DomainRecord: ...


class SystemResolver:
    """Stub resolver over the host's configured recursive."""

    def resolve(self, name: str) -> DomainRecord:
        try:
            infos = socket.getaddrinfo(name, None, proto=socket.IPPROTO_UDP)
        except socket.gaierror as exc:
            if exc.errno == socket.EAI_NONAME:
                status = ResolutionStatus.NXDOMAIN
            elif exc.errno == socket.EAI_AGAIN:
                status = ResolutionStatus.TIMEOUT
            else:
                status = ResolutionStatus.SERVFAIL
            return DomainRecord(name, (), status)
        seen = []
        for info in infos:
            addr = info[4][0]
            if addr not in seen:
                seen.append(addr)
        if not seen:
            return DomainRecord(name, (), ResolutionStatus.SERVFAIL)
        return DomainRecord(name, tuple(seen), ResolutionStatus.OK)


class StaticResolver:
    """Fixed name -> addresses map; unknown names are NXDOMAIN."""

    def __init__(
        self, table: Mapping[str, Union[Iterable[str], ResolutionStatus]]
    ) -> None:
        self._table = {
            normalize_domain(k): v if isinstance(v, ResolutionStatus) else tuple(v)
            for k, v in table.items()
        }

    def resolve(self, name: str) -> DomainRecord:
        entry = self._table.get(normalize_domain(name))
        if entry is None:
            return DomainRecord(name, (), ResolutionStatus.NXDOMAIN)
        if isinstance(entry, ResolutionStatus):
            return DomainRecord(name, (), entry)
        if not entry:
            return DomainRecord(name, (), ResolutionStatus.NXDOMAIN)
        return DomainRecord(name, entry, ResolutionStatus.OK)


def load_hosts_resolver(lines: Iterable[str]) -> StaticResolver:
    """`name addr [addr ...]` per line; a bare name maps to NXDOMAIN."""
    table: dict[str, Union[tuple[str, ...], ResolutionStatus]] = {}
    for line in lines:
        text = line.split("#", 1)[0].strip()
        if not text:
            continue
        parts = text.split()
        table[parts[0]] = tuple(parts[1:]) if len(parts) > 1 else ()
    return StaticResolver(table)


class Category(enum.Enum):
    QUIC_ENABLED = "quic_enabled"
    TIMEOUT = "timeout"
    VERSION_FAILED = "version_failed"
    PROTOCOL_ERROR = "protocol_error"
    INVALID_IP = "invalid_ip"
    DNS_FAILURE = "dns_failure"


_STATUS_TO_CATEGORY = {
    HandshakeStatus.QUIC_ENABLED: Category.QUIC_ENABLED,
    HandshakeStatus.TIMEOUT: Category.TIMEOUT,
    HandshakeStatus.VERSION_FAILED: Category.VERSION_FAILED,
    HandshakeStatus.PROTOCOL_ERROR: Category.PROTOCOL_ERROR,
}


@dataclass(frozen=True)
class ScanVerdict:
    category: Category
    cert_valid: bool = False
    detail: Union[HandshakeResult, DomainRecord, None] = None
    cert_verdict: CertVerdict | None = None
    resolution: DomainRecord | None = None

    def __post_init__(self) -> None:
        if self.cert_valid and self.category is not Category.QUIC_ENABLED:
            raise ValueError("cert_valid requires a QuicEnabled verdict")


def default_routable(address: Union[ipaddress.IPv4Address, ipaddress.IPv6Address]) -> bool:
    """Bogon policy: special-purpose space never counts as routable."""
    if (
        address.is_loopback
        or address.is_link_local
        or address.is_multicast
        or address.is_reserved
        or address.is_unspecified
        or address.is_private
    ):
        return False
    if address.version == 4 and address in _ZERO_NET:
        return False
    return True


@dataclass(frozen=True)
class DomainScanConfig:
    port: int = 443
    handshake: HandshakeParams = field(default_factory=HandshakeParams)
    trust_anchors: frozenset[bytes] = frozenset()
    now: datetime | None = None
    routable: Callable[[object], bool] = default_routable
    cert_policy: Callable[[CertVerdict], bool] = lambda verdict: verdict.valid


def normalize_domain(name: str) -> str:
    return name.strip().lower().rstrip(".")


def load_domain_list(lines: Iterable[str]) -> Iterator[str]:
    """One name per line, '#' comments, trailing dots tolerated."""
    for line in lines:
        text = line.split("#", 1)[0]
        name = normalize_domain(text)
        if name:
            yield name


def _pick_address(record: DomainRecord, routable: Callable) -> str | None:
    """First routable address, IPv4 before IPv6."""
    v4: list = []
    v6: list = []
    for text in record.addresses:
        try:
            parsed = ipaddress.ip_address(text)
        except ValueError:
            continue
        (v4 if parsed.version == 4 else v6).append(parsed)
    for parsed in v4 + v6:
        if routable(parsed):
            return str(parsed)
    return None


def scan_domain(name: str, resolver: Resolver, cfg: DomainScanConfig) -> ScanVerdict:
    name = normalize_domain(name)
    record = resolver.resolve(name)
    if record.resolution_status is not ResolutionStatus.OK:
        return ScanVerdict(Category.DNS_FAILURE, detail=record, resolution=record)
    address = _pick_address(record, cfg.routable)
    if address is None:
        return ScanVerdict(Category.INVALID_IP, detail=record, resolution=record)
    params = replace(cfg.handshake, sni=name)
    result = perform_handshake(ProbeTarget(address, cfg.port), params)
    category = _STATUS_TO_CATEGORY[result.status]
    cert_valid = False
    cert_verdict = None
    if category is Category.QUIC_ENABLED and result.certs is not None:
        try:
            cert_verdict = validate_certificate(
                result.certs,
                name,
                cfg.trust_anchors,
                cfg.now or datetime.now(timezone.utc),
            )
            cert_valid = cfg.cert_policy(cert_verdict)
        except ParseError:
            cert_valid = False
    return ScanVerdict(
        category,
        cert_valid=cert_valid,
        detail=result,
        cert_verdict=cert_verdict,
        resolution=record,
    )


# ---------------------------------------------------------------------------
# zone summaries

def _percentage(count: int, total: int) -> float:
    if total == 0:
        return 0.0
    exact = Decimal(count) * 100 / Decimal(total)
    return float(exact.quantize(Decimal("0.01"), rounding=ROUND_HALF_EVEN))


@dataclass(frozen=True)
class ZoneSummary:
    total: int
    counts: Mapping[Category, int]
    cert_valid_count: int

    @classmethod
    def from_counts(
        cls, counts: Mapping[Category, int], cert_valid_count: int = 0
    ) -> "ZoneSummary":
        full = {category: int(counts.get(category, 0)) for category in Category}
        return cls(total=sum(full.values()), counts=full, cert_valid_count=cert_valid_count)

    @property
    def percentages(self) -> dict[Category, float]:
        return {
            category: _percentage(self.counts[category], self.total)
            for category in Category
        }

    @property
    def cert_valid_percentage(self) -> float:
        return _percentage(self.cert_valid_count, self.total)

    def csv_rows(self) -> list[tuple[str, int, float]]:
        rows = [("domains", self.total, 100.0 if self.total else 0.0)]
        percentages = self.percentages
        for category in Category:
            rows.append((category.value, self.counts[category], percentages[category]))
            if category is Category.QUIC_ENABLED:
                rows.append(
                    ("valid_certificate", self.cert_valid_count, self.cert_valid_percentage)
                )
        return rows


def summarize_zone(verdicts: Iterable[ScanVerdict]) -> ZoneSummary:
    # Counter over attrgetter tuples keeps the hot loop in C; zone scans
    # feed in hundreds of millions of verdicts
    pair_counts = Counter(map(attrgetter("category", "cert_valid"), verdicts))
    counts = {category: 0 for category in Category}
    cert_valid = 0
    for (category, valid), n in pair_counts.items():
        counts[category] += n
        if valid:
            cert_valid += n
    return ZoneSummary.from_counts(counts, cert_valid)


def verdict_record(name: str, verdict: ScanVerdict, ts: str) -> dict:
    """JSONL record for one scanned domain."""
    version = None
    if isinstance(verdict.detail, HandshakeResult) and verdict.detail.negotiated_version:
        version = verdict.detail.negotiated_version.text
    return {
        "domain": name,
        "category": verdict.category.value,
        "cert_valid": verdict.cert_valid,
        "version": version,
        "addresses": list(verdict.resolution.addresses) if verdict.resolution else [],
        "ts": ts,
    }
