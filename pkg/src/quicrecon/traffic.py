"""Flow classification, operator attribution, and traffic-share matrices.

Flows are classified by transport and port (HTTPS: TCP/443, HTTP:
TCP/80, QUIC: UDP/443), attributed to operators via the non-local
endpoint's ASN, binned into fixed intervals, and reduced to three share
matrices:

  overall_share[p]            bytes of p over ALL traffic (Other included)
  operator_share[o][p]        within operator o, share of each web protocol
  share_in_protocol[p][o]     within protocol p, share contributed by o

Aggregation is a commutative fold over flows; any partition of the
input merges cell-wise to the sequential result.
"""

from __future__ import annotations

import enum
import ipaddress
import math
from dataclasses import dataclass, field
from datetime import datetime, timezone
from typing import Iterable, Iterator, Mapping, TextIO

from .prefixes import UNKNOWN_OPERATOR, OperatorMap, PrefixMap

DEFAULT_BIN_SECONDS = 300.0


class Protocol(enum.Enum):
    HTTP = "http"
    HTTPS = "https"
    QUIC = "quic"
    OTHER = "other"


WEB_PROTOCOLS = (Protocol.HTTP, Protocol.HTTPS, Protocol.QUIC)
_PROTOCOL_ORDER = {protocol: i for i, protocol in enumerate(Protocol)}

TRANSPORTS = ("tcp", "udp", "other")


@dataclass(frozen=True)
class FlowRecord:
    start: float
    src_addr: str | None
    dst_addr: str | None
    transport: str
    src_port: int
    dst_port: int
    bytes: int
    packets: int
    src_asn: int | None = None
    dst_asn: int | None = None
    sampling: float = 1.0

    def __post_init__(self) -> None:
        if self.transport not in TRANSPORTS:
            raise ValueError(f"transport must be one of {TRANSPORTS}")
        if not math.isfinite(self.start):
            raise ValueError("start timestamp must be finite")
        if self.transport in ("tcp", "udp") and not self.bytes >= self.packets >= 1:
            raise ValueError("flows need bytes >= packets >= 1")
        if self.sampling <= 0:
            raise ValueError("sampling multiplier must be positive")


def classify_flow(flow: FlowRecord) -> Protocol:
    """Port/transport classification; HTTPS outranks HTTP when a flow
    touches both well-known ports."""
    ports = (flow.src_port, flow.dst_port)
    if flow.transport == "tcp":
        if 443 in ports:
            return Protocol.HTTPS
        if 80 in ports:
            return Protocol.HTTP
    elif flow.transport == "udp":
        if 443 in ports:
            return Protocol.QUIC
    return Protocol.OTHER


def _is_local(
    addr: str | None,
    asn: int | None,
    local_prefixes: tuple,
    local_asns: frozenset[int],
) -> bool:
    if asn is not None and asn in local_asns:
        return True
    if addr is not None and local_prefixes:
        try:
            parsed = ipaddress.ip_address(addr)
        except ValueError:
            return False
        return any(parsed in net for net in local_prefixes if net.version == parsed.version)
    return False


def _endpoint_asn(addr: str | None, asn: int | None, prefix_map: PrefixMap) -> int | None:
    if asn is not None:
        return asn
    if addr is None:
        return None
    try:
        return prefix_map.lookup(addr)
    except ValueError:
        return None


def _compile_prefixes(local_prefixes: Iterable) -> tuple:
    return tuple(
        net
        if isinstance(net, (ipaddress.IPv4Network, ipaddress.IPv6Network))
        else ipaddress.ip_network(net)
        for net in local_prefixes
    )


def attribute(
    flow: FlowRecord,
    prefix_map: PrefixMap,
    operator_map: OperatorMap,
    local_prefixes: Iterable,
    local_asns: Iterable[int] = (),
) -> str:
    """Operator owning the non-local endpoint; "other" when both
    endpoints are local or nothing maps."""
    nets = _compile_prefixes(local_prefixes)
    asns = frozenset(local_asns)
    candidates = []
    if not _is_local(flow.dst_addr, flow.dst_asn, nets, asns):
        candidates.append((flow.dst_addr, flow.dst_asn))
    if not _is_local(flow.src_addr, flow.src_asn, nets, asns):
        candidates.append((flow.src_addr, flow.src_asn))
    for addr, asn in candidates:
        operator = operator_map.operator_for(_endpoint_asn(addr, asn, prefix_map))
        if operator != UNKNOWN_OPERATOR:
            return operator
    return UNKNOWN_OPERATOR


@dataclass
class ShareReport:
    bin_seconds: float = DEFAULT_BIN_SECONDS
    # bin index -> (operator, protocol) -> weighted bytes
    cells: dict[int, dict[tuple[str, Protocol], float]] = field(default_factory=dict)

    def add(self, bin_index: int, operator: str, protocol: Protocol, weight: float) -> None:
        bucket = self.cells.setdefault(bin_index, {})
        key = (operator, protocol)
        bucket[key] = bucket.get(key, 0.0) + weight

    def merge(self, other: "ShareReport") -> "ShareReport":
        if other.bin_seconds != self.bin_seconds:
            raise ValueError("cannot merge reports with different bin widths")
        for bin_index, bucket in other.cells.items():
            for (operator, protocol), weight in bucket.items():
                self.add(bin_index, operator, protocol, weight)
        return self

    # -- totals ---------------------------------------------------------

    @property
    def operators(self) -> tuple[str, ...]:
        names = {operator for bucket in self.cells.values() for operator, _ in bucket}
        return tuple(sorted(names))

    def total_bytes(self) -> float:
        return sum(sum(bucket.values()) for bucket in self.cells.values())

    def cell_totals(self) -> dict[tuple[str, Protocol], float]:
        totals: dict[tuple[str, Protocol], float] = {}
        for bucket in self.cells.values():
            for key, weight in bucket.items():
                totals[key] = totals.get(key, 0.0) + weight
        return totals

    def protocol_totals(self) -> dict[Protocol, float]:
        totals = {protocol: 0.0 for protocol in Protocol}
        for (_, protocol), weight in self.cell_totals().items():
            totals[protocol] += weight
        return totals

    # -- the three share matrices ----------------------------------------

    def overall_share(self) -> dict[Protocol, float]:
        total = self.total_bytes()
        if total == 0:
            return {protocol: 0.0 for protocol in Protocol}
        return {p: weight / total for p, weight in self.protocol_totals().items()}

    def operator_share(self) -> dict[str, dict[Protocol, float]]:
        cell_totals = self.cell_totals()
        shares: dict[str, dict[Protocol, float]] = {}
        for operator in self.operators:
            web_total = sum(
                cell_totals.get((operator, protocol), 0.0) for protocol in WEB_PROTOCOLS
            )
            if web_total == 0:
                continue
            shares[operator] = {
                protocol: cell_totals.get((operator, protocol), 0.0) / web_total
                for protocol in WEB_PROTOCOLS
            }
        return shares

    def share_in_protocol(self) -> dict[Protocol, dict[str, float]]:
        cell_totals = self.cell_totals()
        protocol_totals = self.protocol_totals()
        shares: dict[Protocol, dict[str, float]] = {}
        for protocol in Protocol:
            total = protocol_totals[protocol]
            if total == 0:
                continue
            shares[protocol] = {
                operator: cell_totals.get((operator, protocol), 0.0) / total
                for operator in self.operators
            }
        return shares


def compute_shares(
    flows: Iterable[FlowRecord],
    prefix_map: PrefixMap,
    operator_map: OperatorMap,
    local_prefixes: Iterable,
    bin_seconds: float = DEFAULT_BIN_SECONDS,
    local_asns: Iterable[int] = (),
    weight: str = "bytes",
) -> ShareReport:
    """Byte-weighted by default; `weight="packets"` switches the cell
    weights (exposed for packet-sampled traces, fidelity unstated)."""
    if weight not in ("bytes", "packets"):
        raise ValueError("weight must be 'bytes' or 'packets'")
    nets = _compile_prefixes(local_prefixes)
    asns = frozenset(local_asns)
    report = ShareReport(bin_seconds=bin_seconds)
    for flow in flows:
        protocol = classify_flow(flow)
        operator = attribute(flow, prefix_map, operator_map, nets, asns)
        amount = flow.bytes if weight == "bytes" else flow.packets
        bin_index = math.floor(flow.start / bin_seconds)
        report.add(bin_index, operator, protocol, amount * flow.sampling)
    return report


# ---------------------------------------------------------------------------
# time series and table output

ALL_OPERATORS_ROW = "all"


def timeseries_rows(report: ShareReport) -> list[tuple]:
    """(bin_start_iso, protocol, operator, bytes, overall_share) rows,
    sorted by bin then protocol; one aggregate row precedes the
    per-operator rows of each (bin, protocol) group."""
    rows: list[tuple] = []
    operators = report.operators
    for bin_index in sorted(report.cells):
        bucket = report.cells[bin_index]
        bin_total = sum(bucket.values())
        start_iso = (
            datetime.fromtimestamp(bin_index * report.bin_seconds, tz=timezone.utc)
            .isoformat()
            .replace("+00:00", "Z")
        )
        for protocol in Protocol:
            protocol_bytes = sum(
                weight for (_, p), weight in bucket.items() if p is protocol
            )
            share = protocol_bytes / bin_total if bin_total else 0.0
            rows.append((start_iso, protocol.value, ALL_OPERATORS_ROW, protocol_bytes, share))
            for operator in operators:
                cell = bucket.get((operator, protocol), 0.0)
                cell_share = cell / bin_total if bin_total else 0.0
                rows.append((start_iso, protocol.value, operator, cell, cell_share))
    return rows


def emit_timeseries(report: ShareReport, stream: TextIO) -> None:
    stream.write("bin_start,protocol,operator,bytes,overall_share\n")
    for start, protocol, operator, amount, share in timeseries_rows(report):
        stream.write(f"{start},{protocol},{operator},{amount:.6g},{share:.6f}\n")


def write_shares_csv(report: ShareReport, stream: TextIO) -> None:
    """The three share matrices in one flat CSV."""
    stream.write("metric,operator,protocol,share\n")
    for protocol, share in report.overall_share().items():
        stream.write(f"overall,{ALL_OPERATORS_ROW},{protocol.value},{share:.6f}\n")
    for operator, row in sorted(report.operator_share().items()):
        for protocol in WEB_PROTOCOLS:
            stream.write(f"operator_share,{operator},{protocol.value},{row[protocol]:.6f}\n")
    for protocol, row in sorted(
        report.share_in_protocol().items(), key=lambda kv: _PROTOCOL_ORDER[kv[0]]
    ):
        for operator in sorted(row):
            stream.write(
                f"share_in_protocol,{operator},{protocol.value},{row[operator]:.6f}\n"
            )


# ---------------------------------------------------------------------------
# flow CSV input

def _parse_endpoint(token: str) -> tuple[str | None, int | None]:
    token = token.strip()
    if token.upper().startswith("AS") and token[2:].isdigit():
        return None, int(token[2:])
    return (token or None), None


def _parse_ts(token: str) -> float:
    try:
        return float(token)
    except ValueError:
        return datetime.fromisoformat(token.replace("Z", "+00:00")).timestamp()


def read_flows_csv(lines: Iterable[str]) -> Iterator[FlowRecord]:
    """Header `ts,src,dst,proto,sport,dport,bytes,packets[,sampling]`;
    src/dst are addresses or pre-mapped `AS<number>` tokens."""
    import csv

    reader = csv.DictReader(lines)
    required = {"ts", "src", "dst", "proto", "sport", "dport", "bytes", "packets"}
    if reader.fieldnames is None or not required <= set(reader.fieldnames):
        raise ValueError(f"flow CSV must carry the columns {sorted(required)}")
    for row in reader:
        src_addr, src_asn = _parse_endpoint(row["src"])
        dst_addr, dst_asn = _parse_endpoint(row["dst"])
        yield FlowRecord(
            start=_parse_ts(row["ts"]),
            src_addr=src_addr,
            dst_addr=dst_addr,
            transport=row["proto"].strip().lower(),
            src_port=int(row["sport"]),
            dst_port=int(row["dport"]),
            bytes=int(row["bytes"]),
            packets=int(row["packets"]),
            src_asn=src_asn,
            dst_asn=dst_asn,
            sampling=float(row.get("sampling") or 1.0),
        )
