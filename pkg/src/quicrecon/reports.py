"""Report subsystem: operator attribution of scan results, version-set
time series, and certificate clustering.

Attribution precedence is ASN match, then certificate-name rules, then
reverse-DNS rules; rule files are editable data shipped with the
package so heuristics can change without code changes.
"""

from __future__ import annotations

import fnmatch
import socket
from collections import Counter
from dataclasses import dataclass
from importlib import resources
from typing import Iterable, Mapping

from .prefixes import OperatorMap, PrefixMap

UNKNOWN = "unknown"
OTHER_SET = "other"

CAPABLE_VERDICTS = frozenset({"version_negotiation", "public_reset"})


class MalformedRecord(ValueError):
    pass


# ---------------------------------------------------------------------------
# host attribution

@dataclass(frozen=True)
class HostObservation:
    address: str
    asn: int | None = None
    rdns_name: str | None = None
    cert_fingerprint: str | None = None
    cert_names: tuple[str, ...] = ()


@dataclass(frozen=True)
class AttributionRecord:
    address: str
    asn: int | None
    rdns_name: str | None
    cert_fingerprint: str | None
    operator: str


Rules = Iterable[tuple[str, str]]


def load_rules(lines: Iterable[str]) -> list[tuple[str, str]]:
    """`pattern,operator` per line, '#' comments; order is precedence."""
    rules = []
    for line in lines:
        text = line.split("#", 1)[0].strip()
        if not text:
            continue
        pattern, _, operator = text.partition(",")
        pattern = pattern.strip().lower()
        operator = operator.strip()
        if not pattern or not operator:
            raise ValueError(f"malformed rule line: {line!r}")
        rules.append((pattern, operator))
    return rules


def default_rules(kind: str) -> list[tuple[str, str]]:
    """Packaged defaults; kind is "rdns" or "cert"."""
    data = resources.files("quicrecon.data").joinpath(f"{kind}_rules.txt").read_text()
    return load_rules(data.splitlines())


def _first_match(rules: Rules, names: Iterable[str]) -> str | None:
    lowered = [name.lower().rstrip(".") for name in names if name]
    for pattern, operator in rules:
        for name in lowered:
            if fnmatch.fnmatchcase(name, pattern):
                return operator
    return None


def attribute_host(
    observation: HostObservation,
    prefix_map: PrefixMap | None,
    operator_map: OperatorMap,
    rdns_rules: Rules = (),
    cert_rules: Rules = (),
) -> AttributionRecord:
    asn = observation.asn
    if asn is None and prefix_map is not None:
        try:
            asn = prefix_map.lookup(observation.address)
        except ValueError:
            asn = None
    operator = operator_map.operator_for(asn)
    if operator == "other":
        operator = (
            _first_match(cert_rules, observation.cert_names)
            or _first_match(
                rdns_rules, [observation.rdns_name] if observation.rdns_name else []
            )
            or UNKNOWN
        )
    return AttributionRecord(
        address=observation.address,
        asn=asn,
        rdns_name=observation.rdns_name,
        cert_fingerprint=observation.cert_fingerprint,
        operator=operator,
    )


# ---------------------------------------------------------------------------
# version-set series (stacked support over scan dates)

@dataclass(frozen=True)
class VersionSetSeries:
    # date -> canonical version set (sorted tuple, or the "other" bucket
    # label) -> host count
    per_date: Mapping[str, Mapping[object, int]]
    skipped: int = 0

    def capable_total(self, date: str) -> int:
        return sum(self.per_date.get(date, {}).values())


def canonical_version_set(versions: Iterable[str]) -> tuple[str, ...]:
    return tuple(sorted(set(versions)))


def aggregate_version_sets(
    tagged_records: Mapping[str, Iterable[Mapping]],
    threshold: int = 20_000,
) -> VersionSetSeries:
    """Count capable hosts per canonical version set per scan date.

    Sets never reaching `threshold` hosts on any date fold into the
    "other" bucket; malformed records are skipped and counted.
    """
    skipped = 0
    raw: dict[str, Counter] = {}
    for date, records in tagged_records.items():
        counter: Counter = Counter()
        for record in records:
            try:
                verdict = record["verdict"]
                versions = record.get("versions", [])
                if not isinstance(verdict, str) or not isinstance(versions, (list, tuple)):
                    raise TypeError
                if verdict not in CAPABLE_VERDICTS:
                    continue
                counter[canonical_version_set(str(v) for v in versions)] += 1
            except (TypeError, KeyError):
                skipped += 1
        raw[date] = counter

    keep: set[tuple[str, ...]] = set()
    peak: Counter = Counter()
    for counter in raw.values():
        for version_set, count in counter.items():
            peak[version_set] = max(peak[version_set], count)
    for version_set, best in peak.items():
        if threshold <= 0 or best >= threshold:
            keep.add(version_set)

    per_date: dict[str, dict[object, int]] = {}
    for date, counter in raw.items():
        folded: dict[object, int] = {}
        for version_set, count in counter.items():
            key: object = version_set if version_set in keep else OTHER_SET
            folded[key] = folded.get(key, 0) + count
        per_date[date] = folded
    return VersionSetSeries(per_date=per_date, skipped=skipped)


def version_set_csv_rows(series: VersionSetSeries) -> list[tuple[str, str, int]]:
    rows = []
    for date in sorted(series.per_date):
        for key, count in sorted(
            series.per_date[date].items(), key=lambda kv: (kv[0] == OTHER_SET, str(kv[0]))
        ):
            label = key if isinstance(key, str) else "+".join(key) or "(none)"
            rows.append((date, label, count))
    return rows


# ---------------------------------------------------------------------------
# certificate clustering (hosts per identical certificate)

@dataclass(frozen=True)
class CertCluster:
    fingerprint: str
    common_name: str | None
    host_count: int


@dataclass(frozen=True)
class CertClusterReport:
    clusters: tuple[CertCluster, ...]
    total_hosts: int

    @property
    def cumulative_coverage(self) -> tuple[float, ...]:
        """Percent of certificate-presenting hosts covered by the top-k
        clusters, for every k."""
        coverage = []
        running = 0
        for cluster in self.clusters:
            running += cluster.host_count
            coverage.append(100.0 * running / self.total_hosts if self.total_hosts else 0.0)
        return tuple(coverage)

    def top_coverage(self, k: int) -> float:
        coverage = self.cumulative_coverage
        if not coverage:
            return 0.0
        return coverage[min(k, len(coverage)) - 1]


def cluster_certificates(records: Iterable[Mapping]) -> CertClusterReport:
    """Group grab records by leaf fingerprint; hosts without any
    certificate are excluded from the denominator."""
    counts: Counter = Counter()
    names: dict[str, str | None] = {}
    for record in records:
        fingerprints = record.get("cert_fingerprints") or []
        if not fingerprints:
            continue
        leaf = fingerprints[0]
        counts[leaf] += 1
        if leaf not in names:
            names[leaf] = record.get("leaf_cn")
    ordered = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    clusters = tuple(
        CertCluster(fingerprint, names.get(fingerprint), count)
        for fingerprint, count in ordered
    )
    return CertClusterReport(clusters=clusters, total_hosts=sum(counts.values()))


def cert_cluster_csv_rows(report: CertClusterReport) -> list[tuple]:
    rows = []
    for cluster, coverage in zip(report.clusters, report.cumulative_coverage):
        rows.append(
            (
                cluster.fingerprint,
                cluster.common_name or "",
                cluster.host_count,
                round(coverage, 2),
            )
        )
    return rows


# ---------------------------------------------------------------------------
# TCP banner grab (Server header only)

@dataclass(frozen=True)
class BannerResult:
    server: str | None
    error: str | None = None


def grab_server_header(address: str, port: int = 80, timeout: float = 10.0) -> BannerResult:
    """Minimal HTTP/1.1 GET /; records only the Server response header.
    Timeouts and refusals are recorded, not raised."""
    try:
        with socket.create_connection((address, port), timeout=timeout) as sock:
            sock.sendall(
                b"GET / HTTP/1.1\r\nHost: " + address.encode("ascii") + b"\r\n"
                b"User-Agent: quic-recon/0.1\r\nConnection: close\r\n\r\n"
            )
            sock.settimeout(timeout)
            data = b""
            while b"\r\n\r\n" not in data and len(data) < 65536:
                chunk = sock.recv(4096)
                if not chunk:
                    break
                data += chunk
    except socket.timeout:
        return BannerResult(None, "i/o timeout")
    except OSError as exc:
        return BannerResult(None, str(exc))
    for line in data.split(b"\r\n"):
        if line.lower().startswith(b"server:"):
            return BannerResult(line.split(b":", 1)[1].strip().decode("latin-1"))
    return BannerResult(None)
