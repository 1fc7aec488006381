"""Domain scanning verdicts, bogon policy, and zone arithmetic."""

from __future__ import annotations

import ipaddress
from decimal import Decimal

import pytest
from hypothesis import given
from hypothesis import strategies as st

from quicrecon.domains import (
    Category,
    DomainRecord,
    DomainScanConfig,
    ResolutionStatus,
    ScanVerdict,
    StaticResolver,
    SystemResolver,
    ZoneSummary,
    default_routable,
    load_domain_list,
    load_hosts_resolver,
    normalize_domain,
    scan_domain,
    summarize_zone,
    verdict_record,
)
from quicrecon.handshake import HandshakeParams
from quicrecon.mockserver import Behavior, ResponderProfile, default_server_config, serve

from conftest import NOW


def allow_all(address) -> bool:
    return True


def mock_cfg(port: int, anchors=frozenset(), **handshake_overrides) -> DomainScanConfig:
    handshake_kwargs = {"timeout": 1.5}
    handshake_kwargs.update(handshake_overrides)
    params = HandshakeParams(**handshake_kwargs)
    return DomainScanConfig(
        port=port,
        handshake=params,
        trust_anchors=anchors,
        now=NOW,
        routable=allow_all,
    )


class TestDomainRecord:
    def test_invariant(self):
        with pytest.raises(ValueError):
            DomainRecord("x.test", (), ResolutionStatus.OK)
        with pytest.raises(ValueError):
            DomainRecord("x.test", ("1.2.3.4",), ResolutionStatus.NXDOMAIN)


class TestResolvers:
    def test_static_resolver(self):
        resolver = StaticResolver(
            {
                "ok.test": ["10.0.0.1"],
                "broken.test": ResolutionStatus.SERVFAIL,
            }
        )
        assert resolver.resolve("ok.test").addresses == ("10.0.0.1",)
        assert resolver.resolve("OK.TEST.").addresses == ("10.0.0.1",)
        assert resolver.resolve("gone.test").resolution_status is ResolutionStatus.NXDOMAIN
        assert resolver.resolve("broken.test").resolution_status is ResolutionStatus.SERVFAIL

    def test_hosts_file_resolver(self):
        resolver = load_hosts_resolver(
            ["# comment", "a.test 10.0.0.1 10.0.0.2", "dead.test", ""]
        )
        assert resolver.resolve("a.test").addresses == ("10.0.0.1", "10.0.0.2")
        assert resolver.resolve("dead.test").resolution_status is ResolutionStatus.NXDOMAIN

    def test_system_resolver_localhost(self):
        record = SystemResolver().resolve("localhost")
        assert record.resolution_status is ResolutionStatus.OK
        assert any(a in ("127.0.0.1", "::1") for a in record.addresses)

    def test_system_resolver_nxdomain(self):
        record = SystemResolver().resolve("nonexistent.invalid")
        assert record.resolution_status in (
            ResolutionStatus.NXDOMAIN,
            ResolutionStatus.SERVFAIL,
        )


class TestBogonPolicy:
    @pytest.mark.parametrize(
        "address,routable",
        [
            ("127.0.0.1", False),
            ("10.1.2.3", False),
            ("192.168.1.1", False),
            ("169.254.0.5", False),
            ("224.0.0.1", False),
            ("240.0.0.1", False),
            ("0.0.0.5", False),
            ("0.0.0.0", False),
            ("93.184.216.34", True),
            ("8.8.8.8", True),
            ("::1", False),
            ("fe80::1", False),
            ("ff02::1", False),
            ("2001:db8::1", False),  # documentation range is special-purpose
            ("2606:2800:220:1::1", True),
        ],
    )
    def test_ranges(self, address, routable):
        assert default_routable(ipaddress.ip_address(address)) is routable


class TestScanDomain:
    def test_quic_enabled_with_valid_cert(self, example_chain, ca):
        profile = ResponderProfile(
            behavior=Behavior.SERVE_REJ,
            scfg=default_server_config(),
            cert_inventory={"example.com": example_chain},
        )
        handle = serve(profile)
        try:
            resolver = StaticResolver({"example.com": ["127.0.0.1"]})
            verdict = scan_domain(
                "example.com", resolver, mock_cfg(handle.port, frozenset({ca.der}))
            )
        finally:
            handle.shutdown()
        assert verdict.category is Category.QUIC_ENABLED
        assert verdict.cert_valid
        assert verdict.cert_verdict.chain_ok

    def test_cert_for_wrong_name_not_valid(self, example_chain, ca):
        profile = ResponderProfile(
            behavior=Behavior.SERVE_REJ,
            scfg=default_server_config(),
            cert_inventory={"": example_chain},
        )
        handle = serve(profile)
        try:
            resolver = StaticResolver({"other.org": ["127.0.0.1"]})
            verdict = scan_domain(
                "other.org", resolver, mock_cfg(handle.port, frozenset({ca.der}))
            )
        finally:
            handle.shutdown()
        assert verdict.category is Category.QUIC_ENABLED
        assert not verdict.cert_valid

    def test_nxdomain(self):
        verdict = scan_domain("gone.test", StaticResolver({}), mock_cfg(443))
        assert verdict.category is Category.DNS_FAILURE
        assert not verdict.cert_valid

    def test_loopback_only_is_invalid_ip_under_default_policy(self):
        resolver = StaticResolver({"local.test": ["127.0.0.1"]})
        cfg = DomainScanConfig(handshake=HandshakeParams(timeout=0.2), now=NOW)
        verdict = scan_domain("local.test", resolver, cfg)
        assert verdict.category is Category.INVALID_IP

    def test_dns_failure_precedes_invalid_ip(self):
        resolver = StaticResolver({"x.test": ResolutionStatus.TIMEOUT})
        verdict = scan_domain("x.test", resolver, mock_cfg(443))
        assert verdict.category is Category.DNS_FAILURE

    def test_timeout_category(self):
        import socket

        sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        sock.bind(("127.0.0.1", 0))
        port = sock.getsockname()[1]
        sock.close()
        resolver = StaticResolver({"silent.test": ["127.0.0.1"]})
        verdict = scan_domain("silent.test", resolver, mock_cfg(port, timeout=0.2))
        assert verdict.category is Category.TIMEOUT

    def test_version_failed_category(self):
        from quicrecon.wire import make_version

        profile = ResponderProfile(supported_versions=(make_version("Q030"),))
        handle = serve(profile)
        try:
            resolver = StaticResolver({"old.test": ["127.0.0.1"]})
            verdict = scan_domain("old.test", resolver, mock_cfg(handle.port))
        finally:
            handle.shutdown()
        assert verdict.category is Category.VERSION_FAILED

    def test_protocol_error_category(self):
        profile = ResponderProfile(behavior=Behavior.MALFORMED)
        handle = serve(profile)
        try:
            resolver = StaticResolver({"bad.test": ["127.0.0.1"]})
            verdict = scan_domain("bad.test", resolver, mock_cfg(handle.port))
        finally:
            handle.shutdown()
        assert verdict.category is Category.PROTOCOL_ERROR

    def test_unroutable_addresses_skipped_monotonic(self):
        # adding bogons to a domain with a routable address cannot change
        # the verdict: the bogons are simply never chosen
        resolver_a = StaticResolver({"m.test": ["127.0.0.9"]})
        resolver_b = StaticResolver({"m.test": ["10.0.0.1", "127.0.0.9"]})
        policy = lambda a: str(a) == "127.0.0.9"
        cfg = DomainScanConfig(
            handshake=HandshakeParams(timeout=0.2), routable=policy, now=NOW
        )
        verdict_a = scan_domain("m.test", resolver_a, cfg)
        verdict_b = scan_domain("m.test", resolver_b, cfg)
        assert verdict_a.category == verdict_b.category

    def test_ipv4_preferred(self):
        resolver = StaticResolver({"dual.test": ["::1", "127.0.0.1"]})
        chosen = []

        def policy(address):
            chosen.append(str(address))
            return False

        cfg = DomainScanConfig(handshake=HandshakeParams(timeout=0.2), routable=policy)
        scan_domain("dual.test", resolver, cfg)
        assert chosen[0] == "127.0.0.1"


class TestZoneSummary:
    def test_alexa_quic_enabled_percentage(self):
        summary = ZoneSummary.from_counts(
            {Category.QUIC_ENABLED: 11_970, Category.TIMEOUT: 999_940 - 11_970}
        )
        assert summary.total == 999_940
        assert summary.percentages[Category.QUIC_ENABLED] == 1.20

    def test_com_quic_enabled_percentage(self):
        summary = ZoneSummary.from_counts(
            {Category.QUIC_ENABLED: 133_630, Category.TIMEOUT: 129_360_000 - 133_630}
        )
        assert summary.percentages[Category.QUIC_ENABLED] == 0.10

    def test_empty_stream(self):
        summary = summarize_zone([])
        assert summary.total == 0
        assert all(p == 0.0 for p in summary.percentages.values())
        assert summary.cert_valid_percentage == 0.0

    def test_counts_sum_to_total(self):
        verdicts = [
            ScanVerdict(Category.QUIC_ENABLED, cert_valid=True),
            ScanVerdict(Category.QUIC_ENABLED),
            ScanVerdict(Category.TIMEOUT),
            ScanVerdict(Category.DNS_FAILURE),
        ]
        summary = summarize_zone(verdicts)
        assert summary.total == 4
        assert sum(summary.counts.values()) == summary.total
        assert summary.cert_valid_count == 1

    @given(
        st.lists(
            st.tuples(st.sampled_from(list(Category)), st.booleans()), max_size=300
        )
    )
    def test_partition_property(self, raw):
        verdicts = [
            ScanVerdict(category, cert_valid=flag and category is Category.QUIC_ENABLED)
            for category, flag in raw
        ]
        summary = summarize_zone(verdicts)
        assert sum(summary.counts.values()) == summary.total == len(verdicts)

    @given(
        st.dictionaries(
            st.sampled_from(list(Category)), st.integers(0, 10_000_000), max_size=6
        )
    )
    def test_percentage_audit(self, counts):
        summary = ZoneSummary.from_counts(counts)
        for category in Category:
            if summary.total:
                recomputed = 100 * summary.counts[category] / summary.total
            else:
                recomputed = 0.0
            assert abs(summary.percentages[category] - recomputed) <= 0.005 + 1e-9

    def test_half_even_rounding(self):
        # 0.125% rounds to 0.12 under banker's rounding
        summary = ZoneSummary.from_counts(
            {Category.QUIC_ENABLED: 125, Category.TIMEOUT: 100_000 - 125}
        )
        assert summary.percentages[Category.QUIC_ENABLED] == 0.12

    def test_csv_rows_shape(self):
        summary = ZoneSummary.from_counts(
            {Category.QUIC_ENABLED: 2, Category.TIMEOUT: 8}, cert_valid_count=1
        )
        rows = summary.csv_rows()
        assert rows[0] == ("domains", 10, 100.0)
        names = [r[0] for r in rows]
        assert "valid_certificate" in names
        assert names.index("valid_certificate") == names.index("quic_enabled") + 1
        assert len(rows) == 8


class TestHelpers:
    def test_load_domain_list(self):
        lines = ["# zone", "Example.COM.", "  ", "sub.test # inline", "UPPER.ORG"]
        assert list(load_domain_list(lines)) == ["example.com", "sub.test", "upper.org"]

    def test_normalize(self):
        assert normalize_domain("  WWW.Example.Org.  ") == "www.example.org"

    def test_verdict_record(self):
        record = DomainRecord("a.test", ("1.2.3.4",), ResolutionStatus.OK)
        verdict = ScanVerdict(Category.INVALID_IP, detail=record, resolution=record)
        data = verdict_record("a.test", verdict, "2026-08-10T00:00:00Z")
        assert data["category"] == "invalid_ip"
        assert data["addresses"] == ["1.2.3.4"]
