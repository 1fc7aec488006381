"""Attribution precedence, version-set aggregation, certificate
clustering, and the banner grab."""

from __future__ import annotations

import http.server
import random
import threading

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from quicrecon.prefixes import OperatorMap, PrefixMap
from quicrecon.reports import (
    AttributionRecord,
    HostObservation,
    aggregate_version_sets,
    attribute_host,
    canonical_version_set,
    cert_cluster_csv_rows,
    cluster_certificates,
    default_rules,
    grab_server_header,
    load_rules,
    version_set_csv_rows,
)

PM = PrefixMap.from_entries([("10.0.0.0/8", 15169)])
OM = OperatorMap({"google": [15169], "akamai": [20940]})

RDNS_RULES = [("*.deploy.static.akamaitechnologies.com", "akamai"), ("*.1e100.net", "google")]
CERT_RULES = [("*.google.com", "google"), ("*.akamai.net", "akamai")]


class TestAttributeHost:
    def test_rdns_rule_fires_without_asn(self):
        observation = HostObservation(
            address="203.0.113.7",
            rdns_name="a1-2.deploy.static.akamaitechnologies.com",
        )
        record = attribute_host(observation, PM, OM, RDNS_RULES, CERT_RULES)
        assert record.operator == "akamai"
        assert record.asn is None

    def test_asn_tier_beats_conflicting_rdns(self):
        observation = HostObservation(
            address="10.1.2.3",
            rdns_name="a1-2.deploy.static.akamaitechnologies.com",
        )
        record = attribute_host(observation, PM, OM, RDNS_RULES, CERT_RULES)
        assert record.operator == "google"
        assert record.asn == 15169

    def test_cert_tier_beats_rdns(self):
        observation = HostObservation(
            address="203.0.113.7",
            rdns_name="x.1e100.net",
            cert_names=("cdn.akamai.net",),
        )
        record = attribute_host(observation, PM, OM, RDNS_RULES, CERT_RULES)
        assert record.operator == "akamai"

    def test_no_rule_fires(self):
        observation = HostObservation(address="203.0.113.7")
        record = attribute_host(observation, PM, OM, RDNS_RULES, CERT_RULES)
        assert record.operator == "unknown"

    def test_case_insensitive(self):
        observation = HostObservation(
            address="203.0.113.7", rdns_name="HOST.1E100.NET."
        )
        record = attribute_host(observation, PM, OM, RDNS_RULES, CERT_RULES)
        assert record.operator == "google"

    def test_premapped_asn(self):
        observation = HostObservation(address="203.0.113.9", asn=20940)
        record = attribute_host(observation, None, OM)
        assert record.operator == "akamai"

    def test_deterministic(self):
        observation = HostObservation(
            address="10.0.0.1", rdns_name="x.1e100.net", cert_names=("a.google.com",)
        )
        first = attribute_host(observation, PM, OM, RDNS_RULES, CERT_RULES)
        second = attribute_host(observation, PM, OM, RDNS_RULES, CERT_RULES)
        assert first == second == AttributionRecord(
            "10.0.0.1", 15169, "x.1e100.net", None, "google"
        )

    def test_rule_loading(self):
        rules = load_rules(["# comment", "*.example.net,acme", ""])
        assert rules == [("*.example.net", "acme")]
        with pytest.raises(ValueError):
            load_rules(["broken-line-without-comma"])

    def test_packaged_defaults_cover_known_patterns(self):
        rdns = default_rules("rdns")
        assert any("akamaitechnologies" in pattern for pattern, _ in rdns)
        cert = default_rules("cert")
        assert any("google" in operator for _, operator in cert)


def record(verdict="version_negotiation", versions=(), ts="2017-10-06T00:00:00Z"):
    return {"verdict": verdict, "versions": list(versions), "ts": ts}


class TestVersionSets:
    def test_canonicalization_merges_permutations(self):
        series = aggregate_version_sets(
            {
                "2017-10-06": [
                    record(versions=["Q035", "Q034"]),
                    record(versions=["Q034", "Q035"]),
                ]
            },
            threshold=0,
        )
        assert series.per_date["2017-10-06"] == {("Q034", "Q035"): 2}

    def test_reset_counts_as_empty_set(self):
        series = aggregate_version_sets(
            {"d": [record("public_reset"), record(versions=["Q035"])]}, threshold=0
        )
        assert series.per_date["d"][()] == 1
        assert series.capable_total("d") == 2

    def test_non_capable_excluded(self):
        series = aggregate_version_sets(
            {"d": [record("timeout"), record("malformed"), record(versions=["Q035"])]},
            threshold=0,
        )
        assert series.capable_total("d") == 1

    def test_threshold_folds_rare_sets(self):
        series = aggregate_version_sets(
            {
                "d": [record(versions=["Q035"])] * 5
                + [record(versions=["Q030"])] * 2
            },
            threshold=3,
        )
        assert series.per_date["d"] == {("Q035",): 5, "other": 2}

    def test_threshold_keeps_sets_that_peaked_once(self):
        series = aggregate_version_sets(
            {
                "d1": [record(versions=["Q035"])] * 4,
                "d2": [record(versions=["Q035"])] * 1,
            },
            threshold=4,
        )
        # kept on d2 as well because it met the threshold on d1
        assert series.per_date["d2"] == {("Q035",): 1}

    def test_malformed_records_skipped_and_counted(self):
        series = aggregate_version_sets(
            {
                "d": [
                    record(versions=["Q035"]),
                    {"no_verdict": True},
                    {"verdict": 42, "versions": []},
                    {"verdict": "version_negotiation", "versions": "Q035"},
                ]
            },
            threshold=0,
        )
        assert series.skipped == 3
        assert series.capable_total("d") == 1

    def test_sum_equals_capable_hosts_per_date(self):
        rng = random.Random(7)
        dates = {}
        expected = {}
        for day in ("d1", "d2", "d3"):
            records = []
            capable = 0
            for _ in range(300):
                roll = rng.random()
                if roll < 0.4:
                    records.append(record(versions=rng.sample(["Q035", "Q034", "Q039"], 2)))
                    capable += 1
                elif roll < 0.5:
                    records.append(record("public_reset"))
                    capable += 1
                else:
                    records.append(record("timeout"))
            dates[day] = records
            expected[day] = capable
        series = aggregate_version_sets(dates, threshold=10)
        for day, count in expected.items():
            assert series.capable_total(day) == count

    @given(st.lists(st.permutations(["Q035", "Q034", "Q039", "Q032"]), min_size=1, max_size=30))
    @settings(max_examples=50)
    def test_permutation_invariance(self, shuffles):
        base = aggregate_version_sets(
            {"d": [record(versions=["Q032", "Q034", "Q035", "Q039"])] * len(shuffles)},
            threshold=0,
        )
        shuffled = aggregate_version_sets(
            {"d": [record(versions=list(perm)) for perm in shuffles]}, threshold=0
        )
        assert base.per_date == shuffled.per_date

    def test_csv_rows(self):
        series = aggregate_version_sets(
            {"d": [record(versions=["Q035"]), record("public_reset")]}, threshold=0
        )
        rows = version_set_csv_rows(series)
        assert ("d", "(none)", 1) in rows
        assert ("d", "Q035", 1) in rows

    def test_canonical_helper(self):
        assert canonical_version_set(["Q035", "Q034", "Q035"]) == ("Q034", "Q035")


def grab_record(fp: str, cn: str | None = None):
    return {"host": "x", "cert_fingerprints": [fp], "leaf_cn": cn}


class TestCertClusters:
    def test_top1_coverage(self):
        records = [grab_record("aa", "shared.example")] * 95 + [
            grab_record(f"b{i:02d}") for i in range(5)
        ]
        report = cluster_certificates(records)
        assert report.total_hosts == 100
        assert report.clusters[0].host_count == 95
        assert report.clusters[0].common_name == "shared.example"
        assert report.top_coverage(1) == pytest.approx(95.0)

    def test_all_distinct_linear_curve(self):
        records = [grab_record(f"fp{i}") for i in range(10)]
        report = cluster_certificates(records)
        assert report.cumulative_coverage == tuple(
            pytest.approx(10.0 * (i + 1)) for i in range(10)
        )

    def test_hosts_without_certs_excluded(self):
        records = [grab_record("aa")] + [{"host": "y", "cert_fingerprints": []}]
        report = cluster_certificates(records)
        assert report.total_hosts == 1

    def test_representative_name_is_first_occurrence(self):
        records = [grab_record("aa", "first.example"), grab_record("aa", "second.example")]
        report = cluster_certificates(records)
        assert report.clusters[0].common_name == "first.example"

    def test_ties_broken_by_fingerprint(self):
        records = [grab_record("bb"), grab_record("aa")]
        report = cluster_certificates(records)
        assert [c.fingerprint for c in report.clusters] == ["aa", "bb"]

    def test_cumulative_coverage_non_decreasing(self):
        rng = random.Random(3)
        records = [grab_record(f"fp{rng.randrange(20)}") for _ in range(500)]
        report = cluster_certificates(records)
        coverage = report.cumulative_coverage
        assert all(a <= b + 1e-9 for a, b in zip(coverage, coverage[1:]))
        assert coverage[-1] == pytest.approx(100.0)
        assert sum(c.host_count for c in report.clusters) == report.total_hosts

    def test_csv_rows(self):
        report = cluster_certificates([grab_record("aa", "x"), grab_record("aa", "x")])
        rows = cert_cluster_csv_rows(report)
        assert rows == [("aa", "x", 2, 100.0)]

    def test_empty(self):
        report = cluster_certificates([])
        assert report.total_hosts == 0
        assert report.top_coverage(5) == 0.0


class _BannerHandler(http.server.BaseHTTPRequestHandler):
    server_version = "LiteSpeed"
    sys_version = ""

    def do_GET(self):
        self.send_response(200)
        self.send_header("Content-Length", "2")
        self.end_headers()
        self.wfile.write(b"ok")

    def log_message(self, *args):
        pass


class TestBannerGrab:
    def test_server_header_extracted(self):
        server = http.server.HTTPServer(("127.0.0.1", 0), _BannerHandler)
        thread = threading.Thread(target=server.serve_forever, daemon=True)
        thread.start()
        try:
            result = grab_server_header("127.0.0.1", server.server_port, timeout=2.0)
        finally:
            server.shutdown()
            server.server_close()
        assert result.server == "LiteSpeed"
        assert result.error is None

    def test_refused_connection_recorded(self):
        import socket

        sock = socket.socket()
        sock.bind(("127.0.0.1", 0))
        port = sock.getsockname()[1]
        sock.close()
        result = grab_server_header("127.0.0.1", port, timeout=0.5)
        assert result.server is None
        assert result.error
