"""Probe engine: single-shot classification, streaming scans, pacing,
blocklists, and the stateless matching scheme."""

from __future__ import annotations

import socket
import time

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from quicrecon import wire
from quicrecon.mockserver import Behavior, ResponderProfile, serve
from quicrecon.probe import (
    Blocklisted,
    ProbeOutcome,
    ProbeTarget,
    ScanConfig,
    SocketError,
    Verdict,
    classify_response,
    load_targets,
    outcome_record,
    parse_target,
    probe_connection_id,
    probe_one,
    scan_targets,
)
from quicrecon.wire import make_version

Q035 = make_version("Q035")
Q034 = make_version("Q034")


def quick_cfg(**overrides) -> ScanConfig:
    defaults = dict(rate=5000.0, timeout=1.5, secret=b"test-secret")
    defaults.update(overrides)
    return ScanConfig(**defaults)


class SyntheticTransport:
    """Loopback-free transport: scripts one reply per probe, keyed off
    the probe's own connection id so source-address matching holds."""

    def __init__(self, behavior: str = "negotiate", versions: bytes = b"Q035"):
        self.behavior = behavior
        self.versions = versions
        self.queue: list[tuple[bytes, tuple[str, int]]] = []
        self.send_times: list[float] = []
        self.sent = 0

    def send(self, payload: bytes, target: ProbeTarget) -> None:
        self.sent += 1
        self.send_times.append(time.monotonic())
        if self.behavior == "drop":
            return
        if self.behavior == "error":
            raise SocketError("scripted failure")
        cid_bytes = payload[1:9]
        if self.behavior == "negotiate":
            reply = bytes([0x09]) + cid_bytes + self.versions
        elif self.behavior == "reset":
            reply = bytes([0x0A]) + cid_bytes + b"PRST\x00\x00\x00\x00"
        elif self.behavior == "garbage":
            reply = b"\x00\xde\xad\xbe\xef" * 4
        else:
            raise AssertionError(self.behavior)
        self.queue.append((reply, (target.address, target.port)))

    def poll(self, timeout: float):
        if not self.queue:
            time.sleep(min(timeout, 0.001))
            return []
        batch = self.queue
        self.queue = []
        return batch

    def close(self) -> None:
        pass


class TestTypes:
    def test_target_validation(self):
        with pytest.raises(ValueError):
            ProbeTarget("not-an-ip")
        with pytest.raises(ValueError):
            ProbeTarget("127.0.0.1", 0)
        assert ProbeTarget("::1").is_ipv6

    def test_outcome_invariants(self):
        with pytest.raises(ValueError):
            ProbeOutcome(Verdict.TIMEOUT, versions=(Q035,))
        assert ProbeOutcome(Verdict.VERSION_NEGOTIATION, (Q035,)).quic_capable()
        assert ProbeOutcome(Verdict.PUBLIC_RESET).quic_capable()
        assert not ProbeOutcome(Verdict.TIMEOUT).quic_capable()
        assert not ProbeOutcome(Verdict.MALFORMED).quic_capable()

    def test_config_defaults_and_validation(self):
        assert ScanConfig().timeout == 12.0
        assert ScanConfig().retries == 0
        with pytest.raises(ValueError):
            ScanConfig(rate=0)
        with pytest.raises(ValueError):
            ScanConfig(timeout=-1)

    def test_connection_id_is_keyed(self):
        a = probe_connection_id("10.0.0.1", 443, b"k1")
        assert a == probe_connection_id("10.0.0.1", 443, b"k1")
        assert a != probe_connection_id("10.0.0.1", 443, b"k2")
        assert a != probe_connection_id("10.0.0.2", 443, b"k1")
        assert a != probe_connection_id("10.0.0.1", 444, b"k1")


class TestProbeOne:
    def test_version_negotiation(self):
        handle = serve(ResponderProfile(supported_versions=(Q035, Q034)))
        try:
            outcome = probe_one(ProbeTarget("127.0.0.1", handle.port), quick_cfg())
        finally:
            handle.shutdown()
        assert outcome.verdict is Verdict.VERSION_NEGOTIATION
        assert [v.text for v in outcome.versions] == ["Q035", "Q034"]
        assert outcome.quic_capable()
        assert outcome.cid_echo_matched
        assert outcome.rtt > 0

    def test_public_reset(self):
        handle = serve(ResponderProfile(behavior=Behavior.RESET))
        try:
            outcome = probe_one(ProbeTarget("127.0.0.1", handle.port), quick_cfg())
        finally:
            handle.shutdown()
        assert outcome.verdict is Verdict.PUBLIC_RESET
        assert outcome.quic_capable()

    def test_malformed(self):
        handle = serve(ResponderProfile(behavior=Behavior.MALFORMED))
        try:
            outcome = probe_one(ProbeTarget("127.0.0.1", handle.port), quick_cfg())
        finally:
            handle.shutdown()
        assert outcome.verdict is Verdict.MALFORMED
        assert not outcome.quic_capable()

    def test_closed_port_times_out(self):
        sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        sock.bind(("127.0.0.1", 0))
        port = sock.getsockname()[1]
        sock.close()
        outcome = probe_one(ProbeTarget("127.0.0.1", port), quick_cfg(timeout=0.4))
        assert outcome.verdict is Verdict.TIMEOUT
        assert not outcome.quic_capable()

    def test_blocklisted_raises(self):
        cfg = quick_cfg(blocklist=("127.0.0.0/8",))
        with pytest.raises(Blocklisted):
            probe_one(ProbeTarget("127.0.0.1", 443), cfg)

    def test_retries_resend(self):
        handle = serve(ResponderProfile(behavior=Behavior.SILENT))
        try:
            cfg = quick_cfg(timeout=0.15, retries=2)
            outcome = probe_one(ProbeTarget("127.0.0.1", handle.port), cfg)
        finally:
            log = handle.shutdown()
        assert outcome.verdict is Verdict.TIMEOUT
        assert len(log.events) == 3

    def test_exactly_one_packet_without_retries(self):
        handle = serve(ResponderProfile(supported_versions=(Q035,)))
        try:
            probe_one(ProbeTarget("127.0.0.1", handle.port), quick_cfg())
        finally:
            log = handle.shutdown()
        assert len(log.events) == 1


class TestClassification:
    @given(st.binary(max_size=512))
    @settings(max_examples=200)
    def test_deterministic(self, data):
        assert classify_response(data, 1) == classify_response(data, 1)

    @given(st.binary(max_size=512))
    @settings(max_examples=200)
    def test_garbage_never_capable(self, data):
        # strip capability-signalling flag bits so the input stays garbage
        if data and data[0] & (wire.FLAG_RESET | wire.FLAG_VERSION):
            data = bytes([data[0] & ~(wire.FLAG_RESET | wire.FLAG_VERSION)]) + data[1:]
        outcome = classify_response(data, 1)
        if outcome.quic_capable():
            decoded = wire.decode_server_response(data)
            assert isinstance(
                decoded, (wire.VersionNegotiationPacket, wire.PublicResetPacket)
            )


class TestScanTargets:
    def test_empty_stream(self):
        assert list(scan_targets([], quick_cfg(), SyntheticTransport())) == []

    def test_all_capable(self):
        targets = [ProbeTarget(f"10.0.{i // 250}.{i % 250 + 1}", 443) for i in range(500)]
        cfg = quick_cfg(rate=1e9, timeout=0.5)
        results = list(scan_targets(targets, cfg, SyntheticTransport()))
        assert len(results) == 500
        assert all(outcome.quic_capable() for _, outcome in results)
        assert {t.address for t, _ in results} == {t.address for t in targets}

    def test_blocklist_filtering(self):
        targets = [ProbeTarget(f"10.0.0.{i + 1}") for i in range(50)] + [
            ProbeTarget(f"192.168.1.{i + 1}") for i in range(50)
        ]
        cfg = quick_cfg(rate=1e9, timeout=0.5, blocklist=("192.168.0.0/16",))
        results = list(scan_targets(targets, cfg, SyntheticTransport()))
        assert len(results) == 50
        assert all(t.address.startswith("10.0.0.") for t, _ in results)

    def test_silent_targets_time_out(self):
        targets = [ProbeTarget(f"10.9.0.{i + 1}") for i in range(10)]
        cfg = quick_cfg(rate=1e9, timeout=0.1)
        results = list(scan_targets(targets, cfg, SyntheticTransport("drop")))
        assert len(results) == 10
        assert all(o.verdict is Verdict.TIMEOUT for _, o in results)

    def test_garbage_is_malformed_never_capable(self):
        targets = [ProbeTarget(f"10.8.0.{i + 1}") for i in range(20)]
        cfg = quick_cfg(rate=1e9, timeout=0.5)
        results = list(scan_targets(targets, cfg, SyntheticTransport("garbage")))
        assert len(results) == 20
        assert all(o.verdict is Verdict.MALFORMED for _, o in results)
        assert not any(o.quic_capable() for _, o in results)

    def test_duplicate_targets_each_get_result(self):
        target = ProbeTarget("10.1.2.3", 443)
        cfg = quick_cfg(rate=1e9, timeout=0.5)
        results = list(scan_targets([target] * 5, cfg, SyntheticTransport()))
        assert len(results) == 5

    def test_persistent_socket_failure_aborts(self):
        cfg = quick_cfg(rate=1e9)
        with pytest.raises(SocketError):
            list(scan_targets([ProbeTarget("10.0.0.1")], cfg, SyntheticTransport("error")))

    def test_scan_over_loopback_mock(self):
        handle = serve(ResponderProfile(supported_versions=(Q035,)), bind=("0.0.0.0", 0))
        try:
            targets = [ProbeTarget(f"127.0.7.{i + 1}", handle.port) for i in range(40)]
            cfg = quick_cfg(rate=2000, timeout=2.0)
            results = list(scan_targets(targets, cfg))
        finally:
            handle.shutdown()
        assert len(results) == 40
        assert all(o.verdict is Verdict.VERSION_NEGOTIATION for _, o in results)
        assert all(o.cid_echo_matched for _, o in results)

    def test_rate_law(self):
        # R=400: every 400-packet window must span at least ~1 second
        rate = 400
        count = 600
        targets = [ProbeTarget(f"10.{i // 65536 % 256}.{i // 256 % 256}.{i % 250 + 1}") for i in range(count)]
        transport = SyntheticTransport()
        cfg = quick_cfg(rate=rate, timeout=0.2)
        for _ in scan_targets(targets, cfg, transport):
            pass
        times = transport.send_times
        assert len(times) == count
        epsilon = 0.02
        for i in range(len(times) - rate):
            assert times[i + rate] - times[i] >= 1.0 - epsilon

    def test_retries_consume_rate_budget(self):
        targets = [ProbeTarget("10.3.0.1")]
        transport = SyntheticTransport("drop")
        cfg = quick_cfg(rate=1e9, timeout=0.05, retries=2)
        results = list(scan_targets(targets, cfg, transport))
        assert transport.sent == 3
        assert len(results) == 1
        assert results[0][1].verdict is Verdict.TIMEOUT


class TestStatelessness:
    def test_memory_bounded_by_window_not_target_count(self):
        import tracemalloc

        def peak_for(count: int) -> int:
            targets = (
                ProbeTarget(f"10.{i >> 16 & 255}.{i >> 8 & 255}.{(i & 255) % 250 + 1}")
                for i in range(count)
            )
            cfg = quick_cfg(rate=1e9, timeout=0.05, secret=b"mem")
            transport = SyntheticTransport()
            results = 0
            tracemalloc.start()
            tracemalloc.reset_peak()
            for _ in scan_targets(targets, cfg, transport):
                results += 1
            _, peak = tracemalloc.get_traced_memory()
            tracemalloc.stop()
            assert results == count
            return peak

        baseline = peak_for(100)
        large = peak_for(20_000)
        assert large <= 10 * max(baseline, 128 * 1024)


class TestTargetParsing:
    @pytest.mark.parametrize(
        "line,expected",
        [
            ("10.0.0.1", ("10.0.0.1", 443)),
            ("10.0.0.1:8443", ("10.0.0.1", 8443)),
            ("[::1]:8443", ("::1", 8443)),
            ("::1", ("::1", 443)),
            ("2001:db8::5", ("2001:db8::5", 443)),
            ("[2001:db8::5]", ("2001:db8::5", 443)),
            ("  10.0.0.2  # trailing comment", ("10.0.0.2", 443)),
        ],
    )
    def test_formats(self, line, expected):
        target = parse_target(line)
        assert (target.address, target.port) == expected

    def test_comments_and_blanks_skipped(self):
        lines = ["# header", "", "10.0.0.1", "   ", "10.0.0.2:99"]
        parsed = list(load_targets(lines))
        assert [(t.address, t.port) for t in parsed] == [("10.0.0.1", 443), ("10.0.0.2", 99)]

    def test_record_shape(self):
        outcome = ProbeOutcome(Verdict.VERSION_NEGOTIATION, (Q035,), True, 0.0123)
        record = outcome_record(ProbeTarget("10.0.0.1"), outcome, "2026-08-10T00:00:00Z")
        assert record == {
            "addr": "10.0.0.1",
            "port": 443,
            "verdict": "version_negotiation",
            "versions": ["Q035"],
            "rtt_ms": 12.3,
            "ts": "2026-08-10T00:00:00Z",
        }
