"""Stateless, rate-limited UDP capability prober.

One invalid-version CHLO per target; an address is QUIC-capable iff it
answers with a version negotiation packet or a public reset.  Response
attribution is stateless: each probe's connection id is a keyed MAC of
(address, port, scan secret), recomputed from the reply's source
address on receipt, so matching needs no per-target table.  The only
retained state is the in-flight window used for timeout tracking,
bounded by rate x timeout regardless of target-list length.
"""

from __future__ import annotations

import enum
import hashlib
import heapq
import ipaddress
import os
import random
import select
import socket
import time
from collections import deque
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Protocol

from . import wire
from .wire import VersionTag, make_unsupported_version

_IGNORABLE_ERRNOS = frozenset({111, 113, 101})  # ECONNREFUSED, EHOSTUNREACH, ENETUNREACH
_SEND_RETRY_LIMIT = 3


class ProbeError(Exception):
    pass


class Blocklisted(ProbeError):
    """Target falls inside a blocklisted prefix; no probe was sent."""


class SocketError(ProbeError):
    """Persistent OS-level socket failure."""


class Verdict(enum.Enum):
    VERSION_NEGOTIATION = "version_negotiation"
    PUBLIC_RESET = "public_reset"
    TIMEOUT = "timeout"
    MALFORMED = "malformed"


@dataclass(frozen=True)
class ProbeTarget:
    address: str
    port: int = 443

    def __post_init__(self) -> None:
        ipaddress.ip_address(self.address)
        if not 1 <= self.port <= 65535:
            raise ValueError(f"port {self.port} outside [1, 65535]")

    @property
    def is_ipv6(self) -> bool:
        return ":" in self.address


@dataclass(frozen=True)
class ProbeOutcome:
    verdict: Verdict
    versions: tuple[VersionTag, ...] = ()
    cid_echo_matched: bool = False
    rtt: float = 0.0

    def __post_init__(self) -> None:
        if self.versions and self.verdict is not Verdict.VERSION_NEGOTIATION:
            raise ValueError("only version negotiation outcomes carry versions")

    def quic_capable(self) -> bool:
        return self.verdict in (Verdict.VERSION_NEGOTIATION, Verdict.PUBLIC_RESET)


@dataclass(frozen=True)
class ScanConfig:
    rate: float = 1000.0
    timeout: float = 12.0
    retries: int = 0
    blocklist: tuple = ()
    shuffle: bool = False
    probe_version: VersionTag = field(default_factory=make_unsupported_version)
    pad_to: int = 1200
    secret: bytes = field(default_factory=lambda: os.urandom(16))

    def __post_init__(self) -> None:
        if not self.rate > 0:
            raise ValueError("rate must be positive")
        if not self.timeout > 0:
            raise ValueError("timeout must be positive")
        if self.retries < 0:
            raise ValueError("retries must be non-negative")
        object.__setattr__(
            self,
            "blocklist",
            tuple(
                net if isinstance(net, (ipaddress.IPv4Network, ipaddress.IPv6Network))
                else ipaddress.ip_network(net)
                for net in self.blocklist
            ),
        )

    def is_blocklisted(self, target: ProbeTarget) -> bool:
        if not self.blocklist:
            return False
        addr = ipaddress.ip_address(target.address)
        return any(addr in net for net in self.blocklist if net.version == addr.version)


def probe_connection_id(address: str, port: int, secret: bytes) -> int:
    """Keyed 64-bit MAC of the target coordinates; doubles as the probe's
    connection id so replies can be attributed without per-target state."""
    packed = ipaddress.ip_address(address).packed + port.to_bytes(2, "big")
    digest = hashlib.blake2b(packed, digest_size=8, key=secret).digest()
    return int.from_bytes(digest, "little")


def classify_response(data: bytes, expected_cid: int) -> ProbeOutcome:
    """Map one reply datagram onto a verdict (rtt filled in by callers)."""
    decoded = wire.decode_server_response(data)
    matched = wire.peek_connection_id(data) == expected_cid
    if isinstance(decoded, wire.VersionNegotiationPacket):
        return ProbeOutcome(
            Verdict.VERSION_NEGOTIATION, decoded.versions, cid_echo_matched=matched
        )
    if isinstance(decoded, wire.PublicResetPacket):
        return ProbeOutcome(Verdict.PUBLIC_RESET, cid_echo_matched=matched)
    # well-formed but unexpected replies are not capability evidence
    return ProbeOutcome(Verdict.MALFORMED, cid_echo_matched=matched)


# ---------------------------------------------------------------------------
# transports

class Transport(Protocol):
    def send(self, payload: bytes, target: ProbeTarget) -> None: ...

    def poll(self, timeout: float) -> list[tuple[bytes, tuple[str, int]]]: ...

    def close(self) -> None: ...


class UdpTransport:
    """Unconnected UDP sockets, one per address family, created lazily."""

    def __init__(self) -> None:
        self._socks: dict[int, socket.socket] = {}

    def _sock_for(self, family: int) -> socket.socket:
        sock = self._socks.get(family)
        if sock is None:
            sock = socket.socket(family, socket.SOCK_DGRAM)
            sock.setblocking(False)
            sock.setsockopt(socket.SOL_SOCKET, socket.SO_RCVBUF, 1 << 21)
            self._socks[family] = sock
        return sock

    def send(self, payload: bytes, target: ProbeTarget) -> None:
        family = socket.AF_INET6 if target.is_ipv6 else socket.AF_INET
        sock = self._sock_for(family)
        for attempt in range(_SEND_RETRY_LIMIT):
            try:
                sock.sendto(payload, (target.address, target.port))
                return
            except BlockingIOError:
                time.sleep(0.001)
            except OSError as exc:
                if exc.errno in _IGNORABLE_ERRNOS:
                    return
                if attempt + 1 == _SEND_RETRY_LIMIT:
                    raise SocketError(f"send to {target.address} failed: {exc}") from exc
                time.sleep(0.002)
        raise SocketError(f"send to {target.address} kept blocking")

    def poll(self, timeout: float) -> list[tuple[bytes, tuple[str, int]]]:
        socks = list(self._socks.values())
        if not socks:
            time.sleep(timeout)
            return []
        readable, _, _ = select.select(socks, [], [], max(timeout, 0.0))
        received = []
        for sock in readable:
            while True:
                try:
                    data, addr = sock.recvfrom(65535)
                except BlockingIOError:
                    break
                except OSError:
                    break
                received.append((data, (addr[0], addr[1])))
        return received

    def close(self) -> None:
        for sock in self._socks.values():
            sock.close()
        self._socks.clear()


# ---------------------------------------------------------------------------
# single-target probe

def probe_one(target: ProbeTarget, cfg: ScanConfig) -> ProbeOutcome:
    """Send exactly one probe (plus configured retries on timeout) over a
    connected socket and classify the first reply."""
    if cfg.is_blocklisted(target):
        raise Blocklisted(f"{target.address} is blocklisted")
    cid = probe_connection_id(target.address, target.port, cfg.secret)
    packet = wire.build_probe_chlo(cid, cfg.probe_version, cfg.pad_to)
    family = socket.AF_INET6 if target.is_ipv6 else socket.AF_INET
    try:
        sock = socket.socket(family, socket.SOCK_DGRAM)
    except OSError as exc:
        raise SocketError(str(exc)) from exc
    try:
        sock.connect((target.address, target.port))
        start = time.monotonic()
        for _ in range(cfg.retries + 1):
            try:
                sock.send(packet)
            except OSError as exc:
                if exc.errno not in _IGNORABLE_ERRNOS:
                    raise SocketError(f"send failed: {exc}") from exc
            deadline = time.monotonic() + cfg.timeout
            while True:
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    break
                sock.settimeout(remaining)
                try:
                    data = sock.recv(65535)
                except socket.timeout:
                    break
                except OSError as exc:
                    if exc.errno in _IGNORABLE_ERRNOS:
                        continue  # ICMP unreachable is not a QUIC reply
                    raise SocketError(f"recv failed: {exc}") from exc
                outcome = classify_response(data, cid)
                return ProbeOutcome(
                    outcome.verdict,
                    outcome.versions,
                    cid_echo_matched=outcome.cid_echo_matched,
                    rtt=time.monotonic() - start,
                )
        return ProbeOutcome(Verdict.TIMEOUT, rtt=time.monotonic() - start)
    finally:
        sock.close()


# ---------------------------------------------------------------------------
# streaming scan

@dataclass
class _Flight:
    target: ProbeTarget
    cid: int
    sent_at: float
    deadline: float
    retries_left: int
    done: bool = False


def scan_targets(
    targets: Iterable[ProbeTarget],
    cfg: ScanConfig,
    transport: Transport | None = None,
) -> Iterator[tuple[ProbeTarget, ProbeOutcome]]:
    """Probe a target stream; yields one (target, outcome) per
    non-blocklisted input, not necessarily in input order.

    Packet pacing keeps the send rate at or below cfg.rate over any
    one-second window.  Replies arriving after a target's deadline are
    dropped and the target reports Timeout.
    """
    owns_transport = transport is None
    if transport is None:
        transport = UdpTransport()

    if cfg.shuffle:
        materialized = list(targets)
        random.shuffle(materialized)
        targets = materialized

    interval = 1.0 / cfg.rate
    pending: dict[tuple[str, int], deque[_Flight]] = {}
    expiry: list[tuple[float, int, _Flight]] = []
    seq = 0

    def key_of(target: ProbeTarget) -> tuple[str, int]:
        return (str(ipaddress.ip_address(target.address)), target.port)

    def launch(flight: _Flight) -> None:
        nonlocal seq
        packet = wire.build_probe_chlo(flight.cid, cfg.probe_version, cfg.pad_to)
        transport.send(packet, flight.target)
        now = time.monotonic()
        flight.sent_at = now
        flight.deadline = now + cfg.timeout
        pending.setdefault(key_of(flight.target), deque()).append(flight)
        heapq.heappush(expiry, (flight.deadline, seq, flight))
        seq += 1

    def match(data: bytes, source: tuple[str, int]):
        try:
            norm = (str(ipaddress.ip_address(source[0])), source[1])
        except ValueError:
            return None
        queue = pending.get(norm)
        if not queue:
            return None
        expected = probe_connection_id(norm[0], norm[1], cfg.secret)
        flight = queue.popleft()
        if not queue:
            del pending[norm]
        flight.done = True
        outcome = classify_response(data, expected)
        return flight.target, ProbeOutcome(
            outcome.verdict,
            outcome.versions,
            cid_echo_matched=outcome.cid_echo_matched,
            rtt=time.monotonic() - flight.sent_at,
        )

    try:
        iterator = iter(targets)
        exhausted = False
        next_send = time.monotonic()
        resend: deque[_Flight] = deque()
        while True:
            now = time.monotonic()
            # paced sending: strict inter-send gap, resends before fresh
            # targets, capped per round so receiving stays interleaved
            sent_this_round = 0
            while (resend or not exhausted) and now >= next_send and sent_this_round < 64:
                if resend:
                    launch(resend.popleft())
                else:
                    target = next(iterator, None)
                    if target is None:
                        exhausted = True
                        break
                    if cfg.is_blocklisted(target):
                        continue
                    cid = probe_connection_id(target.address, target.port, cfg.secret)
                    launch(_Flight(target, cid, now, 0.0, cfg.retries))
                sent_this_round += 1
                now = time.monotonic()
                next_send = now + interval
            if exhausted and not pending and not resend:
                break

            # wait for replies until the next send slot or expiry
            wait_until = next_send if (resend or not exhausted) else now + 0.1
            if expiry:
                wait_until = min(wait_until, expiry[0][0])
            for data, source in transport.poll(min(max(wait_until - now, 0.0), 0.1)):
                result = match(data, source)
                if result is not None:
                    yield result

            # expire overdue flights
            now = time.monotonic()
            while expiry and expiry[0][0] <= now:
                _, _, flight = heapq.heappop(expiry)
                if flight.done:
                    continue
                queue = pending.get(key_of(flight.target))
                if queue:
                    try:
                        queue.remove(flight)
                    except ValueError:
                        pass
                    if not queue:
                        pending.pop(key_of(flight.target), None)
                flight.done = True
                if flight.retries_left > 0:
                    flight.retries_left -= 1
                    flight.done = False
                    resend.append(flight)
                else:
                    yield (
                        flight.target,
                        ProbeOutcome(Verdict.TIMEOUT, rtt=now - flight.sent_at),
                    )
    finally:
        if owns_transport:
            transport.close()


# ---------------------------------------------------------------------------
# target lists and records

def parse_target(line: str, default_port: int = 443) -> ProbeTarget | None:
    """One `address[:port]` per line; '#' starts a comment."""
    text = line.split("#", 1)[0].strip()
    if not text:
        return None
    if text.startswith("["):
        host, _, rest = text[1:].partition("]")
        port = int(rest[1:]) if rest.startswith(":") else default_port
        return ProbeTarget(host, port)
    if text.count(":") == 1:
        host, _, port_text = text.partition(":")
        return ProbeTarget(host, int(port_text))
    return ProbeTarget(text, default_port)


def load_targets(lines: Iterable[str], default_port: int = 443) -> Iterator[ProbeTarget]:
    for line in lines:
        target = parse_target(line, default_port)
        if target is not None:
            yield target


def outcome_record(target: ProbeTarget, outcome: ProbeOutcome, ts: str) -> dict:
    """JSONL record for one scan result."""
    return {
        "addr": target.address,
        "port": target.port,
        "verdict": outcome.verdict.value,
        "versions": [v.text for v in outcome.versions],
        "rtt_ms": round(outcome.rtt * 1000.0, 3),
        "ts": ts,
    }
