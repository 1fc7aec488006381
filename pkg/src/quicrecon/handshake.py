"""Inchoate-handshake client: CHLO/REJ exchanges up to (but not past)
key agreement, extracting the server config, source token, and
certificate chain, with every packet traced.

Each CHLO after the first carries everything learned so far (source
token, server config id), mirroring how a real client would converge;
the exchange stops as soon as both the config and the certificates are
in hand, or when the round budget runs out.
"""

from __future__ import annotations

import enum
import os
import re
import socket
import time
from dataclasses import dataclass, field
from typing import Union

from . import wire
from .probe import _IGNORABLE_ERRNOS, ProbeTarget
from .wire import (
    CertificateChain,
    HandshakeMessage,
    PublicHeader,
    PublicResetPacket,
    ServerConfig,
    VersionNegotiationPacket,
    VersionTag,
    make_version,
)

DEFAULT_ACCEPTABLE_VERSIONS = tuple(
    make_version(f"Q{n:03d}") for n in range(39, 34, -1)
)

_DNS_LABEL = re.compile(r"^[a-z0-9]([a-z0-9-]{0,61}[a-z0-9])?$", re.IGNORECASE)


def is_valid_dns_name(name: str) -> bool:
    name = name.rstrip(".")
    if not name or len(name) > 253:
        return False
    return all(_DNS_LABEL.match(label) for label in name.split("."))


class HandshakeStatus(enum.Enum):
    QUIC_ENABLED = "quic_enabled"
    VERSION_FAILED = "version_failed"
    PROTOCOL_ERROR = "protocol_error"
    TIMEOUT = "timeout"


@dataclass(frozen=True)
class HandshakeParams:
    sni: str = ""
    version: VersionTag = wire.Q035
    max_rounds: int = 3
    timeout: float = 12.0
    pad_to: int = 1200
    acceptable_versions: tuple[VersionTag, ...] = DEFAULT_ACCEPTABLE_VERSIONS

    def __post_init__(self) -> None:
        if self.max_rounds < 1:
            raise ValueError("max_rounds must be at least 1")
        if self.sni and not is_valid_dns_name(self.sni):
            raise ValueError(f"sni is not a valid DNS name: {self.sni!r}")


@dataclass(frozen=True)
class TraceEvent:
    direction: str  # "send" | "recv"
    ts: float
    payload: Union[HandshakeMessage, VersionNegotiationPacket, PublicResetPacket, bytes]


@dataclass(frozen=True)
class HandshakeTrace:
    events: tuple[TraceEvent, ...]

    def sent_chlos(self) -> tuple[HandshakeMessage, ...]:
        return tuple(
            e.payload
            for e in self.events
            if e.direction == "send" and isinstance(e.payload, HandshakeMessage)
        )


@dataclass(frozen=True)
class HandshakeResult:
    status: HandshakeStatus
    negotiated_version: VersionTag | None = None
    scfg: ServerConfig | None = None
    certs: CertificateChain | None = None
    source_token: bytes | None = None
    trace: HandshakeTrace = field(default_factory=lambda: HandshakeTrace(()))

    def __post_init__(self) -> None:
        if self.status is not HandshakeStatus.QUIC_ENABLED and (
            self.scfg is not None or self.certs is not None
        ):
            raise ValueError("scfg/certs only accompany a QuicEnabled result")

    @property
    def rtt(self) -> float:
        """Wall time from the first send to the last traced event."""
        if len(self.trace.events) < 2:
            return 0.0
        return self.trace.events[-1].ts - self.trace.events[0].ts


def _pick_retry_version(
    offered: tuple[VersionTag, ...], acceptable: tuple[VersionTag, ...]
) -> VersionTag | None:
    """Highest mutually recognized version, by numeric tag order."""
    overlap = [v for v in offered if v in acceptable]
    if not overlap:
        return None
    return max(overlap, key=lambda v: v.number if v.number is not None else -1)


def perform_handshake(target: ProbeTarget, params: HandshakeParams) -> HandshakeResult:
    """Drive CHLO/REJ rounds against one host; all failures are values."""
    trace: list[TraceEvent] = []
    connection_id = int.from_bytes(os.urandom(8), "little")
    version = params.version
    version_retried = False
    learned: dict[bytes, bytes] = {}
    scfg: ServerConfig | None = None
    certs: CertificateChain | None = None
    token: bytes | None = None
    got_rej = False
    protocol_error = False
    version_failed = False

    family = socket.AF_INET6 if target.is_ipv6 else socket.AF_INET
    sock = socket.socket(family, socket.SOCK_DGRAM)
    try:
        sock.connect((target.address, target.port))
        rounds = 0
        packet_number = 1
        while rounds < params.max_rounds:
            tags = dict(learned)
            tags[wire.TAG_VER] = version.value
            tags[wire.TAG_PDMD] = b"X509"
            if params.sni:
                tags[wire.TAG_SNI] = params.sni.encode("ascii")
            packet = wire.build_chlo_packet(
                connection_id, version, tags, params.pad_to, packet_number
            )
            _, chlo = wire.decode_data_packet(packet)
            try:
                sock.send(packet)
            except OSError as exc:
                if exc.errno not in _IGNORABLE_ERRNOS:
                    raise
            trace.append(TraceEvent("send", time.time(), chlo))
            rounds += 1
            packet_number += 1

            reply = _recv_reply(sock, params.timeout)
            if reply is None:
                break
            decoded = wire.decode_server_response(reply)
            trace.append(
                TraceEvent(
                    "recv",
                    time.time(),
                    decoded if not isinstance(decoded, wire.Malformed) else bytes(reply),
                )
            )

            if isinstance(decoded, VersionNegotiationPacket):
                retry = _pick_retry_version(decoded.versions, params.acceptable_versions)
                if version_retried or retry is None:
                    version_failed = True
                    break
                version = retry
                version_retried = True
                continue
            if isinstance(decoded, PublicResetPacket):
                protocol_error = True  # server aborted the exchange
                break
            if isinstance(decoded, wire.Malformed):
                protocol_error = True
                break
            if decoded.message_tag != wire.TAG_REJ:
                protocol_error = True
                break

            got_rej = True
            try:
                scfg_raw = decoded.value(wire.TAG_SCFG)
                if scfg_raw is not None:
                    scfg = wire.server_config_from_message(
                        wire.decode_handshake_message(scfg_raw)
                    )
                    learned[wire.TAG_SCID] = scfg.scid
                stk = decoded.value(wire.TAG_STK)
                if stk is not None:
                    token = stk
                    learned[wire.TAG_STK] = stk
                crt_raw = decoded.value(wire.TAG_CRT)
                if crt_raw is not None:
                    certs = wire.decode_cert_chain(crt_raw)
            except wire.WireFormatError:
                protocol_error = True
                break
            if scfg is not None and certs is not None:
                break
    finally:
        sock.close()

    if protocol_error:
        status = HandshakeStatus.PROTOCOL_ERROR
    elif version_failed:
        status = HandshakeStatus.VERSION_FAILED
    elif got_rej:
        status = HandshakeStatus.QUIC_ENABLED
    else:
        status = HandshakeStatus.TIMEOUT
    enabled = status is HandshakeStatus.QUIC_ENABLED
    return HandshakeResult(
        status=status,
        negotiated_version=version if enabled else None,
        scfg=scfg if enabled else None,
        certs=certs if enabled else None,
        source_token=token if enabled else None,
        trace=HandshakeTrace(tuple(trace)),
    )


def _recv_reply(sock: socket.socket, timeout: float) -> bytes | None:
    deadline = time.monotonic() + timeout
    while True:
        remaining = deadline - time.monotonic()
        if remaining <= 0:
            return None
        sock.settimeout(remaining)
        try:
            return sock.recv(65535)
        except socket.timeout:
            return None
        except OSError as exc:
            if exc.errno in _IGNORABLE_ERRNOS:
                continue
            raise


def result_record(
    target: ProbeTarget,
    result: HandshakeResult,
    sni: str,
    cert_valid: bool | None = None,
    leaf_cn: str | None = None,
) -> dict:
    """JSONL record for one parameter-grab result."""
    fingerprints = []
    if result.certs is not None:
        from .certs import fingerprint_certificate

        try:
            fingerprints = [fingerprint_certificate(result.certs)]
        except ValueError:
            fingerprints = []
    return {
        "host": f"{target.address}:{target.port}",
        "sni": sni,
        "status": result.status.value,
        "version": result.negotiated_version.text if result.negotiated_version else None,
        "scid_hex": result.scfg.scid.hex() if result.scfg else None,
        "cert_fingerprints": fingerprints,
        "cert_valid": cert_valid,
        "rtt_ms": round(result.rtt * 1000.0, 3),
        "leaf_cn": leaf_cn,
    }
