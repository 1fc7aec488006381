"""Configurable gQUIC endpoint with scripted behaviors.

Serves as the desk-scale stand-in for real QUIC hosts: it speaks the
wire-codec formats and can negotiate, reset, stay silent, emit garbage,
or serve REJ messages carrying a server config, source token, and
certificate chain.  SCFG proofs are produced with a test key only and
are never verified by anything.

Binding to "0.0.0.0" pins reply source addresses to the probed
destination (via IP_PKTINFO), so one responder can stand in for any
number of 127.0.0.0/8 targets.
"""

from __future__ import annotations

import enum
import hmac
import random
import socket
import struct
import threading
import time
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence, Union

import yaml

from . import wire
from .certs import load_pem_chain
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

_IP_PKTINFO = 8  # not exposed by this interpreter's socket module
_PROOF_KEY = b"quic-recon responder test key"

DEFAULT_GARBAGE = b"\x00" + b"\xde\xad\xbe\xef" * 8


class BindFailed(OSError):
    pass


class Behavior(enum.Enum):
    NEGOTIATE = "negotiate"
    RESET = "reset"
    SILENT = "silent"
    MALFORMED = "malformed"
    SERVE_REJ = "serve_rej"


@dataclass(frozen=True)
class ResponderProfile:
    supported_versions: tuple[VersionTag, ...] = (wire.Q035,)
    behavior: Behavior = Behavior.NEGOTIATE
    sni_required: bool = False
    scfg: ServerConfig | None = None
    cert_inventory: Mapping[str, CertificateChain] = field(default_factory=dict)
    reply_delay: float = 0.0
    drop_probability: float = 0.0
    source_token: bytes = b"\x5a" * 24
    malformed_reply: bytes = DEFAULT_GARBAGE

    def __post_init__(self) -> None:
        if self.behavior is Behavior.SERVE_REJ and self.scfg is None:
            raise ValueError("serve_rej requires a server config")
        if not 0.0 <= self.drop_probability <= 1.0:
            raise ValueError("drop_probability must be within [0, 1]")

    def chain_for(self, sni: str | None) -> CertificateChain | None:
        """Chain selection: exact SNI entry, else the default ("") entry
        unless the profile demands a known SNI."""
        if sni and sni in self.cert_inventory:
            return self.cert_inventory[sni]
        if self.sni_required:
            return None
        return self.cert_inventory.get("")


ProfileRanges = Sequence[tuple[int, int, ResponderProfile]]


@dataclass(frozen=True)
class LogEvent:
    ts: float
    peer: tuple
    packet: Union[HandshakeMessage, bytes]
    action: str


@dataclass(frozen=True)
class ResponderLog:
    events: tuple[LogEvent, ...]


def _proof_for(scfg_bytes: bytes) -> bytes:
    return hmac.digest(_PROOF_KEY, scfg_bytes, "sha256")


class ResponderHandle:
    """Running responder; `shutdown()` stops it and returns the log."""

    def __init__(self, profiles: ProfileRanges, bind: tuple[str, int]) -> None:
        self._profiles = list(profiles)
        family = socket.AF_INET6 if ":" in bind[0] else socket.AF_INET
        self._sock = socket.socket(family, socket.SOCK_DGRAM)
        self._pktinfo = family == socket.AF_INET
        try:
            if self._pktinfo:
                self._sock.setsockopt(socket.SOL_IP, _IP_PKTINFO, 1)
            self._sock.setsockopt(socket.SOL_SOCKET, socket.SO_RCVBUF, 1 << 21)
            self._sock.bind(bind)
        except OSError as exc:
            self._sock.close()
            raise BindFailed(f"cannot bind {bind}: {exc}") from exc
        self._sock.settimeout(0.05)
        self._events: list[LogEvent] = []
        self._stop = threading.Event()
        self._log: ResponderLog | None = None
        self._rng = random.Random()
        self._thread = threading.Thread(target=self._run, daemon=True)
        self._thread.start()

    @property
    def port(self) -> int:
        return self._sock.getsockname()[1]

    @property
    def address(self) -> tuple[str, int]:
        return self._sock.getsockname()[:2]

    def shutdown(self) -> ResponderLog:
        if self._log is None:
            self._stop.set()
            self._thread.join()
            self._sock.close()
            self._log = ResponderLog(tuple(self._events))
        return self._log

    # -- receive loop -------------------------------------------------

    def _run(self) -> None:
        while not self._stop.is_set():
            try:
                data, ancdata, _, peer = self._sock.recvmsg(
                    65535, socket.CMSG_SPACE(12)
                )
            except socket.timeout:
                continue
            except OSError:
                break
            local = self._local_addr(ancdata)
            self._handle(data, peer, local)

    def _local_addr(self, ancdata) -> bytes | None:
        for level, ctype, cdata in ancdata:
            if level == socket.SOL_IP and ctype == _IP_PKTINFO:
                _, _, addr = struct.unpack("I4s4s", cdata)
                return addr
        return None

    def _send(self, payload: bytes, peer: tuple, local: bytes | None) -> None:
        if self._pktinfo and local is not None:
            anc = [(socket.SOL_IP, _IP_PKTINFO, struct.pack("I4s4s", 0, local, b"\0" * 4))]
            self._sock.sendmsg([payload], anc, 0, peer)
        else:
            self._sock.sendto(payload, peer)

    def _profile_for(self, connection_id: int | None) -> ResponderProfile:
        cid = connection_id or 0
        for low, high, profile in self._profiles:
            if low <= cid <= high:
                return profile
        return self._profiles[-1][2]

    def _handle(self, data: bytes, peer: tuple, local: bytes | None) -> None:
        ts = time.time()
        try:
            header, message = wire.decode_data_packet(data)
        except wire.WireFormatError:
            self._events.append(LogEvent(ts, peer, bytes(data), "ignored-undecodable"))
            return
        if message.message_tag != wire.TAG_CHLO:
            self._events.append(LogEvent(ts, peer, message, "ignored-non-chlo"))
            return

        profile = self._profile_for(header.connection_id)
        if profile.drop_probability and self._rng.random() < profile.drop_probability:
            self._events.append(LogEvent(ts, peer, message, "dropped"))
            return

        reply, action = self._reply_for(profile, header, message)
        self._events.append(LogEvent(ts, peer, message, action))
        if reply is not None:
            if profile.reply_delay:
                time.sleep(profile.reply_delay)
            self._send(reply, peer, local)

    def _reply_for(
        self, profile: ResponderProfile, header: PublicHeader, message: HandshakeMessage
    ) -> tuple[bytes | None, str]:
        cid = header.connection_id or 0
        behavior = profile.behavior
        if behavior is Behavior.SILENT:
            return None, "silent"
        if behavior is Behavior.RESET:
            reset = PublicResetPacket(cid, HandshakeMessage(wire.TAG_PRST))
            return wire.encode_public_reset(reset), "reset"
        if behavior is Behavior.MALFORMED:
            return profile.malformed_reply, "malformed"

        version_ok = header.version in profile.supported_versions
        if not version_ok:
            packet = VersionNegotiationPacket(cid, profile.supported_versions)
            return wire.encode_version_negotiation(packet), "negotiate"
        if behavior is Behavior.NEGOTIATE:
            # version already acceptable; nothing scripted to send
            return None, "silent"
        return self._build_rej(profile, cid, message), "rej"

    def _build_rej(
        self, profile: ResponderProfile, cid: int, chlo: HandshakeMessage
    ) -> bytes:
        assert profile.scfg is not None
        scfg_bytes = wire.encode_handshake_message(
            wire.server_config_to_message(profile.scfg)
        )
        tags: dict[bytes, bytes] = {
            wire.TAG_SCFG: scfg_bytes,
            wire.TAG_STK: profile.source_token,
            wire.TAG_PROF: _proof_for(scfg_bytes),
        }
        sni_raw = chlo.value(wire.TAG_SNI)
        sni = sni_raw.decode("ascii", "replace") if sni_raw else None
        chain = profile.chain_for(sni)
        if chain is not None:
            tags[wire.TAG_CRT] = wire.encode_cert_chain(chain)
        rej = HandshakeMessage.from_tags(wire.TAG_REJ, tags)
        return wire.encode_data_packet(PublicHeader(connection_id=cid), rej)


def serve(
    profile: Union[ResponderProfile, ProfileRanges],
    bind: tuple[str, int] = ("127.0.0.1", 0),
) -> ResponderHandle:
    if isinstance(profile, ResponderProfile):
        ranges: ProfileRanges = [(0, (1 << 64) - 1, profile)]
    else:
        ranges = profile
        if not ranges:
            raise ValueError("at least one profile range is required")
    return ResponderHandle(ranges, bind)


# ---------------------------------------------------------------------------
# profile files

def default_server_config(scid: bytes | None = None) -> ServerConfig:
    """Syntactically valid SCFG with fixed test values."""
    return ServerConfig(
        scid=scid if scid is not None else bytes(range(16)),
        kexs=(b"C255",),
        aead=(b"AESG",),
        pubs=(b"\x42" * 32,),
        expy=4_102_444_800,  # 2100-01-01, never expires in practice
        vers=(wire.Q035,),
    )


def load_profile(path: str) -> ResponderProfile:
    """Profile from a YAML key/value file.

    Keys: behavior, versions, sni_required, reply_delay,
    drop_probability, source_token_hex, certs (hostname -> PEM path;
    "" is the default chain), scfg {scid_hex, expiry, kexs, aead,
    pubs_hex, versions}.  A serve_rej profile without an explicit scfg
    gets the built-in test config.
    """
    with open(path, "r", encoding="utf-8") as fh:
        raw = yaml.safe_load(fh) or {}
    if not isinstance(raw, dict):
        raise ValueError(f"profile file {path} must hold a mapping")
    behavior = Behavior(raw.get("behavior", "negotiate"))
    versions = tuple(make_version(v) for v in raw.get("versions", ["Q035"]))
    scfg = None
    if "scfg" in raw:
        section = raw["scfg"]
        scfg = ServerConfig(
            scid=bytes.fromhex(section["scid_hex"]),
            kexs=tuple(k.encode("ascii") for k in section.get("kexs", ["C255"])),
            aead=tuple(a.encode("ascii") for a in section.get("aead", ["AESG"])),
            pubs=tuple(bytes.fromhex(p) for p in section.get("pubs_hex", ["42" * 32])),
            expy=int(section.get("expiry", 4_102_444_800)),
            vers=tuple(make_version(v) for v in section.get("versions", ["Q035"])),
        )
    elif behavior is Behavior.SERVE_REJ:
        scfg = default_server_config()
    inventory = {}
    for hostname, pem_path in (raw.get("certs") or {}).items():
        with open(pem_path, "rb") as pem_fh:
            inventory[hostname or ""] = CertificateChain(load_pem_chain(pem_fh.read()))
    profile = ResponderProfile(
        supported_versions=versions,
        behavior=behavior,
        sni_required=bool(raw.get("sni_required", False)),
        scfg=scfg,
        cert_inventory=inventory,
        reply_delay=float(raw.get("reply_delay", 0.0)),
        drop_probability=float(raw.get("drop_probability", 0.0)),
    )
    if "source_token_hex" in raw:
        profile = replace(profile, source_token=bytes.fromhex(raw["source_token_hex"]))
    return profile
