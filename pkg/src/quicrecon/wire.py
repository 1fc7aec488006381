"""Bit-exact codec for the early-deployment gQUIC wire format.

Covers the public header, version negotiation and public reset packets,
the tag-value crypto handshake messages (CHLO/REJ/SHLO/SCFG/PRST),
embedded server configs, and certificate-chain blobs.  The byte layout
is documented with worked hex examples in WIRE.md.

Everything here is a pure function over immutable values; no I/O.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass
from typing import Mapping, Union

# public flags octet
FLAG_VERSION = 0x01
FLAG_RESET = 0x02
FLAG_CID = 0x08
_PN_WIDTH_SHIFT = 4
_PN_WIDTH_MASK = 0x30
_PN_WIDTHS = (1, 2, 4, 6)

MAX_VALUE_REGION = 0xFFFFFFFF
MAX_ENTRIES = 0xFFFF
MAX_PROBE_SIZE = 1350
MAX_CERT_ENTRY = 1 << 20  # decompression guard

DEFAULT_UNSUPPORTED_TAG = b"?123"


class WireFormatError(ValueError):
    """Base class for every wire codec failure."""


class UnsortedTags(WireFormatError):
    """Entry tags are not strictly ascending by little-endian value."""


class OversizeValue(WireFormatError):
    """Value region or entry count exceeds the encodable maximum."""


class Truncated(WireFormatError):
    """Input ends before the declared layout is complete."""


class NonMonotonicOffsets(WireFormatError):
    """Declared end offsets decrease."""


class UnknownLayout(WireFormatError):
    """Input does not follow any known packet or message layout."""


class PadTooSmall(WireFormatError):
    """Requested padded size cannot hold the mandatory fields."""


class MalformedServerConfig(WireFormatError):
    """SCFG message is missing tags or has inconsistent field lengths."""


def crypto_tag(name: str) -> bytes:
    """ASCII 4-octet tag, zero-padded on the right for short names."""
    raw = name.encode("ascii")
    if not 1 <= len(raw) <= 4:
        raise ValueError(f"tag name must be 1-4 ASCII chars: {name!r}")
    return raw + b"\x00" * (4 - len(raw))


TAG_CHLO = crypto_tag("CHLO")
TAG_REJ = crypto_tag("REJ")
TAG_SHLO = crypto_tag("SHLO")
TAG_SCFG = crypto_tag("SCFG")
TAG_PRST = crypto_tag("PRST")

TAG_SNI = crypto_tag("SNI")
TAG_VER = crypto_tag("VER")
TAG_PDMD = crypto_tag("PDMD")
TAG_PAD = crypto_tag("PAD")
TAG_SCID = crypto_tag("SCID")
TAG_STK = crypto_tag("STK")
TAG_KEXS = crypto_tag("KEXS")
TAG_AEAD = crypto_tag("AEAD")
TAG_PUBS = crypto_tag("PUBS")
TAG_EXPY = crypto_tag("EXPY")
TAG_CRT = crypto_tag("CRT")
TAG_PROF = crypto_tag("PROF")

MESSAGE_TAGS = frozenset({TAG_CHLO, TAG_REJ, TAG_SHLO, TAG_SCFG, TAG_PRST})


def tag_sort_key(tag: bytes) -> int:
    return int.from_bytes(tag, "little")


@dataclass(frozen=True)
class VersionTag:
    """A 4-octet gQUIC version label such as b"Q035"."""

    value: bytes

    def __post_init__(self) -> None:
        if len(self.value) != 4:
            raise ValueError(f"version tag must be exactly 4 octets: {self.value!r}")

    def is_recognized(self) -> bool:
        """True iff the tag is 'Q' followed by three ASCII digits."""
        return (
            self.value[0:1] == b"Q"
            and all(0x30 <= b <= 0x39 for b in self.value[1:])
        )

    @property
    def text(self) -> str:
        return self.value.decode("ascii", errors="backslashreplace")

    @property
    def number(self) -> int | None:
        """Numeric part of a recognized tag, for ordering; None otherwise."""
        return int(self.value[1:]) if self.is_recognized() else None

    def __str__(self) -> str:
        return self.text


def make_version(text: str) -> VersionTag:
    return VersionTag(text.encode("ascii"))


Q035 = make_version("Q035")


def make_unsupported_version(tag: bytes = DEFAULT_UNSUPPORTED_TAG) -> VersionTag:
    """A probe tag that no server recognizes (not 'Q' + three digits)."""
    version = VersionTag(tag)
    if version.is_recognized():
        raise ValueError(f"{tag!r} matches the deployed version pattern")
    return version


@dataclass(frozen=True)
class HandshakeMessage:
    """Tag-value crypto handshake message (CHLO, REJ, SHLO, SCFG, PRST)."""

    message_tag: bytes
    entries: tuple[tuple[bytes, bytes], ...] = ()

    @classmethod
    def from_tags(cls, message_tag: bytes, tags: Mapping[bytes, bytes]) -> "HandshakeMessage":
        """Build a message with entries sorted into canonical tag order."""
        ordered = tuple(sorted(tags.items(), key=lambda kv: tag_sort_key(kv[0])))
        return cls(message_tag, ordered)

    def value(self, tag: bytes) -> bytes | None:
        for entry_tag, entry_value in self.entries:
            if entry_tag == tag:
                return entry_value
        return None

    @property
    def tag_set(self) -> frozenset[bytes]:
        return frozenset(tag for tag, _ in self.entries)


@dataclass(frozen=True)
class PublicHeader:
    """Public header of a gQUIC data packet (and the reset-flag prefix).

    Reset packets carry no packet number; `packet_number` must stay at
    its defaults when `public_reset` is set.
    """

    connection_id: int | None
    version: VersionTag | None = None
    packet_number: int = 1
    packet_number_width: int = 1
    public_reset: bool = False

    def __post_init__(self) -> None:
        if self.connection_id is not None and not 0 <= self.connection_id < 1 << 64:
            raise ValueError("connection id must fit 64 bits")
        if self.packet_number_width not in _PN_WIDTHS:
            raise ValueError(f"packet number width must be one of {_PN_WIDTHS}")
        if not 0 <= self.packet_number < 1 << (8 * self.packet_number_width):
            raise ValueError("packet number does not fit its declared width")


@dataclass(frozen=True)
class VersionNegotiationPacket:
    connection_id: int
    versions: tuple[VersionTag, ...]

    def __post_init__(self) -> None:
        if not self.versions:
            raise ValueError("version negotiation must list at least one version")


@dataclass(frozen=True)
class PublicResetPacket:
    """A reset-flagged packet; `body` is None when the PRST payload
    did not decode (recorded, but the reset still counts as received)."""

    connection_id: int
    body: HandshakeMessage | None

    @property
    def body_valid(self) -> bool:
        return self.body is not None and self.body.message_tag == TAG_PRST


@dataclass(frozen=True)
class Malformed:
    """Total-decode fallback: input matched no known server packet."""

    reason: str = ""


@dataclass(frozen=True)
class UnsupportedCompression:
    """Certificate entry compressed with the shared-dictionary scheme."""

    raw: bytes


CertEntry = Union[bytes, UnsupportedCompression]


@dataclass(frozen=True)
class CertificateChain:
    """Ordered certificate entries, leaf first."""

    entries: tuple[CertEntry, ...]

    def __post_init__(self) -> None:
        if not self.entries:
            raise ValueError("certificate chain must not be empty")

    @property
    def leaf(self) -> CertEntry:
        return self.entries[0]

    def der_entries(self) -> tuple[bytes, ...]:
        """All entries that are plain DER blobs, in chain order."""
        return tuple(e for e in self.entries if isinstance(e, bytes))


@dataclass(frozen=True)
class ServerConfig:
    """Decoded SCFG payload: ids, key exchange and cipher offers, expiry."""

    scid: bytes
    kexs: tuple[bytes, ...]
    aead: tuple[bytes, ...]
    pubs: tuple[bytes, ...]
    expy: int
    vers: tuple[VersionTag, ...] = ()

    def __post_init__(self) -> None:
        if len(self.scid) != 16:
            raise ValueError("scid must be 16 octets")
        if len(self.pubs) != len(self.kexs):
            raise ValueError("one public value per key exchange tag")
        if any(len(t) != 4 for t in self.kexs) or any(len(t) != 4 for t in self.aead):
            raise ValueError("kexs/aead tags must be 4 octets")
        if self.expy <= 0:
            raise ValueError("expy must be positive")


# ---------------------------------------------------------------------------
# handshake message codec

def encode_handshake_message(message: HandshakeMessage) -> bytes:
    if message.message_tag not in MESSAGE_TAGS:
        raise UnknownLayout(f"unknown message tag {message.message_tag!r}")
    if len(message.entries) > MAX_ENTRIES:
        raise OversizeValue(f"{len(message.entries)} entries exceed {MAX_ENTRIES}")
    previous = -1
    total = 0
    for tag, value in message.entries:
        if len(tag) != 4:
            raise WireFormatError(f"entry tag must be 4 octets: {tag!r}")
        key = tag_sort_key(tag)
        if key <= previous:
            raise UnsortedTags(f"entry tag {tag!r} out of order")
        previous = key
        total += len(value)
    if total > MAX_VALUE_REGION:
        raise OversizeValue(f"value region of {total} octets exceeds 2^32-1")
    parts = [message.message_tag, len(message.entries).to_bytes(2, "little"), b"\x00\x00"]
    offset = 0
    for tag, value in message.entries:
        offset += len(value)
        parts.append(tag)
        parts.append(offset.to_bytes(4, "little"))
    parts.extend(value for _, value in message.entries)
    return b"".join(parts)


def decode_handshake_message(data: bytes) -> HandshakeMessage:
    if len(data) < 8:
        raise Truncated(f"message header needs 8 octets, got {len(data)}")
    message_tag = bytes(data[0:4])
    if message_tag not in MESSAGE_TAGS:
        raise UnknownLayout(f"unknown message tag {message_tag!r}")
    count = int.from_bytes(data[4:6], "little")
    if data[6:8] != b"\x00\x00":
        raise UnknownLayout("directory padding octets must be zero")
    directory_end = 8 + 8 * count
    if len(data) < directory_end:
        raise Truncated("entry directory extends past input")
    tags: list[bytes] = []
    offsets: list[int] = []
    previous_key = -1
    previous_offset = 0
    for i in range(count):
        base = 8 + 8 * i
        tag = bytes(data[base : base + 4])
        offset = int.from_bytes(data[base + 4 : base + 8], "little")
        key = tag_sort_key(tag)
        if key <= previous_key:
            raise UnsortedTags(f"entry tag {tag!r} out of order")
        if offset < previous_offset:
            raise NonMonotonicOffsets(f"end offset {offset} decreases")
        previous_key = key
        previous_offset = offset
        tags.append(tag)
        offsets.append(offset)
    declared = offsets[-1] if offsets else 0
    available = len(data) - directory_end
    if available < declared:
        raise Truncated(f"value region declares {declared} octets, {available} present")
    if available > declared:
        raise UnknownLayout(f"{available - declared} trailing octets after value region")
    entries = []
    start = 0
    for tag, offset in zip(tags, offsets):
        entries.append((tag, bytes(data[directory_end + start : directory_end + offset])))
        start = offset
    return HandshakeMessage(message_tag, tuple(entries))


# ---------------------------------------------------------------------------
# packet codecs

def _flags_for(header: PublicHeader) -> int:
    flags = 0
    if header.version is not None:
        flags |= FLAG_VERSION
    if header.public_reset:
        flags |= FLAG_RESET
    if header.connection_id is not None:
        flags |= FLAG_CID
    if not header.public_reset:
        flags |= _PN_WIDTHS.index(header.packet_number_width) << _PN_WIDTH_SHIFT
    return flags


def encode_public_header(header: PublicHeader) -> bytes:
    parts = [bytes([_flags_for(header)])]
    if header.connection_id is not None:
        parts.append(header.connection_id.to_bytes(8, "little"))
    if header.version is not None:
        parts.append(header.version.value)
    if not header.public_reset:
        parts.append(header.packet_number.to_bytes(header.packet_number_width, "little"))
    return b"".join(parts)


def decode_public_header(data: bytes) -> tuple[PublicHeader, int]:
    """Decode a header prefix; returns the header and octets consumed."""
    if not data:
        raise Truncated("empty packet")
    flags = data[0]
    offset = 1
    connection_id = None
    if flags & FLAG_CID:
        if len(data) < offset + 8:
            raise Truncated("connection id extends past input")
        connection_id = int.from_bytes(data[offset : offset + 8], "little")
        offset += 8
    if flags & FLAG_RESET:
        return (
            PublicHeader(connection_id=connection_id, public_reset=True),
            offset,
        )
    version = None
    if flags & FLAG_VERSION:
        if len(data) < offset + 4:
            raise Truncated("version tag extends past input")
        version = VersionTag(bytes(data[offset : offset + 4]))
        offset += 4
    width = _PN_WIDTHS[(flags & _PN_WIDTH_MASK) >> _PN_WIDTH_SHIFT]
    if len(data) < offset + width:
        raise Truncated("packet number extends past input")
    packet_number = int.from_bytes(data[offset : offset + width], "little")
    offset += width
    return (
        PublicHeader(
            connection_id=connection_id,
            version=version,
            packet_number=packet_number,
            packet_number_width=width,
        ),
        offset,
    )


def encode_version_negotiation(packet: VersionNegotiationPacket) -> bytes:
    parts = [
        bytes([FLAG_VERSION | FLAG_CID]),
        packet.connection_id.to_bytes(8, "little"),
    ]
    parts.extend(v.value for v in packet.versions)
    return b"".join(parts)


def decode_version_negotiation(data: bytes) -> VersionNegotiationPacket:
    if len(data) < 9:
        raise Truncated("version negotiation needs flags plus connection id")
    if data[0] != (FLAG_VERSION | FLAG_CID):
        raise UnknownLayout(f"flags {data[0]:#04x} are not a version negotiation")
    connection_id = int.from_bytes(data[1:9], "little")
    body = data[9:]
    if not body:
        raise UnknownLayout("version negotiation lists no versions")
    if len(body) % 4:
        raise Truncated("version list ends mid-tag")
    versions = tuple(VersionTag(bytes(body[i : i + 4])) for i in range(0, len(body), 4))
    return VersionNegotiationPacket(connection_id, versions)


def encode_public_reset(packet: PublicResetPacket) -> bytes:
    if packet.body is None or packet.body.message_tag != TAG_PRST:
        raise WireFormatError("public reset body must be a PRST message")
    return (
        bytes([FLAG_RESET | FLAG_CID])
        + packet.connection_id.to_bytes(8, "little")
        + encode_handshake_message(packet.body)
    )


def decode_public_reset(data: bytes) -> PublicResetPacket:
    if len(data) < 9:
        raise Truncated("public reset needs flags plus connection id")
    if not data[0] & FLAG_RESET or not data[0] & FLAG_CID:
        raise UnknownLayout(f"flags {data[0]:#04x} are not a public reset")
    connection_id = int.from_bytes(data[1:9], "little")
    try:
        body = decode_handshake_message(data[9:])
        if body.message_tag != TAG_PRST:
            body = None
    except WireFormatError:
        body = None
    return PublicResetPacket(connection_id, body)


def encode_data_packet(header: PublicHeader, message: HandshakeMessage) -> bytes:
    if header.public_reset:
        raise WireFormatError("data packets must not set the reset flag")
    return encode_public_header(header) + encode_handshake_message(message)


def decode_data_packet(data: bytes) -> tuple[PublicHeader, HandshakeMessage]:
    header, consumed = decode_public_header(data)
    if header.public_reset:
        raise UnknownLayout("reset flag set on a data packet")
    return header, decode_handshake_message(data[consumed:])


ServerResponse = Union[VersionNegotiationPacket, PublicResetPacket, HandshakeMessage, Malformed]


def decode_server_response(data: bytes) -> ServerResponse:
    """Classify a server datagram; total over arbitrary inputs.

    Reset-flagged packets with a well-formed header classify as
    PublicReset even when the PRST body does not parse (body validity
    is carried separately on the packet).
    """
    if not data:
        return Malformed("empty datagram")
    flags = data[0]
    try:
        if flags & FLAG_RESET:
            if flags != (FLAG_RESET | FLAG_CID):
                return Malformed(f"unexpected reset flags {flags:#04x}")
            return decode_public_reset(data)
        if flags & FLAG_VERSION:
            if flags != (FLAG_VERSION | FLAG_CID):
                return Malformed(f"unexpected negotiation flags {flags:#04x}")
            return decode_version_negotiation(data)
        _, message = decode_data_packet(data)
        return message
    except WireFormatError as exc:
        return Malformed(str(exc))


def peek_connection_id(data: bytes) -> int | None:
    """Connection id from any packet that carries one, without full decode."""
    if len(data) < 9 or not data[0] & FLAG_CID:
        return None
    return int.from_bytes(data[1:9], "little")


# ---------------------------------------------------------------------------
# client hello construction

def build_chlo_packet(
    connection_id: int,
    version: VersionTag,
    tags: Mapping[bytes, bytes],
    pad_to: int,
    packet_number: int = 1,
) -> bytes:
    """Full client packet holding a CHLO padded (via the PAD tag) to
    exactly `pad_to` octets of UDP payload."""
    if pad_to > MAX_PROBE_SIZE:
        raise WireFormatError(f"pad_to {pad_to} exceeds the {MAX_PROBE_SIZE}-octet cap")
    header = encode_public_header(
        PublicHeader(connection_id=connection_id, version=version, packet_number=packet_number)
    )
    body_tags = dict(tags)
    body_tags.pop(TAG_PAD, None)
    entry_count = len(body_tags) + 1
    fixed = len(header) + 8 + 8 * entry_count + sum(len(v) for v in body_tags.values())
    pad_len = pad_to - fixed
    if pad_len < 0:
        raise PadTooSmall(f"mandatory fields need {fixed} octets, pad_to is {pad_to}")
    body_tags[TAG_PAD] = b"\x00" * pad_len
    packet = header + encode_handshake_message(HandshakeMessage.from_tags(TAG_CHLO, body_tags))
    assert len(packet) == pad_to
    return packet


def build_probe_chlo(
    connection_id: int,
    version: VersionTag,
    pad_to: int,
    sni: str | None = None,
) -> bytes:
    """Single-packet capability probe: CHLO with PAD, VER and optional SNI."""
    tags: dict[bytes, bytes] = {TAG_VER: version.value}
    if sni:
        tags[TAG_SNI] = sni.encode("ascii")
    return build_chlo_packet(connection_id, version, tags, pad_to)


# ---------------------------------------------------------------------------
# server config codec

def server_config_to_message(config: ServerConfig) -> HandshakeMessage:
    pubs = b"".join(len(p).to_bytes(3, "little") + p for p in config.pubs)
    return HandshakeMessage.from_tags(
        TAG_SCFG,
        {
            TAG_SCID: config.scid,
            TAG_KEXS: b"".join(config.kexs),
            TAG_AEAD: b"".join(config.aead),
            TAG_PUBS: pubs,
            TAG_EXPY: config.expy.to_bytes(8, "little"),
            TAG_VER: b"".join(v.value for v in config.vers),
        },
    )


def server_config_from_message(message: HandshakeMessage) -> ServerConfig:
    if message.message_tag != TAG_SCFG:
        raise MalformedServerConfig(f"not an SCFG message: {message.message_tag!r}")

    def require(tag: bytes) -> bytes:
        value = message.value(tag)
        if value is None:
            raise MalformedServerConfig(f"SCFG missing tag {tag!r}")
        return value

    scid = require(TAG_SCID)
    kexs_raw = require(TAG_KEXS)
    aead_raw = require(TAG_AEAD)
    pubs_raw = require(TAG_PUBS)
    expy_raw = require(TAG_EXPY)
    vers_raw = message.value(TAG_VER) or b""
    if len(kexs_raw) % 4 or len(aead_raw) % 4 or len(vers_raw) % 4:
        raise MalformedServerConfig("tag lists must be multiples of 4 octets")
    if len(expy_raw) != 8:
        raise MalformedServerConfig("EXPY must be 8 octets")
    pubs = []
    offset = 0
    while offset < len(pubs_raw):
        if offset + 3 > len(pubs_raw):
            raise MalformedServerConfig("PUBS length prefix truncated")
        size = int.from_bytes(pubs_raw[offset : offset + 3], "little")
        offset += 3
        if offset + size > len(pubs_raw):
            raise MalformedServerConfig("PUBS value truncated")
        pubs.append(bytes(pubs_raw[offset : offset + size]))
        offset += size
    try:
        return ServerConfig(
            scid=bytes(scid),
            kexs=tuple(bytes(kexs_raw[i : i + 4]) for i in range(0, len(kexs_raw), 4)),
            aead=tuple(bytes(aead_raw[i : i + 4]) for i in range(0, len(aead_raw), 4)),
            pubs=tuple(pubs),
            expy=int.from_bytes(expy_raw, "little"),
            vers=tuple(VersionTag(bytes(vers_raw[i : i + 4])) for i in range(0, len(vers_raw), 4)),
        )
    except ValueError as exc:
        raise MalformedServerConfig(str(exc)) from exc


# ---------------------------------------------------------------------------
# certificate chain blob codec

_COMPRESS_NONE = 0
_COMPRESS_ZLIB = 1
_COMPRESS_SHARED_DICT = 2


def encode_cert_chain(chain: CertificateChain, compress: bool = False) -> bytes:
    """CRT tag payload: entry count, then per entry a scheme octet,
    a 4-octet little-endian length, and the payload."""
    if len(chain.entries) > 0xFF:
        raise OversizeValue("more than 255 chain entries")
    parts = [bytes([len(chain.entries)])]
    for entry in chain.entries:
        if isinstance(entry, UnsupportedCompression):
            scheme, payload = _COMPRESS_SHARED_DICT, entry.raw
        elif compress:
            scheme, payload = _COMPRESS_ZLIB, zlib.compress(entry)
        else:
            scheme, payload = _COMPRESS_NONE, entry
        parts.append(bytes([scheme]))
        parts.append(len(payload).to_bytes(4, "little"))
        parts.append(payload)
    return b"".join(parts)


def decode_cert_chain(data: bytes) -> CertificateChain:
    if not data:
        raise Truncated("empty certificate chain blob")
    count = data[0]
    if count == 0:
        raise UnknownLayout("certificate chain blob lists no entries")
    offset = 1
    entries: list[CertEntry] = []
    for _ in range(count):
        if offset + 5 > len(data):
            raise Truncated("chain entry header truncated")
        scheme = data[offset]
        size = int.from_bytes(data[offset + 1 : offset + 5], "little")
        offset += 5
        if offset + size > len(data):
            raise Truncated("chain entry payload truncated")
        payload = bytes(data[offset : offset + size])
        offset += size
        if scheme == _COMPRESS_NONE:
            entries.append(payload)
        elif scheme == _COMPRESS_ZLIB:
            decomp = zlib.decompressobj()
            try:
                plain = decomp.decompress(payload, MAX_CERT_ENTRY + 1)
            except zlib.error as exc:
                raise UnknownLayout(f"zlib entry failed to inflate: {exc}") from exc
            if len(plain) > MAX_CERT_ENTRY or not decomp.eof:
                raise UnknownLayout("zlib entry exceeds the inflation cap")
            entries.append(plain)
        elif scheme == _COMPRESS_SHARED_DICT:
            entries.append(UnsupportedCompression(payload))
        else:
            raise UnknownLayout(f"unknown compression scheme {scheme}")
    if offset != len(data):
        raise UnknownLayout(f"{len(data) - offset} trailing octets after chain entries")
    return CertificateChain(tuple(entries))
