"""Header-only pcap ingestion: one FlowRecord per captured packet.

Only the link/IP/transport headers are read, which is all the port and
protocol classification needs; byte counts come from the record's
original wire length, so snap-length capped captures still tally full
traffic volumes.
"""

from __future__ import annotations

import struct
from typing import BinaryIO, Iterator

from .traffic import FlowRecord

_MAGIC_LE_US = 0xA1B2C3D4
_MAGIC_BE_US = 0xD4C3B2A1
_MAGIC_LE_NS = 0xA1B23C4D
_MAGIC_BE_NS = 0x4D3CB2A1

LINKTYPE_ETHERNET = 1
LINKTYPE_RAW = 101

_ETHERTYPE_IPV4 = 0x0800
_ETHERTYPE_IPV6 = 0x86DD
_ETHERTYPE_VLAN = 0x8100

_PROTO_TCP = 6
_PROTO_UDP = 17


class PcapError(ValueError):
    pass


def _ip_payload(packet: bytes, linktype: int) -> bytes | None:
    if linktype == LINKTYPE_RAW:
        return packet
    if linktype != LINKTYPE_ETHERNET or len(packet) < 14:
        return None
    ethertype = int.from_bytes(packet[12:14], "big")
    offset = 14
    while ethertype == _ETHERTYPE_VLAN and len(packet) >= offset + 4:
        ethertype = int.from_bytes(packet[offset + 2 : offset + 4], "big")
        offset += 4
    if ethertype not in (_ETHERTYPE_IPV4, _ETHERTYPE_IPV6):
        return None
    return packet[offset:]


def _parse_ip(payload: bytes) -> tuple[str, str, int, int, int] | None:
    """(src, dst, proto, sport, dport); ports are 0 when unavailable."""
    if not payload:
        return None
    version = payload[0] >> 4
    if version == 4:
        if len(payload) < 20:
            return None
        ihl = (payload[0] & 0x0F) * 4
        proto = payload[9]
        src = ".".join(str(b) for b in payload[12:16])
        dst = ".".join(str(b) for b in payload[16:20])
        transport = payload[ihl:]
    elif version == 6:
        if len(payload) < 40:
            return None
        import ipaddress

        proto = payload[6]
        src = str(ipaddress.IPv6Address(payload[8:24]))
        dst = str(ipaddress.IPv6Address(payload[24:40]))
        transport = payload[40:]
    else:
        return None
    sport = dport = 0
    if proto in (_PROTO_TCP, _PROTO_UDP) and len(transport) >= 4:
        sport, dport = struct.unpack("!HH", transport[:4])
    return src, dst, proto, sport, dport


def read_pcap_flows(stream: BinaryIO) -> Iterator[FlowRecord]:
    header = stream.read(24)
    if len(header) < 24:
        raise PcapError("pcap global header truncated")
    magic = struct.unpack("<I", header[:4])[0]
    if magic in (_MAGIC_LE_US, _MAGIC_LE_NS):
        endian = "<"
    elif magic in (_MAGIC_BE_US, _MAGIC_BE_NS):
        endian = ">"
        magic = struct.unpack(">I", header[:4])[0]
    else:
        raise PcapError(f"unknown pcap magic {magic:#010x}")
    nanos = magic == _MAGIC_LE_NS
    linktype = struct.unpack(f"{endian}I", header[20:24])[0]
    if linktype not in (LINKTYPE_ETHERNET, LINKTYPE_RAW):
        raise PcapError(f"unsupported linktype {linktype}")

    while True:
        record = stream.read(16)
        if not record:
            return
        if len(record) < 16:
            raise PcapError("pcap record header truncated")
        ts_sec, ts_frac, incl_len, orig_len = struct.unpack(f"{endian}IIII", record)
        packet = stream.read(incl_len)
        if len(packet) < incl_len:
            raise PcapError("pcap record body truncated")
        ts = ts_sec + ts_frac / (1e9 if nanos else 1e6)
        parsed = None
        payload = _ip_payload(packet, linktype)
        if payload is not None:
            parsed = _parse_ip(payload)
        if parsed is None:
            yield FlowRecord(
                start=ts,
                src_addr=None,
                dst_addr=None,
                transport="other",
                src_port=0,
                dst_port=0,
                bytes=max(orig_len, 1),
                packets=1,
            )
            continue
        src, dst, proto, sport, dport = parsed
        transport = {_PROTO_TCP: "tcp", _PROTO_UDP: "udp"}.get(proto, "other")
        yield FlowRecord(
            start=ts,
            src_addr=src,
            dst_addr=dst,
            transport=transport,
            src_port=sport,
            dst_port=dport,
            bytes=max(orig_len, 1),
            packets=1,
        )
