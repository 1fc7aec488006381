"""Alt-Svc advertisement checks over TCP HTTP(S).

Chrome-era discovery required servers to advertise their QUIC endpoint
in an Alt-Svc header on the TCP side; this module fetches "/" and
parses every alternative plus the advertised QUIC version list.
"""

from __future__ import annotations

import http.client
import socket
import ssl
from dataclasses import dataclass


class ConnectFailed(Exception):
    pass


class TlsFailed(Exception):
    pass


@dataclass(frozen=True)
class AltSvcEntry:
    protocol_id: str
    host: str  # empty means "same host"
    port: int
    versions: tuple[int, ...] = ()
    max_age: int = 86400  # RFC 7838 default


@dataclass(frozen=True)
class AltSvcAdvertisement:
    source: str  # "http" | "https"
    protocols: tuple[AltSvcEntry, ...]

    def requires_version(self, version: int) -> bool:
        """True iff some alternative advertises the given QUIC version."""
        return any(version in entry.versions for entry in self.protocols)


def _split_unquoted(text: str, separator: str) -> list[str]:
    parts = []
    current = []
    quoted = False
    i = 0
    while i < len(text):
        ch = text[i]
        if ch == '"':
            quoted = not quoted
            current.append(ch)
        elif ch == "\\" and quoted and i + 1 < len(text):
            current.append(text[i : i + 2])
            i += 1
        elif ch == separator and not quoted:
            parts.append("".join(current))
            current = []
        else:
            current.append(ch)
        i += 1
    parts.append("".join(current))
    return parts


def _unquote(value: str) -> str:
    value = value.strip()
    if len(value) >= 2 and value[0] == '"' and value[-1] == '"':
        inner = value[1:-1]
        return inner.replace('\\"', '"').replace("\\\\", "\\")
    return value


def parse_alt_svc(header_value: str) -> tuple[AltSvcEntry, ...]:
    """Alternatives from one Alt-Svc header value; `clear` and
    unparsable alternatives yield nothing (lenient by design)."""
    text = header_value.strip()
    if not text or text.lower() == "clear":
        return ()
    entries = []
    for alternative in _split_unquoted(text, ","):
        fields = _split_unquoted(alternative, ";")
        head = fields[0].strip()
        if "=" not in head:
            continue
        protocol_id, _, authority = head.partition("=")
        protocol_id = protocol_id.strip()
        authority = _unquote(authority)
        host, _, port_text = authority.rpartition(":")
        try:
            port = int(port_text)
        except ValueError:
            continue
        versions: tuple[int, ...] = ()
        max_age = 86400
        for parameter in fields[1:]:
            name, _, value = parameter.partition("=")
            name = name.strip().lower()
            value = _unquote(value)
            if name == "ma":
                try:
                    max_age = int(value)
                except ValueError:
                    pass
            elif name == "v":
                parsed = []
                for item in value.split(","):
                    item = item.strip()
                    if item.isdigit():
                        parsed.append(int(item))
                versions = tuple(parsed)
        entries.append(
            AltSvcEntry(
                protocol_id=protocol_id,
                host=host,
                port=port,
                versions=versions,
                max_age=max_age,
            )
        )
    return tuple(entries)


def check_alt_svc(
    name: str,
    port: int,
    *,
    tls: bool | None = None,
    timeout: float = 10.0,
    verify_tls: bool = False,
) -> AltSvcAdvertisement:
    """HEAD (GET on refusal) for "/" and collect every Alt-Svc header.

    `tls` defaults from the port (443 speaks TLS); certificate
    verification is off by default since this is a measurement path.
    """
    if tls is None:
        tls = port == 443
    source = "https" if tls else "http"
    if tls:
        context = ssl.create_default_context()
        if not verify_tls:
            context.check_hostname = False
            context.verify_mode = ssl.CERT_NONE
        conn: http.client.HTTPConnection = http.client.HTTPSConnection(
            name, port, timeout=timeout, context=context
        )
    else:
        conn = http.client.HTTPConnection(name, port, timeout=timeout)
    try:
        try:
            conn.request("HEAD", "/")
            response = conn.getresponse()
            response.read()
        except (http.client.BadStatusLine, http.client.ResponseNotReady):
            conn.close()
            conn.connect()
            conn.request("GET", "/")
            response = conn.getresponse()
            response.read()
        headers = response.msg.get_all("Alt-Svc") or []
    except ssl.SSLError as exc:
        raise TlsFailed(f"TLS handshake with {name}:{port} failed: {exc}") from exc
    except (OSError, socket.timeout, http.client.HTTPException) as exc:
        raise ConnectFailed(f"HTTP fetch from {name}:{port} failed: {exc}") from exc
    finally:
        conn.close()
    protocols: list[AltSvcEntry] = []
    for header in headers:
        protocols.extend(parse_alt_svc(header))
    return AltSvcAdvertisement(source=source, protocols=tuple(protocols))
