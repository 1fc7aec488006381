"""X509 chain validation, hostname matching, and leaf fingerprints.

DER parsing and signature checks are delegated to `cryptography`; the
path walk, trust-anchor termination, and DNS-ID matching rules live
here so verdicts stay reproducible against a supplied anchor bundle
rather than an OS trust store.
"""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass
from datetime import datetime, timezone
from typing import Iterable

from cryptography import x509
from cryptography.exceptions import InvalidSignature, UnsupportedAlgorithm
from cryptography.hazmat.primitives.serialization import Encoding
from cryptography.x509.oid import NameOID

from .wire import CertificateChain

_PEM_BLOCK = re.compile(
    b"-----BEGIN CERTIFICATE-----.+?-----END CERTIFICATE-----", re.DOTALL
)


class ParseError(ValueError):
    """A chain entry is not a decodable DER certificate."""


@dataclass(frozen=True)
class CertVerdict:
    chain_ok: bool
    name_match: bool
    not_expired: bool

    @property
    def valid(self) -> bool:
        return self.chain_ok and self.name_match and self.not_expired


def _parse_chain(chain: CertificateChain) -> list[x509.Certificate]:
    certs = []
    for entry in chain.entries:
        if not isinstance(entry, bytes):
            raise ParseError("chain entry uses an unsupported compression scheme")
        try:
            certs.append(x509.load_der_x509_certificate(entry))
        except ValueError as exc:
            raise ParseError(f"chain entry is not DER: {exc}") from exc
    return certs


def _signed_by(subject: x509.Certificate, issuer: x509.Certificate) -> bool:
    try:
        subject.verify_directly_issued_by(issuer)
        return True
    except (ValueError, TypeError, InvalidSignature, UnsupportedAlgorithm):
        return False


def hostname_matches(pattern: str, hostname: str) -> bool:
    """DNS-ID match; a wildcard may only replace the entire left label."""
    pattern = pattern.lower().rstrip(".")
    hostname = hostname.lower().rstrip(".")
    if not pattern or not hostname:
        return False
    if "*" not in pattern:
        return pattern == hostname
    if not pattern.startswith("*."):
        return False
    suffix = pattern[2:]
    if "*" in suffix:
        return False
    left, _, rest = hostname.partition(".")
    return bool(left) and rest == suffix


def validate_certificate(
    chain: CertificateChain,
    sni: str,
    trust_anchors: Iterable[bytes],
    now: datetime,
) -> CertVerdict:
    """Three-part verdict: signature path to an anchor, leaf DNS-ID
    match against `sni`, and leaf validity window containing `now`."""
    certs = _parse_chain(chain)
    anchor_ders = set(trust_anchors)
    anchor_certs = []
    for der in anchor_ders:
        try:
            anchor_certs.append(x509.load_der_x509_certificate(der))
        except ValueError as exc:
            raise ParseError(f"trust anchor is not DER: {exc}") from exc

    chain_ok = all(_signed_by(certs[i], certs[i + 1]) for i in range(len(certs) - 1))
    if chain_ok:
        terminal = certs[-1]
        if terminal.public_bytes(Encoding.DER) not in anchor_ders:
            chain_ok = any(_signed_by(terminal, anchor) for anchor in anchor_certs)

    leaf = certs[0]
    try:
        san = leaf.extensions.get_extension_for_class(x509.SubjectAlternativeName)
        dns_ids = san.value.get_values_for_type(x509.DNSName)
    except x509.ExtensionNotFound:
        dns_ids = []
    name_match = any(hostname_matches(pattern, sni) for pattern in dns_ids)

    if now.tzinfo is None:
        now = now.replace(tzinfo=timezone.utc)
    not_expired = leaf.not_valid_before_utc <= now <= leaf.not_valid_after_utc

    return CertVerdict(chain_ok=chain_ok, name_match=name_match, not_expired=not_expired)


def fingerprint_certificate(chain: CertificateChain) -> str:
    """SHA-256 hex digest over the leaf DER bytes."""
    leaf = chain.leaf
    if not isinstance(leaf, bytes):
        raise ParseError("leaf entry uses an unsupported compression scheme")
    return hashlib.sha256(leaf).hexdigest()


def leaf_common_name(chain: CertificateChain) -> str | None:
    leaf = chain.leaf
    if not isinstance(leaf, bytes):
        return None
    try:
        cert = x509.load_der_x509_certificate(leaf)
    except ValueError:
        return None
    attrs = cert.subject.get_attributes_for_oid(NameOID.COMMON_NAME)
    if not attrs:
        return None
    value = attrs[0].value
    return value if isinstance(value, str) else value.decode("utf-8", "replace")


def load_pem_chain(data: bytes) -> tuple[bytes, ...]:
    """DER entries from a PEM file, preserving order (leaf first)."""
    blocks = _PEM_BLOCK.findall(data)
    if not blocks:
        raise ParseError("no PEM certificate blocks found")
    return tuple(
        x509.load_pem_x509_certificate(block).public_bytes(Encoding.DER)
        for block in blocks
    )


def load_anchor_bundle(data: bytes) -> frozenset[bytes]:
    """Trust anchors from a PEM bundle or a single DER blob."""
    blocks = _PEM_BLOCK.findall(data)
    if blocks:
        return frozenset(load_pem_chain(data))
    try:
        x509.load_der_x509_certificate(data)
    except ValueError as exc:
        raise ParseError(f"anchor bundle is neither PEM nor DER: {exc}") from exc
    return frozenset((data,))


def load_anchor_file(path: str) -> frozenset[bytes]:
    with open(path, "rb") as fh:
        return load_anchor_bundle(fh.read())
