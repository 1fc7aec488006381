"""Shared fixtures: deterministic certificate factories and mock-server
helpers used across the suite."""

from __future__ import annotations

import datetime
from dataclasses import dataclass

import pytest
from cryptography import x509
from cryptography.hazmat.primitives import hashes
from cryptography.hazmat.primitives.asymmetric import ec
from cryptography.hazmat.primitives.serialization import Encoding
from cryptography.x509.oid import NameOID

from quicrecon.wire import CertificateChain, ServerConfig, make_version

NOW = datetime.datetime(2026, 8, 10, 12, 0, 0, tzinfo=datetime.timezone.utc)
YEAR = datetime.timedelta(days=365)


def _name(cn: str) -> x509.Name:
    return x509.Name([x509.NameAttribute(NameOID.COMMON_NAME, cn)])


@dataclass(frozen=True)
class CertMaterial:
    der: bytes
    key: ec.EllipticCurvePrivateKey
    cert: x509.Certificate


def make_cert(
    cn: str,
    sans: tuple[str, ...] = (),
    issuer: CertMaterial | None = None,
    not_before: datetime.datetime = NOW - YEAR,
    not_after: datetime.datetime = NOW + YEAR,
    is_ca: bool = False,
) -> CertMaterial:
    key = ec.generate_private_key(ec.SECP256R1())
    issuer_name = issuer.cert.subject if issuer else _name(cn)
    signing_key = issuer.key if issuer else key
    builder = (
        x509.CertificateBuilder()
        .subject_name(_name(cn))
        .issuer_name(issuer_name)
        .public_key(key.public_key())
        .serial_number(x509.random_serial_number())
        .not_valid_before(not_before)
        .not_valid_after(not_after)
        .add_extension(x509.BasicConstraints(ca=is_ca, path_length=None), critical=True)
    )
    if sans:
        builder = builder.add_extension(
            x509.SubjectAlternativeName([x509.DNSName(s) for s in sans]), critical=False
        )
    cert = builder.sign(signing_key, hashes.SHA256())
    return CertMaterial(cert.public_bytes(Encoding.DER), key, cert)


@pytest.fixture(scope="session")
def ca() -> CertMaterial:
    return make_cert("Test Root CA", is_ca=True)


@pytest.fixture(scope="session")
def example_leaf(ca: CertMaterial) -> CertMaterial:
    return make_cert("example.com", sans=("example.com", "*.sub.example.com"), issuer=ca)


@pytest.fixture(scope="session")
def example_chain(example_leaf: CertMaterial, ca: CertMaterial) -> CertificateChain:
    return CertificateChain((example_leaf.der, ca.der))


@pytest.fixture(scope="session")
def self_signed() -> CertMaterial:
    return make_cert("example.com", sans=("example.com",))


def make_scfg(scid: bytes = bytes(range(16)), expy: int = 1_900_000_000) -> ServerConfig:
    return ServerConfig(
        scid=scid,
        kexs=(b"C255",),
        aead=(b"AESG",),
        pubs=(b"\x11" * 32,),
        expy=expy,
        vers=(make_version("Q035"),),
    )
