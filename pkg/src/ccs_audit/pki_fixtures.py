"""Deterministic three-level test PKI for TLS-enabled simulator profiles.

Keys derive from fixed scalars so every run builds the same identities;
validity windows are anchored at a fixed date so chain validation can be
reproduced with an injected time.
"""

from __future__ import annotations

import datetime as dt
import functools
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional

from cryptography import x509
from cryptography.hazmat.primitives import hashes, serialization
from cryptography.hazmat.primitives.asymmetric import ec
from cryptography.x509.oid import NameOID

from ccs_audit.constants import (
    FIXTURE_PKI_ANCHOR,
    FIXTURE_PKI_VALID_DAYS,
    FIXTURE_ROOT_NAME,
)
from ccs_audit.tls_probe import TrustRoot, TrustStore

logger = logging.getLogger(__name__)

FIXTURE_ROOT_CN = "Hubject V2G Root CA (test fixture)"
FIXTURE_SUB_CA_CN = "CPO Sub-CA 1 (test fixture)"
FIXTURE_LEAF_CN = "DE*CCS*E00001"

_ROOT_SCALAR = 0x5EED_0001
_SUB_CA_SCALAR = 0x5EED_0002
_LEAF_SCALAR = 0x5EED_0003


def _anchor() -> dt.datetime:
    return dt.datetime.fromisoformat(FIXTURE_PKI_ANCHOR)


def _name(common_name: str) -> x509.Name:
    return x509.Name(
        [
            x509.NameAttribute(NameOID.COMMON_NAME, common_name),
            x509.NameAttribute(NameOID.ORGANIZATION_NAME, "ccs-audit fixture"),
            x509.NameAttribute(NameOID.COUNTRY_NAME, "DE"),
        ]
    )


def _key(scalar: int) -> ec.EllipticCurvePrivateKey:
    return ec.derive_private_key(scalar, ec.SECP256R1())


def _certificate(
    subject: str,
    key: ec.EllipticCurvePrivateKey,
    issuer: str,
    issuer_key: ec.EllipticCurvePrivateKey,
    serial: int,
    not_before: dt.datetime,
    not_after: dt.datetime,
    ca: bool,
    path_length: Optional[int] = None,
) -> x509.Certificate:
    builder = (
        x509.CertificateBuilder()
        .subject_name(_name(subject))
        .issuer_name(_name(issuer))
        .public_key(key.public_key())
        .serial_number(serial)
        .not_valid_before(not_before)
        .not_valid_after(not_after)
        .add_extension(x509.BasicConstraints(ca=ca, path_length=path_length), critical=True)
        .add_extension(
            x509.KeyUsage(
                digital_signature=not ca,
                content_commitment=False,
                key_encipherment=False,
                data_encipherment=False,
                key_agreement=not ca,
                key_cert_sign=ca,
                crl_sign=ca,
                encipher_only=False,
                decipher_only=False,
            ),
            critical=True,
        )
        .add_extension(
            x509.SubjectKeyIdentifier.from_public_key(key.public_key()), critical=False
        )
    )
    return builder.sign(private_key=issuer_key, algorithm=hashes.SHA256())


@dataclass(frozen=True)
class FixturePki:
    """Root, sub-CA and SECC leaf with their keys.

    Example:
        >>> pki = default_fixture_pki()
        >>> pki.root_name
        'hubject-v2g-root'
    """

    root_name: str
    root: x509.Certificate
    sub_ca: x509.Certificate
    leaf: x509.Certificate
    leaf_key: ec.EllipticCurvePrivateKey

    def chain_der(self) -> List[bytes]:
        """Chain as presented by the SECC: leaf first, root omitted."""

        return [
            cert.public_bytes(serialization.Encoding.DER) for cert in (self.leaf, self.sub_ca)
        ]

    def chain_pem(self) -> bytes:
        return b"".join(
            cert.public_bytes(serialization.Encoding.PEM) for cert in (self.leaf, self.sub_ca)
        )

    def leaf_key_pem(self) -> bytes:
        return self.leaf_key.private_bytes(
            encoding=serialization.Encoding.PEM,
            format=serialization.PrivateFormat.PKCS8,
            encryption_algorithm=serialization.NoEncryption(),
        )

    def trust_store(self) -> TrustStore:
        return TrustStore(
            roots=(
                TrustRoot(
                    name=self.root_name,
                    certificate=self.root.public_bytes(serialization.Encoding.DER),
                ),
            )
        )

    def write(self, out_dir: Path) -> Path:
        """Write `trust/<root>.pem`, `chain.pem` and `leaf.key` under `out_dir`."""

        trust_dir = out_dir / "trust"
        trust_dir.mkdir(parents=True, exist_ok=True)
        (trust_dir / f"{self.root_name}.pem").write_bytes(
            self.root.public_bytes(serialization.Encoding.PEM)
        )
        (out_dir / "chain.pem").write_bytes(self.chain_pem())
        (out_dir / "leaf.key").write_bytes(self.leaf_key_pem())
        logger.info("wrote fixture PKI to %s", out_dir)
        return out_dir


def build_fixture_pki(
    root_name: str = FIXTURE_ROOT_NAME,
    root_common_name: str = FIXTURE_ROOT_CN,
    leaf_common_name: str = FIXTURE_LEAF_CN,
    valid_days: int = FIXTURE_PKI_VALID_DAYS,
    leaf_expired: bool = False,
    key_offset: int = 0,
) -> FixturePki:
    """Build root -> sub-CA -> leaf.

    Args:
        root_name: Trust-store name for the root (file stem on disk).
        root_common_name: Root subject CN.
        leaf_common_name: Leaf CN; carries the EVSE id.
        valid_days: Window length from the anchor date for every certificate.
        leaf_expired: Leaf not_after one day before the anchor instead.
        key_offset: Shifts the key scalars, producing an unrelated hierarchy.

    Returns:
        The fixture hierarchy.
    """

    anchor = _anchor()
    not_after = anchor + dt.timedelta(days=valid_days)
    root_key = _key(_ROOT_SCALAR + key_offset)
    sub_key = _key(_SUB_CA_SCALAR + key_offset)
    leaf_key = _key(_LEAF_SCALAR + key_offset)
    root = _certificate(
        subject=root_common_name,
        key=root_key,
        issuer=root_common_name,
        issuer_key=root_key,
        serial=0x1001 + key_offset,
        not_before=anchor,
        not_after=not_after,
        ca=True,
    )
    sub_ca = _certificate(
        subject=FIXTURE_SUB_CA_CN,
        key=sub_key,
        issuer=root_common_name,
        issuer_key=root_key,
        serial=0x2001 + key_offset,
        not_before=anchor,
        not_after=not_after,
        ca=True,
        path_length=0,
    )
    leaf_not_before = anchor - dt.timedelta(days=365) if leaf_expired else anchor
    leaf_not_after = anchor - dt.timedelta(days=1) if leaf_expired else not_after
    leaf = _certificate(
        subject=leaf_common_name,
        key=leaf_key,
        issuer=FIXTURE_SUB_CA_CN,
        issuer_key=sub_key,
        serial=0x3001 + key_offset + (1 if leaf_expired else 0),
        not_before=leaf_not_before,
        not_after=leaf_not_after,
        ca=False,
    )
    return FixturePki(
        root_name=root_name, root=root, sub_ca=sub_ca, leaf=leaf, leaf_key=leaf_key
    )


@functools.lru_cache(maxsize=None)
def default_fixture_pki(leaf_expired: bool = False) -> FixturePki:
    return build_fixture_pki(leaf_expired=leaf_expired)
