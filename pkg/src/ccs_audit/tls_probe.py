"""TLS client probe toward a discovered SECC and certificate-chain evaluation.

The probe never verifies during the handshake (so unknown or broken chains are
still captured); validation happens afterwards against a local trust store at
an injectable time. Revocation is not checked.
"""

from __future__ import annotations

import datetime as dt
import logging
import socket
import ssl
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

from cryptography import x509
from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives import serialization
from cryptography.hazmat.primitives.asymmetric import ec, rsa
from cryptography.x509.oid import NameOID

from ccs_audit.constants import DEFAULT_TLS_DEADLINE_S
from ccs_audit.errors import InputError

logger = logging.getLogger(__name__)

# ECDHE-ECDSA first; TLS 1.3 suites are not affected by this string.
DEFAULT_CIPHERS = (
    "ECDHE-ECDSA-AES128-GCM-SHA256:ECDHE-ECDSA-AES128-SHA256:"
    "ECDHE-ECDSA-AES256-GCM-SHA384:ECDHE+AESGCM:ECDHE+CHACHA20:!aNULL:!eNULL"
)
TRUST_FILE_SUFFIXES = (".pem", ".crt", ".der", ".cer")

STAGE_TCP_CONNECT = "tcp_connect"
STAGE_HELLO = "hello"
STAGE_CERTIFICATE = "certificate"
STAGE_ALERT = "alert"
STAGE_TIMEOUT = "timeout"

REASON_EMPTY = "empty_chain"
REASON_UNPARSEABLE = "unparseable"
REASON_BROKEN_LINK = "broken_link"
REASON_UNKNOWN_ROOT = "unknown_root"
REASON_EXPIRED = "expired"
REASON_NOT_YET_VALID = "not_yet_valid"


@dataclass(frozen=True)
class TrustRoot:
    name: str
    certificate: bytes

    def load(self) -> x509.Certificate:
        return x509.load_der_x509_certificate(self.certificate)


@dataclass(frozen=True)
class TrustStore:
    """Named V2G root certificates (DER)."""

    roots: Tuple[TrustRoot, ...] = ()

    @property
    def names(self) -> List[str]:
        return [root.name for root in self.roots]

    @classmethod
    def from_directory(cls, path: Path) -> "TrustStore":
        """Load every PEM/DER root in `path`; names are file stems.

        Raises:
            InputError: the directory is missing, or a file is not a
                self-signed CA certificate.
        """

        if not path.is_dir():
            raise InputError(f"trust store directory not found: {path}")
        roots = []
        for item in sorted(path.iterdir()):
            if item.suffix.lower() not in TRUST_FILE_SUFFIXES or not item.is_file():
                continue
            raw = item.read_bytes()
            try:
                cert = (
                    x509.load_pem_x509_certificate(raw)
                    if b"-----BEGIN" in raw
                    else x509.load_der_x509_certificate(raw)
                )
            except ValueError as exc:
                raise InputError(f"{item}: not a certificate ({exc})") from exc
            if not _is_self_signed_ca(cert):
                raise InputError(f"{item}: not a self-signed CA certificate")
            roots.append(
                TrustRoot(
                    name=item.stem,
                    certificate=cert.public_bytes(serialization.Encoding.DER),
                )
            )
        logger.debug("loaded %d trust roots from %s", len(roots), path)
        return cls(roots=tuple(roots))


def _is_self_signed_ca(cert: x509.Certificate) -> bool:
    try:
        constraints = cert.extensions.get_extension_for_class(x509.BasicConstraints)
    except x509.ExtensionNotFound:
        return False
    if not constraints.value.ca or cert.subject != cert.issuer:
        return False
    return _issued_by(cert, cert)


def _issued_by(cert: x509.Certificate, issuer: x509.Certificate) -> bool:
    try:
        cert.verify_directly_issued_by(issuer)
    except (ValueError, TypeError, InvalidSignature):
        return False
    return True


def _key_algorithm(cert: x509.Certificate) -> str:
    key = cert.public_key()
    if isinstance(key, ec.EllipticCurvePublicKey):
        return f"EC {key.curve.name}"
    if isinstance(key, rsa.RSAPublicKey):
        return f"RSA {key.key_size}"
    return type(key).__name__


def _common_name(name: x509.Name) -> Optional[str]:
    values = name.get_attributes_for_oid(NameOID.COMMON_NAME)
    return str(values[0].value) if values else None


@dataclass(frozen=True)
class CertificateSummary:
    subject: str
    issuer: str
    not_before: str
    not_after: str
    key_algorithm: str
    serial: str
    secc_identity: Optional[str] = None

    @classmethod
    def from_certificate(cls, cert: x509.Certificate) -> "CertificateSummary":
        return cls(
            subject=cert.subject.rfc4514_string(),
            issuer=cert.issuer.rfc4514_string(),
            not_before=cert.not_valid_before_utc.isoformat(),
            not_after=cert.not_valid_after_utc.isoformat(),
            key_algorithm=_key_algorithm(cert),
            serial=f"{cert.serial_number:x}",
            secc_identity=_common_name(cert.subject),
        )

    def to_dict(self) -> Dict[str, Any]:
        return {
            "subject": self.subject,
            "issuer": self.issuer,
            "not_before": self.not_before,
            "not_after": self.not_after,
            "key_algorithm": self.key_algorithm,
            "serial": self.serial,
            "secc_identity": self.secc_identity,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "CertificateSummary":
        return cls(
            subject=str(data.get("subject", "")),
            issuer=str(data.get("issuer", "")),
            not_before=str(data.get("not_before", "")),
            not_after=str(data.get("not_after", "")),
            key_algorithm=str(data.get("key_algorithm", "")),
            serial=str(data.get("serial", "")),
            secc_identity=data.get("secc_identity"),
        )


@dataclass(frozen=True)
class ChainVerdict:
    valid: bool
    matched_root: Optional[str] = None
    reason: Optional[str] = None

    def __post_init__(self) -> None:
        assert self.valid == (self.matched_root is not None)
        assert self.valid == (self.reason is None)


def _window_reason(cert: x509.Certificate, at_time: dt.datetime) -> Optional[str]:
    if at_time < cert.not_valid_before_utc:
        return REASON_NOT_YET_VALID
    if at_time > cert.not_valid_after_utc:
        return REASON_EXPIRED
    return None


def validate_chain(
    chain: Sequence[bytes], trust: TrustStore, at_time: dt.datetime
) -> ChainVerdict:
    """Path-validate a presented chain (leaf first) against `trust`.

    Checks, in order: every element parses; each certificate is signed by
    the next; the last one is a trust root or issued by one; every window
    (root included) contains `at_time`.

    Args:
        chain: DER certificates, leaf first.
        trust: Trust anchors.
        at_time: Timezone-aware validation time.

    Returns:
        Verdict with the matched root name, or the first failure reason.
    """

    if not chain:
        return ChainVerdict(valid=False, reason=REASON_EMPTY)
    try:
        certs = [x509.load_der_x509_certificate(item) for item in chain]
    except ValueError:
        return ChainVerdict(valid=False, reason=REASON_UNPARSEABLE)
    for child, parent in zip(certs, certs[1:]):
        if not _issued_by(child, parent):
            return ChainVerdict(valid=False, reason=REASON_BROKEN_LINK)
    top = certs[-1]
    anchor: Optional[Tuple[str, x509.Certificate]] = None
    for root in trust.roots:
        root_cert = root.load()
        if root.certificate == chain[-1] or _issued_by(top, root_cert):
            anchor = (root.name, root_cert)
            break
    if anchor is None:
        return ChainVerdict(valid=False, reason=REASON_UNKNOWN_ROOT)
    for cert in certs + [anchor[1]]:
        reason = _window_reason(cert, at_time)
        if reason is not None:
            return ChainVerdict(valid=False, reason=reason)
    return ChainVerdict(valid=True, matched_root=anchor[0])


def summarize_chain(
    chain: Sequence[bytes], trust: TrustStore, at_time: dt.datetime
) -> Tuple[bool, Optional[str]]:
    verdict = validate_chain(chain=chain, trust=trust, at_time=at_time)
    return verdict.valid, verdict.matched_root


@dataclass(frozen=True)
class TlsProbeResult:
    """Everything observed while attempting a TLS session.

    `chain_der` keeps the raw evidence for PEM export; `session_result` is
    whatever the session hook returned while the channel was open.
    """

    handshake_ok: bool
    tls_version: Optional[str] = None
    cipher_suite: Optional[str] = None
    presented_chain: Tuple[CertificateSummary, ...] = ()
    chain_valid: bool = False
    matched_root: Optional[str] = None
    validation_reason: Optional[str] = None
    failure_stage: Optional[str] = None
    detail: str = ""
    chain_der: Tuple[bytes, ...] = field(default=(), compare=False, repr=False)
    session_result: Any = field(default=None, compare=False, repr=False)

    def __post_init__(self) -> None:
        assert self.handshake_ok == (self.failure_stage is None)
        if self.chain_valid:
            assert self.handshake_ok and self.matched_root is not None

    def to_dict(self) -> Dict[str, Any]:
        return {
            "handshake_ok": self.handshake_ok,
            "tls_version": self.tls_version,
            "cipher_suite": self.cipher_suite,
            "presented_chain": [item.to_dict() for item in self.presented_chain],
            "chain_valid": self.chain_valid,
            "matched_root": self.matched_root,
            "validation_reason": self.validation_reason,
            "failure_stage": self.failure_stage,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "TlsProbeResult":
        return cls(
            handshake_ok=bool(data.get("handshake_ok")),
            tls_version=data.get("tls_version"),
            cipher_suite=data.get("cipher_suite"),
            presented_chain=tuple(
                CertificateSummary.from_dict(item) for item in data.get("presented_chain", [])
            ),
            chain_valid=bool(data.get("chain_valid")),
            matched_root=data.get("matched_root"),
            validation_reason=data.get("validation_reason"),
            failure_stage=data.get("failure_stage"),
        )


def client_context(ciphers: str = DEFAULT_CIPHERS) -> ssl.SSLContext:
    context = ssl.SSLContext(ssl.PROTOCOL_TLS_CLIENT)
    context.check_hostname = False
    context.verify_mode = ssl.CERT_NONE
    context.minimum_version = ssl.TLSVersion.TLSv1_2
    context.set_ciphers(ciphers)
    return context


def _peer_chain(sock: ssl.SSLSocket) -> List[bytes]:
    getter = getattr(sock, "get_unverified_chain", None)
    if getter is None:
        getter = getattr(getattr(sock, "_sslobj", None), "get_unverified_chain", None)
    items = getter() if getter is not None else None
    if items:
        return [
            item if isinstance(item, bytes) else ssl.PEM_cert_to_DER_cert(item.public_bytes())
            for item in items
        ]
    leaf = sock.getpeercert(binary_form=True)
    return [leaf] if leaf else []


def _failure(stage: str, detail: str) -> TlsProbeResult:
    logger.info("tls probe failed at %s: %s", stage, detail)
    return TlsProbeResult(handshake_ok=False, failure_stage=stage, detail=detail)


def _handshake_stage(exc: BaseException) -> str:
    if isinstance(exc, socket.timeout):
        return STAGE_TIMEOUT
    text = str(exc).upper()
    if "ALERT" in text:
        return STAGE_ALERT
    if "CERTIFICATE" in text:
        return STAGE_CERTIFICATE
    return STAGE_HELLO


def probe_tls(
    host: str,
    port: int,
    trust: TrustStore,
    deadline: float = DEFAULT_TLS_DEADLINE_S,
    at_time: Optional[dt.datetime] = None,
    session_hook: Optional[Callable[[ssl.SSLSocket], Any]] = None,
    ciphers: str = DEFAULT_CIPHERS,
) -> TlsProbeResult:
    """Open a TLS session, capture the chain and validate it offline.

    Args:
        host: SECC address from SDP.
        port: SECC TLS port from SDP.
        trust: Trust anchors for the offline validation.
        deadline: Overall budget in seconds for connect plus handshake.
        at_time: Validation time; defaults to now (UTC).
        session_hook: Called with the open socket after the handshake, e.g.
            to run the application handshake under TLS; its return value is
            kept in `session_result`.
        ciphers: OpenSSL cipher string for TLS 1.2.

    Returns:
        A populated result; failures are results, never exceptions.
    """

    started = time.monotonic()
    try:
        raw = socket.create_connection((host, port), timeout=deadline)
    except socket.timeout as exc:
        return _failure(stage=STAGE_TIMEOUT, detail=str(exc))
    except OSError as exc:
        return _failure(stage=STAGE_TCP_CONNECT, detail=str(exc))
    try:
        raw.settimeout(max(0.001, deadline - (time.monotonic() - started)))
        try:
            tls = client_context(ciphers=ciphers).wrap_socket(raw, server_hostname=None)
        except (ssl.SSLError, OSError) as exc:
            return _failure(stage=_handshake_stage(exc), detail=str(exc))
        with tls:
            chain = _peer_chain(tls)
            if not chain:
                return _failure(stage=STAGE_CERTIFICATE, detail="no certificate presented")
            cipher = tls.cipher()
            summaries = []
            for item in chain:
                try:
                    summaries.append(
                        CertificateSummary.from_certificate(x509.load_der_x509_certificate(item))
                    )
                except ValueError:
                    logger.warning("peer presented an unparseable certificate")
            verdict = validate_chain(
                chain=chain,
                trust=trust,
                at_time=at_time or dt.datetime.now(dt.timezone.utc),
            )
            session_result = None
            if session_hook is not None:
                session_result = session_hook(tls)
            return TlsProbeResult(
                handshake_ok=True,
                tls_version=tls.version(),
                cipher_suite=cipher[0] if cipher else None,
                presented_chain=tuple(summaries),
                chain_valid=verdict.valid,
                matched_root=verdict.matched_root,
                validation_reason=verdict.reason,
                chain_der=tuple(chain),
                session_result=session_result,
            )
    finally:
        raw.close()


def export_chain_pem(result: TlsProbeResult) -> bytes:
    """PEM bundle of the presented chain (empty when nothing was presented)."""

    blocks = []
    for item in result.chain_der:
        try:
            cert = x509.load_der_x509_certificate(item)
        except ValueError:
            continue
        blocks.append(cert.public_bytes(serialization.Encoding.PEM))
    return b"".join(blocks)
