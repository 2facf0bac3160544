from __future__ import annotations

import datetime as dt
import socket
import tempfile
import unittest
from pathlib import Path

from ccs_audit.errors import InputError  # noqa: E402
from ccs_audit.evse_sim import EvseEndpoints, EvseProfile  # noqa: E402
from ccs_audit.pki_fixtures import build_fixture_pki, default_fixture_pki  # noqa: E402
from ccs_audit.tls_probe import (  # noqa: E402
    REASON_BROKEN_LINK,
    REASON_EMPTY,
    REASON_EXPIRED,
    REASON_NOT_YET_VALID,
    REASON_UNKNOWN_ROOT,
    REASON_UNPARSEABLE,
    STAGE_ALERT,
    STAGE_HELLO,
    STAGE_TCP_CONNECT,
    TlsProbeResult,
    TrustStore,
    export_chain_pem,
    probe_tls,
    validate_chain,
)

AT = dt.datetime(2024, 6, 1, tzinfo=dt.timezone.utc)


def _tls_profile(chain_path: str = "fixture-pki") -> EvseProfile:
    return EvseProfile(
        name="tls-station",
        cpo="enbw",
        manufacturer="alpitronic",
        model="HYC300",
        supported_protocols=("ISO15118_2", "DIN70121"),
        preferred_protocol="ISO15118_2",
        tls_enabled=True,
        chain_path=chain_path,
    )


def _free_port() -> int:
    with socket.socket() as sock:
        sock.bind(("127.0.0.1", 0))
        return sock.getsockname()[1]


class ChainValidationTests(unittest.TestCase):
    def test_fixture_chain_validates_against_its_root(self) -> None:
        pki = default_fixture_pki()
        verdict = validate_chain(pki.chain_der(), pki.trust_store(), at_time=AT)
        self.assertTrue(verdict.valid)
        self.assertEqual(verdict.matched_root, pki.root_name)

    def test_failure_reasons(self) -> None:
        pki = default_fixture_pki()
        other = build_fixture_pki(root_name="other-root", key_offset=100)
        leaf, sub_ca = pki.chain_der()
        cases = {
            REASON_EMPTY: ([], pki.trust_store(), AT),
            REASON_UNPARSEABLE: ([b"not a certificate"], pki.trust_store(), AT),
            REASON_BROKEN_LINK: ([leaf, other.chain_der()[1]], pki.trust_store(), AT),
            REASON_UNKNOWN_ROOT: ([leaf, sub_ca], other.trust_store(), AT),
            REASON_NOT_YET_VALID: ([leaf, sub_ca], pki.trust_store(), dt.datetime(2020, 1, 1, tzinfo=dt.timezone.utc)),
            REASON_EXPIRED: ([leaf, sub_ca], pki.trust_store(), dt.datetime(2040, 1, 1, tzinfo=dt.timezone.utc)),
        }
        for reason, (chain, trust, at_time) in cases.items():
            with self.subTest(reason=reason):
                verdict = validate_chain(chain, trust, at_time=at_time)
                self.assertFalse(verdict.valid)
                self.assertEqual(verdict.reason, reason)

    def test_expired_leaf_fixture(self) -> None:
        expired = default_fixture_pki(leaf_expired=True)
        verdict = validate_chain(expired.chain_der(), expired.trust_store(), at_time=AT)
        self.assertEqual(verdict.reason, REASON_EXPIRED)


class TrustStoreTests(unittest.TestCase):
    def test_directory_loading(self) -> None:
        with tempfile.TemporaryDirectory() as tmp:
            out_dir = default_fixture_pki().write(Path(tmp))
            (out_dir / "trust" / "README.txt").write_text("ignored", encoding="utf-8")
            store = TrustStore.from_directory(out_dir / "trust")
            self.assertEqual(store.names, ["hubject-v2g-root"])

    def test_non_root_certificate_is_rejected(self) -> None:
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp)
            (path / "leaf.pem").write_bytes(default_fixture_pki().chain_pem())
            with self.assertRaises(InputError):
                TrustStore.from_directory(path)
            with self.assertRaises(InputError):
                TrustStore.from_directory(path / "missing")


class ProbeTests(unittest.TestCase):
    def test_probe_against_simulated_secc(self) -> None:
        pki = default_fixture_pki()
        with EvseEndpoints(_tls_profile()) as endpoints:
            result = probe_tls(
                host=endpoints.host,
                port=endpoints.tls_port,
                trust=pki.trust_store(),
                deadline=2.0,
                at_time=AT,
                session_hook=lambda sock: sock.version(),
            )
        self.assertTrue(result.handshake_ok)
        self.assertTrue(result.chain_valid)
        self.assertEqual(result.matched_root, "hubject-v2g-root")
        self.assertEqual(result.presented_chain[0].secc_identity, "DE*CCS*E00001")
        self.assertEqual(result.presented_chain[0].key_algorithm, "EC secp256r1")
        self.assertEqual(result.session_result, result.tls_version)
        self.assertEqual(export_chain_pem(result).count(b"BEGIN CERTIFICATE"), 2)

    def test_expired_chain_still_handshakes(self) -> None:
        with EvseEndpoints(_tls_profile("fixture-pki:expired")) as endpoints:
            result = probe_tls(
                host=endpoints.host,
                port=endpoints.tls_port,
                trust=default_fixture_pki().trust_store(),
                deadline=2.0,
                at_time=AT,
            )
        self.assertTrue(result.handshake_ok)
        self.assertFalse(result.chain_valid)
        self.assertEqual(result.validation_reason, REASON_EXPIRED)

    def test_plaintext_listener_fails_in_hello(self) -> None:
        with EvseEndpoints(_tls_profile()) as endpoints:
            result = probe_tls(
                host=endpoints.host,
                port=endpoints.plain_port,
                trust=TrustStore(),
                deadline=2.0,
            )
        self.assertFalse(result.handshake_ok)
        self.assertIn(result.failure_stage, (STAGE_HELLO, STAGE_ALERT))

    def test_closed_port_fails_at_connect(self) -> None:
        result = probe_tls(host="127.0.0.1", port=_free_port(), trust=TrustStore(), deadline=1.0)
        self.assertEqual(result.failure_stage, STAGE_TCP_CONNECT)

    def test_result_dict_round_trip_drops_raw_evidence(self) -> None:
        pki = default_fixture_pki()
        with EvseEndpoints(_tls_profile()) as endpoints:
            result = probe_tls(
                host=endpoints.host, port=endpoints.tls_port, trust=pki.trust_store(), at_time=AT
            )
        restored = TlsProbeResult.from_dict(result.to_dict())
        self.assertEqual(restored, result)
        self.assertEqual(restored.chain_der, ())


if __name__ == "__main__":
    unittest.main()
