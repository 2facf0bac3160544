from __future__ import annotations

import json
import socket
import threading
import unittest

from ccs_audit.app_handshake import (  # noqa: E402
    build_advertisement,
    decode_handshake_response,
    encode_handshake_request,
    protocol_for_schema,
)
from ccs_audit.config_store import resolve_path  # noqa: E402
from ccs_audit.errors import InputError, ProfileError  # noqa: E402
from ccs_audit.evse_sim import (  # noqa: E402
    SDP_POLICY_ANSWER_TLS,
    SDP_POLICY_DOWNGRADE,
    SDP_POLICY_SILENT,
    SLAC_FAULT_NO_PARM_CNF,
    SLAC_FAULT_WRONG_RUN_ID,
    EvseEndpoints,
    EvseProfile,
    load_profile_fixtures,
    parse_profiles,
    profiles_to_payload,
    run_evse,
)
from ccs_audit.hpgp_slac import PilotLine, SlacConfig, SlacState, run_slac_ev  # noqa: E402
from ccs_audit.link_transport import inproc_pair  # noqa: E402
from ccs_audit.v2gtp_sdp import (  # noqa: E402
    SdpRequest,
    SdpSecurity,
    V2gtpMessage,
    encode_v2gtp,
    read_v2gtp_message,
    sdp_discover,
)
from ccs_audit.wire_constants import PAYLOAD_TYPE_EXI  # noqa: E402


def _profile(**overrides) -> EvseProfile:
    values = dict(
        name="sim",
        cpo="enbw",
        manufacturer="alpitronic",
        model="HYC300",
        supported_protocols=("DIN70121", "ISO15118_2"),
        preferred_protocol="ISO15118_2",
    )
    values.update(overrides)
    return EvseProfile(**values)


class _Session:
    """Simulator thread serving one EV session over in-process channels."""

    def __init__(self, profile: EvseProfile, endpoints: EvseEndpoints) -> None:
        (self.link, link_evse), (self.datagrams, datagrams_evse) = inproc_pair(), inproc_pair()
        self.pilot = PilotLine().connect()
        self.stop = threading.Event()
        self.logs = []
        self.thread = threading.Thread(
            target=lambda: self.logs.append(
                run_evse(
                    profile=profile,
                    link=link_evse,
                    datagrams=datagrams_evse,
                    endpoints=endpoints,
                    stop_event=self.stop,
                    pilot=self.pilot,
                )
            ),
            daemon=True,
        )

    def __enter__(self) -> "_Session":
        self.thread.start()
        return self

    def __exit__(self, *_) -> None:
        self.pilot.unplug()
        self.stop.set()
        self.thread.join(timeout=2.0)

    @property
    def log(self):
        return self.logs[0]


def _handshake(host: str, port: int, protocols):
    entries = build_advertisement(protocols, {"ISO15118_2": 1, "DIN70121": 2})
    with socket.create_connection((host, port), timeout=2.0) as sock:
        sock.sendall(
            encode_v2gtp(V2gtpMessage(payload_type=PAYLOAD_TYPE_EXI, payload=encode_handshake_request(entries)))
        )
        response = decode_handshake_response(read_v2gtp_message(sock).payload)
    return protocol_for_schema(entries, response.chosen_schema_id)


class ProfileTests(unittest.TestCase):
    def test_bundled_profiles(self) -> None:
        profiles = load_profile_fixtures(resolve_path("station_profiles.json"))
        self.assertEqual(len(profiles), 20)
        self.assertEqual(len({profile.name for profile in profiles}), 20)
        by_name = {profile.name: profile for profile in profiles}
        self.assertEqual(
            by_name["aral-compleo-cito-bm-500"].expected_flags(),
            {"supports_tls": False, "supports_iso2": False, "supports_din": True, "preferred_protocol": "DIN70121"},
        )
        self.assertTrue(by_name["ionity-tritium-veefil-pk"].expected_flags()["supports_tls"])
        self.assertEqual(by_name["enbw-alpitronic-hyc300"].install_years, (2019, 2025))

    def test_invariants_name_profile_and_field(self) -> None:
        cases = {
            "preferred": dict(preferred_protocol="ISO15118_20"),
            "protocols": dict(supported_protocols=("CHAdeMO",)),
            "chain_path": dict(tls_enabled=True),
            "sdp_policy": dict(sdp_policy="shout"),
            "slac_fault": dict(slac_fault="boom"),
        }
        for field, overrides in cases.items():
            with self.subTest(field=field), self.assertRaises(ProfileError) as caught:
                _profile(**overrides)
            self.assertEqual(caught.exception.field, field)
            self.assertEqual(caught.exception.profile, "sim")

    def test_parsing_rejects_bad_years_and_duplicates(self) -> None:
        raw = _profile().to_dict()
        with self.assertRaises(ProfileError):
            parse_profiles(json.dumps([dict(raw, year="2020")]))
        with self.assertRaises(ProfileError):
            parse_profiles(json.dumps([raw, raw]))
        with self.assertRaises(InputError):
            parse_profiles("{not json")

    def test_dict_and_artifact_round_trip(self) -> None:
        profile = _profile(install_years=(2019, 2025), tls_enabled=True, chain_path="fixture-pki")
        self.assertEqual(EvseProfile.from_dict(profile.to_dict()), profile)
        document = dict(profiles_to_payload([profile]), format_version=1, kind="evse_profiles")
        self.assertEqual(parse_profiles(json.dumps(document)), [profile])

    def test_slac_fault_means_no_flags(self) -> None:
        flags = _profile(slac_fault=SLAC_FAULT_NO_PARM_CNF).expected_flags()
        self.assertEqual(flags["preferred_protocol"], None)
        self.assertFalse(any(flags[name] for name in ("supports_tls", "supports_iso2", "supports_din")))


class SessionTests(unittest.TestCase):
    def _run(self, profile: EvseProfile, security: SdpSecurity, protocols=("ISO15118_2", "DIN70121")):
        with EvseEndpoints(profile) as endpoints, _Session(profile, endpoints) as session:
            slac = run_slac_ev(session.link, SlacConfig(stage_timeout_s=0.5), pilot=session.pilot)
            outcome = sdp_discover(session.datagrams, SdpRequest(security=security), retries=2, timeout=0.1)
            chosen = None
            if outcome.response is not None and outcome.response.security is SdpSecurity.NO_TLS:
                chosen = _handshake(outcome.response.host, outcome.response.endpoint_port, protocols)
        return slac, outcome, chosen, session.log

    def test_plaintext_session_end_to_end(self) -> None:
        slac, outcome, chosen, log = self._run(_profile(), SdpSecurity.NO_TLS)
        self.assertTrue(slac.matched)
        self.assertEqual(outcome.response.security, SdpSecurity.NO_TLS)
        self.assertGreater(outcome.response.endpoint_port, 0)
        self.assertEqual(chosen, "ISO15118_2")
        self.assertEqual(log.slac_events[0], "CM_SLAC_PARM.REQ")
        self.assertEqual(log.sdp_answers, [{"requested": "NO_TLS", "answered": "NO_TLS"}])
        self.assertEqual(len(log.handshakes), 1)
        self.assertEqual(log.handshakes[0].chosen_protocol, "ISO15118_2")
        self.assertEqual(log.cp_states, ("A", "B", "A"))

    def test_preference_wins_over_ev_priority(self) -> None:
        _, _, chosen, _ = self._run(_profile(preferred_protocol="DIN70121"), SdpSecurity.NO_TLS)
        self.assertEqual(chosen, "DIN70121")

    def test_sdp_policies_for_tls_requests(self) -> None:
        expected = {
            SDP_POLICY_DOWNGRADE: "NO_TLS",
            SDP_POLICY_SILENT: None,
        }
        for policy, answered in expected.items():
            with self.subTest(policy=policy):
                _, outcome, _, log = self._run(_profile(sdp_policy=policy), SdpSecurity.TLS_REQUIRED)
                self.assertEqual(log.sdp_answers[0]["answered"], answered)
                if answered is None:
                    self.assertEqual(outcome.failure, "no_response")
                else:
                    self.assertTrue(outcome.downgraded)

    def test_tls_station_answers_with_its_tls_port(self) -> None:
        profile = _profile(sdp_policy=SDP_POLICY_ANSWER_TLS, tls_enabled=True, chain_path="fixture-pki")
        with EvseEndpoints(profile) as endpoints, _Session(profile, endpoints) as session:
            run_slac_ev(session.link, SlacConfig(stage_timeout_s=0.5), pilot=session.pilot)
            outcome = sdp_discover(session.datagrams, SdpRequest(), retries=2, timeout=0.1)
            self.assertEqual(outcome.response.endpoint_port, endpoints.tls_port)
        self.assertFalse(outcome.downgraded)

    def test_injected_slac_faults(self) -> None:
        for fault, stage in ((SLAC_FAULT_NO_PARM_CNF, SlacState.PARM_SENT), (SLAC_FAULT_WRONG_RUN_ID, SlacState.PARM_SENT)):
            with self.subTest(fault=fault):
                profile = _profile(slac_fault=fault)
                with EvseEndpoints(profile) as endpoints, _Session(profile, endpoints) as session:
                    slac = run_slac_ev(session.link, SlacConfig(stage_timeout_s=0.1), pilot=session.pilot)
                self.assertEqual(slac.failure_stage, stage.value)

    def test_garbage_on_the_handshake_port_is_logged(self) -> None:
        profile = _profile()
        with EvseEndpoints(profile) as endpoints:
            with socket.create_connection((endpoints.host, endpoints.plain_port), timeout=2.0) as sock:
                sock.sendall(b"\x02\xfd\x00\x00\x00\x00\x00\x00")
                self.assertEqual(sock.recv(16), b"")
            log = endpoints.handshake_log()
        self.assertEqual(log[0].error, "bad_version")


if __name__ == "__main__":
    unittest.main()
