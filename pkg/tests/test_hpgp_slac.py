from __future__ import annotations

import unittest
from decimal import Decimal

from ccs_audit.constants import DESK_EV_MAC, DESK_EVSE_MAC  # noqa: E402
from ccs_audit.errors import FrameSizeError, TerminationGuardError  # noqa: E402
from ccs_audit.hpgp_slac import (  # noqa: E402
    AttenCharInd,
    MmeFrame,
    PilotLine,
    SlacConfig,
    SlacMatchCnf,
    SlacParmCnf,
    SlacParmReq,
    SlacSession,
    SlacState,
    can_transition,
    decode_mme,
    encode_mme,
    run_slac_ev,
    slac_frame,
    summarize_mme,
)
from ccs_audit.link_transport import (  # noqa: E402
    DIRECTION_LOCAL,
    DIRECTION_TX,
    FrameCapture,
    inproc_pair,
)

RUN_ID = bytes.fromhex("0102030405060708")
NID = bytes.fromhex("026bcba5354e08")
NMK = bytes.fromhex("b59319d7e8157ba001b018669ccee30d")


def _evse_frame(message) -> bytes:
    return encode_mme(slac_frame(message=message, src=DESK_EVSE_MAC, dst=DESK_EV_MAC))


def _answers(run_id: bytes = RUN_ID):
    return [
        _evse_frame(SlacParmCnf(forwarding_sta=DESK_EV_MAC, run_id=run_id)),
        _evse_frame(
            AttenCharInd(
                source_address=DESK_EV_MAC,
                run_id=run_id,
                num_sounds=10,
                attenuation=bytes([25] * 58),
            )
        ),
        _evse_frame(
            SlacMatchCnf(pev_mac=DESK_EV_MAC, evse_mac=DESK_EVSE_MAC, run_id=run_id, nid=NID, nmk=NMK)
        ),
    ]


def _drain(channel):
    frames = []
    while True:
        data = channel.receive(timeout=0.01)
        if data is None:
            return frames
        frames.append(decode_mme(data))


class FrameCodecTests(unittest.TestCase):
    def test_known_type_with_wrong_payload_length_is_rejected(self) -> None:
        frame = MmeFrame(dst_mac=bytes(6), src_mac=bytes(6), mmtype=0x6064, payload=bytes(9))
        with self.assertRaises(FrameSizeError):
            encode_mme(frame)

    def test_short_unknown_type_is_rejected_instead_of_padded(self) -> None:
        frame = MmeFrame(dst_mac=bytes(6), src_mac=bytes(6), mmtype=0xA000, payload=b"\x01" * 10)
        with self.assertRaises(FrameSizeError):
            encode_mme(frame)
        filled = MmeFrame(dst_mac=bytes(6), src_mac=bytes(6), mmtype=0xA000, payload=b"\x01" * 41)
        self.assertEqual(decode_mme(encode_mme(filled)), filled)

    def test_oversized_payload_is_rejected(self) -> None:
        frame = MmeFrame(dst_mac=bytes(6), src_mac=bytes(6), mmtype=0xA000, payload=bytes(1496))
        with self.assertRaises(FrameSizeError):
            encode_mme(frame)

    def test_summary_names_type_and_run_id(self) -> None:
        data = encode_mme(slac_frame(SlacParmReq(run_id=RUN_ID), src=DESK_EV_MAC, dst=b"\xff" * 6))
        summary = summarize_mme(data)
        self.assertEqual(summary["mmtype"], "CM_SLAC_PARM.REQ")
        self.assertEqual(summary["run_id"], RUN_ID.hex())
        self.assertEqual(summarize_mme(b"\x00")["error"], "truncated_header")


class StateMachineTests(unittest.TestCase):
    def test_only_single_forward_steps_or_failure(self) -> None:
        self.assertTrue(can_transition(SlacState.IDLE, SlacState.PARM_SENT))
        self.assertFalse(can_transition(SlacState.IDLE, SlacState.SOUNDING))
        self.assertTrue(can_transition(SlacState.SOUNDING, SlacState.FAILED))
        self.assertFalse(can_transition(SlacState.MATCHED, SlacState.FAILED))
        self.assertFalse(can_transition(SlacState.FAILED, SlacState.IDLE))

    def test_session_keys_exist_only_when_matched(self) -> None:
        with self.assertRaises(AssertionError):
            SlacSession(
                run_id=RUN_ID,
                ev_mac=DESK_EV_MAC,
                evse_mac=None,
                state=SlacState.FAILED,
                history=(SlacState.IDLE, SlacState.FAILED),
                failure_stage="Idle",
                nid=NID,
            )


class PilotLineTests(unittest.TestCase):
    def test_state_c_is_refused(self) -> None:
        pilot = PilotLine().connect()
        with self.assertRaises(TerminationGuardError):
            pilot.set_state("C", Decimal("5"))
        self.assertEqual(pilot.unplug().states(), ("A", "B", "A"))

    def test_slac_requires_state_b(self) -> None:
        ev_end, _ = inproc_pair()
        with self.assertRaises(AssertionError):
            run_slac_ev(ev_end, SlacConfig(run_id=RUN_ID), pilot=PilotLine())


class RunSlacTests(unittest.TestCase):
    def test_full_match_records_set_key_locally(self) -> None:
        ev_end, evse_end = inproc_pair()
        for frame in _answers():
            evse_end.send(frame)
        capture = FrameCapture(clock=lambda: 0.0)
        session = run_slac_ev(
            ev_end,
            SlacConfig(run_id=RUN_ID, stage_timeout_s=0.5),
            pilot=PilotLine().connect(),
            capture=capture,
        )
        self.assertTrue(session.matched)
        self.assertEqual((session.nid, session.nmk), (NID, NMK))
        self.assertEqual(session.evse_mac, DESK_EVSE_MAC)
        self.assertEqual(session.attenuation_profile, tuple([25] * 58))
        self.assertEqual(session.history[-1], SlacState.MATCHED)

        sent = [frame.name for frame in _drain(evse_end)]
        self.assertEqual(sent[:2], ["CM_SLAC_PARM.REQ", "CM_START_ATTEN_CHAR.IND"])
        self.assertEqual(sent.count("CM_MNBC_SOUND.IND"), 10)
        self.assertEqual(sent[-2:], ["CM_ATTEN_CHAR.RSP", "CM_SLAC_MATCH.REQ"])
        self.assertNotIn("CM_SET_KEY.REQ", sent)

        local = [item for item in capture.records() if item.direction == DIRECTION_LOCAL]
        self.assertEqual([item.summary["mmtype"] for item in local], ["CM_SET_KEY.REQ"])
        self.assertEqual(len([item for item in capture.records() if item.direction == DIRECTION_TX]), 14)

    def test_silent_evse_fails_in_parm_stage(self) -> None:
        ev_end, _ = inproc_pair()
        with self.assertLogs("ccs_audit.hpgp_slac", level="INFO"):
            session = run_slac_ev(ev_end, SlacConfig(run_id=RUN_ID, stage_timeout_s=0.05))
        self.assertEqual(session.state, SlacState.FAILED)
        self.assertEqual(session.failure_stage, SlacState.PARM_SENT.value)
        self.assertIsNone(session.nmk)

    def test_foreign_run_id_is_ignored(self) -> None:
        ev_end, evse_end = inproc_pair()
        for frame in _answers(run_id=bytes(8)):
            evse_end.send(frame)
        session = run_slac_ev(ev_end, SlacConfig(run_id=RUN_ID, stage_timeout_s=0.05))
        self.assertFalse(session.matched)
        self.assertGreaterEqual(session.ignored_frames, 1)

    def test_lost_match_confirmation_fails_in_match_stage(self) -> None:
        ev_end, evse_end = inproc_pair()
        for frame in _answers()[:2]:
            evse_end.send(frame)
        session = run_slac_ev(ev_end, SlacConfig(run_id=RUN_ID, stage_timeout_s=0.05))
        self.assertEqual(session.failure_stage, SlacState.MATCH_SENT.value)

    def test_undecodable_frames_are_skipped(self) -> None:
        ev_end, evse_end = inproc_pair()
        evse_end.send(b"\x00" * 5)
        for frame in _answers():
            evse_end.send(frame)
        session = run_slac_ev(ev_end, SlacConfig(run_id=RUN_ID, stage_timeout_s=0.5))
        self.assertTrue(session.matched)
        self.assertEqual(session.ignored_frames, 1)


if __name__ == "__main__":
    unittest.main()
