"""HomePlug Green PHY management frames and the EV side of SLAC matching.

Wire layout of an MME frame (mmv >= 1):

    dst(6) src(6) ethertype(2, BE 0x88E1) mmv(1) mmtype(2, LE) fmi(2) payload

Frames shorter than 60 bytes are zero-padded. Known SLAC message types decode
to exactly their defined payload length (padding dropped); unknown types are
carried opaque with everything after the header.

Example:
    >>> frame = slac_frame(SlacParmReq(run_id=bytes(8)), src=bytes(6), dst=BROADCAST_MAC)
    >>> len(encode_mme(frame))
    60
"""

from __future__ import annotations

import enum
import logging
import os
import struct
import time
from dataclasses import dataclass, fields
from decimal import Decimal
from typing import Any, Callable, ClassVar, Dict, List, Optional, Tuple, Type

from ccs_audit.constants import (
    DEFAULT_SLAC_STAGE_TIMEOUT_S,
    DEFAULT_SOUND_COUNT,
    DESK_EV_MAC,
)
from ccs_audit.errors import DecodeError, FrameSizeError, TerminationGuardError
from ccs_audit.format_utils import format_mac
from ccs_audit.link_transport import (
    DIRECTION_LOCAL,
    LAYER_MME,
    CapturingChannel,
    FrameCapture,
    FrameChannel,
)
from ccs_audit.wire_constants import (
    BROADCAST_MAC,
    CM_ATTEN_CHAR_IND,
    CM_ATTEN_CHAR_RSP,
    CM_MNBC_SOUND_IND,
    CM_SET_KEY_REQ,
    CM_SLAC_MATCH_CNF,
    CM_SLAC_MATCH_REQ,
    CM_SLAC_PARM_CNF,
    CM_SLAC_PARM_REQ,
    CM_START_ATTEN_CHAR_IND,
    ETH_HEADER_LEN,
    HOMEPLUG_ETHERTYPE,
    HOMEPLUG_MMV,
    MME_MAX_PAYLOAD_LEN,
    MME_MIN_FRAME_LEN,
    MMTYPE_NAMES,
    SET_KEY_KEY_INFO_NMK,
    SET_KEY_PEKS_NMK,
    SET_KEY_PID_HLE,
    SLAC_AAG_GROUPS,
    SLAC_APPLICATION_TYPE,
    SLAC_ID_LEN,
    SLAC_MATCH_CNF_MVF_LENGTH,
    SLAC_MATCH_REQ_MVF_LENGTH,
    SLAC_NID_LEN,
    SLAC_NMK_LEN,
    SLAC_PAYLOAD_LENGTHS,
    SLAC_RESP_TYPE_HLE,
    SLAC_RUN_ID_LEN,
    SLAC_SECURITY_TYPE,
    SLAC_TIMEOUT_UNIT_MS,
)

logger = logging.getLogger(__name__)

_MAX_FRAME_LEN = ETH_HEADER_LEN + 1 + 2 + 2 + MME_MAX_PAYLOAD_LEN
_ZERO_RUN_ID = bytes(SLAC_RUN_ID_LEN)
_ZERO_ID = bytes(SLAC_ID_LEN)


# ---------------------------------------------------------------------------
# Frame codec
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MmeFrame:
    """One HomePlug management frame.

    Args:
        dst_mac: 6-byte destination address.
        src_mac: 6-byte source address.
        mmtype: Message type (host integer; little-endian on the wire).
        payload: Message body after the MME header.
        mmv: Management message version; `fmi` exists only when mmv >= 1.
        fmi: 2-byte fragmentation info (empty for mmv 0).
        ethertype: Always 0x88E1.

    Example:
        >>> MmeFrame(dst_mac=bytes(6), src_mac=bytes(6), mmtype=0x6064, payload=bytes(10)).name
        'CM_SLAC_PARM.REQ'
    """

    dst_mac: bytes
    src_mac: bytes
    mmtype: int
    payload: bytes
    mmv: int = HOMEPLUG_MMV
    fmi: bytes = b"\x00\x00"
    ethertype: int = HOMEPLUG_ETHERTYPE

    def __post_init__(self) -> None:
        assert len(self.dst_mac) == 6, "dst_mac must be 6 bytes"
        assert len(self.src_mac) == 6, "src_mac must be 6 bytes"
        assert 0 <= self.mmtype <= 0xFFFF, "mmtype must fit 2 bytes"
        assert 0 <= self.mmv <= 0xFF, "mmv must fit 1 byte"
        assert len(self.fmi) == (2 if self.mmv >= 1 else 0), "fmi length follows mmv"
        assert self.ethertype == HOMEPLUG_ETHERTYPE, "ethertype must be 0x88E1"

    @property
    def name(self) -> str:
        return MMTYPE_NAMES.get(self.mmtype, f"MMTYPE_0x{self.mmtype:04X}")

    @property
    def header_length(self) -> int:
        return _header_length(mmv=self.mmv)


def _header_length(mmv: int) -> int:
    return ETH_HEADER_LEN + 3 + (2 if mmv >= 1 else 0)


def encode_mme(frame: MmeFrame) -> bytes:
    """Serialize `frame`, zero-padding to the 60-byte Ethernet minimum.

    Raises:
        FrameSizeError: payload exceeds the Ethernet MTU, a known SLAC
            message type carries a payload of the wrong length, or an unknown
            type is too short to fill the frame without padding.
    """

    if len(frame.payload) > MME_MAX_PAYLOAD_LEN:
        raise FrameSizeError(
            f"payload of {len(frame.payload)} bytes exceeds {MME_MAX_PAYLOAD_LEN}"
        )
    expected = SLAC_PAYLOAD_LENGTHS.get(frame.mmtype)
    if expected is not None and len(frame.payload) != expected:
        raise FrameSizeError(
            f"{frame.name} payload must be {expected} bytes, got {len(frame.payload)}"
        )
    if expected is None and frame.header_length + len(frame.payload) < MME_MIN_FRAME_LEN:
        raise FrameSizeError(
            f"{frame.name} payload of {len(frame.payload)} bytes needs padding; "
            f"unknown types must fill {MME_MIN_FRAME_LEN} bytes"
        )
    data = b"".join(
        (
            frame.dst_mac,
            frame.src_mac,
            struct.pack("!H", frame.ethertype),
            struct.pack("<BH", frame.mmv, frame.mmtype),
            frame.fmi,
            frame.payload,
        )
    )
    if len(data) < MME_MIN_FRAME_LEN:
        data += bytes(MME_MIN_FRAME_LEN - len(data))
    return data


def decode_mme(data: bytes) -> MmeFrame:
    """Parse raw bytes into an `MmeFrame`; raises only `DecodeError`."""

    data = bytes(data)
    if len(data) < ETH_HEADER_LEN + 3:
        raise DecodeError(layer="mme", reason="truncated_header", offset=len(data))
    if len(data) > _MAX_FRAME_LEN:
        raise DecodeError(layer="mme", reason="oversized", offset=_MAX_FRAME_LEN)
    (ethertype,) = struct.unpack_from("!H", data, 12)
    if ethertype != HOMEPLUG_ETHERTYPE:
        raise DecodeError(
            layer="mme", reason="bad_ethertype", offset=12, detail=f"0x{ethertype:04X}"
        )
    mmv, mmtype = struct.unpack_from("<BH", data, ETH_HEADER_LEN)
    header_length = _header_length(mmv=mmv)
    if len(data) < header_length:
        raise DecodeError(layer="mme", reason="truncated_header", offset=len(data))
    fmi = data[ETH_HEADER_LEN + 3 : header_length]
    body = data[header_length:]
    expected = SLAC_PAYLOAD_LENGTHS.get(mmtype)
    if expected is not None:
        if len(body) < expected:
            raise DecodeError(
                layer="mme",
                reason="truncated_payload",
                offset=len(data),
                detail=f"{MMTYPE_NAMES[mmtype]} needs {expected} bytes",
            )
        body = body[:expected]
    return MmeFrame(
        dst_mac=data[0:6],
        src_mac=data[6:12],
        mmtype=mmtype,
        payload=body,
        mmv=mmv,
        fmi=fmi,
    )


# ---------------------------------------------------------------------------
# SLAC messages
# ---------------------------------------------------------------------------


class _SlacMessage:
    """Struct-backed payload; dataclass field order equals wire order."""

    MMTYPE: ClassVar[int]
    STRUCT: ClassVar[struct.Struct]

    def to_payload(self) -> bytes:
        return self.STRUCT.pack(*(getattr(self, item.name) for item in fields(self)))  # type: ignore[arg-type]

    @classmethod
    def from_payload(cls, payload: bytes) -> Any:
        if len(payload) < cls.STRUCT.size:
            raise DecodeError(
                layer="mme",
                reason="short_payload",
                offset=len(payload),
                detail=f"{MMTYPE_NAMES.get(cls.MMTYPE, cls.__name__)}",
            )
        return cls(*cls.STRUCT.unpack_from(payload))  # type: ignore[call-arg]


@dataclass(frozen=True)
class SlacParmReq(_SlacMessage):
    MMTYPE: ClassVar[int] = CM_SLAC_PARM_REQ
    STRUCT: ClassVar[struct.Struct] = struct.Struct("<BB8s")

    application_type: int = SLAC_APPLICATION_TYPE
    security_type: int = SLAC_SECURITY_TYPE
    run_id: bytes = _ZERO_RUN_ID


@dataclass(frozen=True)
class SlacParmCnf(_SlacMessage):
    MMTYPE: ClassVar[int] = CM_SLAC_PARM_CNF
    STRUCT: ClassVar[struct.Struct] = struct.Struct("<6sBBB6sBB8s")

    msound_target: bytes = BROADCAST_MAC
    num_sounds: int = DEFAULT_SOUND_COUNT
    time_out: int = 6
    resp_type: int = SLAC_RESP_TYPE_HLE
    forwarding_sta: bytes = bytes(6)
    application_type: int = SLAC_APPLICATION_TYPE
    security_type: int = SLAC_SECURITY_TYPE
    run_id: bytes = _ZERO_RUN_ID


@dataclass(frozen=True)
class StartAttenCharInd(_SlacMessage):
    MMTYPE: ClassVar[int] = CM_START_ATTEN_CHAR_IND
    STRUCT: ClassVar[struct.Struct] = struct.Struct("<BBBBB6s8s")

    application_type: int = SLAC_APPLICATION_TYPE
    security_type: int = SLAC_SECURITY_TYPE
    num_sounds: int = DEFAULT_SOUND_COUNT
    time_out: int = 6
    resp_type: int = SLAC_RESP_TYPE_HLE
    forwarding_sta: bytes = bytes(6)
    run_id: bytes = _ZERO_RUN_ID


@dataclass(frozen=True)
class MnbcSoundInd(_SlacMessage):
    MMTYPE: ClassVar[int] = CM_MNBC_SOUND_IND
    STRUCT: ClassVar[struct.Struct] = struct.Struct("<BB17sB8s8s16s")

    application_type: int = SLAC_APPLICATION_TYPE
    security_type: int = SLAC_SECURITY_TYPE
    sender_id: bytes = _ZERO_ID
    count: int = 0
    run_id: bytes = _ZERO_RUN_ID
    reserved: bytes = bytes(8)
    random: bytes = bytes(16)


@dataclass(frozen=True)
class AttenCharInd(_SlacMessage):
    MMTYPE: ClassVar[int] = CM_ATTEN_CHAR_IND
    STRUCT: ClassVar[struct.Struct] = struct.Struct("<BB6s8s17s17sBB58s")

    application_type: int = SLAC_APPLICATION_TYPE
    security_type: int = SLAC_SECURITY_TYPE
    source_address: bytes = bytes(6)
    run_id: bytes = _ZERO_RUN_ID
    source_id: bytes = _ZERO_ID
    resp_id: bytes = _ZERO_ID
    num_sounds: int = 0
    num_groups: int = SLAC_AAG_GROUPS
    attenuation: bytes = bytes(SLAC_AAG_GROUPS)

    @property
    def attenuation_profile(self) -> Tuple[int, ...]:
        return tuple(self.attenuation[: min(self.num_groups, SLAC_AAG_GROUPS)])


@dataclass(frozen=True)
class AttenCharRsp(_SlacMessage):
    MMTYPE: ClassVar[int] = CM_ATTEN_CHAR_RSP
    STRUCT: ClassVar[struct.Struct] = struct.Struct("<BB6s8s17s17sB")

    application_type: int = SLAC_APPLICATION_TYPE
    security_type: int = SLAC_SECURITY_TYPE
    source_address: bytes = bytes(6)
    run_id: bytes = _ZERO_RUN_ID
    source_id: bytes = _ZERO_ID
    resp_id: bytes = _ZERO_ID
    result: int = 0


@dataclass(frozen=True)
class SlacMatchReq(_SlacMessage):
    MMTYPE: ClassVar[int] = CM_SLAC_MATCH_REQ
    STRUCT: ClassVar[struct.Struct] = struct.Struct("<BBH17s6s17s6s8s8s")

    application_type: int = SLAC_APPLICATION_TYPE
    security_type: int = SLAC_SECURITY_TYPE
    mvf_length: int = SLAC_MATCH_REQ_MVF_LENGTH
    pev_id: bytes = _ZERO_ID
    pev_mac: bytes = bytes(6)
    evse_id: bytes = _ZERO_ID
    evse_mac: bytes = bytes(6)
    run_id: bytes = _ZERO_RUN_ID
    reserved: bytes = bytes(8)


@dataclass(frozen=True)
class SlacMatchCnf(_SlacMessage):
    MMTYPE: ClassVar[int] = CM_SLAC_MATCH_CNF
    STRUCT: ClassVar[struct.Struct] = struct.Struct("<BBH17s6s17s6s8s8s7sB16s")

    application_type: int = SLAC_APPLICATION_TYPE
    security_type: int = SLAC_SECURITY_TYPE
    mvf_length: int = SLAC_MATCH_CNF_MVF_LENGTH
    pev_id: bytes = _ZERO_ID
    pev_mac: bytes = bytes(6)
    evse_id: bytes = _ZERO_ID
    evse_mac: bytes = bytes(6)
    run_id: bytes = _ZERO_RUN_ID
    reserved: bytes = bytes(8)
    nid: bytes = bytes(SLAC_NID_LEN)
    reserved2: int = 0
    nmk: bytes = bytes(SLAC_NMK_LEN)


@dataclass(frozen=True)
class SetKeyReq(_SlacMessage):
    MMTYPE: ClassVar[int] = CM_SET_KEY_REQ
    STRUCT: ClassVar[struct.Struct] = struct.Struct("<B4s4sBHBB7sB16s")

    key_info_type: int = SET_KEY_KEY_INFO_NMK
    my_nonce: bytes = b"\xaa\xaa\xaa\xaa"
    your_nonce: bytes = bytes(4)
    pid: int = SET_KEY_PID_HLE
    prn: int = 0
    pmn: int = 0
    cco_capability: int = 0
    nid: bytes = bytes(SLAC_NID_LEN)
    peks: int = SET_KEY_PEKS_NMK
    nmk: bytes = bytes(SLAC_NMK_LEN)


SLAC_MESSAGE_TYPES: Dict[int, Type[Any]] = {
    cls.MMTYPE: cls
    for cls in (
        SlacParmReq,
        SlacParmCnf,
        StartAttenCharInd,
        MnbcSoundInd,
        AttenCharInd,
        AttenCharRsp,
        SlacMatchReq,
        SlacMatchCnf,
        SetKeyReq,
    )
}


def slac_frame(message: Any, src: bytes, dst: bytes) -> MmeFrame:
    return MmeFrame(
        dst_mac=dst, src_mac=src, mmtype=message.MMTYPE, payload=message.to_payload()
    )


def decode_slac_message(frame: MmeFrame) -> Optional[Any]:
    """Return the typed message for a known SLAC frame, else None."""

    cls = SLAC_MESSAGE_TYPES.get(frame.mmtype)
    if cls is None:
        return None
    return cls.from_payload(frame.payload)


def summarize_mme(data: bytes) -> Dict[str, Any]:
    """Decoded summary used in capture logs; never raises."""

    try:
        frame = decode_mme(data)
        message = decode_slac_message(frame)
    except DecodeError as exc:
        return {"error": exc.reason, "offset": exc.offset}
    summary: Dict[str, Any] = {
        "mmtype": frame.name,
        "src": format_mac(frame.src_mac),
        "dst": format_mac(frame.dst_mac),
    }
    run_id = getattr(message, "run_id", None)
    if run_id is not None:
        summary["run_id"] = run_id.hex()
    return summary


# ---------------------------------------------------------------------------
# Basic signaling
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BasicSignalingEvent:
    cp_state: str
    duty_cycle_pct: Decimal


class PilotLine:
    """Control-pilot state as seen by the probe; state C is unreachable.

    Example:
        >>> pilot = PilotLine()
        >>> pilot.connect().state
        'B'
    """

    def __init__(self) -> None:
        self.events: List[BasicSignalingEvent] = [
            BasicSignalingEvent(cp_state="A", duty_cycle_pct=Decimal("100"))
        ]

    @property
    def state(self) -> str:
        return self.events[-1].cp_state

    def set_state(self, cp_state: str, duty_cycle_pct: Decimal) -> "PilotLine":
        if cp_state == "C":
            raise TerminationGuardError("refusing CP state C: no power delivery in probes")
        assert cp_state in ("A", "B"), f"unknown CP state {cp_state!r}"
        self.events.append(
            BasicSignalingEvent(cp_state=cp_state, duty_cycle_pct=duty_cycle_pct)
        )
        return self

    def connect(self) -> "PilotLine":
        """Plug in: state B with 5 % duty cycle (high-level communication)."""

        return self.set_state(cp_state="B", duty_cycle_pct=Decimal("5"))

    def unplug(self) -> "PilotLine":
        return self.set_state(cp_state="A", duty_cycle_pct=Decimal("100"))

    def states(self) -> Tuple[str, ...]:
        return tuple(item.cp_state for item in self.events)


# ---------------------------------------------------------------------------
# EV state machine
# ---------------------------------------------------------------------------


class SlacState(str, enum.Enum):
    IDLE = "Idle"
    PARM_SENT = "ParmSent"
    SOUNDING = "Sounding"
    ATTEN_RECEIVED = "AttenReceived"
    MATCH_SENT = "MatchSent"
    MATCHED = "Matched"
    FAILED = "Failed"


_FORWARD_ORDER = (
    SlacState.IDLE,
    SlacState.PARM_SENT,
    SlacState.SOUNDING,
    SlacState.ATTEN_RECEIVED,
    SlacState.MATCH_SENT,
    SlacState.MATCHED,
)
_TERMINAL = (SlacState.MATCHED, SlacState.FAILED)


def can_transition(current: SlacState, target: SlacState) -> bool:
    """Return true for the one forward step, or any non-terminal -> Failed."""

    if current in _TERMINAL:
        return False
    if target is SlacState.FAILED:
        return True
    return _FORWARD_ORDER.index(target) == _FORWARD_ORDER.index(current) + 1


@dataclass(frozen=True)
class SlacConfig:
    """Timing and identity for one EV-side matching run.

    Example:
        >>> SlacConfig().sound_count
        10
    """

    sound_count: int = DEFAULT_SOUND_COUNT
    stage_timeout_s: float = DEFAULT_SLAC_STAGE_TIMEOUT_S
    ev_mac: bytes = DESK_EV_MAC
    run_id: Optional[bytes] = None
    pev_id: bytes = _ZERO_ID

    def __post_init__(self) -> None:
        assert 1 <= self.sound_count <= 255, "sound_count must be 1..255"
        assert self.stage_timeout_s > 0, "stage_timeout_s must be positive"
        assert len(self.ev_mac) == 6, "ev_mac must be 6 bytes"
        assert self.run_id is None or len(self.run_id) == SLAC_RUN_ID_LEN, "run_id must be 8 bytes"


@dataclass(frozen=True)
class SlacSession:
    """Outcome of one matching run; nid/nmk only exist once Matched."""

    run_id: bytes
    ev_mac: bytes
    evse_mac: Optional[bytes]
    state: SlacState
    history: Tuple[SlacState, ...]
    failure_stage: Optional[str] = None
    attenuation_profile: Tuple[int, ...] = ()
    nid: Optional[bytes] = None
    nmk: Optional[bytes] = None
    ignored_frames: int = 0

    def __post_init__(self) -> None:
        matched = self.state is SlacState.MATCHED
        assert matched == (self.nid is not None), "nid populated only when Matched"
        assert matched == (self.nmk is not None), "nmk populated only when Matched"
        assert (self.state is SlacState.FAILED) == (self.failure_stage is not None)

    @property
    def matched(self) -> bool:
        return self.state is SlacState.MATCHED


class _SlacRun:
    def __init__(
        self,
        link: FrameChannel,
        timing: SlacConfig,
        clock: Callable[[], float],
    ) -> None:
        self.link = link
        self.timing = timing
        self.clock = clock
        self.run_id = timing.run_id if timing.run_id is not None else os.urandom(8)
        self.state = SlacState.IDLE
        self.history: List[SlacState] = [SlacState.IDLE]
        self.evse_mac: Optional[bytes] = None
        self.ignored = 0

    def advance(self, target: SlacState) -> None:
        assert can_transition(self.state, target), f"{self.state.value} -> {target.value}"
        logger.debug("slac %s -> %s", self.state.value, target.value)
        self.state = target
        self.history.append(target)

    def send(self, message: Any, dst: bytes) -> None:
        frame = slac_frame(message=message, src=self.timing.ev_mac, dst=dst)
        self.link.send(encode_mme(frame))

    def await_message(self, mmtype: int) -> Optional[Tuple[MmeFrame, Any]]:
        deadline = self.clock() + self.timing.stage_timeout_s
        while True:
            remaining = deadline - self.clock()
            if remaining <= 0:
                return None
            data = self.link.receive(timeout=remaining)
            if data is None:
                continue
            try:
                frame = decode_mme(data)
                message = decode_slac_message(frame)
            except DecodeError as exc:
                self.ignored += 1
                logger.debug("slac ignoring undecodable frame: %s", exc)
                continue
            if frame.mmtype != mmtype or message is None:
                self.ignored += 1
                continue
            if frame.dst_mac not in (self.timing.ev_mac, BROADCAST_MAC):
                self.ignored += 1
                continue
            if getattr(message, "run_id", None) != self.run_id:
                self.ignored += 1
                logger.info("slac ignoring %s with foreign run_id", frame.name)
                continue
            return frame, message

    def finish(self, **extra: Any) -> SlacSession:
        return SlacSession(
            run_id=self.run_id,
            ev_mac=self.timing.ev_mac,
            evse_mac=self.evse_mac,
            state=self.state,
            history=tuple(self.history),
            ignored_frames=self.ignored,
            **extra,
        )

    def fail(self) -> SlacSession:
        stage = self.state.value
        logger.info("slac timed out in %s", stage)
        self.advance(SlacState.FAILED)
        return self.finish(failure_stage=stage)


def run_slac_ev(
    link: FrameChannel,
    timing: SlacConfig,
    pilot: Optional[PilotLine] = None,
    capture: Optional[FrameCapture] = None,
    clock: Callable[[], float] = time.monotonic,
) -> SlacSession:
    """Run EV-side SLAC matching over `link`.

    Sequence: PARM.REQ -> PARM.CNF -> START_ATTEN_CHAR.IND -> N x MNBC_SOUND.IND
    -> ATTEN_CHAR.IND/RSP -> SLAC_MATCH.REQ/CNF. Frames carrying another run_id
    are ignored. After matching, the CM_SET_KEY.REQ that would configure the
    local modem is recorded in the capture (direction `local`), never sent.

    Args:
        link: Frame channel toward the EVSE.
        timing: Sound count, per-stage timeout and identity.
        pilot: Basic signaling line; must already be in state B.
        capture: Optional transcript receiving every frame.
        clock: Monotonic clock, injectable for tests.

    Returns:
        Final session; `Failed` carries the stage that timed out.
    """

    if pilot is not None:
        assert pilot.state == "B", "basic signaling must reach CP state B before SLAC"
    channel: FrameChannel = link
    if capture is not None:
        channel = CapturingChannel(
            channel=link, capture=capture, layer=LAYER_MME, summarize=summarize_mme
        )
    run = _SlacRun(link=channel, timing=timing, clock=clock)
    time_out_units = max(1, int(timing.stage_timeout_s * 1000) // SLAC_TIMEOUT_UNIT_MS)

    run.send(SlacParmReq(run_id=run.run_id), dst=BROADCAST_MAC)
    run.advance(SlacState.PARM_SENT)
    answer = run.await_message(mmtype=CM_SLAC_PARM_CNF)
    if answer is None:
        return run.fail()
    run.evse_mac = answer[0].src_mac

    run.advance(SlacState.SOUNDING)
    run.send(
        StartAttenCharInd(
            num_sounds=timing.sound_count,
            time_out=time_out_units,
            forwarding_sta=timing.ev_mac,
            run_id=run.run_id,
        ),
        dst=BROADCAST_MAC,
    )
    for remaining in range(timing.sound_count - 1, -1, -1):
        run.send(
            MnbcSoundInd(
                sender_id=timing.pev_id,
                count=remaining,
                run_id=run.run_id,
                random=os.urandom(16),
            ),
            dst=BROADCAST_MAC,
        )
    answer = run.await_message(mmtype=CM_ATTEN_CHAR_IND)
    if answer is None:
        return run.fail()
    atten: AttenCharInd = answer[1]
    run.advance(SlacState.ATTEN_RECEIVED)
    run.send(
        AttenCharRsp(
            source_address=timing.ev_mac,
            run_id=run.run_id,
            source_id=atten.source_id,
            resp_id=atten.resp_id,
        ),
        dst=run.evse_mac,
    )

    run.send(
        SlacMatchReq(
            pev_id=timing.pev_id,
            pev_mac=timing.ev_mac,
            evse_mac=run.evse_mac,
            run_id=run.run_id,
        ),
        dst=run.evse_mac,
    )
    run.advance(SlacState.MATCH_SENT)
    answer = run.await_message(mmtype=CM_SLAC_MATCH_CNF)
    if answer is None:
        return run.fail()
    confirm: SlacMatchCnf = answer[1]
    run.advance(SlacState.MATCHED)
    logger.info("slac matched with %s", format_mac(run.evse_mac))
    if capture is not None:
        set_key = slac_frame(
            message=SetKeyReq(nid=confirm.nid, nmk=confirm.nmk),
            src=timing.ev_mac,
            dst=timing.ev_mac,
        )
        data = encode_mme(set_key)
        capture.record(
            direction=DIRECTION_LOCAL,
            layer=LAYER_MME,
            data=data,
            summary=summarize_mme(data),
        )
    return run.finish(
        attenuation_profile=atten.attenuation_profile,
        nid=confirm.nid,
        nmk=confirm.nmk,
    )
