"""Desk-scale EVSE: the counterpart of every probe layer, driven by a profile.

A profile states what a station supports and how it reacts (TLS policy on
SDP, injected SLAC faults). The simulator answers SLAC and SDP on the
channels it is given and serves the application handshake on localhost TCP
(plain and TLS) listeners. It never goes past the handshake.
"""

from __future__ import annotations

import json
import logging
import random
import shutil
import socket
import ssl
import tempfile
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

from ccs_audit.app_handshake import (
    SupportedProtocol,
    decode_handshake_request,
    encode_handshake_response,
    protocol_for_schema,
    select_protocol,
)
from ccs_audit.artifacts import KIND_PROFILES, parse_artifact
from ccs_audit.constants import (
    DEFAULT_SIM_ATTENUATION_DB,
    DEFAULT_SIM_NID,
    DEFAULT_SIM_NMK,
    DESK_EVSE_HOST,
    DESK_EVSE_MAC,
    FIXTURE_PKI_TOKEN,
)
from ccs_audit.errors import DecodeError, InputError, ProbeRuntimeError, ProfileError
from ccs_audit.hpgp_slac import (
    AttenCharInd,
    AttenCharRsp,
    MnbcSoundInd,
    PilotLine,
    SlacMatchCnf,
    SlacMatchReq,
    SlacParmCnf,
    SlacParmReq,
    StartAttenCharInd,
    decode_mme,
    decode_slac_message,
    encode_mme,
    slac_frame,
)
from ccs_audit.link_transport import FrameChannel
from ccs_audit.pki_fixtures import default_fixture_pki
from ccs_audit.v2gtp_sdp import (
    SdpResponse,
    SdpSecurity,
    V2gtpMessage,
    decode_sdp_request,
    encode_sdp_response,
    encode_v2gtp,
    ip_to_sdp_bytes,
    read_v2gtp_message,
)
from ccs_audit.wire_constants import (
    PAYLOAD_TYPE_EXI,
    PROTOCOL_VERSIONS,
    SECC_DYNAMIC_PORT_MAX,
    SECC_DYNAMIC_PORT_MIN,
    SLAC_AAG_GROUPS,
    SLAC_ID_LEN,
)

logger = logging.getLogger(__name__)

SDP_POLICY_ANSWER_TLS = "answer_tls"
SDP_POLICY_DOWNGRADE = "answer_plaintext_downgrade"
SDP_POLICY_SILENT = "silent"
SDP_POLICIES = (SDP_POLICY_ANSWER_TLS, SDP_POLICY_DOWNGRADE, SDP_POLICY_SILENT)

SLAC_FAULT_NONE = "none"
SLAC_FAULT_NO_PARM_CNF = "no_parm_cnf"
SLAC_FAULT_WRONG_RUN_ID = "wrong_run_id"
SLAC_FAULTS = (SLAC_FAULT_NONE, SLAC_FAULT_NO_PARM_CNF, SLAC_FAULT_WRONG_RUN_ID)

_POLL_S = 0.01
_BIND_ATTEMPTS = 20
_CONNECTION_TIMEOUT_S = 2.0


@dataclass(frozen=True)
class EvseProfile:
    """Declared behavior of one simulated station.

    Args:
        name: Unique profile name; also the desk station id prefix.
        cpo: Canonical CPO label.
        manufacturer: Canonical manufacturer label.
        model: Station model.
        install_years: Known installation years (empty when unknown).
        supported_protocols: Protocol tokens the SECC accepts.
        preferred_protocol: Token the SECC picks when the EV offers it.
        tls_enabled: Whether a TLS listener exists.
        sdp_policy: Reaction to an SDP request demanding TLS.
        chain_path: `fixture-pki`, `fixture-pki:expired`, or a PEM bundle
            path with a sibling key file.
        slac_fault: Injected matching fault.

    Example:
        >>> EvseProfile(name="x", cpo="c", manufacturer="m", model="y",
        ...     supported_protocols=("DIN70121",), preferred_protocol="DIN70121").expected_flags()["supports_din"]
        True
    """

    name: str
    cpo: str
    manufacturer: str
    model: str
    supported_protocols: Tuple[str, ...]
    preferred_protocol: str
    install_years: Tuple[int, ...] = ()
    tls_enabled: bool = False
    sdp_policy: str = SDP_POLICY_ANSWER_TLS
    chain_path: Optional[str] = None
    slac_fault: str = SLAC_FAULT_NONE

    def __post_init__(self) -> None:
        if not self.name:
            raise ProfileError(profile=self.name, field="name", reason="must not be empty")
        if not self.supported_protocols:
            raise ProfileError(
                profile=self.name, field="protocols", reason="at least one protocol required"
            )
        for token in self.supported_protocols:
            if token not in PROTOCOL_VERSIONS:
                raise ProfileError(
                    profile=self.name, field="protocols", reason=f"unknown protocol {token!r}"
                )
        if self.preferred_protocol not in self.supported_protocols:
            raise ProfileError(
                profile=self.name,
                field="preferred",
                reason=f"{self.preferred_protocol!r} is not among the supported protocols",
            )
        if self.tls_enabled and not self.chain_path:
            raise ProfileError(
                profile=self.name, field="chain_path", reason="tls enabled without a chain"
            )
        if self.sdp_policy not in SDP_POLICIES:
            raise ProfileError(
                profile=self.name, field="sdp_policy", reason=f"unknown policy {self.sdp_policy!r}"
            )
        if self.slac_fault not in SLAC_FAULTS:
            raise ProfileError(
                profile=self.name, field="slac_fault", reason=f"unknown fault {self.slac_fault!r}"
            )

    @property
    def install_year(self) -> Optional[int]:
        return self.install_years[0] if self.install_years else None

    def expected_flags(self) -> Dict[str, Any]:
        """Capability flags a correct probe must derive from this profile."""

        if self.slac_fault != SLAC_FAULT_NONE:
            return {
                "supports_tls": False,
                "supports_iso2": False,
                "supports_din": False,
                "preferred_protocol": None,
            }
        return {
            "supports_tls": self.tls_enabled and self.sdp_policy == SDP_POLICY_ANSWER_TLS,
            "supports_iso2": "ISO15118_2" in self.supported_protocols,
            "supports_din": "DIN70121" in self.supported_protocols,
            "preferred_protocol": self.preferred_protocol,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "EvseProfile":
        name = str(data.get("name") or "")
        year = data.get("year")
        if year is None:
            years: Tuple[int, ...] = ()
        elif isinstance(year, int) and not isinstance(year, bool):
            years = (year,)
        elif isinstance(year, list) and all(
            isinstance(item, int) and not isinstance(item, bool) for item in year
        ):
            years = tuple(year)
        else:
            raise ProfileError(profile=name, field="year", reason="int, list of ints or null")
        protocols = data.get("protocols")
        if not isinstance(protocols, list):
            raise ProfileError(profile=name, field="protocols", reason="must be a list")
        return cls(
            name=name,
            cpo=str(data.get("cpo") or ""),
            manufacturer=str(data.get("manufacturer") or ""),
            model=str(data.get("model") or ""),
            install_years=years,
            supported_protocols=tuple(str(item) for item in protocols),
            preferred_protocol=str(data.get("preferred") or ""),
            tls_enabled=bool(data.get("tls", False)),
            sdp_policy=str(data.get("sdp_policy") or SDP_POLICY_ANSWER_TLS),
            chain_path=data.get("chain_path"),
            slac_fault=str(data.get("slac_fault") or SLAC_FAULT_NONE),
        )

    def to_dict(self) -> Dict[str, Any]:
        return {
            "name": self.name,
            "cpo": self.cpo,
            "manufacturer": self.manufacturer,
            "model": self.model,
            "year": list(self.install_years) or None,
            "protocols": list(self.supported_protocols),
            "preferred": self.preferred_protocol,
            "tls": self.tls_enabled,
            "sdp_policy": self.sdp_policy,
            "chain_path": self.chain_path,
            "slac_fault": self.slac_fault,
        }


def load_profile_fixtures(path: Path) -> List[EvseProfile]:
    """Read profiles from a JSON list or a `evse_profiles` artifact.

    Raises:
        InputError: unreadable or malformed file.
        ProfileError: a profile violates an invariant (names profile and field).
    """

    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise InputError(f"cannot read profiles {path}: {exc.strerror or exc}") from exc
    return parse_profiles(text=text, source=str(path))


def parse_profiles(text: str, source: str = "<memory>") -> List[EvseProfile]:
    try:
        document = json.loads(text)
    except json.JSONDecodeError as exc:
        raise InputError(f"{source}: not valid JSON ({exc.msg})") from exc
    if isinstance(document, dict):
        document = parse_artifact(text=text, kind=KIND_PROFILES, source=source).get(
            "profiles", []
        )
    if not isinstance(document, list):
        raise InputError(f"{source}: expected a list of profiles")
    profiles = []
    for item in document:
        if not isinstance(item, dict):
            raise InputError(f"{source}: profile entries must be objects")
        profiles.append(EvseProfile.from_dict(item))
    names = [profile.name for profile in profiles]
    duplicates = sorted({name for name in names if names.count(name) > 1})
    if duplicates:
        raise ProfileError(profile=duplicates[0], field="name", reason="duplicate profile name")
    return profiles


# ---------------------------------------------------------------------------
# TCP / TLS endpoints
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class HandshakeLogEntry:
    secure: bool
    offered: Tuple[str, ...]
    response_code: Optional[str]
    chosen_protocol: Optional[str]
    error: Optional[str] = None

    def to_dict(self) -> Dict[str, Any]:
        return {
            "secure": self.secure,
            "offered": list(self.offered),
            "response_code": self.response_code,
            "chosen_protocol": self.chosen_protocol,
            "error": self.error,
        }


def _bind_listener(host: str) -> socket.socket:
    """Listening socket on a port in the SECC dynamic range when possible."""

    for _ in range(_BIND_ATTEMPTS):
        port = random.randint(SECC_DYNAMIC_PORT_MIN, SECC_DYNAMIC_PORT_MAX)
        sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        try:
            sock.bind((host, port))
        except OSError:
            sock.close()
            continue
        sock.listen(8)
        return sock
    sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    try:
        sock.bind((host, 0))
    except OSError as exc:
        sock.close()
        raise ProbeRuntimeError(f"cannot bind simulator listener on {host}: {exc}") from exc
    sock.listen(8)
    return sock


class EvseEndpoints:
    """Plain and (optionally) TLS handshake listeners for one profile.

    Use as a context manager; ports are available after entering.
    """

    def __init__(self, profile: EvseProfile, host: str = DESK_EVSE_HOST) -> None:
        self.profile = profile
        self.host = host
        self.plain_port: Optional[int] = None
        self.tls_port: Optional[int] = None
        self._sockets: List[socket.socket] = []
        self._threads: List[threading.Thread] = []
        self._stopping = threading.Event()
        self._lock = threading.Lock()
        self._log: List[HandshakeLogEntry] = []
        self._tempdir: Optional[str] = None
        self._tls_context: Optional[ssl.SSLContext] = None
        self._supported = [
            SupportedProtocol.for_token(token) for token in profile.supported_protocols
        ]

    def __enter__(self) -> "EvseEndpoints":
        self.start()
        return self

    def __exit__(self, *_: Any) -> None:
        self.close()

    def start(self) -> None:
        plain = _bind_listener(self.host)
        self.plain_port = plain.getsockname()[1]
        self._serve(listener=plain, secure=False)
        if self.profile.tls_enabled:
            self._tls_context = self._server_context()
            secure = _bind_listener(self.host)
            self.tls_port = secure.getsockname()[1]
            self._serve(listener=secure, secure=True)
        logger.debug(
            "simulator %s listening plain=%s tls=%s",
            self.profile.name,
            self.plain_port,
            self.tls_port,
        )

    def _server_context(self) -> ssl.SSLContext:
        chain_file, key_file = self._chain_files()
        context = ssl.SSLContext(ssl.PROTOCOL_TLS_SERVER)
        context.minimum_version = ssl.TLSVersion.TLSv1_2
        try:
            context.load_cert_chain(certfile=str(chain_file), keyfile=str(key_file))
        except (OSError, ssl.SSLError) as exc:
            raise ProbeRuntimeError(
                f"profile {self.profile.name}: cannot load TLS chain: {exc}"
            ) from exc
        return context

    def _chain_files(self) -> Tuple[Path, Path]:
        token = self.profile.chain_path or ""
        if token.startswith(FIXTURE_PKI_TOKEN):
            expired = token.endswith(":expired")
            pki = default_fixture_pki(leaf_expired=expired)
            self._tempdir = tempfile.mkdtemp(prefix="ccsaudit-sim-")
            out_dir = Path(self._tempdir)
            (out_dir / "chain.pem").write_bytes(pki.chain_pem())
            (out_dir / "leaf.key").write_bytes(pki.leaf_key_pem())
            return out_dir / "chain.pem", out_dir / "leaf.key"
        chain_file = Path(token)
        key_file = chain_file.with_suffix(".key")
        if not key_file.exists():
            key_file = chain_file.parent / "leaf.key"
        return chain_file, key_file

    def _serve(self, listener: socket.socket, secure: bool) -> None:
        listener.settimeout(0.1)
        self._sockets.append(listener)
        thread = threading.Thread(
            target=self._accept_loop,
            args=(listener, secure),
            name=f"evse-{self.profile.name}-{'tls' if secure else 'tcp'}",
            daemon=True,
        )
        self._threads.append(thread)
        thread.start()

    def _accept_loop(self, listener: socket.socket, secure: bool) -> None:
        while not self._stopping.is_set():
            try:
                conn, _ = listener.accept()
            except socket.timeout:
                continue
            except OSError:
                return
            worker = threading.Thread(
                target=self._handle, args=(conn, secure), daemon=True
            )
            worker.start()

    def _handle(self, conn: socket.socket, secure: bool) -> None:
        conn.settimeout(_CONNECTION_TIMEOUT_S)
        stream: socket.socket = conn
        try:
            if secure:
                assert self._tls_context is not None
                stream = self._tls_context.wrap_socket(conn, server_side=True)
            self._answer(stream=stream, secure=secure)
        except (OSError, ssl.SSLError) as exc:
            logger.debug("simulator connection ended: %s", exc)
        finally:
            stream.close()

    def _answer(self, stream: socket.socket, secure: bool) -> None:
        try:
            message = read_v2gtp_message(stream)
            if message.payload_type != PAYLOAD_TYPE_EXI:
                raise DecodeError(layer="v2gtp", reason="not_exi", offset=2)
            entries = decode_handshake_request(message.payload)
        except DecodeError as exc:
            self._record(
                HandshakeLogEntry(
                    secure=secure,
                    offered=(),
                    response_code=None,
                    chosen_protocol=None,
                    error=exc.reason,
                )
            )
            return
        response = select_protocol(
            evse_supported=self._supported,
            ev_entries=entries,
            evse_preference=self.profile.preferred_protocol,
        )
        self._record(
            HandshakeLogEntry(
                secure=secure,
                offered=tuple(entry.protocol or entry.namespace_uri for entry in entries),
                response_code=response.response_code.name,
                chosen_protocol=protocol_for_schema(entries, response.chosen_schema_id),
            )
        )
        stream.sendall(
            encode_v2gtp(
                V2gtpMessage(
                    payload_type=PAYLOAD_TYPE_EXI,
                    payload=encode_handshake_response(response),
                )
            )
        )
        # Negotiation ends here; wait for the EV to hang up.
        while stream.recv(4096):
            pass

    def _record(self, entry: HandshakeLogEntry) -> None:
        with self._lock:
            self._log.append(entry)

    def handshake_log(self) -> List[HandshakeLogEntry]:
        with self._lock:
            return list(self._log)

    def close(self) -> None:
        self._stopping.set()
        for sock in self._sockets:
            sock.close()
        for thread in self._threads:
            thread.join(timeout=1.0)
        if self._tempdir is not None:
            shutil.rmtree(self._tempdir, ignore_errors=True)
            self._tempdir = None


# ---------------------------------------------------------------------------
# SLAC + SDP responder
# ---------------------------------------------------------------------------


@dataclass
class EvseSessionLog:
    """What the simulator saw and answered during one session."""

    profile: str
    slac_events: List[str] = field(default_factory=list)
    sdp_answers: List[Dict[str, Any]] = field(default_factory=list)
    handshakes: List[HandshakeLogEntry] = field(default_factory=list)
    cp_states: Tuple[str, ...] = ()

    def to_dict(self) -> Dict[str, Any]:
        return {
            "profile": self.profile,
            "slac_events": list(self.slac_events),
            "sdp_answers": list(self.sdp_answers),
            "handshakes": [entry.to_dict() for entry in self.handshakes],
            "cp_states": list(self.cp_states),
        }


class _SlacResponder:
    def __init__(self, profile: EvseProfile, link: FrameChannel, log: EvseSessionLog) -> None:
        self.profile = profile
        self.link = link
        self.log = log
        self.sounds = 0
        self.expected_sounds = 0
        self.attenuation_sent = False

    def _run_id(self, run_id: bytes) -> bytes:
        if self.profile.slac_fault == SLAC_FAULT_WRONG_RUN_ID:
            return bytes(octet ^ 0xFF for octet in run_id)
        return run_id

    def _send(self, message: Any, dst: bytes) -> None:
        self.link.send(encode_mme(slac_frame(message=message, src=DESK_EVSE_MAC, dst=dst)))

    def handle(self, data: bytes) -> None:
        try:
            frame = decode_mme(data)
            message = decode_slac_message(frame)
        except DecodeError as exc:
            self.log.slac_events.append(f"undecodable:{exc.reason}")
            return
        if message is None:
            self.log.slac_events.append(f"ignored:{frame.name}")
            return
        self.log.slac_events.append(frame.name)
        ev_mac = frame.src_mac
        if isinstance(message, SlacParmReq):
            if self.profile.slac_fault == SLAC_FAULT_NO_PARM_CNF:
                return
            self.sounds = 0
            self.attenuation_sent = False
            self._send(
                SlacParmCnf(forwarding_sta=ev_mac, run_id=self._run_id(message.run_id)),
                dst=ev_mac,
            )
        elif isinstance(message, StartAttenCharInd):
            self.expected_sounds = message.num_sounds
        elif isinstance(message, MnbcSoundInd):
            self.sounds += 1
            if message.count == 0 and not self.attenuation_sent:
                self.attenuation_sent = True
                self._send(
                    AttenCharInd(
                        source_address=ev_mac,
                        run_id=self._run_id(message.run_id),
                        source_id=message.sender_id,
                        resp_id=bytes(SLAC_ID_LEN),
                        num_sounds=self.sounds,
                        num_groups=SLAC_AAG_GROUPS,
                        attenuation=bytes([DEFAULT_SIM_ATTENUATION_DB] * SLAC_AAG_GROUPS),
                    ),
                    dst=ev_mac,
                )
        elif isinstance(message, AttenCharRsp):
            if message.result != 0:
                self.log.slac_events.append("atten_rsp_failure")
        elif isinstance(message, SlacMatchReq):
            self._send(
                SlacMatchCnf(
                    pev_id=message.pev_id,
                    pev_mac=message.pev_mac,
                    evse_id=message.evse_id,
                    evse_mac=DESK_EVSE_MAC,
                    run_id=self._run_id(message.run_id),
                    nid=DEFAULT_SIM_NID,
                    nmk=DEFAULT_SIM_NMK,
                ),
                dst=ev_mac,
            )


def _sdp_answer(
    profile: EvseProfile, endpoints: EvseEndpoints, requested: SdpSecurity
) -> Optional[SdpResponse]:
    plain = SdpResponse(
        endpoint_ip=ip_to_sdp_bytes(endpoints.host),
        endpoint_port=endpoints.plain_port or 0,
        security=SdpSecurity.NO_TLS,
    )
    if requested is SdpSecurity.NO_TLS:
        return plain
    if profile.sdp_policy == SDP_POLICY_SILENT:
        return None
    if (
        profile.sdp_policy == SDP_POLICY_ANSWER_TLS
        and profile.tls_enabled
        and endpoints.tls_port is not None
    ):
        return SdpResponse(
            endpoint_ip=ip_to_sdp_bytes(endpoints.host),
            endpoint_port=endpoints.tls_port,
            security=SdpSecurity.TLS_REQUIRED,
        )
    return plain


def run_evse(
    profile: EvseProfile,
    link: FrameChannel,
    datagrams: FrameChannel,
    endpoints: EvseEndpoints,
    stop_event: threading.Event,
    pilot: Optional[PilotLine] = None,
) -> EvseSessionLog:
    """Serve one probe session until `stop_event` is set.

    Args:
        profile: Station behavior.
        link: Powerline frame channel (SLAC).
        datagrams: SDP datagram channel.
        endpoints: Running handshake listeners of this profile.
        stop_event: Set by the caller when the session is over.
        pilot: The EV's pilot line, read for the session log only.

    Returns:
        Session log including the handshakes served during the session.
    """

    log = EvseSessionLog(profile=profile.name)
    already_served = len(endpoints.handshake_log())
    slac = _SlacResponder(profile=profile, link=link, log=log)
    while not stop_event.is_set():
        data = link.receive(timeout=_POLL_S)
        if data is not None:
            slac.handle(data)
        datagram = datagrams.receive(timeout=_POLL_S)
        if datagram is None:
            continue
        try:
            request = decode_sdp_request(datagram)
        except DecodeError as exc:
            log.sdp_answers.append({"error": exc.reason})
            continue
        answer = _sdp_answer(profile=profile, endpoints=endpoints, requested=request.security)
        log.sdp_answers.append(
            {
                "requested": request.security.name,
                "answered": answer.security.name if answer is not None else None,
            }
        )
        if answer is not None:
            datagrams.send(encode_sdp_response(answer))
    log.handshakes = endpoints.handshake_log()[already_served:]
    if pilot is not None:
        log.cp_states = pilot.states()
    return log


def profiles_to_payload(profiles: Sequence[EvseProfile]) -> Dict[str, Any]:
    return {"profiles": [profile.to_dict() for profile in profiles]}
