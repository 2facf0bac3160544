"""Four-scenario station probe, report assembly and assumption checks.

Each scenario is an independent session: plug in (CP state B), SLAC, SDP,
then either a TLS session or a plaintext TCP connection carrying exactly one
application-protocol handshake, then unplug. Nothing past the handshake is
ever sent.

Scenarios:
    1. SDP demands TLS; handshake offers ISO 15118-2 and DIN 70121 inside TLS.
    2. SDP without TLS; handshake offers ISO 15118-2 only.
    3. SDP without TLS; handshake offers -20, -2 and DIN (preference check).
    4. SDP without TLS; handshake offers DIN 70121 only.
"""

from __future__ import annotations

import contextlib
import datetime as dt
import logging
import re
import socket
import ssl
import threading
from collections import Counter, defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import (
    Any,
    Dict,
    Iterator,
    List,
    Mapping,
    Optional,
    Protocol,
    Sequence,
    Set,
    Tuple,
)

from ccs_audit.app_handshake import (
    AppProtocolEntry,
    HandshakeResponse,
    ResponseCode,
    build_advertisement,
    decode_handshake_response,
    encode_handshake_request,
    protocol_for_schema,
    summarize_handshake,
)
from ccs_audit.artifacts import KIND_STATION_REPORT, read_artifact, write_artifact
from ccs_audit.config_store import RunConfig
from ccs_audit.constants import (
    DEFAULT_EV_PRIORITIES,
    DEFAULT_SCENARIO_RETRIES,
    DEFAULT_SDP_RETRIES,
    DEFAULT_SDP_TIMEOUT_S,
    DEFAULT_TLS_DEADLINE_S,
    RUN_META_FILENAME,
    TRANSPORT_INPROC,
    TRANSPORT_UDP,
)
from ccs_audit.errors import DecodeError, InputError, SchemaError
from ccs_audit.evse_sim import EvseEndpoints, EvseProfile, EvseSessionLog, run_evse
from ccs_audit.format_utils import collapse_label
from ccs_audit.hpgp_slac import PilotLine, SlacConfig, run_slac_ev
from ccs_audit.link_transport import (
    DIRECTION_LOCAL,
    DIRECTION_RX,
    DIRECTION_TX,
    LAYER_MME,
    LAYER_SDP,
    LAYER_V2GTP,
    CaptureRecord,
    FrameCapture,
    FrameChannel,
    LossPredicate,
    RawEthernetChannel,
    inproc_pair,
    sdp_multicast_channel,
    udp_pair,
)
from ccs_audit.market import ClusterKey
from ccs_audit.tls_probe import TlsProbeResult, TrustStore, export_chain_pem, probe_tls
from ccs_audit.v2gtp_sdp import (
    SdpRequest,
    SdpSecurity,
    V2gtpMessage,
    encode_v2gtp,
    read_v2gtp_message,
    sdp_discover,
)
from ccs_audit.wire_constants import MMTYPE_NAMES, PAYLOAD_TYPE_EXI, PAYLOAD_TYPE_NAMES

logger = logging.getLogger(__name__)

ISO2 = "ISO15118_2"
DIN = "DIN70121"
ISO20 = "ISO15118_20"

A1_MANUFACTURER_CAPABILITY = "A1_manufacturer_capability"
A2_CPO_CONFIGURATION = "A2_cpo_configuration"

SDP_NO_RESPONSE = "no_response"
HANDSHAKE_NO_CONNECTION = "tcp_connect"

_SESSION_JOIN_S = 2.0
_SAFE_NAME_RE = re.compile(r"[^A-Za-z0-9._-]+")


@dataclass(frozen=True)
class Scenario:
    scenario_id: int
    security: SdpSecurity
    protocols: Tuple[str, ...]
    purpose: str


SCENARIOS: Dict[int, Scenario] = {
    1: Scenario(1, SdpSecurity.TLS_REQUIRED, (ISO2, DIN), "TLS support and chain"),
    2: Scenario(2, SdpSecurity.NO_TLS, (ISO2,), "ISO 15118-2 availability"),
    3: Scenario(3, SdpSecurity.NO_TLS, (ISO20, ISO2, DIN), "preferred protocol"),
    4: Scenario(4, SdpSecurity.NO_TLS, (DIN,), "DIN 70121 availability"),
}
SCENARIO_ORDER = (1, 2, 3, 4)
AVAILABILITY_SCENARIOS = (1, 2, 4)
PREFERENCE_SCENARIO = 3


# ---------------------------------------------------------------------------
# Report types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class StationIdentity:
    source_id: str
    cpo: str
    manufacturer: str
    model: Optional[str] = None
    install_year: Optional[int] = None

    @property
    def key(self) -> ClusterKey:
        return ClusterKey(cpo=self.cpo, manufacturer=self.manufacturer)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "id": self.source_id,
            "cpo": self.cpo,
            "manufacturer": self.manufacturer,
            "model": self.model,
            "year": self.install_year,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "StationIdentity":
        year = data.get("year")
        return cls(
            source_id=str(data["id"]),
            cpo=str(data["cpo"]),
            manufacturer=str(data["manufacturer"]),
            model=data.get("model"),
            install_year=None if year is None else int(year),
        )


@dataclass(frozen=True)
class ScenarioOutcome:
    """What one scenario observed.

    `tls_result` exists when scenario 1 was answered with a TLS endpoint;
    `handshake_result` exists when the handshake exchange completed.
    """

    scenario_id: int
    advertised: Tuple[str, ...]
    slac_ok: bool
    slac_failure_stage: Optional[str] = None
    sdp_result: Optional[str] = None
    sdp_downgraded: bool = False
    tls_result: Optional[TlsProbeResult] = None
    handshake_result: Optional[HandshakeResponse] = None
    handshake_failure: Optional[str] = None
    chosen_protocol: Optional[str] = None
    aborted: bool = False
    attempts: int = 1
    pilot_states: Tuple[str, ...] = ()
    transcript_ref: Optional[str] = None

    def __post_init__(self) -> None:
        assert self.scenario_id in SCENARIOS, f"unknown scenario {self.scenario_id}"
        assert self.slac_ok == (self.slac_failure_stage is None)

    @property
    def handshake_ok(self) -> bool:
        return self.handshake_result is not None and self.handshake_result.ok

    def to_dict(self) -> Dict[str, Any]:
        handshake = None
        if self.handshake_result is not None:
            handshake = {
                "response_code": self.handshake_result.response_code.name,
                "chosen_schema_id": self.handshake_result.chosen_schema_id,
            }
        return {
            "scenario_id": self.scenario_id,
            "advertised": list(self.advertised),
            "slac_ok": self.slac_ok,
            "slac_failure_stage": self.slac_failure_stage,
            "sdp_result": self.sdp_result,
            "sdp_downgraded": self.sdp_downgraded,
            "tls_result": None if self.tls_result is None else self.tls_result.to_dict(),
            "handshake_result": handshake,
            "handshake_failure": self.handshake_failure,
            "chosen_protocol": self.chosen_protocol,
            "aborted": self.aborted,
            "attempts": self.attempts,
            "pilot_states": list(self.pilot_states),
            "transcript_ref": self.transcript_ref,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "ScenarioOutcome":
        handshake = data.get("handshake_result")
        tls = data.get("tls_result")
        return cls(
            scenario_id=int(data["scenario_id"]),
            advertised=tuple(data.get("advertised", ())),
            slac_ok=bool(data["slac_ok"]),
            slac_failure_stage=data.get("slac_failure_stage"),
            sdp_result=data.get("sdp_result"),
            sdp_downgraded=bool(data.get("sdp_downgraded", False)),
            tls_result=None if tls is None else TlsProbeResult.from_dict(tls),
            handshake_result=None
            if handshake is None
            else HandshakeResponse(
                response_code=ResponseCode[handshake["response_code"]],
                chosen_schema_id=handshake.get("chosen_schema_id"),
            ),
            handshake_failure=data.get("handshake_failure"),
            chosen_protocol=data.get("chosen_protocol"),
            aborted=bool(data.get("aborted", False)),
            attempts=int(data.get("attempts", 1)),
            pilot_states=tuple(data.get("pilot_states", ())),
            transcript_ref=data.get("transcript_ref"),
        )


@dataclass(frozen=True)
class DerivedFlags:
    supports_tls: bool
    supports_iso2: bool
    supports_din: bool
    preferred_protocol: Optional[str] = None
    chain_valid: Optional[bool] = None
    matched_root: Optional[str] = None

    def signature(self) -> Tuple[bool, bool, bool, Optional[str]]:
        """The configuration compared across stations of one cluster."""

        return (self.supports_tls, self.supports_iso2, self.supports_din, self.preferred_protocol)

    def capability(self) -> Tuple[str, ...]:
        return tuple(
            token
            for token, present in ((DIN, self.supports_din), (ISO2, self.supports_iso2))
            if present
        )

    def to_dict(self) -> Dict[str, Any]:
        return {
            "supports_tls": self.supports_tls,
            "supports_iso2": self.supports_iso2,
            "supports_din": self.supports_din,
            "preferred_protocol": self.preferred_protocol,
            "chain_valid": self.chain_valid,
            "matched_root": self.matched_root,
        }


def recompute_derived(outcomes: Sequence[ScenarioOutcome]) -> DerivedFlags:
    """Derive capability flags from scenario outcomes alone.

    TLS: scenario 1 completed a TLS handshake and a certificate was presented.
    Protocol availability: any of scenarios 1, 2, 4 negotiated it.
    Preference: the protocol chosen in scenario 3.
    """

    by_id = {outcome.scenario_id: outcome for outcome in outcomes}
    first = by_id.get(1)
    tls = first.tls_result if first is not None else None
    supports_tls = bool(tls is not None and tls.handshake_ok and tls.presented_chain)
    chosen = {
        outcome.chosen_protocol
        for outcome in outcomes
        if outcome.scenario_id in AVAILABILITY_SCENARIOS and outcome.handshake_ok
    }
    preference = by_id.get(PREFERENCE_SCENARIO)
    return DerivedFlags(
        supports_tls=supports_tls,
        supports_iso2=ISO2 in chosen,
        supports_din=DIN in chosen,
        preferred_protocol=preference.chosen_protocol
        if preference is not None and preference.handshake_ok
        else None,
        chain_valid=tls.chain_valid if supports_tls and tls is not None else None,
        matched_root=tls.matched_root if supports_tls and tls is not None else None,
    )


@dataclass(frozen=True)
class StationReport:
    station: StationIdentity
    outcomes: Tuple[ScenarioOutcome, ...]
    derived: DerivedFlags
    captures: Tuple[str, ...] = ()

    @property
    def key(self) -> ClusterKey:
        return self.station.key

    @property
    def is_conclusive(self) -> bool:
        """All four scenarios got past SLAC; only such reports are evidence."""

        seen = {outcome.scenario_id for outcome in self.outcomes if outcome.slac_ok}
        return seen == set(SCENARIOS)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "station": self.station.to_dict(),
            "scenarios": [outcome.to_dict() for outcome in self.outcomes],
            "derived": self.derived.to_dict(),
            "captures": list(self.captures),
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "StationReport":
        outcomes = tuple(
            sorted(
                (ScenarioOutcome.from_dict(item) for item in data["scenarios"]),
                key=lambda item: item.scenario_id,
            )
        )
        return cls(
            station=StationIdentity.from_dict(data["station"]),
            outcomes=outcomes,
            derived=recompute_derived(outcomes),
            captures=tuple(data.get("captures", ())),
        )


# ---------------------------------------------------------------------------
# Targets
# ---------------------------------------------------------------------------


@dataclass
class ProbeSession:
    link: FrameChannel
    datagrams: FrameChannel
    pilot: PilotLine


class ProbeTarget(Protocol):
    identity: StationIdentity

    def __enter__(self) -> Any: ...

    def __exit__(self, *exc: Any) -> None: ...

    def open_session(self) -> contextlib.AbstractContextManager[ProbeSession]: ...

    def resolve_host(self, host: str) -> str: ...


class DeskTarget:
    """A simulated station: handshake listeners plus one responder thread per session.

    Args:
        profile: Station behavior to simulate.
        identity: Report identity; defaults to the profile's first install year.
        transport: `inproc` queues or `udp` localhost datagrams.
        link_loss: Optional loss predicate on frames the EV sends.
    """

    def __init__(
        self,
        profile: EvseProfile,
        identity: Optional[StationIdentity] = None,
        transport: str = TRANSPORT_INPROC,
        link_loss: Optional[LossPredicate] = None,
    ) -> None:
        assert transport in (TRANSPORT_INPROC, TRANSPORT_UDP), f"unknown transport {transport!r}"
        self.profile = profile
        self.identity = identity or StationIdentity(
            source_id=profile.name,
            cpo=profile.cpo,
            manufacturer=profile.manufacturer,
            model=profile.model,
            install_year=profile.install_year,
        )
        self.transport = transport
        self.link_loss = link_loss
        self.session_logs: List[EvseSessionLog] = []
        self._endpoints: Optional[EvseEndpoints] = None

    def __enter__(self) -> "DeskTarget":
        self._endpoints = EvseEndpoints(profile=self.profile)
        self._endpoints.start()
        return self

    def __exit__(self, *exc: Any) -> None:
        if self._endpoints is not None:
            self._endpoints.close()
            self._endpoints = None

    def _pairs(self) -> Tuple[Tuple[FrameChannel, FrameChannel], Tuple[FrameChannel, FrameChannel]]:
        if self.transport == TRANSPORT_UDP:
            return udp_pair(), udp_pair()
        return inproc_pair(ev_loss=self.link_loss), inproc_pair()

    @contextlib.contextmanager
    def open_session(self) -> Iterator[ProbeSession]:
        assert self._endpoints is not None, "enter the target before opening sessions"
        (link_ev, link_evse), (dgram_ev, dgram_evse) = self._pairs()
        pilot = PilotLine()
        stop = threading.Event()
        logs: List[EvseSessionLog] = []
        endpoints = self._endpoints
        worker = threading.Thread(
            target=lambda: logs.append(
                run_evse(
                    profile=self.profile,
                    link=link_evse,
                    datagrams=dgram_evse,
                    endpoints=endpoints,
                    stop_event=stop,
                    pilot=pilot,
                )
            ),
            name=f"evse-session-{self.profile.name}",
            daemon=True,
        )
        worker.start()
        try:
            yield ProbeSession(link=link_ev, datagrams=dgram_ev, pilot=pilot)
        finally:
            stop.set()
            worker.join(timeout=_SESSION_JOIN_S)
            for channel in (link_ev, link_evse, dgram_ev, dgram_evse):
                channel.close()
            self.session_logs.extend(logs)

    def resolve_host(self, host: str) -> str:
        return host


def desk_targets(
    profiles: Sequence[EvseProfile],
    transport: str = TRANSPORT_INPROC,
    per_year: bool = True,
) -> List[DeskTarget]:
    """One desk target per profile, or per (profile, install year).

    Example:
        >>> p = EvseProfile(name="p", cpo="c", manufacturer="m", model="x",
        ...     supported_protocols=("DIN70121",), preferred_protocol="DIN70121",
        ...     install_years=(2019, 2025))
        >>> [t.identity.source_id for t in desk_targets([p])]
        ['p-2019', 'p-2025']
    """

    targets = []
    for profile in profiles:
        years: Sequence[Optional[int]] = profile.install_years if per_year else ()
        if len(years) <= 1:
            targets.append(DeskTarget(profile=profile, transport=transport))
            continue
        for year in years:
            identity = StationIdentity(
                source_id=f"{profile.name}-{year}",
                cpo=profile.cpo,
                manufacturer=profile.manufacturer,
                model=profile.model,
                install_year=year,
            )
            targets.append(DeskTarget(profile=profile, identity=identity, transport=transport))
    return targets


class LiveTarget:
    """A real station reached through a HomePlug modem on `interface`.

    The pilot line is the operator's responsibility; it is tracked here only
    so the termination guard applies to live runs too.
    """

    def __init__(self, interface: str, identity: StationIdentity) -> None:
        self.interface = interface
        self.identity = identity

    def __enter__(self) -> "LiveTarget":
        return self

    def __exit__(self, *exc: Any) -> None:
        return None

    @contextlib.contextmanager
    def open_session(self) -> Iterator[ProbeSession]:
        link = RawEthernetChannel(interface=self.interface)
        datagrams = sdp_multicast_channel(interface=self.interface)
        try:
            yield ProbeSession(link=link, datagrams=datagrams, pilot=PilotLine())
        finally:
            link.close()
            datagrams.close()

    def resolve_host(self, host: str) -> str:
        if host.lower().startswith("fe80:") and "%" not in host:
            return f"{host}%{self.interface}"
        return host


# ---------------------------------------------------------------------------
# Scenario execution
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ProbeConfig:
    """Everything a scenario needs besides the target."""

    trust: TrustStore
    slac: SlacConfig = field(default_factory=SlacConfig)
    sdp_retries: int = DEFAULT_SDP_RETRIES
    sdp_timeout_s: float = DEFAULT_SDP_TIMEOUT_S
    tls_deadline_s: float = DEFAULT_TLS_DEADLINE_S
    scenario_retries: int = DEFAULT_SCENARIO_RETRIES
    ev_priorities: Mapping[str, int] = field(default_factory=lambda: dict(DEFAULT_EV_PRIORITIES))
    at_time: Optional[dt.datetime] = None
    scenario_order: Tuple[int, ...] = SCENARIO_ORDER
    capture_dir: Optional[Path] = None

    def __post_init__(self) -> None:
        assert sorted(self.scenario_order) == sorted(SCENARIOS), "scenario_order must list 1..4 once"
        assert self.scenario_retries >= 0

    @classmethod
    def from_run_config(
        cls,
        config: RunConfig,
        trust: TrustStore,
        at_time: Optional[dt.datetime] = None,
        capture_dir: Optional[Path] = None,
    ) -> "ProbeConfig":
        return cls(
            trust=trust,
            slac=SlacConfig(sound_count=config.sound_count, stage_timeout_s=config.slac_timeout_s),
            sdp_retries=config.sdp_retries,
            sdp_timeout_s=config.sdp_timeout_s,
            tls_deadline_s=config.tls_deadline_s,
            scenario_retries=config.scenario_retries,
            ev_priorities=dict(config.ev_priorities),
            at_time=at_time,
            capture_dir=capture_dir,
        )


@dataclass(frozen=True)
class _Exchange:
    response: Optional[HandshakeResponse] = None
    failure: Optional[str] = None


def _exchange_handshake(
    sock: socket.socket, entries: Sequence[AppProtocolEntry], capture: FrameCapture
) -> _Exchange:
    """Send one handshake request and read one response; nothing else."""

    frame = encode_v2gtp(
        V2gtpMessage(payload_type=PAYLOAD_TYPE_EXI, payload=encode_handshake_request(entries))
    )
    capture.record(
        direction=DIRECTION_TX, layer=LAYER_V2GTP, data=frame, summary=summarize_handshake(frame)
    )
    try:
        sock.sendall(frame)
        message = read_v2gtp_message(sock)
    except DecodeError as exc:
        return _Exchange(failure=exc.reason)
    except (OSError, ssl.SSLError) as exc:
        logger.info("handshake connection failed: %s", exc)
        return _Exchange(failure="connection")
    raw = encode_v2gtp(message)
    capture.record(
        direction=DIRECTION_RX, layer=LAYER_V2GTP, data=raw, summary=summarize_handshake(raw)
    )
    if message.payload_type != PAYLOAD_TYPE_EXI:
        return _Exchange(failure="not_exi")
    try:
        return _Exchange(response=decode_handshake_response(message.payload))
    except DecodeError as exc:
        return _Exchange(failure=exc.reason)


def _plaintext_handshake(
    host: str,
    port: int,
    entries: Sequence[AppProtocolEntry],
    capture: FrameCapture,
    deadline: float,
) -> _Exchange:
    try:
        sock = socket.create_connection((host, port), timeout=deadline)
    except OSError as exc:
        logger.info("plaintext connect to %s:%d failed: %s", host, port, exc)
        return _Exchange(failure=HANDSHAKE_NO_CONNECTION)
    with sock:
        return _exchange_handshake(sock=sock, entries=entries, capture=capture)


def _run_once(
    target: ProbeTarget, scenario: Scenario, config: ProbeConfig, capture: FrameCapture
) -> ScenarioOutcome:
    with target.open_session() as session:
        pilot = session.pilot
        pilot.connect()
        try:
            outcome = _negotiate(
                target=target, session=session, scenario=scenario, config=config, capture=capture
            )
        finally:
            pilot.unplug()
        return replace(outcome, pilot_states=pilot.states())


def _negotiate(
    target: ProbeTarget,
    session: ProbeSession,
    scenario: Scenario,
    config: ProbeConfig,
    capture: FrameCapture,
) -> ScenarioOutcome:
    advertised = scenario.protocols
    slac = run_slac_ev(
        link=session.link, timing=config.slac, pilot=session.pilot, capture=capture
    )
    if not slac.matched:
        return ScenarioOutcome(
            scenario_id=scenario.scenario_id,
            advertised=advertised,
            slac_ok=False,
            slac_failure_stage=slac.failure_stage,
        )
    sdp = sdp_discover(
        channel=session.datagrams,
        request=SdpRequest(security=scenario.security),
        retries=config.sdp_retries,
        timeout=config.sdp_timeout_s,
        capture=capture,
    )
    if sdp.response is None:
        return ScenarioOutcome(
            scenario_id=scenario.scenario_id,
            advertised=advertised,
            slac_ok=True,
            sdp_result=sdp.failure or SDP_NO_RESPONSE,
        )
    base = ScenarioOutcome(
        scenario_id=scenario.scenario_id,
        advertised=advertised,
        slac_ok=True,
        sdp_result=sdp.response.security.name,
        sdp_downgraded=sdp.downgraded,
    )
    if scenario.security is SdpSecurity.TLS_REQUIRED and sdp.downgraded:
        logger.info("scenario %d: SECC refused TLS, aborting", scenario.scenario_id)
        return replace(base, aborted=True)
    host = target.resolve_host(sdp.response.host)
    port = sdp.response.endpoint_port
    entries = build_advertisement(advertised, config.ev_priorities)
    tls_result: Optional[TlsProbeResult] = None
    if sdp.response.security is SdpSecurity.TLS_REQUIRED:
        tls_result = probe_tls(
            host=host,
            port=port,
            trust=config.trust,
            deadline=config.tls_deadline_s,
            at_time=config.at_time,
            session_hook=lambda sock: _exchange_handshake(
                sock=sock, entries=entries, capture=capture
            ),
        )
        exchange = tls_result.session_result or _Exchange(
            failure=tls_result.failure_stage or "tls"
        )
    else:
        exchange = _plaintext_handshake(
            host=host,
            port=port,
            entries=entries,
            capture=capture,
            deadline=config.tls_deadline_s,
        )
    chosen = None
    if exchange.response is not None and exchange.response.ok:
        chosen = protocol_for_schema(entries, exchange.response.chosen_schema_id)
    return replace(
        base,
        tls_result=tls_result,
        handshake_result=exchange.response,
        handshake_failure=exchange.failure,
        chosen_protocol=chosen,
    )


@dataclass(frozen=True)
class ScenarioRun:
    outcome: ScenarioOutcome
    capture: FrameCapture
    tls_result: Optional[TlsProbeResult] = None


def run_scenario(target: ProbeTarget, scenario_id: int, config: ProbeConfig) -> ScenarioRun:
    """Run one scenario, re-running it on SLAC failure up to `scenario_retries` times."""

    scenario = SCENARIOS[scenario_id]
    attempts = 0
    while True:
        attempts += 1
        capture = FrameCapture()
        outcome = _run_once(target=target, scenario=scenario, config=config, capture=capture)
        if outcome.slac_ok or attempts > config.scenario_retries:
            break
        logger.info(
            "%s scenario %d: SLAC failed in %s, retrying",
            target.identity.source_id,
            scenario_id,
            outcome.slac_failure_stage,
        )
    return ScenarioRun(
        outcome=replace(outcome, attempts=attempts),
        capture=capture,
        tls_result=outcome.tls_result,
    )


def _safe_name(text: str) -> str:
    return _SAFE_NAME_RE.sub("_", text).strip("_") or "station"


@dataclass(frozen=True)
class StationRun:
    """A report plus the in-memory evidence behind it."""

    report: StationReport
    captures: Mapping[int, FrameCapture]
    session_logs: Tuple[EvseSessionLog, ...] = ()


def run_station(target: ProbeTarget, config: ProbeConfig) -> StationRun:
    """Probe one station with all four scenarios, each in its own session."""

    identity = target.identity
    runs: Dict[int, ScenarioRun] = {}
    with target:
        for scenario_id in config.scenario_order:
            runs[scenario_id] = run_scenario(target=target, scenario_id=scenario_id, config=config)
    outcomes = []
    captures: List[str] = []
    for scenario_id in sorted(runs):
        outcome = runs[scenario_id].outcome
        if config.capture_dir is not None:
            stem = f"{_safe_name(identity.source_id)}-s{scenario_id}"
            runs[scenario_id].capture.write_jsonl(config.capture_dir / f"{stem}.jsonl")
            runs[scenario_id].capture.write_pcap(config.capture_dir / f"{stem}.pcap")
            outcome = replace(outcome, transcript_ref=f"{stem}.jsonl")
            captures.append(f"{stem}.jsonl")
            tls = runs[scenario_id].tls_result
            if tls is not None and tls.chain_der:
                pem_name = f"{stem}-chain.pem"
                (config.capture_dir / pem_name).write_bytes(export_chain_pem(tls))
                captures.append(pem_name)
        outcomes.append(outcome)
    report = StationReport(
        station=identity,
        outcomes=tuple(outcomes),
        derived=recompute_derived(outcomes),
        captures=tuple(captures),
    )
    logger.info(
        "%s: tls=%s iso2=%s din=%s preferred=%s",
        identity.source_id,
        report.derived.supports_tls,
        report.derived.supports_iso2,
        report.derived.supports_din,
        report.derived.preferred_protocol,
    )
    session_logs: Tuple[EvseSessionLog, ...] = tuple(getattr(target, "session_logs", ()))
    return StationRun(
        report=report,
        captures={scenario_id: runs[scenario_id].capture for scenario_id in sorted(runs)},
        session_logs=session_logs,
    )


def run_station_test(target: ProbeTarget, config: ProbeConfig) -> StationReport:
    return run_station(target=target, config=config).report


def run_fleet(
    targets: Sequence[ProbeTarget], config: ProbeConfig, workers: int = 4
) -> List[StationRun]:
    """Probe several stations concurrently; results keep the order of `targets`."""

    assert workers >= 1
    with ThreadPoolExecutor(max_workers=workers, thread_name_prefix="probe") as pool:
        futures = [pool.submit(run_station, target, config) for target in targets]
        return [future.result() for future in futures]


# ---------------------------------------------------------------------------
# Report directory handoff
# ---------------------------------------------------------------------------


def report_filename(report: StationReport) -> str:
    return f"{_safe_name(report.station.source_id)}.json"


def write_station_report(report: StationReport, out_dir: Path) -> Path:
    return write_artifact(
        path=out_dir / report_filename(report), kind=KIND_STATION_REPORT, payload=report.to_dict()
    )


def load_station_reports(directory: Path) -> List[StationReport]:
    """Load every station report in `directory`, sorted by station id.

    Derived flags are recomputed from the stored outcomes.
    """

    if not directory.is_dir():
        raise InputError(f"report directory not found: {directory}")
    reports = []
    for path in sorted(directory.glob("*.json")):
        if path.name == RUN_META_FILENAME:
            continue
        payload = read_artifact(path=path, kind=KIND_STATION_REPORT)
        try:
            reports.append(StationReport.from_dict(payload))
        except (KeyError, TypeError, ValueError, AssertionError) as exc:
            raise SchemaError(f"{path}: malformed station report ({exc})") from exc
    reports.sort(key=lambda item: item.station.source_id)
    return reports


# ---------------------------------------------------------------------------
# Termination scan
# ---------------------------------------------------------------------------

_SLAC_NAMES = frozenset(MMTYPE_NAMES.values())
_SDP_NAMES = frozenset(
    name for code, name in PAYLOAD_TYPE_NAMES.items() if code != PAYLOAD_TYPE_EXI
)


def find_termination_violations(
    records: Sequence[CaptureRecord], pilot_states: Sequence[str] = ()
) -> List[str]:
    """List anything in one session transcript that goes past negotiation.

    Allowed: SLAC frames, SDP request/response datagrams, and at most one
    handshake request plus one handshake response on the V2GTP layer. The
    pilot must never have reached state C.

    Example:
        >>> find_termination_violations([], pilot_states=("A", "B", "C"))
        ['cp state C reached']
    """

    violations = []
    if "C" in pilot_states:
        violations.append("cp state C reached")
    requests = responses = 0
    for record in records:
        summary = record.summary
        if record.layer == LAYER_MME:
            if summary.get("mmtype") not in _SLAC_NAMES:
                violations.append(f"#{record.seq}: non-SLAC MME {summary.get('mmtype') or summary.get('error')}")
        elif record.layer == LAYER_SDP:
            if summary.get("payload_type") not in _SDP_NAMES:
                violations.append(f"#{record.seq}: non-SDP datagram {summary.get('payload_type')}")
        elif record.layer == LAYER_V2GTP:
            if record.direction == DIRECTION_TX and "offered" in summary:
                requests += 1
            elif record.direction == DIRECTION_RX and "response_code" in summary:
                responses += 1
            else:
                violations.append(f"#{record.seq}: V2GTP message beyond the handshake")
        elif record.direction != DIRECTION_LOCAL:
            violations.append(f"#{record.seq}: unexpected layer {record.layer}")
    if requests > 1 or responses > 1:
        violations.append(f"{requests} handshake request(s), {responses} response(s)")
    return violations


def scan_station_run(run: StationRun) -> List[str]:
    """Termination scan over every scenario transcript and simulator session."""

    found = []
    for scenario_id, capture in sorted(run.captures.items()):
        outcome = next(o for o in run.report.outcomes if o.scenario_id == scenario_id)
        for item in find_termination_violations(capture.records(), outcome.pilot_states):
            found.append(f"scenario {scenario_id}: {item}")
    for log in run.session_logs:
        if "C" in log.cp_states:
            found.append(f"simulator {log.profile}: cp state C reached")
    return found


# ---------------------------------------------------------------------------
# Conformance and assumption checks
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ConformanceRow:
    source_id: str
    profile: str
    declared: Mapping[str, Any]
    derived: Mapping[str, Any]
    violations: Tuple[str, ...] = ()

    @property
    def matches(self) -> bool:
        return all(self.derived.get(name) == value for name, value in self.declared.items())

    def to_dict(self) -> Dict[str, Any]:
        return {
            "source_id": self.source_id,
            "profile": self.profile,
            "declared": dict(self.declared),
            "derived": dict(self.derived),
            "matches": self.matches,
            "violations": list(self.violations),
        }


def check_conformance(run: StationRun, profile: EvseProfile) -> ConformanceRow:
    return ConformanceRow(
        source_id=run.report.station.source_id,
        profile=profile.name,
        declared=profile.expected_flags(),
        derived={
            name: value
            for name, value in run.report.derived.to_dict().items()
            if name in ("supports_tls", "supports_iso2", "supports_din", "preferred_protocol")
        },
        violations=tuple(scan_station_run(run)),
    )


@dataclass(frozen=True)
class ConsistencyFinding:
    """Outcome of one assumption check.

    For manufacturer checks the cluster key has cpo `*`.
    """

    cluster: ClusterKey
    dimension: str
    consistent: bool
    witnesses: Tuple[Tuple[str, str], ...] = ()
    sufficient: bool = True
    sample_size: int = 0

    def __post_init__(self) -> None:
        assert self.dimension in (A1_MANUFACTURER_CAPABILITY, A2_CPO_CONFIGURATION)
        assert self.consistent == (not self.witnesses)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "cpo": self.cluster.cpo,
            "manufacturer": self.cluster.manufacturer,
            "dimension": self.dimension,
            "consistent": self.consistent,
            "sufficient": self.sufficient,
            "sample_size": self.sample_size,
            "witnesses": [list(pair) for pair in self.witnesses],
        }


def _reference(values: Sequence[Any]) -> Any:
    """Most common value; ties go to the value seen first."""

    counts = Counter(values)
    best = max(counts.values())
    return next(value for value in values if counts[value] == best)


def _deviation_pairs(labelled: Sequence[Tuple[str, Any]]) -> Tuple[Tuple[str, str], ...]:
    reference = _reference([value for _, value in labelled])
    anchor = next(label for label, value in labelled if value == reference)
    return tuple((anchor, label) for label, value in labelled if value != reference)


def _carrier(members: Sequence[StationReport], tokens: Set[str]) -> str:
    """First station whose own capability includes one of `tokens`."""

    for item in members:
        if tokens.intersection(item.derived.capability()):
            return item.station.source_id
    return members[0].station.source_id


def _capability_pairs(
    clusters: Mapping[ClusterKey, Sequence[StationReport]],
) -> Tuple[Tuple[str, str], ...]:
    """Witness pairs for clusters whose capability differs from the common one.

    Each side names a station that carries a capability the other side lacks,
    falling back to the first station when that side only lacks capabilities.
    """

    keys = sorted(clusters)
    capability = {
        key: frozenset(token for item in clusters[key] for token in item.derived.capability())
        for key in keys
    }
    reference = _reference([capability[key] for key in keys])
    anchor = next(key for key in keys if capability[key] == reference)
    pairs = []
    for key in keys:
        if capability[key] == reference:
            continue
        pairs.append(
            (
                _carrier(clusters[anchor], set(reference - capability[key])),
                _carrier(clusters[key], set(capability[key] - reference)),
            )
        )
    return tuple(pairs)


def validate_assumptions(reports: Sequence[StationReport]) -> List[ConsistencyFinding]:
    """Check configuration homogeneity per cluster and capability per manufacturer.

    Only conclusive reports count. A cluster with one report, or a
    manufacturer seen in one cluster, yields an insufficient-sample finding.
    """

    conclusive = sorted(
        (report for report in reports if report.is_conclusive),
        key=lambda item: item.station.source_id,
    )
    findings: List[ConsistencyFinding] = []
    by_cluster: Dict[ClusterKey, List[StationReport]] = defaultdict(list)
    for report in conclusive:
        by_cluster[report.key].append(report)
    for key in sorted(by_cluster):
        members = by_cluster[key]
        witnesses: Tuple[Tuple[str, str], ...] = ()
        if len(members) >= 2:
            witnesses = _deviation_pairs(
                [(item.station.source_id, item.derived.signature()) for item in members]
            )
        findings.append(
            ConsistencyFinding(
                cluster=key,
                dimension=A2_CPO_CONFIGURATION,
                consistent=not witnesses,
                witnesses=witnesses,
                sufficient=len(members) >= 2,
                sample_size=len(members),
            )
        )
    by_manufacturer: Dict[str, Dict[ClusterKey, List[StationReport]]] = defaultdict(dict)
    for key, members in by_cluster.items():
        by_manufacturer[key.manufacturer][key] = members
    for manufacturer in sorted(by_manufacturer):
        clusters = by_manufacturer[manufacturer]
        witnesses = _capability_pairs(clusters) if len(clusters) >= 2 else ()
        findings.append(
            ConsistencyFinding(
                cluster=ClusterKey(cpo="*", manufacturer=manufacturer),
                dimension=A1_MANUFACTURER_CAPABILITY,
                consistent=not witnesses,
                witnesses=witnesses,
                sufficient=len(clusters) >= 2,
                sample_size=len(clusters),
            )
        )
    inconsistent = [finding for finding in findings if not finding.consistent]
    if inconsistent:
        logger.warning("%d assumption finding(s) inconsistent", len(inconsistent))
    return findings


def findings_to_payload(findings: Sequence[ConsistencyFinding]) -> Dict[str, Any]:
    return {"findings": [finding.to_dict() for finding in findings]}


def blocked_clusters(findings: Sequence[ConsistencyFinding]) -> List[ClusterKey]:
    return sorted(
        finding.cluster
        for finding in findings
        if finding.dimension == A2_CPO_CONFIGURATION and not finding.consistent
    )


def identity_from_row(row: Mapping[str, Any]) -> StationIdentity:
    """Station identity from a plan entry or the live-probe flags.

    Operator and manufacturer are collapsed to their canonical form.

    Raises:
        InputError: a required field is missing or blank, or the year is not
            an integer.
    """

    missing = [name for name in ("id", "cpo", "manufacturer") if not str(row.get(name) or "").strip()]
    if missing:
        raise InputError(f"station identity is missing {', '.join(missing)}")
    year = row.get("year")
    try:
        install_year = None if year is None or year == "" else int(year)
    except (TypeError, ValueError):
        raise InputError(f"station year {year!r} is not an integer") from None
    return StationIdentity(
        source_id=str(row["id"]).strip(),
        cpo=collapse_label(str(row["cpo"])),
        manufacturer=collapse_label(str(row["manufacturer"])),
        model=row.get("model") or None,
        install_year=install_year,
    )
