"""V2G Transfer Protocol framing and SECC discovery (SDP).

Header layout: version 0x01, inverse version 0xFE, payload type (2 bytes BE),
payload length (4 bytes BE). SDP rides on UDP 15118; everything after SDP
(handshake over TCP or TLS) uses the same header with payload type 0x8001.
"""

from __future__ import annotations

import enum
import ipaddress
import logging
import socket
import struct
import time
from dataclasses import dataclass
from typing import Any, Dict, Optional

from ccs_audit.constants import DEFAULT_SDP_RETRIES, DEFAULT_SDP_TIMEOUT_S
from ccs_audit.errors import DecodeError
from ccs_audit.link_transport import LAYER_SDP, CapturingChannel, FrameCapture, FrameChannel
from ccs_audit.wire_constants import (
    PAYLOAD_TYPE_NAMES,
    PAYLOAD_TYPE_SDP_REQUEST,
    PAYLOAD_TYPE_SDP_RESPONSE,
    SDP_REQUEST_PAYLOAD_LEN,
    SDP_RESPONSE_PAYLOAD_LEN,
    SDP_SECURITY_NO_TLS,
    SDP_SECURITY_TLS,
    SDP_TRANSPORT_TCP,
    SDP_TRANSPORT_UDP,
    SECC_DYNAMIC_PORT_MAX,
    SECC_DYNAMIC_PORT_MIN,
    V2GTP_HEADER_LEN,
    V2GTP_INVERSE_VERSION,
    V2GTP_MAX_PAYLOAD_LEN,
    V2GTP_VERSION,
)

logger = logging.getLogger(__name__)

_HEADER = struct.Struct("!BBHI")


class SdpSecurity(enum.IntEnum):
    TLS_REQUIRED = SDP_SECURITY_TLS
    NO_TLS = SDP_SECURITY_NO_TLS


class SdpTransport(enum.IntEnum):
    TCP = SDP_TRANSPORT_TCP
    UDP = SDP_TRANSPORT_UDP


@dataclass(frozen=True)
class V2gtpMessage:
    """One V2GTP frame.

    Example:
        >>> encode_v2gtp(V2gtpMessage(payload_type=0x9000, payload=b"\\x00\\x00")).hex()
        '01fe9000000000020000'
    """

    payload_type: int
    payload: bytes
    version: int = V2GTP_VERSION
    inverse_version: int = V2GTP_INVERSE_VERSION

    def __post_init__(self) -> None:
        assert 0 <= self.payload_type <= 0xFFFF, "payload_type must fit 2 bytes"
        assert len(self.payload) <= V2GTP_MAX_PAYLOAD_LEN, "payload too large"

    @property
    def payload_length(self) -> int:
        return len(self.payload)


def encode_v2gtp(message: V2gtpMessage) -> bytes:
    header = _HEADER.pack(
        message.version,
        message.inverse_version,
        message.payload_type,
        message.payload_length,
    )
    return header + message.payload


def _parse_header(data: bytes) -> tuple[int, int]:
    if len(data) < V2GTP_HEADER_LEN:
        raise DecodeError(layer="v2gtp", reason="truncated", offset=len(data))
    version, inverse, payload_type, length = _HEADER.unpack_from(data)
    if version != V2GTP_VERSION:
        raise DecodeError(
            layer="v2gtp", reason="bad_version", offset=0, detail=f"0x{version:02X}"
        )
    if inverse != V2GTP_INVERSE_VERSION:
        raise DecodeError(
            layer="v2gtp",
            reason="bad_inverse_version",
            offset=1,
            detail=f"0x{inverse:02X}",
        )
    if length > V2GTP_MAX_PAYLOAD_LEN:
        raise DecodeError(layer="v2gtp", reason="oversized", offset=4, detail=str(length))
    return payload_type, length


def decode_v2gtp(data: bytes) -> V2gtpMessage:
    """Parse exactly one V2GTP frame; total, raises only `DecodeError`."""

    data = bytes(data)
    payload_type, length = _parse_header(data)
    end = V2GTP_HEADER_LEN + length
    if len(data) < end:
        raise DecodeError(
            layer="v2gtp",
            reason="truncated_payload",
            offset=len(data),
            detail=f"declared {length} bytes",
        )
    if len(data) > end:
        raise DecodeError(layer="v2gtp", reason="trailing_bytes", offset=end)
    return V2gtpMessage(payload_type=payload_type, payload=data[V2GTP_HEADER_LEN:end])


def _recv_exact(sock: socket.socket, size: int, offset: int) -> bytes:
    chunks = []
    received = 0
    while received < size:
        chunk = sock.recv(size - received)
        if not chunk:
            raise DecodeError(layer="v2gtp", reason="truncated", offset=offset + received)
        chunks.append(chunk)
        received += len(chunk)
    return b"".join(chunks)


def read_v2gtp_message(sock: socket.socket) -> V2gtpMessage:
    """Read one framed message from a stream socket (TCP or TLS).

    Raises:
        DecodeError: bad header or the peer closed mid-frame.
        OSError: socket errors, including timeouts.
    """

    header = _recv_exact(sock=sock, size=V2GTP_HEADER_LEN, offset=0)
    _, length = _parse_header(header)
    payload = _recv_exact(sock=sock, size=length, offset=V2GTP_HEADER_LEN)
    return decode_v2gtp(header + payload)


def describe_payload_type(payload_type: int) -> str:
    return PAYLOAD_TYPE_NAMES.get(payload_type, f"0x{payload_type:04X}")


# ---------------------------------------------------------------------------
# SDP
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SdpRequest:
    security: SdpSecurity = SdpSecurity.TLS_REQUIRED
    transport: SdpTransport = SdpTransport.TCP


@dataclass(frozen=True)
class SdpResponse:
    """Endpoint advertised by the SECC.

    Args:
        endpoint_ip: 16-byte IPv6 address (IPv4-mapped in desk mode).
        endpoint_port: TCP port of the SECC.
        security: Security the SECC will use on that port.
        transport: Transport, always TCP for the handshake.
    """

    endpoint_ip: bytes
    endpoint_port: int
    security: SdpSecurity
    transport: SdpTransport = SdpTransport.TCP

    def __post_init__(self) -> None:
        assert len(self.endpoint_ip) == 16, "endpoint_ip must be 16 bytes"
        assert 0 <= self.endpoint_port <= 0xFFFF, "endpoint_port must fit 2 bytes"

    @property
    def host(self) -> str:
        """Connectable host string: dotted IPv4 for mapped addresses."""

        address = ipaddress.IPv6Address(self.endpoint_ip)
        mapped = address.ipv4_mapped
        return str(mapped) if mapped is not None else str(address)

    @property
    def port_in_dynamic_range(self) -> bool:
        return SECC_DYNAMIC_PORT_MIN <= self.endpoint_port <= SECC_DYNAMIC_PORT_MAX


def ip_to_sdp_bytes(host: str) -> bytes:
    """Pack an IPv4 or IPv6 host as the 16-byte SDP address field.

    Example:
        >>> ip_to_sdp_bytes("127.0.0.1").hex()
        '00000000000000000000ffff7f000001'
    """

    address = ipaddress.ip_address(host)
    if isinstance(address, ipaddress.IPv4Address):
        return ipaddress.IPv6Address(f"::ffff:{address}").packed
    return address.packed


def _enum_value(enum_cls: Any, raw: int, reason: str, offset: int) -> Any:
    try:
        return enum_cls(raw)
    except ValueError as exc:
        raise DecodeError(layer="sdp", reason=reason, offset=offset, detail=f"0x{raw:02X}") from exc


def _sdp_payload(data: bytes, payload_type: int, length: int) -> bytes:
    message = decode_v2gtp(data)
    if message.payload_type != payload_type:
        raise DecodeError(
            layer="sdp",
            reason="wrong_payload_type",
            offset=2,
            detail=describe_payload_type(message.payload_type),
        )
    if message.payload_length != length:
        raise DecodeError(
            layer="sdp",
            reason="bad_payload_length",
            offset=4,
            detail=f"{message.payload_length} != {length}",
        )
    return message.payload


def encode_sdp_request(request: SdpRequest) -> bytes:
    """Return the 10-byte discovery request.

    Example:
        >>> encode_sdp_request(SdpRequest()).hex()
        '01fe9000000000020000'
    """

    payload = bytes((int(request.security), int(request.transport)))
    return encode_v2gtp(V2gtpMessage(payload_type=PAYLOAD_TYPE_SDP_REQUEST, payload=payload))


def decode_sdp_request(data: bytes) -> SdpRequest:
    payload = _sdp_payload(
        data=data, payload_type=PAYLOAD_TYPE_SDP_REQUEST, length=SDP_REQUEST_PAYLOAD_LEN
    )
    return SdpRequest(
        security=_enum_value(SdpSecurity, payload[0], "bad_security", V2GTP_HEADER_LEN),
        transport=_enum_value(SdpTransport, payload[1], "bad_transport", V2GTP_HEADER_LEN + 1),
    )


def encode_sdp_response(response: SdpResponse) -> bytes:
    payload = (
        response.endpoint_ip
        + struct.pack("!H", response.endpoint_port)
        + bytes((int(response.security), int(response.transport)))
    )
    return encode_v2gtp(V2gtpMessage(payload_type=PAYLOAD_TYPE_SDP_RESPONSE, payload=payload))


def decode_sdp_response(data: bytes) -> SdpResponse:
    """Parse a discovery response; total, raises only `DecodeError`."""

    payload = _sdp_payload(
        data=data, payload_type=PAYLOAD_TYPE_SDP_RESPONSE, length=SDP_RESPONSE_PAYLOAD_LEN
    )
    (port,) = struct.unpack_from("!H", payload, 16)
    return SdpResponse(
        endpoint_ip=payload[:16],
        endpoint_port=port,
        security=_enum_value(SdpSecurity, payload[18], "bad_security", V2GTP_HEADER_LEN + 18),
        transport=_enum_value(
            SdpTransport, payload[19], "bad_transport", V2GTP_HEADER_LEN + 19
        ),
    )


def summarize_sdp(data: bytes) -> Dict[str, Any]:
    try:
        message = decode_v2gtp(data)
    except DecodeError as exc:
        return {"error": exc.reason, "offset": exc.offset}
    summary: Dict[str, Any] = {"payload_type": describe_payload_type(message.payload_type)}
    try:
        if message.payload_type == PAYLOAD_TYPE_SDP_REQUEST:
            summary["security"] = decode_sdp_request(data).security.name
        elif message.payload_type == PAYLOAD_TYPE_SDP_RESPONSE:
            response = decode_sdp_response(data)
            summary["security"] = response.security.name
            summary["port"] = response.endpoint_port
    except DecodeError as exc:
        summary["error"] = exc.reason
    return summary


@dataclass(frozen=True)
class SdpOutcome:
    """Result of one discovery attempt series.

    `failure` is set only when no well-formed response arrived; a downgrade
    is a successful discovery with `downgraded` true.
    """

    requested: SdpSecurity
    attempts: int
    response: Optional[SdpResponse] = None
    failure: Optional[str] = None

    def __post_init__(self) -> None:
        assert (self.response is None) == (self.failure is not None)

    @property
    def downgraded(self) -> bool:
        return self.response is not None and self.response.security != self.requested


def sdp_discover(
    channel: FrameChannel,
    request: SdpRequest,
    retries: int = DEFAULT_SDP_RETRIES,
    timeout: float = DEFAULT_SDP_TIMEOUT_S,
    capture: Optional[FrameCapture] = None,
) -> SdpOutcome:
    """Send discovery requests until a well-formed response arrives.

    Args:
        channel: Datagram channel toward the SDP server (multicast in live mode).
        request: Requested security and transport.
        retries: Number of requests sent before giving up.
        timeout: Wait per request, in seconds; junk datagrams do not extend it.
        capture: Optional transcript.

    Returns:
        Outcome with the first valid response, or `failure="no_response"`
        after `retries` unanswered requests.
    """

    assert retries >= 1, "retries must be >= 1"
    link: FrameChannel = channel
    if capture is not None:
        link = CapturingChannel(
            channel=channel, capture=capture, layer=LAYER_SDP, summarize=summarize_sdp
        )
    frame = encode_sdp_request(request)
    for attempt in range(1, retries + 1):
        link.send(frame)
        deadline = time.monotonic() + timeout
        while True:
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                break
            data = link.receive(timeout=remaining)
            if data is None:
                break
            try:
                response = decode_sdp_response(data)
            except DecodeError as exc:
                logger.debug("sdp ignoring datagram: %s", exc)
                continue
            outcome = SdpOutcome(requested=request.security, attempts=attempt, response=response)
            if outcome.downgraded:
                logger.warning(
                    "SECC answered %s to a %s request",
                    response.security.name,
                    request.security.name,
                )
            if not response.port_in_dynamic_range:
                logger.warning("SECC port %d outside 49152-65535", response.endpoint_port)
            return outcome
        logger.debug("sdp attempt %d/%d unanswered", attempt, retries)
    return SdpOutcome(requested=request.security, attempts=retries, failure="no_response")
