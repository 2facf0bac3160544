"""supportedAppProtocol handshake: EXI codec and protocol selection.

The codec is specific to the handshake schema; it is not a general EXI engine.
Streams use the schema-informed, bit-packed default options with the header
byte 0x80 (no cookie, no options). Event codes per grammar position:

    Req:  DocContent(2) AppProtocol SE(1)
          per field: SE(1) CH(1) value EE(1); AppProtocol EE(1)
          then 2 bits: 0 = next AppProtocol, 1 = Req EE (1 bit after the 20th)
    Res:  DocContent(2) ResponseCode SE(1) CH(1) enum(2) EE(1)
          then 2 bits: 0 = SchemaID, 1 = Res EE
          SchemaID: CH(1) value(8) EE(1), then Res EE(1)

Values: Namespace is an EXI string with the value tables; version numbers
are unsigned varints; SchemaID is 8 bits; Priority is 5 bits holding value-1.
Decoding is total and raises `DecodeError` with the bit offset.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass
from typing import Any, Dict, List, Mapping, Optional, Sequence

from ccs_audit.errors import DecodeError, HandshakeValidationError
from ccs_audit.v2gtp_sdp import decode_v2gtp, describe_payload_type
from ccs_audit.wire_constants import (
    APP_PROTOCOL_MAX_ENTRIES,
    APP_PROTOCOL_NAMESPACE_MAX_LEN,
    APP_PROTOCOL_PRIORITY_MAX,
    APP_PROTOCOL_PRIORITY_MIN,
    NAMESPACE_TO_PROTOCOL,
    PAYLOAD_TYPE_EXI,
    PROTOCOL_VERSIONS,
)

logger = logging.getLogger(__name__)

EXI_HEADER = 0x80
_UINT_MAX_OCTETS = 5
_UINT32_MAX = 0xFFFFFFFF
_DOC_REQ = 0
_DOC_RES = 1


class ResponseCode(enum.IntEnum):
    OK_SUCCESSFUL_NEGOTIATION = 0
    OK_SUCCESSFUL_NEGOTIATION_WITH_MINOR_DEVIATION = 1
    FAILED_NO_NEGOTIATION = 2


@dataclass(frozen=True)
class AppProtocolEntry:
    namespace_uri: str
    version_major: int
    version_minor: int
    schema_id: int
    priority: int

    @property
    def protocol(self) -> Optional[str]:
        return NAMESPACE_TO_PROTOCOL.get(self.namespace_uri)


@dataclass(frozen=True)
class HandshakeResponse:
    """EVSE answer; `chosen_schema_id` exists iff negotiation succeeded."""

    response_code: ResponseCode
    chosen_schema_id: Optional[int] = None

    def __post_init__(self) -> None:
        failed = self.response_code is ResponseCode.FAILED_NO_NEGOTIATION
        assert failed == (self.chosen_schema_id is None), (
            "chosen_schema_id must be present iff negotiation succeeded"
        )

    @property
    def ok(self) -> bool:
        return self.response_code is not ResponseCode.FAILED_NO_NEGOTIATION


@dataclass(frozen=True)
class SupportedProtocol:
    namespace_uri: str
    version_major: int
    version_minor: int

    @classmethod
    def for_token(cls, token: str) -> "SupportedProtocol":
        namespace, major, minor = PROTOCOL_VERSIONS[token]
        return cls(namespace_uri=namespace, version_major=major, version_minor=minor)


def validate_entries(entries: Sequence[AppProtocolEntry]) -> None:
    """Check count, field ranges and uniqueness of schema ids and priorities.

    Raises:
        HandshakeValidationError: naming the first violation.
    """

    if not 1 <= len(entries) <= APP_PROTOCOL_MAX_ENTRIES:
        raise HandshakeValidationError(
            f"expected 1..{APP_PROTOCOL_MAX_ENTRIES} entries, got {len(entries)}"
        )
    for entry in entries:
        if not 1 <= len(entry.namespace_uri) <= APP_PROTOCOL_NAMESPACE_MAX_LEN:
            raise HandshakeValidationError(
                f"namespace length must be 1..{APP_PROTOCOL_NAMESPACE_MAX_LEN}"
            )
        for name in ("version_major", "version_minor"):
            if not 0 <= getattr(entry, name) <= _UINT32_MAX:
                raise HandshakeValidationError(f"{name} out of range")
        if not 0 <= entry.schema_id <= 0xFF:
            raise HandshakeValidationError(f"schema_id {entry.schema_id} out of range")
        if not APP_PROTOCOL_PRIORITY_MIN <= entry.priority <= APP_PROTOCOL_PRIORITY_MAX:
            raise HandshakeValidationError(f"priority {entry.priority} out of range")
    if len({entry.schema_id for entry in entries}) != len(entries):
        raise HandshakeValidationError("duplicate schema_id")
    if len({entry.priority for entry in entries}) != len(entries):
        raise HandshakeValidationError("duplicate priority")


# ---------------------------------------------------------------------------
# Bit-level stream
# ---------------------------------------------------------------------------


class BitWriter:
    def __init__(self) -> None:
        self._value = 0
        self._bits = 0

    def write(self, value: int, width: int) -> None:
        assert 0 <= value < (1 << width) or width == 0, "value does not fit"
        self._value = (self._value << width) | value
        self._bits += width

    def write_uint(self, value: int) -> None:
        while True:
            group = value & 0x7F
            value >>= 7
            self.write(group | (0x80 if value else 0), 8)
            if not value:
                return

    def write_string_chars(self, text: str) -> None:
        self.write_uint(len(text) + 2)
        for char in text:
            self.write_uint(ord(char))

    def to_bytes(self) -> bytes:
        padding = (-self._bits) % 8
        total = self._bits + padding
        return (self._value << padding).to_bytes(total // 8, "big")


class BitReader:
    def __init__(self, data: bytes) -> None:
        self._data = bytes(data)
        self.offset = 0

    @property
    def remaining(self) -> int:
        return len(self._data) * 8 - self.offset

    def read(self, width: int) -> int:
        if width > self.remaining:
            raise DecodeError(layer="exi", reason="truncated", offset=self.offset)
        value = 0
        for _ in range(width):
            byte = self._data[self.offset >> 3]
            bit = (byte >> (7 - (self.offset & 7))) & 1
            value = (value << 1) | bit
            self.offset += 1
        return value

    def read_uint(self, limit: int = _UINT32_MAX) -> int:
        start = self.offset
        value = 0
        for index in range(_UINT_MAX_OCTETS):
            octet = self.read(8)
            value |= (octet & 0x7F) << (7 * index)
            if not octet & 0x80:
                if value > limit:
                    raise DecodeError(layer="exi", reason="uint_out_of_range", offset=start)
                return value
        raise DecodeError(layer="exi", reason="uint_too_long", offset=start)

    def expect(self, width: int, value: int, what: str) -> None:
        start = self.offset
        found = self.read(width)
        if found != value:
            raise DecodeError(
                layer="exi",
                reason="unexpected_event",
                offset=start,
                detail=f"{what}: code {found}",
            )


class _StringTable:
    """Local (per element) and global value partitions for ProtocolNamespace."""

    def __init__(self) -> None:
        self.local: List[str] = []
        self.global_: List[str] = []

    def add(self, value: str) -> None:
        if value:
            self.local.append(value)
            self.global_.append(value)


def _index_width(count: int) -> int:
    return max(0, (count - 1).bit_length())


def _write_namespace(writer: BitWriter, table: _StringTable, value: str) -> None:
    if value in table.local:
        writer.write_uint(0)
        writer.write(table.local.index(value), _index_width(len(table.local)))
        return
    writer.write_string_chars(value)
    table.add(value)


def _read_namespace(reader: BitReader, table: _StringTable) -> str:
    start = reader.offset
    head = reader.read_uint(limit=APP_PROTOCOL_NAMESPACE_MAX_LEN + 2)
    if head in (0, 1):
        values = table.local if head == 0 else table.global_
        if not values:
            raise DecodeError(layer="exi", reason="empty_string_table", offset=start)
        index = reader.read(_index_width(len(values)))
        if index >= len(values):
            raise DecodeError(layer="exi", reason="bad_string_index", offset=start)
        return values[index]
    chars = []
    for _ in range(head - 2):
        chars.append(chr(reader.read_uint(limit=0x10FFFF)))
    value = "".join(chars)
    table.add(value)
    return value


# ---------------------------------------------------------------------------
# Request
# ---------------------------------------------------------------------------


def encode_handshake_request(entries: Sequence[AppProtocolEntry]) -> bytes:
    """EXI-encode a supportedAppProtocolReq.

    Raises:
        HandshakeValidationError: entries violate count, range or uniqueness.

    Example:
        >>> entry = AppProtocolEntry("urn:din:70121:2012:MsgDef", 2, 0, 1, 1)
        >>> encode_handshake_request([entry])[:3].hex()
        '8000db'
    """

    validate_entries(entries)
    writer = BitWriter()
    table = _StringTable()
    writer.write(EXI_HEADER, 8)
    writer.write(_DOC_REQ, 2)
    writer.write(0, 1)
    for index, entry in enumerate(entries):
        writer.write(0, 2)  # SE, CH
        _write_namespace(writer=writer, table=table, value=entry.namespace_uri)
        writer.write(0, 3)  # EE, SE, CH
        writer.write_uint(entry.version_major)
        writer.write(0, 3)
        writer.write_uint(entry.version_minor)
        writer.write(0, 3)
        writer.write(entry.schema_id, 8)
        writer.write(0, 3)
        writer.write(entry.priority - APP_PROTOCOL_PRIORITY_MIN, 5)
        writer.write(0, 2)  # Priority EE, AppProtocol EE
        if index + 1 == APP_PROTOCOL_MAX_ENTRIES:
            writer.write(0, 1)
        elif index + 1 == len(entries):
            writer.write(1, 2)
        else:
            writer.write(0, 2)
    return writer.to_bytes()


def _read_field(reader: BitReader, name: str) -> None:
    reader.expect(1, 0, f"{name} SE")
    reader.expect(1, 0, f"{name} CH")


def _read_header(reader: BitReader) -> int:
    start = reader.offset
    header = reader.read(8)
    if header != EXI_HEADER:
        raise DecodeError(
            layer="exi", reason="bad_header", offset=start, detail=f"0x{header:02X}"
        )
    return reader.read(2)


def decode_handshake_request(data: bytes) -> List[AppProtocolEntry]:
    """Decode a supportedAppProtocolReq; total, raises only `DecodeError`."""

    reader = BitReader(data)
    table = _StringTable()
    document = _read_header(reader)
    if document != _DOC_REQ:
        raise DecodeError(layer="exi", reason="not_a_request", offset=8)
    reader.expect(1, 0, "AppProtocol SE")
    entries: List[AppProtocolEntry] = []
    while True:
        _read_field(reader, "ProtocolNamespace")
        namespace = _read_namespace(reader=reader, table=table)
        reader.expect(1, 0, "ProtocolNamespace EE")
        _read_field(reader, "VersionNumberMajor")
        major = reader.read_uint()
        reader.expect(1, 0, "VersionNumberMajor EE")
        _read_field(reader, "VersionNumberMinor")
        minor = reader.read_uint()
        reader.expect(1, 0, "VersionNumberMinor EE")
        _read_field(reader, "SchemaID")
        schema_id = reader.read(8)
        reader.expect(1, 0, "SchemaID EE")
        _read_field(reader, "Priority")
        priority = reader.read(5) + APP_PROTOCOL_PRIORITY_MIN
        reader.expect(1, 0, "Priority EE")
        reader.expect(1, 0, "AppProtocol EE")
        entries.append(
            AppProtocolEntry(
                namespace_uri=namespace,
                version_major=major,
                version_minor=minor,
                schema_id=schema_id,
                priority=priority,
            )
        )
        if len(entries) == APP_PROTOCOL_MAX_ENTRIES:
            reader.expect(1, 0, "supportedAppProtocolReq EE")
            break
        start = reader.offset
        code = reader.read(2)
        if code == 1:
            break
        if code != 0:
            raise DecodeError(
                layer="exi", reason="unexpected_event", offset=start, detail=f"code {code}"
            )
    try:
        validate_entries(entries)
    except HandshakeValidationError as exc:
        raise DecodeError(
            layer="exi", reason="invalid_entries", offset=reader.offset, detail=str(exc)
        ) from exc
    return entries


# ---------------------------------------------------------------------------
# Response
# ---------------------------------------------------------------------------


def encode_handshake_response(response: HandshakeResponse) -> bytes:
    """EXI-encode a supportedAppProtocolRes.

    Example:
        >>> encode_handshake_response(
        ...     HandshakeResponse(ResponseCode.OK_SUCCESSFUL_NEGOTIATION, 1)
        ... ).hex()
        '80400040'
    """

    writer = BitWriter()
    writer.write(EXI_HEADER, 8)
    writer.write(_DOC_RES, 2)
    writer.write(0, 2)  # SE, CH
    writer.write(int(response.response_code), 2)
    writer.write(0, 1)
    if response.chosen_schema_id is None:
        writer.write(1, 2)
    else:
        if not 0 <= response.chosen_schema_id <= 0xFF:
            raise HandshakeValidationError("chosen_schema_id out of range")
        writer.write(0, 2)
        writer.write(0, 1)
        writer.write(response.chosen_schema_id, 8)
        writer.write(0, 2)  # SchemaID EE, Res EE
    return writer.to_bytes()


def decode_handshake_response(data: bytes) -> HandshakeResponse:
    """Decode a supportedAppProtocolRes; total, raises only `DecodeError`."""

    reader = BitReader(data)
    document = _read_header(reader)
    if document != _DOC_RES:
        raise DecodeError(layer="exi", reason="not_a_response", offset=8)
    _read_field(reader, "ResponseCode")
    start = reader.offset
    raw_code = reader.read(2)
    try:
        code = ResponseCode(raw_code)
    except ValueError as exc:
        raise DecodeError(
            layer="exi", reason="bad_response_code", offset=start, detail=str(raw_code)
        ) from exc
    reader.expect(1, 0, "ResponseCode EE")
    start = reader.offset
    choice = reader.read(2)
    schema_id: Optional[int] = None
    if choice == 0:
        reader.expect(1, 0, "SchemaID CH")
        schema_id = reader.read(8)
        reader.expect(1, 0, "SchemaID EE")
        reader.expect(1, 0, "supportedAppProtocolRes EE")
    elif choice != 1:
        raise DecodeError(
            layer="exi", reason="unexpected_event", offset=start, detail=f"code {choice}"
        )
    failed = code is ResponseCode.FAILED_NO_NEGOTIATION
    if failed != (schema_id is None):
        raise DecodeError(
            layer="exi",
            reason="schema_id_mismatch",
            offset=reader.offset,
            detail=f"{code.name} with schema_id {schema_id}",
        )
    return HandshakeResponse(response_code=code, chosen_schema_id=schema_id)


# ---------------------------------------------------------------------------
# Negotiation
# ---------------------------------------------------------------------------


def select_protocol(
    evse_supported: Sequence[SupportedProtocol],
    ev_entries: Sequence[AppProtocolEntry],
    evse_preference: Optional[str] = None,
) -> HandshakeResponse:
    """Pick the entry the EVSE answers with.

    An entry is compatible when the EVSE supports its namespace and major
    version. If the EV offered the EVSE's preferred protocol compatibly, that
    entry wins; otherwise the compatible entry with the lowest EV priority.
    An exact minor match yields OK, a differing minor the minor-deviation code.

    Example:
        >>> din = SupportedProtocol.for_token("DIN70121")
        >>> entry = AppProtocolEntry(din.namespace_uri, 2, 0, 1, 1)
        >>> select_protocol([din], [entry]).chosen_schema_id
        1
    """

    compatible = [
        entry
        for entry in ev_entries
        if any(
            item.namespace_uri == entry.namespace_uri
            and item.version_major == entry.version_major
            for item in evse_supported
        )
    ]
    if not compatible:
        return HandshakeResponse(response_code=ResponseCode.FAILED_NO_NEGOTIATION)
    preferred = [entry for entry in compatible if entry.protocol == evse_preference]
    pool = preferred if evse_preference is not None and preferred else compatible
    chosen = min(pool, key=lambda entry: (entry.priority, entry.schema_id))
    exact = any(
        item.namespace_uri == chosen.namespace_uri
        and item.version_major == chosen.version_major
        and item.version_minor == chosen.version_minor
        for item in evse_supported
    )
    code = (
        ResponseCode.OK_SUCCESSFUL_NEGOTIATION
        if exact
        else ResponseCode.OK_SUCCESSFUL_NEGOTIATION_WITH_MINOR_DEVIATION
    )
    return HandshakeResponse(response_code=code, chosen_schema_id=chosen.schema_id)


def build_advertisement(
    protocols: Sequence[str], priorities: Mapping[str, int]
) -> List[AppProtocolEntry]:
    """Entries for `protocols` in listed order.

    Schema ids follow listing order starting at 1; priorities are the rank of
    each protocol under `priorities` (1 = most preferred by the EV).

    Example:
        >>> [e.priority for e in build_advertisement(["DIN70121"], {"DIN70121": 3})]
        [1]
    """

    ranked = sorted(protocols, key=lambda token: (priorities.get(token, 99), token))
    entries = []
    for position, token in enumerate(protocols):
        namespace, major, minor = PROTOCOL_VERSIONS[token]
        entries.append(
            AppProtocolEntry(
                namespace_uri=namespace,
                version_major=major,
                version_minor=minor,
                schema_id=position + 1,
                priority=ranked.index(token) + 1,
            )
        )
    return entries


def protocol_for_schema(
    entries: Sequence[AppProtocolEntry], schema_id: Optional[int]
) -> Optional[str]:
    for entry in entries:
        if entry.schema_id == schema_id:
            return entry.protocol
    return None


def summarize_handshake(data: bytes) -> Dict[str, Any]:
    """Capture summary for a V2GTP frame carrying a handshake message."""

    try:
        message = decode_v2gtp(data)
    except DecodeError as exc:
        return {"error": exc.reason, "offset": exc.offset}
    summary: Dict[str, Any] = {"payload_type": describe_payload_type(message.payload_type)}
    if message.payload_type != PAYLOAD_TYPE_EXI or not message.payload:
        return summary
    try:
        if (message.payload[1:2] or b"\x00")[0] >> 6 == _DOC_REQ:
            summary["offered"] = [
                entry.protocol or entry.namespace_uri
                for entry in decode_handshake_request(message.payload)
            ]
        else:
            response = decode_handshake_response(message.payload)
            summary["response_code"] = response.response_code.name
            summary["schema_id"] = response.chosen_schema_id
    except DecodeError as exc:
        summary["error"] = exc.reason
    return summary
