"""Golden byte vectors and codec properties for every wire layer."""

from __future__ import annotations

import unittest

from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

from ccs_audit.app_handshake import (  # noqa: E402
    AppProtocolEntry,
    HandshakeResponse,
    ResponseCode,
    decode_handshake_request,
    decode_handshake_response,
    encode_handshake_request,
    encode_handshake_response,
    summarize_handshake,
)
from ccs_audit.errors import DecodeError, FrameSizeError  # noqa: E402
from ccs_audit.hpgp_slac import (  # noqa: E402
    SLAC_MESSAGE_TYPES,
    MmeFrame,
    decode_mme,
    decode_slac_message,
    encode_mme,
    summarize_mme,
)
from ccs_audit.v2gtp_sdp import (  # noqa: E402
    SdpRequest,
    SdpResponse,
    SdpSecurity,
    SdpTransport,
    V2gtpMessage,
    decode_sdp_request,
    decode_sdp_response,
    decode_v2gtp,
    encode_sdp_request,
    encode_sdp_response,
    encode_v2gtp,
    summarize_sdp,
)
from ccs_audit.wire_constants import (  # noqa: E402
    MME_MIN_FRAME_LEN,
    NAMESPACE_DIN70121,
    PAYLOAD_TYPE_EXI,
    SLAC_PAYLOAD_LENGTHS,
)

PROPERTY_EXAMPLES = 10_000
_PROPERTY = settings(
    max_examples=PROPERTY_EXAMPLES,
    deadline=None,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.data_too_large],
)

DIN_REQUEST_HEX = "8000dbab9371d3234b71d1b981899189d191818991d26b9b3a232b30020000040040"
OK_RESPONSE_HEX = "80400040"

# (security, transport) -> frame, generated outside this package.
SDP_REQUEST_VECTORS = {
    (SdpSecurity.TLS_REQUIRED, SdpTransport.TCP): "01fe9000000000020000",
    (SdpSecurity.NO_TLS, SdpTransport.TCP): "01fe9000000000021000",
    (SdpSecurity.TLS_REQUIRED, SdpTransport.UDP): "01fe9000000000020010",
    (SdpSecurity.NO_TLS, SdpTransport.UDP): "01fe9000000000021010",
}

_mac = st.binary(min_size=6, max_size=6)


@st.composite
def slac_frames(draw) -> MmeFrame:
    mmtype = draw(st.sampled_from(sorted(SLAC_PAYLOAD_LENGTHS)))
    size = SLAC_PAYLOAD_LENGTHS[mmtype]
    return MmeFrame(
        dst_mac=draw(_mac),
        src_mac=draw(_mac),
        mmtype=mmtype,
        payload=draw(st.binary(min_size=size, max_size=size)),
        fmi=draw(st.binary(min_size=2, max_size=2)),
    )


@st.composite
def opaque_frames(draw) -> MmeFrame:
    mmtype = draw(
        st.integers(0, 0xFFFF).filter(lambda value: value not in SLAC_PAYLOAD_LENGTHS)
    )
    return MmeFrame(
        dst_mac=draw(_mac),
        src_mac=draw(_mac),
        mmtype=mmtype,
        payload=draw(st.binary(max_size=300)),
    )


@st.composite
def handshake_requests(draw):
    count = draw(st.integers(1, 20))
    schema_ids = draw(st.lists(st.integers(0, 255), min_size=count, max_size=count, unique=True))
    priorities = draw(st.permutations(list(range(1, 21))))[:count]
    namespaces = st.one_of(
        st.sampled_from(
            [NAMESPACE_DIN70121, "urn:iso:15118:2:2013:MsgDef", "urn:iso:std:iso:15118:-20:DC"]
        ),
        st.text(min_size=1, max_size=100),
    )
    return [
        AppProtocolEntry(
            namespace_uri=draw(namespaces),
            version_major=draw(st.integers(0, 0xFFFFFFFF)),
            version_minor=draw(st.integers(0, 0xFFFFFFFF)),
            schema_id=schema_ids[index],
            priority=priorities[index],
        )
        for index in range(count)
    ]


@st.composite
def handshake_responses(draw) -> HandshakeResponse:
    code = draw(st.sampled_from(list(ResponseCode)))
    if code is ResponseCode.FAILED_NO_NEGOTIATION:
        return HandshakeResponse(response_code=code)
    return HandshakeResponse(response_code=code, chosen_schema_id=draw(st.integers(0, 255)))


class GoldenVectorTests(unittest.TestCase):
    def test_din_handshake_request(self) -> None:
        entry = AppProtocolEntry(
            namespace_uri=NAMESPACE_DIN70121,
            version_major=2,
            version_minor=0,
            schema_id=1,
            priority=1,
        )
        self.assertEqual(encode_handshake_request([entry]).hex(), DIN_REQUEST_HEX)
        self.assertEqual(decode_handshake_request(bytes.fromhex(DIN_REQUEST_HEX)), [entry])

    def test_ok_handshake_response(self) -> None:
        response = HandshakeResponse(
            response_code=ResponseCode.OK_SUCCESSFUL_NEGOTIATION, chosen_schema_id=1
        )
        self.assertEqual(encode_handshake_response(response).hex(), OK_RESPONSE_HEX)
        self.assertEqual(decode_handshake_response(bytes.fromhex(OK_RESPONSE_HEX)), response)

    def test_sdp_request_vectors(self) -> None:
        for (security, transport), expected in SDP_REQUEST_VECTORS.items():
            with self.subTest(security=security.name, transport=transport.name):
                request = SdpRequest(security=security, transport=transport)
                self.assertEqual(encode_sdp_request(request).hex(), expected)
                self.assertEqual(decode_sdp_request(bytes.fromhex(expected)), request)

    def test_handshake_inside_v2gtp(self) -> None:
        frame = encode_v2gtp(
            V2gtpMessage(payload_type=PAYLOAD_TYPE_EXI, payload=bytes.fromhex(DIN_REQUEST_HEX))
        )
        self.assertEqual(frame[:8].hex(), "01fe800100000022")
        self.assertEqual(summarize_handshake(frame)["offered"], ["DIN70121"])

    def test_slac_parm_req_is_padded_to_ethernet_minimum(self) -> None:
        frame = MmeFrame(
            dst_mac=b"\xff" * 6,
            src_mac=bytes.fromhex("020000000001"),
            mmtype=0x6064,
            payload=bytes(10),
        )
        data = encode_mme(frame)
        self.assertEqual(len(data), 60)
        self.assertEqual(data[12:19].hex(), "88e10164600000")
        self.assertEqual(decode_mme(data), frame)


class RoundTripTests(unittest.TestCase):
    @_PROPERTY
    @given(st.one_of(slac_frames(), opaque_frames()))
    def test_mme_frames(self, frame: MmeFrame) -> None:
        needs_padding = frame.header_length + len(frame.payload) < MME_MIN_FRAME_LEN
        if frame.mmtype not in SLAC_PAYLOAD_LENGTHS and needs_padding:
            with self.assertRaises(FrameSizeError):
                encode_mme(frame)
            return
        self.assertEqual(decode_mme(encode_mme(frame)), frame)

    @_PROPERTY
    @given(slac_frames())
    def test_typed_slac_messages(self, frame: MmeFrame) -> None:
        message = decode_slac_message(frame)
        self.assertIsInstance(message, SLAC_MESSAGE_TYPES[frame.mmtype])
        self.assertEqual(message.to_payload(), frame.payload)

    @_PROPERTY
    @given(
        st.binary(min_size=16, max_size=16),
        st.integers(0, 0xFFFF),
        st.sampled_from(list(SdpSecurity)),
        st.sampled_from(list(SdpTransport)),
    )
    def test_sdp_responses(self, address, port, security, transport) -> None:
        response = SdpResponse(
            endpoint_ip=address, endpoint_port=port, security=security, transport=transport
        )
        self.assertEqual(decode_sdp_response(encode_sdp_response(response)), response)

    @_PROPERTY
    @given(st.integers(0, 0xFFFF), st.binary(max_size=512))
    def test_v2gtp_frames(self, payload_type, payload) -> None:
        message = V2gtpMessage(payload_type=payload_type, payload=payload)
        self.assertEqual(decode_v2gtp(encode_v2gtp(message)), message)

    @_PROPERTY
    @given(handshake_requests())
    def test_handshake_requests(self, entries) -> None:
        self.assertEqual(decode_handshake_request(encode_handshake_request(entries)), entries)

    @_PROPERTY
    @given(handshake_responses())
    def test_handshake_responses(self, response) -> None:
        self.assertEqual(decode_handshake_response(encode_handshake_response(response)), response)


class FuzzTests(unittest.TestCase):
    """Random input may only ever produce a DecodeError."""

    def _decodes_or_rejects(self, decoder, data: bytes) -> None:
        try:
            decoder(data)
        except DecodeError as exc:
            self.assertGreaterEqual(exc.offset, 0)

    @_PROPERTY
    @given(st.one_of(st.binary(max_size=1600), st.binary(max_size=200).map(lambda tail: bytes(12) + b"\x88\xe1" + tail)))
    def test_mme_decoder(self, data: bytes) -> None:
        self._decodes_or_rejects(lambda raw: decode_slac_message(decode_mme(raw)), data)
        self.assertIsInstance(summarize_mme(data), dict)

    @_PROPERTY
    @given(st.one_of(st.binary(max_size=64), st.binary(max_size=32).map(lambda tail: b"\x01\xfe\x90\x01" + tail)))
    def test_sdp_decoders(self, data: bytes) -> None:
        self._decodes_or_rejects(decode_v2gtp, data)
        self._decodes_or_rejects(decode_sdp_request, data)
        self._decodes_or_rejects(decode_sdp_response, data)
        self.assertIsInstance(summarize_sdp(data), dict)

    @_PROPERTY
    @given(st.one_of(st.binary(max_size=128), st.binary(max_size=128).map(lambda tail: b"\x80" + tail)))
    def test_handshake_decoders(self, data: bytes) -> None:
        self._decodes_or_rejects(decode_handshake_request, data)
        self._decodes_or_rejects(decode_handshake_response, data)

    def test_truncated_vectors_report_offsets(self) -> None:
        with self.assertRaises(DecodeError) as caught:
            decode_sdp_request(bytes.fromhex("01fe90000000000200"))
        self.assertEqual(caught.exception.reason, "truncated_payload")
        with self.assertRaises(DecodeError) as caught:
            decode_handshake_request(bytes.fromhex(DIN_REQUEST_HEX)[:10])
        self.assertEqual(caught.exception.layer, "exi")
        with self.assertRaises(DecodeError) as caught:
            decode_mme(bytes(12) + b"\x08\x00" + bytes(46))
        self.assertEqual(caught.exception.reason, "bad_ethertype")


if __name__ == "__main__":
    unittest.main()
