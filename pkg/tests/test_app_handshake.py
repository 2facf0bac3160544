from __future__ import annotations

import unittest

from hypothesis import given, settings
from hypothesis import strategies as st

from ccs_audit.app_handshake import (  # noqa: E402
    AppProtocolEntry,
    HandshakeResponse,
    ResponseCode,
    SupportedProtocol,
    build_advertisement,
    decode_handshake_request,
    decode_handshake_response,
    encode_handshake_request,
    protocol_for_schema,
    select_protocol,
    validate_entries,
)
from ccs_audit.errors import DecodeError, HandshakeValidationError  # noqa: E402

DIN = "DIN70121"
ISO2 = "ISO15118_2"
ISO20 = "ISO15118_20"
TOKENS = (ISO20, ISO2, DIN)


def _entry(token: str, schema_id: int, priority: int, minor: int = 0) -> AppProtocolEntry:
    supported = SupportedProtocol.for_token(token)
    return AppProtocolEntry(
        namespace_uri=supported.namespace_uri,
        version_major=supported.version_major,
        version_minor=minor,
        schema_id=schema_id,
        priority=priority,
    )


class ValidationTests(unittest.TestCase):
    def test_rejects_empty_and_oversized_lists(self) -> None:
        with self.assertRaises(HandshakeValidationError):
            validate_entries([])
        with self.assertRaises(HandshakeValidationError):
            validate_entries([_entry(DIN, index, (index % 20) + 1) for index in range(21)])

    def test_rejects_duplicates_and_ranges(self) -> None:
        cases = [
            [_entry(DIN, 1, 1), _entry(ISO2, 1, 2)],
            [_entry(DIN, 1, 1), _entry(ISO2, 2, 1)],
            [_entry(DIN, 1, 21)],
            [_entry(DIN, 256, 1)],
            [AppProtocolEntry("x" * 101, 1, 0, 1, 1)],
        ]
        for entries in cases:
            with self.subTest(entries=entries), self.assertRaises(HandshakeValidationError):
                encode_handshake_request(entries)

    def test_twenty_entries_round_trip(self) -> None:
        entries = [_entry(DIN, index, index + 1, minor=index) for index in range(20)]
        self.assertEqual(decode_handshake_request(encode_handshake_request(entries)), entries)

    def test_failed_response_must_not_carry_a_schema(self) -> None:
        with self.assertRaises(AssertionError):
            HandshakeResponse(response_code=ResponseCode.FAILED_NO_NEGOTIATION, chosen_schema_id=1)
        # FAILED code followed by a SchemaID choice
        with self.assertRaises(DecodeError) as caught:
            decode_handshake_response(bytes.fromhex("80480040"))
        self.assertEqual(caught.exception.reason, "schema_id_mismatch")


class SelectionTests(unittest.TestCase):
    def test_lowest_priority_value_wins_without_preference(self) -> None:
        offered = [_entry(ISO2, 1, 2), _entry(DIN, 2, 1)]
        supported = [SupportedProtocol.for_token(ISO2), SupportedProtocol.for_token(DIN)]
        response = select_protocol(supported, offered)
        self.assertEqual(protocol_for_schema(offered, response.chosen_schema_id), DIN)

    def test_evse_preference_overrides_ev_priority(self) -> None:
        offered = [_entry(ISO2, 1, 1), _entry(DIN, 2, 2)]
        supported = [SupportedProtocol.for_token(ISO2), SupportedProtocol.for_token(DIN)]
        response = select_protocol(supported, offered, evse_preference=DIN)
        self.assertEqual(response.chosen_schema_id, 2)
        self.assertIs(response.response_code, ResponseCode.OK_SUCCESSFUL_NEGOTIATION)

    def test_preference_not_offered_falls_back_to_priority(self) -> None:
        offered = [_entry(ISO2, 1, 1)]
        supported = [SupportedProtocol.for_token(ISO2), SupportedProtocol.for_token(DIN)]
        self.assertEqual(select_protocol(supported, offered, evse_preference=DIN).chosen_schema_id, 1)

    def test_minor_mismatch_is_a_deviation(self) -> None:
        response = select_protocol([SupportedProtocol.for_token(DIN)], [_entry(DIN, 7, 1, minor=3)])
        self.assertIs(response.response_code, ResponseCode.OK_SUCCESSFUL_NEGOTIATION_WITH_MINOR_DEVIATION)
        self.assertEqual(response.chosen_schema_id, 7)

    def test_nothing_compatible_fails(self) -> None:
        response = select_protocol([SupportedProtocol.for_token(DIN)], [_entry(ISO2, 1, 1)])
        self.assertFalse(response.ok)
        self.assertIsNone(response.chosen_schema_id)

    @settings(max_examples=300, deadline=None)
    @given(
        st.lists(st.sampled_from(TOKENS), min_size=1, max_size=3, unique=True),
        st.lists(st.sampled_from(TOKENS), min_size=1, max_size=3, unique=True),
        st.permutations(list(TOKENS)),
    )
    def test_choice_is_always_an_offered_supported_protocol(self, offered, supported, ranking) -> None:
        entries = build_advertisement(offered, {token: rank for rank, token in enumerate(ranking)})
        response = select_protocol([SupportedProtocol.for_token(token) for token in supported], entries)
        chosen = protocol_for_schema(entries, response.chosen_schema_id)
        if response.ok:
            self.assertIn(chosen, set(offered) & set(supported))
        else:
            self.assertFalse(set(offered) & set(supported))


class AdvertisementTests(unittest.TestCase):
    def test_schema_ids_follow_listing_and_priorities_follow_rank(self) -> None:
        entries = build_advertisement([ISO2, DIN], {DIN: 1, ISO2: 2})
        self.assertEqual([(entry.protocol, entry.schema_id, entry.priority) for entry in entries], [(ISO2, 1, 2), (DIN, 2, 1)])
        validate_entries(entries)


if __name__ == "__main__":
    unittest.main()
