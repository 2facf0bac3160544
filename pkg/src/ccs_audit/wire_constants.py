"""Standard-derived wire numbers used by every codec in the package.

Keep every magic number for SLAC, V2GTP/SDP and the application handshake in
this one table so it can be audited against the source standards. Each block
names the document it comes from; round-trip and golden vectors in
`tests/test_wire_vectors.py` pin the values.
"""

from __future__ import annotations

# ---------------------------------------------------------------------------
# HomePlug Green PHY management messages
# (HomePlug AV 2.1 MME header; ISO 15118-3 Annex A, SLAC messages)
# ---------------------------------------------------------------------------

HOMEPLUG_ETHERTYPE = 0x88E1
HOMEPLUG_MMV = 0x01  # HomePlug AV 1.1 / Green PHY; adds 2 bytes FMI
MME_MIN_FRAME_LEN = 60  # Ethernet minimum without FCS
MME_MAX_PAYLOAD_LEN = 1495  # 1500 byte Ethernet payload minus mmv/mmtype/fmi
ETH_HEADER_LEN = 14
BROADCAST_MAC = b"\xff" * 6

CM_SET_KEY_REQ = 0x6008
CM_SET_KEY_CNF = 0x6009
CM_SLAC_PARM_REQ = 0x6064
CM_SLAC_PARM_CNF = 0x6065
CM_START_ATTEN_CHAR_IND = 0x606A
CM_ATTEN_CHAR_IND = 0x606E
CM_ATTEN_CHAR_RSP = 0x606F
CM_MNBC_SOUND_IND = 0x6076
CM_SLAC_MATCH_REQ = 0x607C
CM_SLAC_MATCH_CNF = 0x607D

MMTYPE_NAMES = {
    CM_SET_KEY_REQ: "CM_SET_KEY.REQ",
    CM_SET_KEY_CNF: "CM_SET_KEY.CNF",
    CM_SLAC_PARM_REQ: "CM_SLAC_PARM.REQ",
    CM_SLAC_PARM_CNF: "CM_SLAC_PARM.CNF",
    CM_START_ATTEN_CHAR_IND: "CM_START_ATTEN_CHAR.IND",
    CM_ATTEN_CHAR_IND: "CM_ATTEN_CHAR.IND",
    CM_ATTEN_CHAR_RSP: "CM_ATTEN_CHAR.RSP",
    CM_MNBC_SOUND_IND: "CM_MNBC_SOUND.IND",
    CM_SLAC_MATCH_REQ: "CM_SLAC_MATCH.REQ",
    CM_SLAC_MATCH_CNF: "CM_SLAC_MATCH.CNF",
}

# Payload lengths in bytes (after the 19-byte header of an mmv=1 frame).
SLAC_PAYLOAD_LENGTHS = {
    CM_SET_KEY_REQ: 38,
    CM_SLAC_PARM_REQ: 10,
    CM_SLAC_PARM_CNF: 25,
    CM_START_ATTEN_CHAR_IND: 19,
    CM_MNBC_SOUND_IND: 52,
    CM_ATTEN_CHAR_IND: 110,
    CM_ATTEN_CHAR_RSP: 51,
    CM_SLAC_MATCH_REQ: 66,
    CM_SLAC_MATCH_CNF: 90,
}

SLAC_APPLICATION_TYPE = 0x00  # PEV-EVSE association
SLAC_SECURITY_TYPE = 0x00  # no security
SLAC_RESP_TYPE_HLE = 0x01  # sounds reported to the other GP station
SLAC_TIMEOUT_UNIT_MS = 100  # TIME_OUT field counts 100 ms units
SLAC_RUN_ID_LEN = 8
SLAC_ID_LEN = 17
SLAC_AAG_GROUPS = 58
SLAC_NID_LEN = 7
SLAC_NMK_LEN = 16
SLAC_MATCH_REQ_MVF_LENGTH = 0x3E
SLAC_MATCH_CNF_MVF_LENGTH = 0x56
SET_KEY_PID_HLE = 0x04
SET_KEY_PEKS_NMK = 0x01
SET_KEY_KEY_INFO_NMK = 0x01

# ---------------------------------------------------------------------------
# V2G Transfer Protocol and SECC Discovery (ISO 15118-2, V2GTP header and SDP)
# ---------------------------------------------------------------------------

V2GTP_VERSION = 0x01
V2GTP_INVERSE_VERSION = 0xFE
V2GTP_HEADER_LEN = 8
V2GTP_MAX_PAYLOAD_LEN = 65536

PAYLOAD_TYPE_EXI = 0x8001
PAYLOAD_TYPE_SDP_REQUEST = 0x9000
PAYLOAD_TYPE_SDP_RESPONSE = 0x9001

PAYLOAD_TYPE_NAMES = {
    PAYLOAD_TYPE_EXI: "EXI",
    PAYLOAD_TYPE_SDP_REQUEST: "SDP_REQUEST",
    PAYLOAD_TYPE_SDP_RESPONSE: "SDP_RESPONSE",
}

SDP_SECURITY_TLS = 0x00
SDP_SECURITY_NO_TLS = 0x10
SDP_TRANSPORT_TCP = 0x00
SDP_TRANSPORT_UDP = 0x10
SDP_REQUEST_PAYLOAD_LEN = 2
SDP_RESPONSE_PAYLOAD_LEN = 20
SDP_SERVER_PORT = 15118
SDP_MULTICAST_GROUP = "ff02::1"
SECC_DYNAMIC_PORT_MIN = 49152
SECC_DYNAMIC_PORT_MAX = 65535

# ---------------------------------------------------------------------------
# supportedAppProtocol namespaces (DIN SPEC 70121, ISO 15118-2, ISO 15118-20)
# ---------------------------------------------------------------------------

NAMESPACE_DIN70121 = "urn:din:70121:2012:MsgDef"
NAMESPACE_ISO15118_2 = "urn:iso:15118:2:2013:MsgDef"
NAMESPACE_ISO15118_20_DC = "urn:iso:std:iso:15118:-20:DC"
NAMESPACE_ISO15118_20_AC = "urn:iso:std:iso:15118:-20:AC"

# Protocol token -> (namespace, major, minor) advertised by default.
PROTOCOL_VERSIONS = {
    "DIN70121": (NAMESPACE_DIN70121, 2, 0),
    "ISO15118_2": (NAMESPACE_ISO15118_2, 2, 0),
    "ISO15118_20": (NAMESPACE_ISO15118_20_DC, 1, 0),
}

NAMESPACE_TO_PROTOCOL = {
    NAMESPACE_DIN70121: "DIN70121",
    NAMESPACE_ISO15118_2: "ISO15118_2",
    NAMESPACE_ISO15118_20_DC: "ISO15118_20",
    NAMESPACE_ISO15118_20_AC: "ISO15118_20",
}

APP_PROTOCOL_MAX_ENTRIES = 20
APP_PROTOCOL_NAMESPACE_MAX_LEN = 100
APP_PROTOCOL_PRIORITY_MIN = 1
APP_PROTOCOL_PRIORITY_MAX = 20
