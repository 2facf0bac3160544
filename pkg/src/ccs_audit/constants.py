from __future__ import annotations

from pathlib import Path

# Shared configuration paths/defaults
CONFIG_DIR = Path.home() / ".ccsaudit"
CONFIG_PATH = CONFIG_DIR / "config.json"
ENV_PREFIX = "CCSAUDIT_"
DATA_DIR = Path(__file__).resolve().parent / "data"

# Artifacts
FORMAT_VERSION = 1
RUN_META_FILENAME = "run_meta.json"

# Dataset / market defaults
DEFAULT_COUNTRY = "DE"
DEFAULT_BUDGET = 20
DEFAULT_STATIONS_PER_CLUSTER = 2
REPORT_TOLERANCE_PP = "0.1"

# Networks that are mobility operators as much as CPOs; kept as-is unless
# re-attribution is switched on.
MOBILITY_NETWORK_LABELS = ("newmotion", "be.energised", "ladenetz", "innogy")

# SLAC timing (per stage)
DEFAULT_SOUND_COUNT = 10
DEFAULT_SLAC_STAGE_TIMEOUT_S = 0.6
DEFAULT_SIM_ATTENUATION_DB = 25

# SDP / TLS timing
DEFAULT_SDP_RETRIES = 3
DEFAULT_SDP_TIMEOUT_S = 0.25
DEFAULT_TLS_DEADLINE_S = 5.0
DEFAULT_SCENARIO_RETRIES = 1

# EV advertisement priorities (1 = highest)
DEFAULT_EV_PRIORITIES = {
    "ISO15118_20": 1,
    "ISO15118_2": 2,
    "DIN70121": 3,
}

# Extrapolation
CONFLICT_BLOCK = "block"
CONFLICT_MAJORITY = "majority"
DEFAULT_CONFLICT_POLICY = CONFLICT_BLOCK

# Modes
MODE_DESK = "desk"
MODE_LIVE = "live"
TRANSPORT_INPROC = "inproc"
TRANSPORT_UDP = "udp"

# Desk-mode link addresses (locally administered)
DESK_EV_MAC = bytes.fromhex("020000000001")
DESK_EVSE_MAC = bytes.fromhex("020000000002")
DESK_EVSE_HOST = "127.0.0.1"

# Simulator network keys handed out in SLAC_MATCH.CNF
DEFAULT_SIM_NID = bytes.fromhex("026bcba5354e08")
DEFAULT_SIM_NMK = bytes.fromhex("b59319d7e8157ba001b018669ccee30d")

# Fixture PKI
FIXTURE_PKI_TOKEN = "fixture-pki"
FIXTURE_ROOT_NAME = "hubject-v2g-root"
FIXTURE_PKI_ANCHOR = "2024-01-01T00:00:00+00:00"
FIXTURE_PKI_VALID_DAYS = 3650
