"""Shared builders for registry rows and synthetic station reports."""

from __future__ import annotations

import csv
import io
import json
from typing import Dict, Iterator, List, Mapping, Optional, Sequence, Tuple

from ccs_audit.app_handshake import HandshakeResponse, ResponseCode
from ccs_audit.dataset import CSV_COLUMNS
from ccs_audit.market import ClusterKey
from ccs_audit.orchestrator import (
    DIN,
    ISO2,
    ScenarioOutcome,
    StationIdentity,
    StationReport,
    recompute_derived,
)
from ccs_audit.tls_probe import CertificateSummary, TlsProbeResult

REGIONAL_OPERATORS = tuple(f"regional-cpo-{index:02d}" for index in range(1, 13))

# Charge points per (operator, manufacturer) for the German CCS market.
GERMAN_CLUSTERS: Dict[Tuple[str, str], int] = {
    ("enbw", "alpitronic"): 7297,
    ("enbw", "abb"): 228,
    ("enbw", "delta"): 68,
    ("tesla", "tesla"): 3770,
    ("aral", "alpitronic"): 2679,
    ("aral", "volkswagen"): 199,
    ("aral", "compleo"): 3,
    ("aral", "delta"): 6,
    ("ewe", "alpitronic"): 1985,
    ("ewe", "delta"): 14,
    ("allego", "alpitronic"): 1773,
    ("allego", "efacec"): 78,
    ("allego", "delta"): 9,
    ("pfalzwerke", "alpitronic"): 1378,
    ("pfalzwerke", "enercharge"): 135,
    ("pfalzwerke", "abb"): 108,
    ("pfalzwerke", "siemens"): 37,
    ("pfalzwerke", "delta"): 4,
    ("newmotion", "alpitronic"): 941,
    ("newmotion", "abb"): 551,
    ("newmotion", "volkswagen"): 79,
    ("newmotion", "delta"): 2,
    ("be.energised", "alpitronic"): 983,
    ("be.energised", "ads-tec"): 193,
    ("be.energised", "compleo"): 95,
    ("be.energised", "abb"): 89,
    ("be.energised", "ekoenergetyka"): 16,
    ("be.energised", "delta"): 78,
    ("ionity", "tritium"): 658,
    ("ionity", "abb"): 448,
    ("ionity", "alpitronic"): 257,
    ("ladenetz", "alpitronic"): 789,
    ("ladenetz", "compleo"): 215,
    ("ladenetz", "abb"): 118,
    ("ladenetz", "enercharge"): 104,
    ("ladenetz", "ads-tec"): 54,
    ("ladenetz", "siemens"): 27,
    ("ladenetz", "delta"): 14,
    ("ladenetz", "efacec"): 34,
    ("lidl", "abb"): 779,
    ("lidl", "alpitronic"): 204,
    ("elli", "compleo"): 900,
    ("elli", "alpitronic"): 42,
    ("mer", "alpitronic"): 744,
    ("mer", "abb"): 75,
    ("aldi", "alpitronic"): 809,
    ("aldi", "abb"): 10,
    ("kaufland", "abb"): 644,
    ("kaufland", "alpitronic"): 53,
    ("edeka", "compleo"): 379,
    ("edeka", "alpitronic"): 71,
    ("fastned", "alpitronic"): 328,
    ("circle k", "abb"): 186,
    ("circle k", "alpitronic"): 100,
}
for _index, _operator in enumerate(REGIONAL_OPERATORS):
    GERMAN_CLUSTERS[(_operator, "alpitronic")] = 550 if _index < 6 else 549
    GERMAN_CLUSTERS[(_operator, "abb")] = 72 if _index < 7 else 71
    GERMAN_CLUSTERS[(_operator, "enercharge")] = 222 if _index < 4 else 221

RETAINED_POINTS = 40949
DE_MISSING_MANUFACTURER = 3364
FOREIGN_CCS = 69765
NON_CCS = 1000

# Raw labels used for a few clusters so normalization has something to do.
RAW_CPO_LABELS = {"enbw": "EnBW mobility+", "tesla": "Tesla Germany GmbH", "aldi": "ALDI SÜD"}
RAW_MFR_LABELS = {"tesla": "Supercharger", "abb": "ABB E-mobility", "alpitronic": "Alpitronic GmbH"}


def _row(
    index: int,
    country: str,
    cpo: str,
    manufacturer: Optional[str],
    connector: str = "CCS",
) -> Dict[str, str]:
    return {
        "source_id": f"st-{index:06d}",
        "country": country,
        "lat": f"{47 + (index % 700) / 100:.2f}",
        "lon": f"{6 + (index % 900) / 100:.2f}",
        "cpo": RAW_CPO_LABELS.get(cpo, cpo),
        "mo": "",
        "manufacturer": "" if manufacturer is None else RAW_MFR_LABELS.get(manufacturer, manufacturer),
        "model": "",
        "charge_points": "1",
        "connector": connector,
        "install_year": str(2016 + index % 9),
        "max_power_kw": "150",
    }


def synthetic_registry_rows(
    clusters: Mapping[Tuple[str, str], int] = GERMAN_CLUSTERS,
    missing_manufacturer: int = DE_MISSING_MANUFACTURER,
    foreign: int = FOREIGN_CCS,
    non_ccs: int = NON_CCS,
) -> Iterator[Dict[str, str]]:
    """Registry rows, one charge point each, matching the given marginals."""

    index = 0
    for (cpo, manufacturer), count in sorted(clusters.items()):
        for _ in range(count):
            index += 1
            yield _row(index, "DE", cpo, manufacturer)
    for _ in range(missing_manufacturer):
        index += 1
        yield _row(index, "DE", "enbw", None)
    for _ in range(foreign):
        index += 1
        yield _row(index, "NL" if index % 2 else "FR", "allego", "alpitronic")
    for _ in range(non_ccs):
        index += 1
        yield _row(index, "DE", "enbw", "abb", connector="CHAdeMO")


def registry_csv(rows: Sequence[Mapping[str, str]]) -> bytes:
    buffer = io.StringIO()
    writer = csv.DictWriter(buffer, fieldnames=CSV_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow(row)
    return buffer.getvalue().encode("utf-8")


def registry_jsonl(rows: Sequence[Mapping[str, str]]) -> bytes:
    return "".join(json.dumps(dict(row)) + "\n" for row in rows).encode("utf-8")


_CERTIFICATE = CertificateSummary(
    subject="CN=DE*CCS*E00001",
    issuer="CN=CPO Sub-CA 1 (test fixture)",
    not_before="2024-01-01T00:00:00+00:00",
    not_after="2033-12-29T00:00:00+00:00",
    key_algorithm="EC secp256r1",
    serial="3",
    secc_identity="DE*CCS*E00001",
)


def _ok(protocol: str) -> HandshakeResponse:
    return HandshakeResponse(
        response_code=ResponseCode.OK_SUCCESSFUL_NEGOTIATION,
        chosen_schema_id=1 if protocol == DIN else 2,
    )


def _availability(scenario_id: int, offered: Tuple[str, ...], supported: Sequence[str]) -> ScenarioOutcome:
    chosen = next((token for token in offered if token in supported), None)
    if chosen is None:
        return ScenarioOutcome(
            scenario_id=scenario_id,
            advertised=offered,
            slac_ok=True,
            sdp_result="NO_TLS",
            handshake_result=HandshakeResponse(response_code=ResponseCode.FAILED_NO_NEGOTIATION),
            pilot_states=("A", "B", "A"),
        )
    return ScenarioOutcome(
        scenario_id=scenario_id,
        advertised=offered,
        slac_ok=True,
        sdp_result="NO_TLS",
        handshake_result=_ok(chosen),
        chosen_protocol=chosen,
        pilot_states=("A", "B", "A"),
    )


def synthetic_report(
    source_id: str,
    cpo: str,
    manufacturer: str,
    tls: bool,
    iso2: bool,
    din: bool = True,
    preferred: Optional[str] = None,
    model: Optional[str] = None,
    year: Optional[int] = None,
    conclusive: bool = True,
) -> StationReport:
    """A report whose scenario outcomes yield exactly the given flags."""

    supported = [token for token, present in ((ISO2, iso2), (DIN, din)) if present]
    assert supported, "a station supports at least one protocol"
    preferred = preferred or supported[0]
    first = _availability(1, (ISO2, DIN), supported)
    tls_result = (
        TlsProbeResult(
            handshake_ok=True,
            tls_version="TLSv1.2",
            cipher_suite="ECDHE-ECDSA-AES128-SHA256",
            presented_chain=(_CERTIFICATE,),
            chain_valid=True,
            matched_root="hubject-v2g-root",
        )
        if tls
        else None
    )
    first = ScenarioOutcome(
        scenario_id=1,
        advertised=first.advertised,
        slac_ok=True,
        sdp_result="TLS_REQUIRED" if tls else "no_response",
        tls_result=tls_result,
        handshake_result=first.handshake_result if tls else None,
        chosen_protocol=first.chosen_protocol if tls else None,
        pilot_states=("A", "B", "A"),
    )
    outcomes: List[ScenarioOutcome] = [
        first,
        _availability(2, (ISO2,), supported),
        ScenarioOutcome(
            scenario_id=3,
            advertised=("ISO15118_20", ISO2, DIN),
            slac_ok=True,
            sdp_result="NO_TLS",
            handshake_result=_ok(preferred),
            chosen_protocol=preferred,
            pilot_states=("A", "B", "A"),
        ),
        _availability(4, (DIN,), supported),
    ]
    if not conclusive:
        outcomes[3] = ScenarioOutcome(
            scenario_id=4,
            advertised=(DIN,),
            slac_ok=False,
            slac_failure_stage="parm_cnf",
            pilot_states=("A", "B", "A"),
        )
    return StationReport(
        station=StationIdentity(
            source_id=source_id,
            cpo=cpo,
            manufacturer=manufacturer,
            model=model,
            install_year=year,
        ),
        outcomes=tuple(outcomes),
        derived=recompute_derived(outcomes),
    )


def key(cpo: str, manufacturer: str) -> ClusterKey:
    return ClusterKey(cpo=cpo, manufacturer=manufacturer)
