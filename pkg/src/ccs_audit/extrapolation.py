"""Cluster verdicts from station reports and the national aggregate.

All shares stay exact fractions of the analyzed charge points; rendering is
the only place anything is rounded.
"""

from __future__ import annotations

import logging
from collections import Counter, defaultdict
from dataclasses import dataclass, replace
from decimal import Decimal
from fractions import Fraction
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

import pandas as pd

from ccs_audit.artifacts import KIND_SUMMARY, dumps_artifact, read_artifact
from ccs_audit.constants import CONFLICT_BLOCK, CONFLICT_MAJORITY, REPORT_TOLERANCE_PP
from ccs_audit.errors import InputError, SchemaError, UnknownClusterError
from ccs_audit.format_utils import (
    format_percent,
    fraction_from_text,
    fraction_to_text,
    percent_decimal,
)
from ccs_audit.market import ClusterKey, ClusterStats, ShareDiscrepancy, cpo_shares_from_clusters
from ccs_audit.orchestrator import StationReport

logger = logging.getLogger(__name__)

FORMAT_JSON = "json"
FORMAT_CSV = "csv"
FORMAT_MARKDOWN = "markdown"
REPORT_FORMATS = (FORMAT_JSON, FORMAT_CSV, FORMAT_MARKDOWN)

SUMMARY_METRICS = (
    "covered_share",
    "tls_share_of_all",
    "tls_share_of_covered",
    "iso2_share_of_all",
    "iso2_share_of_covered",
    "din_share_of_all",
)

MARKDOWN_COLUMNS = (
    "CPO",
    "CPO %",
    "OEM",
    "OEM %",
    "Cluster %",
    "Model",
    "Year",
    "ISO 15118-2",
    "TLS",
)
CSV_COLUMNS = (
    "row_type",
    "cpo",
    "manufacturer",
    "point_count",
    "cluster_pct",
    "oem_pct",
    "evidence_count",
    "verdict",
    "supports_tls",
    "supports_iso2",
    "supports_din",
    "metric",
    "value_pct",
    "exact",
)

_CHECK = "✓"
_CROSS = "✗"


@dataclass(frozen=True)
class Verdict:
    supports_tls: bool
    supports_iso2: bool
    supports_din: bool

    def to_dict(self) -> Dict[str, bool]:
        return {
            "supports_tls": self.supports_tls,
            "supports_iso2": self.supports_iso2,
            "supports_din": self.supports_din,
        }


@dataclass(frozen=True)
class TestedStation:
    source_id: str
    model: Optional[str]
    install_year: Optional[int]

    __test__ = False


@dataclass(frozen=True)
class ClusterResult:
    """One cluster with the verdict extrapolated to all its charge points.

    `verdict` is None for untested clusters and for clusters whose evidence
    conflicts under the active policy (`conflict` is then true).
    """

    key: ClusterKey
    point_count: int
    cluster_share_of_total: Fraction
    share_within_cpo: Fraction
    tested: Tuple[TestedStation, ...] = ()
    verdict: Optional[Verdict] = None
    evidence_count: int = 0
    conflict: bool = False

    def __post_init__(self) -> None:
        if self.verdict is not None:
            assert self.evidence_count >= 1, "a verdict needs evidence"

    def to_dict(self) -> Dict[str, Any]:
        return {
            "cpo": self.key.cpo,
            "manufacturer": self.key.manufacturer,
            "point_count": self.point_count,
            "cluster_share_of_total": fraction_to_text(self.cluster_share_of_total),
            "share_within_cpo": fraction_to_text(self.share_within_cpo),
            "tested": [
                {"id": item.source_id, "model": item.model, "year": item.install_year}
                for item in self.tested
            ],
            "verdict": None if self.verdict is None else self.verdict.to_dict(),
            "evidence_count": self.evidence_count,
            "conflict": self.conflict,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "ClusterResult":
        verdict = data.get("verdict")
        return cls(
            key=ClusterKey(cpo=str(data["cpo"]), manufacturer=str(data["manufacturer"])),
            point_count=int(data["point_count"]),
            cluster_share_of_total=fraction_from_text(data["cluster_share_of_total"]),
            share_within_cpo=fraction_from_text(data["share_within_cpo"]),
            tested=tuple(
                TestedStation(
                    source_id=str(item["id"]),
                    model=item.get("model"),
                    install_year=None if item.get("year") is None else int(item["year"]),
                )
                for item in data.get("tested", [])
            ),
            verdict=None if verdict is None else Verdict(**{k: bool(v) for k, v in verdict.items()}),
            evidence_count=int(data.get("evidence_count", 0)),
            conflict=bool(data.get("conflict", False)),
        )


def _verdict_of(report: StationReport) -> Verdict:
    return Verdict(
        supports_tls=report.derived.supports_tls,
        supports_iso2=report.derived.supports_iso2,
        supports_din=report.derived.supports_din,
    )


def _decide(verdicts: Sequence[Verdict], policy: str) -> Tuple[Optional[Verdict], bool]:
    counts = Counter(verdicts)
    if len(counts) <= 1:
        return (verdicts[0] if verdicts else None), False
    if policy == CONFLICT_BLOCK:
        return None, True
    ranked = counts.most_common()
    if ranked[0][1] == ranked[1][1]:
        return None, True
    return ranked[0][0], True


def extrapolate(
    clusters: Sequence[ClusterStats],
    reports: Sequence[StationReport],
    conflict_policy: str = CONFLICT_BLOCK,
) -> List[ClusterResult]:
    """Assign each cluster the verdict of its tested stations.

    Args:
        clusters: Cluster statistics of one analysis set.
        reports: Station reports; only conclusive ones count as evidence.
        conflict_policy: `block` leaves a cluster with disagreeing evidence
            without verdict; `majority` takes the most common verdict and
            still leaves ties without one.

    Returns:
        One result per cluster, in the order of `clusters`.

    Raises:
        UnknownClusterError: a report names a cluster not in `clusters`.
    """

    if conflict_policy not in (CONFLICT_BLOCK, CONFLICT_MAJORITY):
        raise InputError(f"unknown conflict policy {conflict_policy!r}")
    known = {stats.key for stats in clusters}
    grouped: Dict[ClusterKey, List[StationReport]] = defaultdict(list)
    for report in sorted(reports, key=lambda item: item.station.source_id):
        if report.key not in known:
            raise UnknownClusterError(cpo=report.key.cpo, manufacturer=report.key.manufacturer)
        if report.is_conclusive:
            grouped[report.key].append(report)
        else:
            logger.info("%s: inconclusive report ignored", report.station.source_id)
    results = []
    for stats in clusters:
        evidence = grouped.get(stats.key, [])
        verdict, conflict = _decide([_verdict_of(item) for item in evidence], conflict_policy)
        if conflict:
            logger.warning(
                "%s: station reports disagree (%s policy)", stats.key.label, conflict_policy
            )
        results.append(
            ClusterResult(
                key=stats.key,
                point_count=stats.point_count,
                cluster_share_of_total=stats.share_of_total,
                share_within_cpo=stats.share_within_cpo,
                tested=tuple(
                    TestedStation(
                        source_id=item.station.source_id,
                        model=item.station.model,
                        install_year=item.station.install_year,
                    )
                    for item in evidence
                ),
                verdict=verdict,
                evidence_count=len(evidence),
                conflict=conflict,
            )
        )
    return results


@dataclass(frozen=True)
class DiscrepancyNote:
    """A computed figure that differs from a printed one by more than the tolerance."""

    metric: str
    computed: Fraction
    printed: Decimal

    @property
    def delta_pp(self) -> Decimal:
        return percent_decimal(self.computed, places=2) - self.printed

    def to_dict(self) -> Dict[str, Any]:
        return {
            "metric": self.metric,
            "computed": fraction_to_text(self.computed),
            "computed_pct": format_percent(self.computed),
            "printed_pct": str(self.printed),
            "delta_pp": str(self.delta_pp),
        }


@dataclass(frozen=True)
class NationalSummary:
    results: Tuple[ClusterResult, ...]
    covered_share: Fraction
    tls_share_of_all: Fraction
    tls_share_of_covered: Fraction
    iso2_share_of_all: Fraction
    iso2_share_of_covered: Fraction
    din_share_of_all: Fraction
    cpo_share_of_all: Mapping[str, Fraction]
    conflicts: Tuple[ClusterKey, ...] = ()
    notes: Tuple[DiscrepancyNote, ...] = ()
    share_notes: Tuple[ShareDiscrepancy, ...] = ()

    def __post_init__(self) -> None:
        assert 0 <= self.tls_share_of_all <= self.covered_share <= 1
        assert 0 <= self.iso2_share_of_all <= self.covered_share

    def metric(self, name: str) -> Fraction:
        assert name in SUMMARY_METRICS, f"unknown metric {name!r}"
        return getattr(self, name)


def _ratio(part: Fraction, whole: Fraction) -> Fraction:
    return part / whole if whole else Fraction(0)


def aggregate(
    results: Sequence[ClusterResult],
    reference: Optional[Mapping[str, Decimal]] = None,
    tolerance_pp: Decimal = Decimal(REPORT_TOLERANCE_PP),
) -> NationalSummary:
    """Sum verdict-bearing cluster shares into national figures.

    Args:
        results: Output of `extrapolate` for one analysis set.
        reference: Optional printed percentages keyed by metric name; each
            metric that deviates by more than `tolerance_pp` yields a note.
        tolerance_pp: Allowed deviation in percentage points.

    Returns:
        The summary with exact shares.

    Example:
        >>> key = ClusterKey("a", "x")
        >>> only = ClusterResult(key=key, point_count=1, cluster_share_of_total=Fraction(1),
        ...     share_within_cpo=Fraction(1), verdict=Verdict(True, True, True), evidence_count=1)
        >>> aggregate([only]).tls_share_of_covered
        Fraction(1, 1)
    """

    covered = tls = iso2 = din = Fraction(0)
    for result in results:
        if result.verdict is None:
            continue
        share = result.cluster_share_of_total
        covered += share
        if result.verdict.supports_tls:
            tls += share
        if result.verdict.supports_iso2:
            iso2 += share
        if result.verdict.supports_din:
            din += share
    per_cpo = cpo_shares_from_clusters(
        ClusterStats(
            key=result.key,
            point_count=result.point_count,
            share_of_total=result.cluster_share_of_total,
            share_within_cpo=result.share_within_cpo,
        )
        for result in results
    )
    summary = NationalSummary(
        results=tuple(results),
        covered_share=covered,
        tls_share_of_all=tls,
        tls_share_of_covered=_ratio(tls, covered),
        iso2_share_of_all=iso2,
        iso2_share_of_covered=_ratio(iso2, covered),
        din_share_of_all=din,
        cpo_share_of_all=per_cpo,
        conflicts=tuple(sorted(result.key for result in results if result.conflict)),
    )
    notes = []
    for name, printed in sorted((reference or {}).items()):
        if name not in SUMMARY_METRICS:
            logger.debug("ignoring unknown reference metric %s", name)
            continue
        computed = summary.metric(name)
        if abs(Fraction(computed) * 100 - Fraction(printed)) > Fraction(tolerance_pp):
            note = DiscrepancyNote(metric=name, computed=computed, printed=Decimal(printed))
            logger.warning(
                "%s: computed %s%% vs printed %s%%", name, format_percent(computed), printed
            )
            notes.append(note)
    if notes:
        summary = replace(summary, notes=tuple(notes))
    return summary


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------


def summary_to_payload(summary: NationalSummary) -> Dict[str, Any]:
    metrics = {
        name: {
            "exact": fraction_to_text(summary.metric(name)),
            "pct": format_percent(summary.metric(name)),
        }
        for name in SUMMARY_METRICS
    }
    return {
        "metrics": metrics,
        "cpo_share_of_all": {
            cpo: fraction_to_text(share) for cpo, share in sorted(summary.cpo_share_of_all.items())
        },
        "conflicts": [{"cpo": key.cpo, "manufacturer": key.manufacturer} for key in summary.conflicts],
        "notes": [note.to_dict() for note in summary.notes],
        "share_notes": [note.to_dict() for note in summary.share_notes],
        "clusters": [result.to_dict() for result in summary.results],
    }


def summary_from_payload(payload: Mapping[str, Any], source: str = "<memory>") -> NationalSummary:
    try:
        metrics = {
            name: fraction_from_text(payload["metrics"][name]["exact"]) for name in SUMMARY_METRICS
        }
        return NationalSummary(
            results=tuple(ClusterResult.from_dict(item) for item in payload["clusters"]),
            cpo_share_of_all={
                str(cpo): fraction_from_text(share)
                for cpo, share in payload["cpo_share_of_all"].items()
            },
            conflicts=tuple(
                ClusterKey(cpo=str(item["cpo"]), manufacturer=str(item["manufacturer"]))
                for item in payload.get("conflicts", [])
            ),
            notes=tuple(
                DiscrepancyNote(
                    metric=str(item["metric"]),
                    computed=fraction_from_text(item["computed"]),
                    printed=Decimal(str(item["printed_pct"])),
                )
                for item in payload.get("notes", [])
            ),
            share_notes=tuple(
                ShareDiscrepancy(
                    key=ClusterKey(cpo=str(item["cpo"]), manufacturer=str(item["manufacturer"])),
                    primary_pct=Decimal(str(item["primary_pct"])),
                    secondary_pct=Decimal(str(item["secondary_pct"])),
                )
                for item in payload.get("share_notes", [])
            ),
            **metrics,
        )
    except (KeyError, TypeError, ValueError, AssertionError) as exc:
        raise SchemaError(f"{source}: malformed national summary ({exc})") from exc


def load_summary(path: Path) -> NationalSummary:
    return summary_from_payload(read_artifact(path=path, kind=KIND_SUMMARY), source=str(path))


def _mark(value: Optional[bool]) -> str:
    if value is None:
        return "?"
    return _CHECK if value else _CROSS


def _model_rows(result: ClusterResult) -> List[Tuple[str, str]]:
    """(model, years) per distinct model, years joined in ascending order."""

    years: Dict[str, set] = {}
    for item in result.tested:
        seen = years.setdefault(item.model or "?", set())
        if item.install_year is not None:
            seen.add(item.install_year)
    rows = []
    for model in sorted(years):
        text = ", ".join(str(year) for year in sorted(years[model])) or "?"
        rows.append((model, text))
    return rows or [("?", "?")]


def _listed(summary: NationalSummary) -> List[ClusterResult]:
    """Tested clusters, grouped by operator in descending operator share."""

    tested = [result for result in summary.results if result.evidence_count > 0]
    return sorted(
        tested,
        key=lambda result: (
            -summary.cpo_share_of_all.get(result.key.cpo, Fraction(0)),
            result.key.cpo,
            -result.cluster_share_of_total,
            result.key.manufacturer,
        ),
    )


def _markdown(summary: NationalSummary) -> str:
    lines = [
        "| " + " | ".join(MARKDOWN_COLUMNS) + " |",
        "|" + "|".join("---" for _ in MARKDOWN_COLUMNS) + "|",
    ]
    listed = _listed(summary)
    previous_cpo = None
    for result in listed:
        for index, (model, years) in enumerate(_model_rows(result)):
            first_of_cpo = result.key.cpo != previous_cpo
            first_of_cluster = index == 0
            verdict = result.verdict
            cells = [
                result.key.cpo if first_of_cpo else "",
                format_percent(summary.cpo_share_of_all.get(result.key.cpo, Fraction(0)))
                if first_of_cpo
                else "",
                result.key.manufacturer if first_of_cluster else "",
                format_percent(result.share_within_cpo) if first_of_cluster else "",
                format_percent(result.cluster_share_of_total) if first_of_cluster else "",
                model,
                years,
                "conflict" if verdict is None and result.conflict else _mark(None if verdict is None else verdict.supports_iso2),
                "conflict" if verdict is None and result.conflict else _mark(None if verdict is None else verdict.supports_tls),
            ]
            lines.append("| " + " | ".join(cells) + " |")
            previous_cpo = result.key.cpo
    if listed:
        lines.append(
            "| % Of All |  |  |  | "
            + format_percent(summary.covered_share)
            + " |  |  | "
            + format_percent(summary.iso2_share_of_all)
            + " | "
            + format_percent(summary.tls_share_of_all)
            + " |"
        )
        lines.append(
            "| % Of Clusters |  |  |  |  |  |  | "
            + format_percent(summary.iso2_share_of_covered)
            + " | "
            + format_percent(summary.tls_share_of_covered)
            + " |"
        )
    text = "\n".join(lines) + "\n"
    if summary.notes or summary.share_notes:
        notes = ["", "Notes:"]
        for note in summary.notes:
            notes.append(
                f"- {note.metric}: computed {format_percent(note.computed)}%, "
                f"printed {note.printed}% (delta {note.delta_pp} pp)"
            )
        for item in summary.share_notes:
            notes.append(
                f"- {item.key.label}: manufacturer share {item.primary_pct}% vs "
                f"{item.secondary_pct}% in the cluster table"
            )
        text += "\n".join(notes) + "\n"
    return text


def _csv(summary: NationalSummary) -> str:
    rows: List[Dict[str, Any]] = []
    for result in summary.results:
        verdict = result.verdict
        rows.append(
            {
                "row_type": "cluster",
                "cpo": result.key.cpo,
                "manufacturer": result.key.manufacturer,
                "point_count": result.point_count,
                "cluster_pct": format_percent(result.cluster_share_of_total),
                "oem_pct": format_percent(result.share_within_cpo),
                "evidence_count": result.evidence_count,
                "verdict": "conflict" if result.conflict else ("none" if verdict is None else "set"),
                "supports_tls": "" if verdict is None else str(verdict.supports_tls).lower(),
                "supports_iso2": "" if verdict is None else str(verdict.supports_iso2).lower(),
                "supports_din": "" if verdict is None else str(verdict.supports_din).lower(),
            }
        )
    for name in SUMMARY_METRICS:
        rows.append(
            {
                "row_type": "summary",
                "metric": name,
                "value_pct": format_percent(summary.metric(name)),
                "exact": fraction_to_text(summary.metric(name)),
            }
        )
    table = pd.DataFrame(rows, columns=list(CSV_COLUMNS), dtype=object)
    return table.to_csv(index=False, lineterminator="\n")


def render_report(summary: NationalSummary, format: str = FORMAT_MARKDOWN) -> bytes:
    """Render the summary as `json`, `csv` or a `markdown` table.

    Raises:
        InputError: unknown format.
    """

    if format == FORMAT_JSON:
        return dumps_artifact(kind=KIND_SUMMARY, payload=summary_to_payload(summary)).encode("utf-8")
    if format == FORMAT_CSV:
        return _csv(summary).encode("utf-8")
    if format == FORMAT_MARKDOWN:
        return _markdown(summary).encode("utf-8")
    raise InputError(f"unknown report format {format!r}; expected one of {REPORT_FORMATS}")
