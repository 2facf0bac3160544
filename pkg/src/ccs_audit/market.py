"""Market clustering by (operator, manufacturer) and field-test sample planning.

Shares are exact `Fraction`s over charge points; rounding happens only when a
share is rendered.
"""

from __future__ import annotations

import logging
from collections import defaultdict
from dataclasses import dataclass
from decimal import Decimal, InvalidOperation
from fractions import Fraction
from pathlib import Path
from typing import Any, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import pandas as pd

from ccs_audit.artifacts import KIND_CLUSTERS, KIND_MARKET, read_artifact
from ccs_audit.dataset import AnalysisSet, StationRecord
from ccs_audit.errors import SchemaError
from ccs_audit.format_utils import format_percent, fraction_from_text, fraction_to_text

logger = logging.getLogger(__name__)


@dataclass(frozen=True, order=True)
class ClusterKey:
    """A (CPO, manufacturer) pair, the unit of extrapolation.

    Example:
        >>> ClusterKey(cpo="enbw", manufacturer="alpitronic").label
        'enbw/alpitronic'
    """

    cpo: str
    manufacturer: str

    def __post_init__(self) -> None:
        assert self.cpo, "cluster cpo must be non-empty"
        assert self.manufacturer, "cluster manufacturer must be non-empty"

    @property
    def label(self) -> str:
        return f"{self.cpo}/{self.manufacturer}"


@dataclass(frozen=True)
class ClusterStats:
    key: ClusterKey
    point_count: int
    share_of_total: Fraction
    share_within_cpo: Fraction

    def __post_init__(self) -> None:
        assert self.point_count >= 0
        assert 0 <= self.share_of_total <= 1
        assert 0 <= self.share_within_cpo <= 1

    def to_dict(self) -> Dict[str, Any]:
        return {
            "cpo": self.key.cpo,
            "manufacturer": self.key.manufacturer,
            "point_count": self.point_count,
            "share_of_total": fraction_to_text(self.share_of_total),
            "share_of_total_pct": format_percent(self.share_of_total),
            "share_within_cpo": fraction_to_text(self.share_within_cpo),
            "share_within_cpo_pct": format_percent(self.share_within_cpo),
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "ClusterStats":
        return cls(
            key=ClusterKey(cpo=str(data["cpo"]), manufacturer=str(data["manufacturer"])),
            point_count=int(data["point_count"]),
            share_of_total=fraction_from_text(data["share_of_total"]),
            share_within_cpo=fraction_from_text(data["share_within_cpo"]),
        )


def _sort_key(stats: ClusterStats) -> Tuple[int, ClusterKey]:
    return (-stats.point_count, stats.key)


def stats_from_counts(counts: Mapping[ClusterKey, int]) -> List[ClusterStats]:
    """Turn per-cluster point counts into shares.

    Output order is point_count descending, then key.

    Example:
        >>> rows = stats_from_counts({ClusterKey("a", "x"): 1, ClusterKey("b", "x"): 1})
        >>> [str(row.share_of_total) for row in rows]
        ['1/2', '1/2']
    """

    total = sum(counts.values())
    per_cpo: Dict[str, int] = defaultdict(int)
    for key, count in counts.items():
        per_cpo[key.cpo] += count
    rows = [
        ClusterStats(
            key=key,
            point_count=count,
            share_of_total=Fraction(count, total) if total else Fraction(0),
            share_within_cpo=Fraction(count, per_cpo[key.cpo]) if per_cpo[key.cpo] else Fraction(0),
        )
        for key, count in counts.items()
    ]
    rows.sort(key=_sort_key)
    return rows


def cluster_key_of(record: StationRecord) -> ClusterKey:
    return ClusterKey(cpo=record.cpo, manufacturer=record.manufacturer)


def points_frame(analysis: AnalysisSet) -> pd.DataFrame:
    """One row per retained station: cpo, manufacturer and charge points."""

    return pd.DataFrame(
        {
            "cpo": [record.cpo for record in analysis.records],
            "manufacturer": [record.manufacturer for record in analysis.records],
            "points": pd.Series([record.charge_point_count for record in analysis.records], dtype="int64"),
        }
    )


def _grouped_points(frame: pd.DataFrame, by: Sequence[str]) -> pd.Series:
    return frame.groupby(list(by), sort=True)["points"].sum()


def build_clusters(analysis: AnalysisSet) -> List[ClusterStats]:
    grouped = _grouped_points(points_frame(analysis), by=("cpo", "manufacturer"))
    counts = {
        ClusterKey(cpo=cpo, manufacturer=manufacturer): int(points)
        for (cpo, manufacturer), points in grouped.items()
    }
    clusters = stats_from_counts(counts)
    logger.info("built %d cluster(s) over %d charge point(s)", len(clusters), sum(counts.values()))
    return clusters


def _shares(totals: pd.Series) -> Dict[str, Fraction]:
    counts = {str(name): int(points) for name, points in totals.items()}
    total = sum(counts.values())
    if not total:
        return {}
    ordered = sorted(counts.items(), key=lambda item: (-item[1], item[0]))
    return {name: Fraction(count, total) for name, count in ordered}


def manufacturer_shares(analysis: AnalysisSet) -> Dict[str, Fraction]:
    """Manufacturer share of all charge points, largest first."""

    return _shares(_grouped_points(points_frame(analysis), by=("manufacturer",)))


def cpo_shares(analysis: AnalysisSet) -> Dict[str, Fraction]:
    return _shares(_grouped_points(points_frame(analysis), by=("cpo",)))


def cpo_shares_from_clusters(clusters: Iterable[ClusterStats]) -> Dict[str, Fraction]:
    shares: Dict[str, Fraction] = defaultdict(Fraction)
    for stats in clusters:
        shares[stats.key.cpo] += stats.share_of_total
    return dict(shares)


@dataclass(frozen=True)
class PlannedCluster:
    key: ClusterKey
    point_count: int
    share_of_total: Fraction
    stations: Tuple[str, ...]
    rationale: str


@dataclass(frozen=True)
class SamplePlan:
    selected: Tuple[PlannedCluster, ...]
    budget: int
    planned_coverage: Fraction

    def __post_init__(self) -> None:
        assert self.budget >= 1
        assert len(self.selected) <= self.budget
        assert self.planned_coverage == sum(
            (item.share_of_total for item in self.selected), Fraction(0)
        )


def _year_order(years: Sequence[int]) -> List[int]:
    """Farthest-first ordering of install years, starting at the earliest."""

    remaining = sorted(set(years))
    if not remaining:
        return []
    ordered = [remaining.pop(0)]
    while remaining:
        best = max(remaining, key=lambda year: (min(abs(year - seen) for seen in ordered), -year))
        ordered.append(best)
        remaining.remove(best)
    return ordered


def choose_representatives(records: Sequence[StationRecord], limit: int) -> Tuple[str, ...]:
    """Pick up to `limit` stations spread across install years.

    Years are visited farthest-first from the earliest one, taking one station
    per year per round in source_id order; stations without a year come last.

    Example:
        >>> from decimal import Decimal
        >>> def rec(sid, year):
        ...     return StationRecord(source_id=sid, country="DE", latitude=Decimal(0),
        ...         longitude=Decimal(0), cpo="c", manufacturer="m", install_year=year)
        >>> choose_representatives([rec("a", 2019), rec("b", 2020), rec("c", 2025)], 2)
        ('a', 'c')
    """

    by_year: Dict[Optional[int], List[str]] = defaultdict(list)
    for record in records:
        by_year[record.install_year].append(record.source_id)
    order: List[Optional[int]] = list(_year_order([year for year in by_year if year is not None]))
    if None in by_year:
        order.append(None)
    queues = {year: sorted(by_year[year]) for year in order}
    chosen: List[str] = []
    while len(chosen) < limit and any(queues.values()):
        for year in order:
            if queues[year] and len(chosen) < limit:
                chosen.append(queues[year].pop(0))
    return tuple(chosen)


def plan_sample(
    clusters: Sequence[ClusterStats],
    budget: int,
    stations_per_cluster: int,
    records: Sequence[StationRecord] = (),
) -> SamplePlan:
    """Greedy coverage plan: the `budget` largest clusters.

    With unit test cost per cluster, taking the largest clusters first is
    optimal; ties break on the key.

    Args:
        clusters: Cluster statistics from one analysis set.
        budget: Maximum number of clusters to test.
        stations_per_cluster: Representatives listed per selected cluster.
        records: Station records to draw representatives from; may be empty,
            in which case the plan lists clusters only.

    Returns:
        The plan with its exact planned coverage.
    """

    assert budget >= 1, "budget must be >= 1"
    assert stations_per_cluster >= 1, "stations_per_cluster must be >= 1"
    members: Dict[ClusterKey, List[StationRecord]] = defaultdict(list)
    for record in records:
        members[cluster_key_of(record)].append(record)
    ranked = sorted(clusters, key=_sort_key)[:budget]
    selected = []
    for rank, stats in enumerate(ranked, start=1):
        selected.append(
            PlannedCluster(
                key=stats.key,
                point_count=stats.point_count,
                share_of_total=stats.share_of_total,
                stations=choose_representatives(members.get(stats.key, []), stations_per_cluster),
                rationale=(
                    f"rank {rank} by charge points: {stats.point_count} points, "
                    f"{format_percent(stats.share_of_total)}% of all"
                ),
            )
        )
    coverage = sum((item.share_of_total for item in selected), Fraction(0))
    logger.info(
        "planned %d cluster(s) covering %s%% of charge points",
        len(selected),
        format_percent(coverage),
    )
    return SamplePlan(selected=tuple(selected), budget=budget, planned_coverage=coverage)


def plan_to_payload(plan: SamplePlan) -> Dict[str, Any]:
    return {
        "budget": plan.budget,
        "planned_coverage": fraction_to_text(plan.planned_coverage),
        "planned_coverage_pct": format_percent(plan.planned_coverage),
        "selected": [
            {
                "cpo": item.key.cpo,
                "manufacturer": item.key.manufacturer,
                "point_count": item.point_count,
                "share_of_total": fraction_to_text(item.share_of_total),
                "share_of_total_pct": format_percent(item.share_of_total),
                "stations": list(item.stations),
                "rationale": item.rationale,
            }
            for item in plan.selected
        ],
    }


def clusters_to_payload(clusters: Sequence[ClusterStats]) -> Dict[str, Any]:
    return {
        "total_points": sum(stats.point_count for stats in clusters),
        "clusters": [stats.to_dict() for stats in clusters],
    }


def clusters_from_payload(payload: Mapping[str, Any], source: str = "<memory>") -> List[ClusterStats]:
    try:
        rows = [ClusterStats.from_dict(item) for item in payload["clusters"]]
    except (KeyError, TypeError, ValueError, AssertionError) as exc:
        raise SchemaError(f"{source}: malformed cluster list ({exc})", field="clusters") from exc
    rows.sort(key=_sort_key)
    return rows


def load_clusters(path: Path) -> List[ClusterStats]:
    return clusters_from_payload(read_artifact(path=path, kind=KIND_CLUSTERS), source=str(path))


def _decimal(value: Any, source: str, field: str) -> Decimal:
    try:
        return Decimal(str(value))
    except InvalidOperation as exc:
        raise SchemaError(f"{source}: {field} is not a number: {value!r}", field=field) from exc


@dataclass(frozen=True)
class ClusterFixture:
    """Cluster list with the printed figures it was transcribed from.

    `listed` holds the clusters that appear as table rows; the remaining
    clusters only complete the total.
    """

    clusters: Tuple[ClusterStats, ...]
    listed: Tuple[ClusterKey, ...]
    printed_oem_pct: Mapping[ClusterKey, Decimal]
    reference_summary: Mapping[str, Decimal]

    def listed_clusters(self) -> List[ClusterStats]:
        wanted = set(self.listed)
        return [stats for stats in self.clusters if stats.key in wanted]


def load_cluster_fixture(path: Path) -> ClusterFixture:
    """Load a clusters artifact carrying per-row printed shares and summary figures.

    Counts are taken from the file; shares are recomputed from them.
    """

    payload = read_artifact(path=path, kind=KIND_CLUSTERS)
    source = str(path)
    counts: Dict[ClusterKey, int] = {}
    listed: List[ClusterKey] = []
    printed: Dict[ClusterKey, Decimal] = {}
    try:
        for item in payload["clusters"]:
            key = ClusterKey(cpo=str(item["cpo"]), manufacturer=str(item["manufacturer"]))
            counts[key] = int(item["point_count"])
            if item.get("listed", False):
                listed.append(key)
            if item.get("printed_oem_pct") is not None:
                printed[key] = _decimal(item["printed_oem_pct"], source, "printed_oem_pct")
    except (KeyError, TypeError, ValueError, AssertionError) as exc:
        raise SchemaError(f"{source}: malformed cluster fixture ({exc})", field="clusters") from exc
    reference = {
        name: _decimal(value, source, name)
        for name, value in dict(payload.get("reference_summary") or {}).items()
    }
    return ClusterFixture(
        clusters=tuple(stats_from_counts(counts)),
        listed=tuple(listed),
        printed_oem_pct=printed,
        reference_summary=reference,
    )


@dataclass(frozen=True)
class MarketRow:
    cpo: str
    points: int
    points_pct: Decimal
    manufacturers: Tuple[Tuple[str, Decimal], ...]


@dataclass(frozen=True)
class MarketTable:
    """Per-operator manufacturer breakdown as printed, carried verbatim."""

    rows: Tuple[MarketRow, ...]

    def printed_shares(self) -> Dict[ClusterKey, Decimal]:
        return {
            ClusterKey(cpo=row.cpo, manufacturer=manufacturer): pct
            for row in self.rows
            for manufacturer, pct in row.manufacturers
        }


def load_market_table(path: Path) -> MarketTable:
    payload = read_artifact(path=path, kind=KIND_MARKET)
    source = str(path)
    rows = []
    try:
        for item in payload["rows"]:
            rows.append(
                MarketRow(
                    cpo=str(item["cpo"]),
                    points=int(item["points"]),
                    points_pct=_decimal(item["points_pct"], source, "points_pct"),
                    manufacturers=tuple(
                        (str(entry["manufacturer"]), _decimal(entry["pct"], source, "pct"))
                        for entry in item["manufacturers"]
                    ),
                )
            )
    except (KeyError, TypeError, ValueError) as exc:
        raise SchemaError(f"{source}: malformed market table ({exc})", field="rows") from exc
    return MarketTable(rows=tuple(rows))


@dataclass(frozen=True)
class ShareDiscrepancy:
    key: ClusterKey
    primary_pct: Decimal
    secondary_pct: Decimal

    @property
    def delta_pp(self) -> Decimal:
        return self.primary_pct - self.secondary_pct

    def to_dict(self) -> Dict[str, Any]:
        return {
            "cpo": self.key.cpo,
            "manufacturer": self.key.manufacturer,
            "primary_pct": str(self.primary_pct),
            "secondary_pct": str(self.secondary_pct),
            "delta_pp": str(self.delta_pp),
        }


def share_discrepancies(
    primary: Mapping[ClusterKey, Decimal],
    secondary: Mapping[ClusterKey, Decimal],
    tolerance: Decimal = Decimal("0"),
) -> List[ShareDiscrepancy]:
    """List clusters whose printed shares differ between two inputs.

    Neither side is corrected; both values are reported.

    Example:
        >>> key = ClusterKey("enbw", "alpitronic")
        >>> [d.delta_pp for d in share_discrepancies({key: Decimal("96.1")}, {key: Decimal("95.9")})]
        [Decimal('0.2')]
    """

    found = [
        ShareDiscrepancy(key=key, primary_pct=primary[key], secondary_pct=secondary[key])
        for key in sorted(set(primary) & set(secondary))
        if abs(primary[key] - secondary[key]) > tolerance
    ]
    for item in found:
        logger.info(
            "share discrepancy for %s: %s vs %s", item.key.label, item.primary_pct, item.secondary_pct
        )
    return found
