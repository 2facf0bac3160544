"""Registry ingestion, label normalization and the analysis set.

Two registry shapes are accepted (CSV with a fixed header, or JSON lines with
the same field names), both loaded into a pandas frame and validated column by
column. Parsing never drops a row silently: every row ends up
either as a `RawStationRecord` or as a `RegistryReject` with its row number.
"""

from __future__ import annotations

import datetime as dt
import io
import json
import logging
from dataclasses import dataclass, replace
from decimal import Decimal, InvalidOperation
from fractions import Fraction
from typing import IO, Any, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import pandas as pd

from ccs_audit.constants import MOBILITY_NETWORK_LABELS
from ccs_audit.errors import InputError, SchemaError
from ccs_audit.format_utils import collapse_label, format_percent

logger = logging.getLogger(__name__)

FORMAT_CSV = "csv"
FORMAT_JSONL = "json-lines"
REGISTRY_FORMATS = (FORMAT_CSV, FORMAT_JSONL)

CONNECTOR_CCS = "CCS"
CONNECTOR_OTHER = "other"

SCOPE_CPO = "cpo"
SCOPE_MANUFACTURER = "manufacturer"

CSV_COLUMNS = (
    "source_id",
    "country",
    "lat",
    "lon",
    "cpo",
    "mo",
    "manufacturer",
    "model",
    "charge_points",
    "connector",
    "install_year",
    "max_power_kw",
)

EARLIEST_INSTALL_YEAR = 1990

ByteSource = Union[bytes, IO[bytes]]


@dataclass(frozen=True)
class RawStationRecord:
    """One registry row before normalization.

    Example:
        >>> RawStationRecord(source_id="a", country="DE", latitude=Decimal("48.1"),
        ...     longitude=Decimal("11.5"), cpo_label="EnBW").charge_point_count
        1
    """

    source_id: str
    country: str
    latitude: Decimal
    longitude: Decimal
    cpo_label: str
    mo_label: Optional[str] = None
    manufacturer_label: Optional[str] = None
    model_label: Optional[str] = None
    charge_point_count: int = 1
    connector_standard: str = CONNECTOR_CCS
    install_year: Optional[int] = None
    max_power_kw: Optional[Decimal] = None

    def __post_init__(self) -> None:
        assert self.charge_point_count >= 1, "charge_point_count must be >= 1"
        assert Decimal(-90) <= self.latitude <= Decimal(90), "latitude out of range"
        assert Decimal(-180) <= self.longitude <= Decimal(180), "longitude out of range"
        assert self.connector_standard in (CONNECTOR_CCS, CONNECTOR_OTHER)


@dataclass(frozen=True)
class StationRecord:
    """A retained charging station with canonical operator and manufacturer."""

    source_id: str
    country: str
    latitude: Decimal
    longitude: Decimal
    cpo: str
    manufacturer: str
    mo: Optional[str] = None
    model: Optional[str] = None
    charge_point_count: int = 1
    install_year: Optional[int] = None
    max_power_kw: Optional[Decimal] = None
    connector_standard: str = CONNECTOR_CCS

    def __post_init__(self) -> None:
        assert self.cpo and self.manufacturer, "cpo and manufacturer are mandatory"
        assert self.charge_point_count >= 1
        assert self.connector_standard == CONNECTOR_CCS


@dataclass(frozen=True)
class RegistryReject:
    row: int
    reason: str


@dataclass(frozen=True)
class ParsedRegistry:
    records: Tuple[RawStationRecord, ...]
    rejects: Tuple[RegistryReject, ...]

    @property
    def row_count(self) -> int:
        return len(self.records) + len(self.rejects)


_RAGGED_MARK = "\x00ragged"


def _mark_ragged(fields: List[str]) -> List[str]:
    # Keeps the row in place so its number survives; validation rejects it.
    return [_RAGGED_MARK]


def _decimal_cell(text: str) -> Optional[Decimal]:
    if not text:
        return None
    try:
        return Decimal(text)
    except InvalidOperation:
        return Decimal("NaN")


def _not_finite(value: Optional[Decimal]) -> bool:
    return value is not None and not value.is_finite()


def _finite_magnitude(value: Optional[Decimal]) -> Decimal:
    return abs(value) if value is not None and value.is_finite() else Decimal(0)


def _negative(value: Optional[Decimal]) -> bool:
    return value is not None and value.is_finite() and value < 0


def _integer_column(column: pd.Series) -> pd.Series:
    digits = column.where(column.str.fullmatch(r"[+-]?\d{1,9}").fillna(False).astype(bool))
    return pd.to_numeric(digits, errors="coerce").astype("Int64")


def _flag(mask: pd.Series) -> pd.Series:
    return mask.fillna(False).astype(bool)


def _json_cell(value: Any) -> str:
    return "" if value is None else str(value)


def _read_text(source: ByteSource) -> str:
    try:
        data = source if isinstance(source, (bytes, bytearray)) else source.read()
    except OSError as exc:
        raise InputError(f"cannot read registry stream: {exc}") from exc
    try:
        return bytes(data).decode("utf-8-sig")
    except UnicodeDecodeError as exc:
        raise InputError(f"registry is not valid UTF-8 (byte {exc.start})") from exc


def _data_index(length: int) -> pd.RangeIndex:
    return pd.RangeIndex(start=1, stop=length + 1)


def _csv_frame(text: str) -> Tuple[pd.DataFrame, pd.Series]:
    try:
        table = pd.read_csv(
            io.StringIO(text),
            header=None,
            dtype=object,
            keep_default_na=False,
            engine="python",
            on_bad_lines=_mark_ragged,
        )
    except pd.errors.EmptyDataError:
        table = pd.DataFrame()
    except pd.errors.ParserError as exc:
        raise InputError(f"registry is not well-formed CSV: {exc}") from exc
    header = [str(name).strip() for name in table.iloc[0]] if len(table) else []
    for column in CSV_COLUMNS:
        if column not in header:
            raise SchemaError(f"registry header is missing column {column!r}", field=column)
    frame = table.iloc[1:].copy()
    frame.columns = header
    frame = frame.loc[:, ~frame.columns.duplicated()]
    frame.index = _data_index(len(frame))
    ragged = frame.iloc[:, 0].eq(_RAGGED_MARK)
    problems = pd.Series("", index=frame.index, dtype=object)
    problems[ragged] = f"row has more fields than the {len(header)}-column header"
    return frame, problems


def _jsonl_frame(text: str) -> Tuple[pd.DataFrame, pd.Series]:
    blank = {name: "" for name in CSV_COLUMNS}
    rows: List[Dict[str, str]] = []
    problems: List[str] = []
    for line in text.splitlines():
        if not line.strip():
            continue
        try:
            value = json.loads(line)
        except json.JSONDecodeError as exc:
            rows.append(blank)
            problems.append(f"invalid JSON: {exc.msg}")
            continue
        if not isinstance(value, dict):
            rows.append(blank)
            problems.append("line is not a JSON object")
            continue
        rows.append({name: _json_cell(value.get(name)) for name in CSV_COLUMNS})
        problems.append("")
    index = _data_index(len(rows))
    frame = pd.DataFrame(rows, index=index, columns=list(CSV_COLUMNS))
    return frame, pd.Series(problems, index=index, dtype=object)


def _validate_frame(
    frame: pd.DataFrame,
    problems: pd.Series,
    current_year: int,
) -> Tuple[List[RawStationRecord], List[RegistryReject]]:
    """Check every row column-wise; each row keeps the first failing reason."""

    text = frame.reindex(columns=list(CSV_COLUMNS))
    text = pd.DataFrame(
        {name: text[name].fillna("").astype(str).str.strip() for name in CSV_COLUMNS},
        index=frame.index,
    )
    reasons = problems.copy()

    def reject(mask: pd.Series, reason: Union[str, pd.Series]) -> None:
        pending = mask & reasons.eq("")
        if pending.any():
            reasons[pending] = reason if isinstance(reason, str) else reason[pending]

    country = text["country"].str.upper()
    decimals = {
        name: pd.Series([_decimal_cell(cell) for cell in text[name]], index=text.index, dtype=object)
        for name in ("lat", "lon", "max_power_kw")
    }
    count = _integer_column(text["charge_points"])
    year = _integer_column(text["install_year"])

    for name in ("source_id", "country"):
        reject(text[name].eq(""), f"{name} is required")
    reject(
        ~_flag(country.str.fullmatch(r"[A-Z]{2}")),
        "country is not an ISO 3166 alpha-2 code: " + country.map(repr),
    )
    for name in ("lat", "lon"):
        reject(text[name].eq(""), f"{name} is required")
        reject(_flag(decimals[name].map(_not_finite)), f"{name} is not a finite number: " + text[name].map(repr))
    for name, limit in (("lat", 90), ("lon", 180)):
        reject(_flag(decimals[name].map(_finite_magnitude).gt(limit)), f"{name} out of range: " + text[name])
    points = text["charge_points"]
    reject(points.eq(""), "charge_points is required")
    reject(count.isna().astype(bool), "charge_points is not an integer: " + points.map(repr))
    reject(_flag(count.lt(1)), "charge_points must be >= 1, got " + points)
    reject(text["connector"].eq(""), "connector is required")
    years = text["install_year"]
    reject(years.ne("") & year.isna().astype(bool), "install_year is not an integer: " + years.map(repr))
    reject(
        _flag(year.lt(EARLIEST_INSTALL_YEAR) | year.gt(current_year + 1)),
        "install_year " + years + f" outside [{EARLIEST_INSTALL_YEAR}, {current_year + 1}]",
    )
    power = text["max_power_kw"]
    reject(_flag(decimals["max_power_kw"].map(_not_finite)), "max_power_kw is not a finite number: " + power.map(repr))
    reject(_flag(decimals["max_power_kw"].map(_negative)), "max_power_kw must be non-negative, got " + power)
    reject(text["cpo"].eq(""), "cpo is required")

    accepted = reasons.eq("")
    kept = pd.DataFrame(
        {
            "source_id": text["source_id"],
            "country": country,
            "lat": decimals["lat"],
            "lon": decimals["lon"],
            "cpo": text["cpo"],
            "mo": text["mo"],
            "manufacturer": text["manufacturer"],
            "model": text["model"],
            "points": count,
            "connector": text["connector"].str.upper(),
            "year": year,
            "power": decimals["max_power_kw"],
        },
        index=text.index,
    )[accepted]
    records = [
        RawStationRecord(
            source_id=row.source_id,
            country=row.country,
            latitude=row.lat,
            longitude=row.lon,
            cpo_label=row.cpo,
            mo_label=row.mo or None,
            manufacturer_label=row.manufacturer or None,
            model_label=row.model or None,
            charge_point_count=int(row.points),
            connector_standard=CONNECTOR_CCS if row.connector == CONNECTOR_CCS else CONNECTOR_OTHER,
            install_year=None if pd.isna(row.year) else int(row.year),
            max_power_kw=None if row.power is None or pd.isna(row.power) else row.power,
        )
        for row in kept.itertuples(index=False)
    ]
    rejects = [
        RegistryReject(row=int(row_number), reason=str(reason))
        for row_number, reason in reasons[~accepted].items()
    ]
    return records, rejects


def parse_registry(
    source: ByteSource,
    format: str = FORMAT_CSV,
    current_year: Optional[int] = None,
) -> ParsedRegistry:
    """Parse one registry file.

    Args:
        source: Raw bytes or a binary stream.
        format: `csv` or `json-lines`.
        current_year: Upper bound anchor for install_year; defaults to today.

    Returns:
        Records for well-formed rows and rejects (row number, reason) for the
        rest. Row numbers count data rows from 1.

    Example:
        >>> header = ",".join(CSV_COLUMNS).encode() + b"\\n"
        >>> parse_registry(header).row_count
        0
    """

    if format not in REGISTRY_FORMATS:
        raise InputError(f"unknown registry format {format!r}; expected one of {REGISTRY_FORMATS}")
    year = current_year if current_year is not None else dt.date.today().year
    text = _read_text(source)
    frame, problems = _csv_frame(text) if format == FORMAT_CSV else _jsonl_frame(text)
    records, rejects = _validate_frame(frame, problems, current_year=year)
    if rejects:
        logger.warning("registry: %d row(s) rejected", len(rejects))
    logger.info("registry: parsed %d record(s)", len(records))
    return ParsedRegistry(records=tuple(records), rejects=tuple(rejects))


@dataclass(frozen=True)
class AliasMap:
    """Raw label -> canonical identifier for one scope.

    Keys are stored collapsed (lowercase, trimmed, single spaces). Labels
    without an entry fall through to their collapsed form.

    Example:
        >>> aliases = AliasMap.build(SCOPE_MANUFACTURER, [("Supercharger", "tesla")])
        >>> aliases.canonical("  SUPERCHARGER"), aliases.canonical("ABB")
        ('tesla', 'abb')
    """

    scope: str
    entries: Mapping[str, str]

    def __post_init__(self) -> None:
        assert self.scope in (SCOPE_CPO, SCOPE_MANUFACTURER), f"unknown scope {self.scope!r}"

    @classmethod
    def empty(cls, scope: str) -> "AliasMap":
        return cls(scope=scope, entries={})

    @classmethod
    def build(cls, scope: str, pairs: Iterable[Tuple[str, str]]) -> "AliasMap":
        direct: Dict[str, str] = {}
        for raw, canonical in pairs:
            key = collapse_label(raw)
            target = collapse_label(canonical)
            if not key:
                raise SchemaError(f"{scope} alias with empty raw label", field="raw_label")
            if not target:
                raise SchemaError(f"{scope} alias {raw!r} has an empty canonical label", field="canonical")
            direct[key] = target
        resolved: Dict[str, str] = {}
        for key in direct:
            seen = [key]
            target = direct[key]
            while target in direct and direct[target] != target:
                if target in seen:
                    raise SchemaError(
                        f"{scope} alias cycle: {' -> '.join(seen + [target])}", field="canonical"
                    )
                seen.append(target)
                target = direct[target]
            resolved[key] = target
        return cls(scope=scope, entries=resolved)

    def canonical(self, label: Optional[str]) -> str:
        key = collapse_label(label)
        return self.entries.get(key, key)


def load_alias_map(source: ByteSource, scope: str) -> AliasMap:
    """Read a two-column `raw_label,canonical` CSV (header optional)."""

    text = _read_text(source)
    try:
        table = pd.read_csv(io.StringIO(text), header=None, dtype=object, keep_default_na=False, engine="python")
    except pd.errors.EmptyDataError:
        return AliasMap.empty(scope)
    except pd.errors.ParserError as exc:
        raise SchemaError(f"{scope} aliases are not well-formed CSV: {exc}", field="canonical") from exc
    cells = pd.DataFrame(
        {column: table[column].fillna("").astype(str).str.strip() for column in table.columns},
        index=table.index,
    )
    cells = cells[cells.ne("").any(axis=1)]
    if len(cells) and [value.lower() for value in cells.iloc[0, :2]] == ["raw_label", "canonical"]:
        cells = cells.iloc[1:]
    if len(cells) and cells.shape[1] < 2:
        raise SchemaError(f"{scope} alias rows need two columns", field="canonical")
    return AliasMap.build(scope=scope, pairs=cells.iloc[:, :2].itertuples(index=False, name=None))


def _optional_canonical(aliases: AliasMap, label: Optional[str]) -> Optional[str]:
    value = aliases.canonical(label)
    return value or None


def normalize_labels(
    records: Sequence[RawStationRecord],
    cpo_aliases: AliasMap,
    mfr_aliases: AliasMap,
) -> List[RawStationRecord]:
    """Replace operator, mobility-operator, manufacturer and model labels by canonical ids.

    Idempotent: every canonical value is a fixed point of its alias map.
    """

    if cpo_aliases.scope != SCOPE_CPO or mfr_aliases.scope != SCOPE_MANUFACTURER:
        raise InputError(
            f"alias scopes mismatch: got ({cpo_aliases.scope}, {mfr_aliases.scope}), "
            f"expected ({SCOPE_CPO}, {SCOPE_MANUFACTURER})"
        )
    return [
        replace(
            record,
            cpo_label=cpo_aliases.canonical(record.cpo_label),
            mo_label=_optional_canonical(cpo_aliases, record.mo_label),
            manufacturer_label=_optional_canonical(mfr_aliases, record.manufacturer_label),
            model_label=collapse_label(record.model_label) or None,
        )
        for record in records
    ]


def reattribute_mobility_networks(
    records: Sequence[RawStationRecord],
    labels: Sequence[str] = MOBILITY_NETWORK_LABELS,
) -> List[RawStationRecord]:
    """Move mobility-operator networks from the CPO slot to the MO slot.

    Applies only where the record names another operator in `mo_label`; the
    two labels are swapped so the physical operator becomes the CPO.
    """

    networks = {collapse_label(label) for label in labels}
    output: List[RawStationRecord] = []
    moved = 0
    for record in records:
        if (
            collapse_label(record.cpo_label) in networks
            and record.mo_label
            and collapse_label(record.mo_label) != collapse_label(record.cpo_label)
        ):
            output.append(replace(record, cpo_label=record.mo_label, mo_label=record.cpo_label))
            moved += 1
        else:
            output.append(record)
    logger.info("re-attributed %d mobility-network record(s)", moved)
    return output


@dataclass(frozen=True)
class AnalysisSet:
    """Retained records plus drop counters.

    `total_input` always equals the retained count plus every drop counter.
    """

    country: str
    records: Tuple[StationRecord, ...]
    dropped_no_manufacturer: int
    dropped_wrong_country: int
    dropped_non_ccs: int
    total_input: int

    def __post_init__(self) -> None:
        assert self.total_input == (
            len(self.records)
            + self.dropped_no_manufacturer
            + self.dropped_wrong_country
            + self.dropped_non_ccs
        ), "analysis set counters do not add up"

    @property
    def retained_points(self) -> int:
        return sum(record.charge_point_count for record in self.records)

    @property
    def drop_rate_no_manufacturer(self) -> Fraction:
        """Share of in-country CCS records lacking a manufacturer."""

        in_country = len(self.records) + self.dropped_no_manufacturer
        return Fraction(self.dropped_no_manufacturer, in_country) if in_country else Fraction(0)

    @property
    def country_ratio(self) -> Fraction:
        """In-country CCS records over all CCS records."""

        ccs = self.total_input - self.dropped_non_ccs
        in_country = len(self.records) + self.dropped_no_manufacturer
        return Fraction(in_country, ccs) if ccs else Fraction(0)

    def statistics(self) -> Dict[str, Any]:
        return {
            "country": self.country,
            "total_input": self.total_input,
            "retained": len(self.records),
            "retained_points": self.retained_points,
            "dropped_non_ccs": self.dropped_non_ccs,
            "dropped_wrong_country": self.dropped_wrong_country,
            "dropped_no_manufacturer": self.dropped_no_manufacturer,
            "drop_rate_no_manufacturer": str(self.drop_rate_no_manufacturer),
            "drop_rate_no_manufacturer_pct": format_percent(self.drop_rate_no_manufacturer, places=2),
            "country_ratio": str(self.country_ratio),
            "country_ratio_pct": format_percent(self.country_ratio, places=2),
        }


def build_analysis_set(records: Sequence[RawStationRecord], country: str) -> AnalysisSet:
    """Keep in-country CCS records with a manufacturer, sorted by source_id.

    Filters apply in order: connector, then country, then manufacturer, so
    each dropped record is counted exactly once.
    """

    wanted = country.strip().upper()
    frame = pd.DataFrame(
        {
            "connector": [record.connector_standard for record in records],
            "country": [record.country.upper() for record in records],
            "manufacturer": [collapse_label(record.manufacturer_label) for record in records],
        },
        dtype=object,
    )
    ccs = frame["connector"].eq(CONNECTOR_CCS)
    in_country = ccs & frame["country"].eq(wanted)
    retained = in_country & frame["manufacturer"].ne("")
    kept = sorted(
        (
            StationRecord(
                source_id=record.source_id,
                country=record.country.upper(),
                latitude=record.latitude,
                longitude=record.longitude,
                cpo=collapse_label(record.cpo_label),
                manufacturer=manufacturer,
                mo=collapse_label(record.mo_label) or None,
                model=collapse_label(record.model_label) or None,
                charge_point_count=record.charge_point_count,
                install_year=record.install_year,
                max_power_kw=record.max_power_kw,
            )
            for record, manufacturer, keep in zip(records, frame["manufacturer"], retained)
            if keep
        ),
        key=lambda item: item.source_id,
    )
    analysis = AnalysisSet(
        country=wanted,
        records=tuple(kept),
        dropped_no_manufacturer=int((in_country & ~retained).sum()),
        dropped_wrong_country=int((ccs & ~in_country).sum()),
        dropped_non_ccs=int((~ccs).sum()),
        total_input=len(records),
    )
    if not kept:
        logger.warning("analysis set for %s is empty", wanted)
    return analysis


def _record_to_dict(record: StationRecord) -> Dict[str, Any]:
    return {
        "source_id": record.source_id,
        "country": record.country,
        "lat": str(record.latitude),
        "lon": str(record.longitude),
        "cpo": record.cpo,
        "mo": record.mo,
        "manufacturer": record.manufacturer,
        "model": record.model,
        "charge_points": record.charge_point_count,
        "install_year": record.install_year,
        "max_power_kw": None if record.max_power_kw is None else str(record.max_power_kw),
    }


def _record_from_dict(data: Mapping[str, Any]) -> StationRecord:
    power = data.get("max_power_kw")
    return StationRecord(
        source_id=str(data["source_id"]),
        country=str(data["country"]),
        latitude=Decimal(str(data["lat"])),
        longitude=Decimal(str(data["lon"])),
        cpo=str(data["cpo"]),
        manufacturer=str(data["manufacturer"]),
        mo=data.get("mo"),
        model=data.get("model"),
        charge_point_count=int(data.get("charge_points", 1)),
        install_year=None if data.get("install_year") is None else int(data["install_year"]),
        max_power_kw=None if power is None else Decimal(str(power)),
    )


def analysis_set_to_payload(analysis: AnalysisSet) -> Dict[str, Any]:
    payload = analysis.statistics()
    payload["records"] = [_record_to_dict(record) for record in analysis.records]
    return payload


def analysis_set_from_payload(payload: Mapping[str, Any], source: str = "<memory>") -> AnalysisSet:
    try:
        records = tuple(_record_from_dict(item) for item in payload["records"])
        return AnalysisSet(
            country=str(payload["country"]),
            records=records,
            dropped_no_manufacturer=int(payload["dropped_no_manufacturer"]),
            dropped_wrong_country=int(payload["dropped_wrong_country"]),
            dropped_non_ccs=int(payload["dropped_non_ccs"]),
            total_input=int(payload["total_input"]),
        )
    except (KeyError, TypeError, ValueError, InvalidOperation, AssertionError) as exc:
        raise SchemaError(f"{source}: malformed analysis set ({exc})") from exc
