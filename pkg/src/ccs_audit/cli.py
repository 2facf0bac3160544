from __future__ import annotations

import argparse
import datetime as dt
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Any, Callable, Dict, Optional, Sequence

from ccs_audit.artifacts import (
    KIND_ANALYSIS_SET,
    KIND_CLUSTERS,
    KIND_CONFORMANCE,
    KIND_FINDINGS,
    KIND_PLAN,
    KIND_SIM_SESSIONS,
    KIND_SUMMARY,
    read_artifact,
    write_artifact,
    write_run_meta,
)
from ccs_audit.config_store import RunConfig, resolve_path
from ccs_audit.constants import (
    CONFLICT_BLOCK,
    CONFLICT_MAJORITY,
    MODE_DESK,
    MODE_LIVE,
    TRANSPORT_INPROC,
    TRANSPORT_UDP,
)
from ccs_audit.dataset import (
    REGISTRY_FORMATS,
    SCOPE_CPO,
    SCOPE_MANUFACTURER,
    AnalysisSet,
    analysis_set_from_payload,
    analysis_set_to_payload,
    build_analysis_set,
    load_alias_map,
    normalize_labels,
    parse_registry,
    reattribute_mobility_networks,
)
from ccs_audit.errors import AuditError, InputError, ProbeRuntimeError
from ccs_audit.evse_sim import load_profile_fixtures
from ccs_audit.extrapolation import (
    FORMAT_MARKDOWN,
    REPORT_FORMATS,
    aggregate,
    extrapolate,
    load_summary,
    render_report,
    summary_to_payload,
)
from ccs_audit.market import (
    build_clusters,
    clusters_to_payload,
    cpo_shares,
    load_cluster_fixture,
    load_clusters,
    load_market_table,
    manufacturer_shares,
    plan_sample,
    plan_to_payload,
    share_discrepancies,
)
from ccs_audit.format_utils import format_percent
from ccs_audit.orchestrator import (
    LiveTarget,
    ProbeConfig,
    StationRun,
    check_conformance,
    desk_targets,
    findings_to_payload,
    identity_from_row,
    load_station_reports,
    run_fleet,
    run_station,
    validate_assumptions,
    write_station_report,
)
from ccs_audit.pki_fixtures import default_fixture_pki
from ccs_audit.tls_probe import TrustStore

logger = logging.getLogger(__name__)

COMMANDS = (
    "ingest",
    "cluster",
    "plan",
    "probe",
    "simulate",
    "validate",
    "extrapolate",
    "report",
    "pki",
)
DEFAULT_PROFILES = "station_profiles.json"
DEFAULT_CLUSTER_FIXTURE = "survey_clusters.json"
DEFAULT_CPO_ALIASES = "cpo_aliases.csv"
DEFAULT_MFR_ALIASES = "manufacturer_aliases.csv"


def build_root_parser() -> argparse.ArgumentParser:
    """Build root parser for `ccsaudit` with discoverable subcommands.

    Returns:
        Parser describing available commands.

    Example:
        >>> build_root_parser().prog
        'ccsaudit'
    """

    parser = argparse.ArgumentParser(
        prog="ccsaudit",
        description=(
            "CCS charging-station survey pipeline: "
            "ingest -> cluster -> plan -> probe/simulate -> extrapolate -> report."
        ),
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
    )
    parser.add_argument("command", choices=COMMANDS, help="Subcommand to run.")
    return parser


def _parser(name: str, description: str) -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog=f"ccsaudit {name}",
        description=description,
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
    )
    parser.add_argument(
        "-v",
        "--verbose",
        action="count",
        default=0,
        help="Log progress to standard error (repeat for debug)",
    )
    parser.add_argument("--quiet", action="store_true", help="Only log warnings and errors")
    parser.add_argument(
        "--config",
        type=Path,
        default=None,
        help="Config file (defaults to ~/.ccsaudit/config.json)",
    )
    return parser


def build_ingest_parser() -> argparse.ArgumentParser:
    parser = _parser("ingest", "Parse registry files into a normalized analysis set.")
    parser.add_argument("paths", nargs="+", help="Registry files (CSV or JSON lines)")
    parser.add_argument("--format", choices=REGISTRY_FORMATS, default=None)
    parser.add_argument("--country", default=None, help="ISO country code to keep")
    parser.add_argument("--cpo-aliases", default=None, help="raw_label,canonical CSV for operators")
    parser.add_argument(
        "--mfr-aliases", default=None, help="raw_label,canonical CSV for manufacturers"
    )
    parser.add_argument(
        "--reattribute-mo",
        action="store_true",
        default=None,
        help="Move mobility-operator networks out of the CPO column",
    )
    parser.add_argument(
        "--current-year", type=int, default=None, help="Upper bound for install years"
    )
    parser.add_argument("-o", "--output", type=Path, default=None, help="Analysis set JSON")
    return parser


def build_cluster_parser() -> argparse.ArgumentParser:
    parser = _parser("cluster", "Group an analysis set into (CPO, manufacturer) clusters.")
    parser.add_argument("analysis", type=Path, help="Analysis set JSON from `ingest`")
    parser.add_argument("-o", "--output", type=Path, default=None, help="Clusters JSON")
    return parser


def build_plan_parser() -> argparse.ArgumentParser:
    parser = _parser("plan", "Pick the clusters to field-test under a budget.")
    parser.add_argument("clusters", type=Path, help="Clusters JSON from `cluster`")
    parser.add_argument(
        "--analysis",
        type=Path,
        default=None,
        help="Analysis set JSON to pick representative stations from",
    )
    parser.add_argument("--budget", type=int, default=None)
    parser.add_argument("--stations-per-cluster", type=int, default=None)
    parser.add_argument("-o", "--output", type=Path, default=None, help="Plan JSON")
    return parser


def build_probe_parser() -> argparse.ArgumentParser:
    parser = _parser("probe", "Run the four negotiation scenarios against stations.")
    parser.add_argument("--mode", choices=(MODE_DESK, MODE_LIVE), default=None)
    parser.add_argument(
        "--profile",
        default=None,
        help=f"Desk mode: simulator profile fixtures (bundled {DEFAULT_PROFILES})",
    )
    parser.add_argument(
        "--only", action="append", default=None, help="Desk mode: profile name to probe"
    )
    parser.add_argument("--transport", choices=(TRANSPORT_INPROC, TRANSPORT_UDP), default=None)
    parser.add_argument("--workers", type=int, default=4, help="Concurrent desk stations")
    parser.add_argument(
        "--trust-store",
        default=None,
        help="Directory of V2G root certificates (desk default: fixture PKI root)",
    )
    parser.add_argument("--interface", default=None, help="Live mode: modem network interface")
    parser.add_argument("--station-id", default=None, help="Live mode: station id")
    parser.add_argument("--cpo", default=None, help="Live mode: station operator")
    parser.add_argument("--manufacturer", default=None, help="Live mode: station manufacturer")
    parser.add_argument("--model", default=None, help="Live mode: station model")
    parser.add_argument("--year", type=int, default=None, help="Live mode: install year")
    parser.add_argument(
        "--i-am-authorized",
        action="store_true",
        help="Confirm you are permitted to test the station in live mode",
    )
    parser.add_argument(
        "--capture-dir", type=Path, default=None, help="Write transcripts, pcaps and chains here"
    )
    parser.add_argument(
        "-o", "--output", type=Path, default=None, help="Station report directory"
    )
    return parser


def build_simulate_parser() -> argparse.ArgumentParser:
    parser = _parser("simulate", "Closed-loop conformance run of every simulator profile.")
    parser.add_argument("--profile", default=None, help=f"Profile fixtures (bundled {DEFAULT_PROFILES})")
    parser.add_argument("--transport", choices=(TRANSPORT_INPROC, TRANSPORT_UDP), default=None)
    parser.add_argument("--workers", type=int, default=4)
    parser.add_argument("--capture-dir", type=Path, default=None)
    parser.add_argument("-o", "--output", type=Path, default=None, help="Output directory")
    return parser


def build_validate_parser() -> argparse.ArgumentParser:
    parser = _parser("validate", "Check station reports for homogeneity assumptions.")
    parser.add_argument("reports", type=Path, help="Station report directory")
    parser.add_argument("-o", "--output", type=Path, default=None, help="Findings JSON")
    return parser


def build_extrapolate_parser() -> argparse.ArgumentParser:
    parser = _parser("extrapolate", "Extrapolate station verdicts to clusters and aggregate.")
    parser.add_argument("reports", type=Path, help="Station report directory")
    parser.add_argument(
        "--clusters",
        default=None,
        help=f"Clusters JSON (bundled {DEFAULT_CLUSTER_FIXTURE})",
    )
    parser.add_argument(
        "--market",
        default=None,
        help="Market table JSON whose printed manufacturer shares are compared",
    )
    parser.add_argument(
        "--no-reference",
        action="store_true",
        help="Skip comparison against printed summary figures in the clusters file",
    )
    parser.add_argument(
        "--conflict-policy", choices=(CONFLICT_BLOCK, CONFLICT_MAJORITY), default=None
    )
    parser.add_argument(
        "--output",
        dest="render",
        choices=REPORT_FORMATS,
        default=FORMAT_MARKDOWN,
        help="Rendering printed to stdout",
    )
    parser.add_argument("-o", "--summary", type=Path, default=None, help="Summary JSON")
    return parser


def build_report_parser() -> argparse.ArgumentParser:
    parser = _parser("report", "Render a national summary.")
    parser.add_argument("summary", type=Path, help="Summary JSON from `extrapolate`")
    parser.add_argument("--output", dest="render", choices=REPORT_FORMATS, default=FORMAT_MARKDOWN)
    parser.add_argument("-o", "--file", type=Path, default=None, help="Write here instead of stdout")
    return parser


def build_pki_parser() -> argparse.ArgumentParser:
    parser = _parser("pki", "Write the fixture V2G test PKI.")
    parser.add_argument("out_dir", type=Path, help="Destination directory")
    parser.add_argument("--expired-leaf", action="store_true", help="Leaf expired at the anchor")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Run the `ccsaudit` command router and return a process exit code.

    Args:
        argv: Optional argv list without program name.

    Returns:
        0 on success, 2 on input errors, 3 on artifact format mismatch, 4 on
        runtime or network failure.

    Example:
        >>> main(argv=["--help"])  # doctest: +SKIP
        0
    """

    raw_args = list(argv) if argv is not None else sys.argv[1:]
    if not raw_args or raw_args[0] in ("-h", "--help"):
        build_root_parser().print_help()
        return 0 if raw_args else 2
    command = raw_args[0]
    handler = _HANDLERS.get(command)
    if handler is None:
        build_root_parser().print_usage(sys.stderr)
        print(f"ccsaudit: unknown command: {command}", file=sys.stderr)
        return 2
    try:
        return handler(raw_args[1:])
    except AuditError as exc:
        print(f"ccsaudit {command}: {exc.message}", file=sys.stderr)
        return exc.exit_code


def _configure_logging(args: argparse.Namespace) -> None:
    if args.quiet:
        level = logging.WARNING
    elif args.verbose >= 2:
        level = logging.DEBUG
    elif args.verbose == 1:
        level = logging.INFO
    else:
        level = logging.WARNING
    logging.basicConfig(
        level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr, force=True
    )


def _load_config(args: argparse.Namespace) -> RunConfig:
    _configure_logging(args)
    return RunConfig.load(path=args.config)


def _now() -> dt.datetime:
    return dt.datetime.now(dt.timezone.utc)


def _emit(payload: Dict[str, Any]) -> None:
    """Write one JSON payload to stdout."""

    json.dump(payload, sys.stdout, indent=2, sort_keys=True, ensure_ascii=False)
    sys.stdout.write("\n")


def _finish(output_dir: Path, command: str, started_at: dt.datetime, **extra: Any) -> None:
    write_run_meta(
        output_dir=output_dir,
        command=command,
        started_at=started_at,
        finished_at=_now(),
        extra=extra or None,
    )


def _load_analysis(path: Path) -> AnalysisSet:
    return analysis_set_from_payload(read_artifact(path=path, kind=KIND_ANALYSIS_SET), source=str(path))


def _run_ingest(argv: Sequence[str]) -> int:
    args = build_ingest_parser().parse_args(args=list(argv))
    started = _now()
    config = (
        _load_config(args)
        .with_overrides(
            registry_paths=list(args.paths),
            registry_format=args.format,
            country=None if args.country is None else args.country.upper(),
            cpo_alias_path=args.cpo_aliases,
            mfr_alias_path=args.mfr_aliases,
            reattribute_mo_networks=args.reattribute_mo,
        )
        .validate(require=("registry_paths",))
    )
    records = []
    rejected = 0
    for item in config.registry_paths:
        parsed = parse_registry(
            source=Path(item).read_bytes(),
            format=config.registry_format,
            current_year=args.current_year,
        )
        for reject in parsed.rejects:
            logger.info("%s row %d rejected: %s", item, reject.row, reject.reason)
        rejected += len(parsed.rejects)
        records.extend(parsed.records)
    cpo_aliases = load_alias_map(
        source=resolve_path(config.cpo_alias_path or DEFAULT_CPO_ALIASES).read_bytes(),
        scope=SCOPE_CPO,
    )
    mfr_aliases = load_alias_map(
        source=resolve_path(config.mfr_alias_path or DEFAULT_MFR_ALIASES).read_bytes(),
        scope=SCOPE_MANUFACTURER,
    )
    records = normalize_labels(records=records, cpo_aliases=cpo_aliases, mfr_aliases=mfr_aliases)
    if config.reattribute_mo_networks:
        records = reattribute_mobility_networks(records=records)
    analysis = build_analysis_set(records=records, country=config.country)
    output = args.output or Path(config.output_dir) / "analysis_set.json"
    write_artifact(path=output, kind=KIND_ANALYSIS_SET, payload=analysis_set_to_payload(analysis))
    stats = analysis.statistics()
    print(
        f"retained {stats['retained']} record(s) ({stats['retained_points']} points); "
        f"dropped {stats['dropped_no_manufacturer']} without manufacturer "
        f"({stats['drop_rate_no_manufacturer_pct']}%), "
        f"{stats['dropped_wrong_country']} other country, {stats['dropped_non_ccs']} non-CCS; "
        f"{rejected} malformed row(s)",
        file=sys.stderr,
    )
    _finish(output.parent, "ingest", started)
    _emit({"output": str(output), "statistics": stats, "rejected_rows": rejected})
    return 0


def _run_cluster(argv: Sequence[str]) -> int:
    args = build_cluster_parser().parse_args(args=list(argv))
    started = _now()
    config = _load_config(args)
    analysis = _load_analysis(args.analysis)
    clusters = build_clusters(analysis)
    payload = clusters_to_payload(clusters)
    payload["cpo_shares_pct"] = {
        cpo: format_percent(share) for cpo, share in sorted(cpo_shares(analysis).items())
    }
    payload["manufacturer_shares_pct"] = {
        name: format_percent(share) for name, share in sorted(manufacturer_shares(analysis).items())
    }
    output = args.output or Path(config.output_dir) / "clusters.json"
    write_artifact(path=output, kind=KIND_CLUSTERS, payload=payload)
    _finish(output.parent, "cluster", started)
    _emit(
        {
            "output": str(output),
            "clusters": len(clusters),
            "total_points": payload["total_points"],
            "largest": [stats.key.label for stats in clusters[:5]],
        }
    )
    return 0


def _run_plan(argv: Sequence[str]) -> int:
    args = build_plan_parser().parse_args(args=list(argv))
    started = _now()
    config = (
        _load_config(args)
        .with_overrides(budget=args.budget, stations_per_cluster=args.stations_per_cluster)
        .validate()
    )
    clusters = load_clusters(args.clusters)
    records = _load_analysis(args.analysis).records if args.analysis is not None else ()
    plan = plan_sample(
        clusters=clusters,
        budget=config.budget,
        stations_per_cluster=config.stations_per_cluster,
        records=records,
    )
    payload = plan_to_payload(plan)
    output = args.output or Path(config.output_dir) / "plan.json"
    write_artifact(path=output, kind=KIND_PLAN, payload=payload)
    _finish(output.parent, "plan", started)
    _emit(
        {
            "output": str(output),
            "selected": [item.key.label for item in plan.selected],
            "planned_coverage_pct": payload["planned_coverage_pct"],
        }
    )
    return 0


def _trust_store(config: RunConfig, mode: str) -> TrustStore:
    if config.trust_store:
        return TrustStore.from_directory(resolve_path(config.trust_store))
    if mode == MODE_LIVE:
        raise InputError("live mode needs --trust-store with the V2G root certificates")
    return default_fixture_pki().trust_store()


def _station_summary(run: StationRun) -> Dict[str, Any]:
    report = run.report
    return {
        "id": report.station.source_id,
        "conclusive": report.is_conclusive,
        "supports_tls": report.derived.supports_tls,
        "supports_iso2": report.derived.supports_iso2,
        "supports_din": report.derived.supports_din,
        "preferred_protocol": report.derived.preferred_protocol,
    }


def _run_probe(argv: Sequence[str]) -> int:
    args = build_probe_parser().parse_args(args=list(argv))
    started = _now()
    config = (
        _load_config(args)
        .with_overrides(
            mode=args.mode,
            profile_path=args.profile,
            transport=args.transport,
            trust_store=args.trust_store,
            interface=args.interface,
        )
        .validate()
    )
    if args.workers < 1:
        raise InputError("--workers must be >= 1")
    out_dir = args.output or Path(config.output_dir) / "reports"
    live_target: Optional[LiveTarget] = None
    if config.mode == MODE_LIVE:
        if not args.i_am_authorized:
            raise InputError(
                "live mode drives a real station; pass --i-am-authorized to confirm permission"
            )
        if not config.interface:
            raise InputError("live mode needs --interface")
        live_target = LiveTarget(
            interface=config.interface,
            identity=identity_from_row(
                {
                    "id": args.station_id,
                    "cpo": args.cpo,
                    "manufacturer": args.manufacturer,
                    "model": args.model,
                    "year": args.year,
                }
            ),
        )
    trust = _trust_store(config=config, mode=config.mode)
    if args.capture_dir is not None:
        args.capture_dir.mkdir(parents=True, exist_ok=True)
    probe_config = ProbeConfig.from_run_config(
        config=config, trust=trust, capture_dir=args.capture_dir
    )
    if live_target is not None:
        try:
            runs = [run_station(target=live_target, config=probe_config)]
        except OSError as exc:
            raise ProbeRuntimeError(f"cannot open {config.interface}: {exc}") from exc
    else:
        profiles = load_profile_fixtures(resolve_path(config.profile_path or DEFAULT_PROFILES))
        if args.only:
            wanted = set(args.only)
            unknown = wanted - {profile.name for profile in profiles}
            if unknown:
                raise InputError(f"unknown profile(s): {', '.join(sorted(unknown))}")
            profiles = [profile for profile in profiles if profile.name in wanted]
        targets = desk_targets(profiles=profiles, transport=config.transport)
        runs = run_fleet(targets=targets, config=probe_config, workers=args.workers)
    for run in runs:
        write_station_report(report=run.report, out_dir=out_dir)
    _finish(out_dir, "probe", started, mode=config.mode, stations=len(runs))
    _emit({"output": str(out_dir), "stations": [_station_summary(run) for run in runs]})
    return 0


def _run_simulate(argv: Sequence[str]) -> int:
    args = build_simulate_parser().parse_args(args=list(argv))
    started = _now()
    config = (
        _load_config(args)
        .with_overrides(profile_path=args.profile, transport=args.transport)
        .validate()
    )
    if args.workers < 1:
        raise InputError("--workers must be >= 1")
    profiles = load_profile_fixtures(resolve_path(config.profile_path or DEFAULT_PROFILES))
    if args.capture_dir is not None:
        args.capture_dir.mkdir(parents=True, exist_ok=True)
    probe_config = ProbeConfig.from_run_config(
        config=config, trust=default_fixture_pki().trust_store(), capture_dir=args.capture_dir
    )
    targets = desk_targets(profiles=profiles, transport=config.transport, per_year=False)
    runs = run_fleet(targets=targets, config=probe_config, workers=args.workers)
    rows = [check_conformance(run=run, profile=profile) for run, profile in zip(runs, profiles)]
    out_dir = args.output or Path(config.output_dir) / "simulate"
    for run in runs:
        write_station_report(report=run.report, out_dir=out_dir / "reports")
    write_artifact(
        path=out_dir / "conformance.json",
        kind=KIND_CONFORMANCE,
        payload={
            "transport": config.transport,
            "rows": [row.to_dict() for row in rows],
            "matched": sum(1 for row in rows if row.matches),
            "total": len(rows),
        },
    )
    write_artifact(
        path=out_dir / "simulator_sessions.json",
        kind=KIND_SIM_SESSIONS,
        payload={
            "sessions": [
                log.to_dict() for run in runs for log in run.session_logs
            ]
        },
    )
    _finish(out_dir, "simulate", started, transport=config.transport)
    failing = [row.profile for row in rows if not row.matches or row.violations]
    _emit(
        {
            "output": str(out_dir),
            "matched": len(rows) - len(failing),
            "total": len(rows),
            "failing": failing,
        }
    )
    if failing:
        raise ProbeRuntimeError(f"{len(failing)} profile(s) did not conform: {', '.join(failing)}")
    return 0


def _run_validate(argv: Sequence[str]) -> int:
    args = build_validate_parser().parse_args(args=list(argv))
    started = _now()
    config = _load_config(args)
    findings = validate_assumptions(load_station_reports(args.reports))
    output = args.output or Path(config.output_dir) / "findings.json"
    write_artifact(path=output, kind=KIND_FINDINGS, payload=findings_to_payload(findings))
    _finish(output.parent, "validate", started)
    _emit(
        {
            "output": str(output),
            "findings": len(findings),
            "inconsistent": [
                {
                    "cluster": finding.cluster.label,
                    "dimension": finding.dimension,
                    "witnesses": [list(pair) for pair in finding.witnesses],
                }
                for finding in findings
                if not finding.consistent
            ],
        }
    )
    return 0


def _run_extrapolate(argv: Sequence[str]) -> int:
    args = build_extrapolate_parser().parse_args(args=list(argv))
    started = _now()
    config = _load_config(args).with_overrides(conflict_policy=args.conflict_policy).validate()
    fixture = load_cluster_fixture(resolve_path(args.clusters or DEFAULT_CLUSTER_FIXTURE))
    reports = load_station_reports(args.reports)
    results = extrapolate(
        clusters=fixture.clusters, reports=reports, conflict_policy=config.conflict_policy
    )
    reference = None if args.no_reference else fixture.reference_summary
    summary = aggregate(results=results, reference=reference)
    if args.market is not None:
        market = load_market_table(resolve_path(args.market))
        notes = share_discrepancies(primary=market.printed_shares(), secondary=fixture.printed_oem_pct)
        summary = replace(summary, share_notes=tuple(notes))
    output = args.summary or Path(config.output_dir) / "summary.json"
    write_artifact(path=output, kind=KIND_SUMMARY, payload=summary_to_payload(summary))
    _finish(output.parent, "extrapolate", started)
    sys.stdout.write(render_report(summary=summary, format=args.render).decode("utf-8"))
    return 0


def _run_report(argv: Sequence[str]) -> int:
    args = build_report_parser().parse_args(args=list(argv))
    _configure_logging(args)
    rendered = render_report(summary=load_summary(args.summary), format=args.render)
    if args.file is None:
        sys.stdout.write(rendered.decode("utf-8"))
        return 0
    args.file.parent.mkdir(parents=True, exist_ok=True)
    args.file.write_bytes(rendered)
    return 0


def _run_pki(argv: Sequence[str]) -> int:
    args = build_pki_parser().parse_args(args=list(argv))
    _configure_logging(args)
    pki = default_fixture_pki(leaf_expired=args.expired_leaf)
    pki.write(args.out_dir)
    _emit(
        {
            "trust_store": str(args.out_dir / "trust"),
            "chain": str(args.out_dir / "chain.pem"),
            "key": str(args.out_dir / "leaf.key"),
            "root": pki.root_name,
        }
    )
    return 0


_HANDLERS: Dict[str, Callable[[Sequence[str]], int]] = {
    "ingest": _run_ingest,
    "cluster": _run_cluster,
    "plan": _run_plan,
    "probe": _run_probe,
    "simulate": _run_simulate,
    "validate": _run_validate,
    "extrapolate": _run_extrapolate,
    "report": _run_report,
    "pki": _run_pki,
}
