"""Versioned JSON artifacts passed between subcommands.

Every intermediate file carries `format_version` and `kind` so a stale or
foreign file fails loudly (exit 3) instead of being half-read. Payloads are
written key-sorted with no timestamps; wall-clock data goes to the
`run_meta.json` sidecar so reruns on identical inputs are byte-identical.
"""

from __future__ import annotations

import json
import logging
from datetime import datetime
from pathlib import Path
from typing import Any

from ccs_audit.constants import FORMAT_VERSION, RUN_META_FILENAME
from ccs_audit.errors import FormatVersionError, InputError

logger = logging.getLogger(__name__)

KIND_ANALYSIS_SET = "analysis_set"
KIND_CLUSTERS = "clusters"
KIND_PLAN = "sample_plan"
KIND_STATION_REPORT = "station_report"
KIND_SUMMARY = "national_summary"
KIND_FINDINGS = "consistency_findings"
KIND_PROFILES = "evse_profiles"
KIND_MARKET = "market_table"
KIND_CONFORMANCE = "conformance"
KIND_SIM_SESSIONS = "simulator_sessions"


def dumps_artifact(kind: str, payload: dict[str, Any]) -> str:
    document = {"format_version": FORMAT_VERSION, "kind": kind}
    document.update(payload)
    return json.dumps(document, indent=2, sort_keys=True, ensure_ascii=False) + "\n"


def write_artifact(path: Path, kind: str, payload: dict[str, Any]) -> Path:
    """Write one versioned artifact and return its path.

    Args:
        path: Destination file; parent directories are created.
        kind: Artifact kind tag checked again on read.
        payload: JSON-ready mapping (no `format_version`/`kind` keys).

    Returns:
        The written path.
    """

    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps_artifact(kind=kind, payload=payload), encoding="utf-8")
    logger.debug("wrote %s artifact to %s", kind, path)
    return path


def parse_artifact(text: str, kind: str, source: str = "<memory>") -> dict[str, Any]:
    try:
        document = json.loads(text)
    except json.JSONDecodeError as exc:
        raise InputError(f"{source}: not valid JSON ({exc.msg})") from exc
    if not isinstance(document, dict):
        raise InputError(f"{source}: expected a JSON object")
    version = document.get("format_version")
    if version != FORMAT_VERSION:
        raise FormatVersionError(
            f"{source}: format_version {version!r} does not match {FORMAT_VERSION}"
        )
    found_kind = document.get("kind")
    if found_kind != kind:
        raise InputError(f"{source}: expected kind {kind!r}, found {found_kind!r}")
    return document


def read_artifact(path: Path, kind: str) -> dict[str, Any]:
    """Read one versioned artifact, rejecting foreign or stale files."""

    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc.strerror or exc}") from exc
    return parse_artifact(text=text, kind=kind, source=str(path))


def write_run_meta(
    output_dir: Path,
    command: str,
    started_at: datetime,
    finished_at: datetime,
    extra: dict[str, Any] | None = None,
) -> Path:
    """Write the timestamp sidecar for one subcommand run."""

    path = output_dir / RUN_META_FILENAME
    payload: dict[str, Any] = {
        "command": command,
        "started_at": started_at.isoformat(),
        "finished_at": finished_at.isoformat(),
    }
    if extra:
        payload.update(extra)
    output_dir.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path
