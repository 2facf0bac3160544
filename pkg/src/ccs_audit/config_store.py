from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence

from ccs_audit.constants import (
    CONFIG_DIR,
    CONFIG_PATH,
    CONFLICT_BLOCK,
    CONFLICT_MAJORITY,
    DATA_DIR,
    DEFAULT_BUDGET,
    DEFAULT_CONFLICT_POLICY,
    DEFAULT_COUNTRY,
    DEFAULT_EV_PRIORITIES,
    DEFAULT_SCENARIO_RETRIES,
    DEFAULT_SDP_RETRIES,
    DEFAULT_SDP_TIMEOUT_S,
    DEFAULT_SLAC_STAGE_TIMEOUT_S,
    DEFAULT_SOUND_COUNT,
    DEFAULT_STATIONS_PER_CLUSTER,
    DEFAULT_TLS_DEADLINE_S,
    ENV_PREFIX,
    MODE_DESK,
    MODE_LIVE,
    TRANSPORT_INPROC,
    TRANSPORT_UDP,
)
from ccs_audit.errors import InputError

_PATH_FIELDS = (
    "cpo_alias_path",
    "mfr_alias_path",
    "trust_store",
    "profile_path",
)
_CHOICES = {
    "registry_format": ("csv", "json-lines"),
    "conflict_policy": (CONFLICT_BLOCK, CONFLICT_MAJORITY),
    "mode": (MODE_DESK, MODE_LIVE),
    "transport": (TRANSPORT_INPROC, TRANSPORT_UDP),
}


def resolve_path(text: str) -> Path:
    """Return `text` as a path, falling back to a bundled data file of that name.

    Example:
        >>> resolve_path("station_profiles.json").name
        'station_profiles.json'
    """

    candidate = Path(text).expanduser()
    if candidate.exists():
        return candidate
    bundled = DATA_DIR / text
    return bundled if bundled.exists() else candidate


def _read_positive_int(data: Mapping[str, Any], key: str, default: int) -> int:
    raw = data.get(key)
    if isinstance(raw, bool):
        return default
    if isinstance(raw, (int, float)) and raw > 0:
        return int(raw)
    if isinstance(raw, str) and raw.strip().isdigit() and int(raw) > 0:
        return int(raw)
    return default


def _read_non_negative_int(data: Mapping[str, Any], key: str, default: int) -> int:
    raw = data.get(key)
    if isinstance(raw, bool):
        return default
    if isinstance(raw, (int, float)) and raw >= 0:
        return int(raw)
    if isinstance(raw, str) and raw.strip().isdigit():
        return int(raw)
    return default


def _read_positive_float(data: Mapping[str, Any], key: str, default: float) -> float:
    raw = data.get(key)
    if isinstance(raw, bool):
        return default
    try:
        value = float(raw) if raw is not None else default
    except (TypeError, ValueError):
        return default
    return value if value > 0 else default


def _read_optional_str(data: Mapping[str, Any], key: str) -> Optional[str]:
    raw = data.get(key)
    return raw if isinstance(raw, str) and raw else None


def _read_choice(data: Mapping[str, Any], key: str, default: str) -> str:
    raw = data.get(key)
    return raw if isinstance(raw, str) and raw in _CHOICES[key] else default


def _read_bool(data: Mapping[str, Any], key: str, default: bool) -> bool:
    raw = data.get(key)
    if isinstance(raw, bool):
        return raw
    if isinstance(raw, str):
        lowered = raw.strip().lower()
        if lowered in ("1", "true", "yes", "on"):
            return True
        if lowered in ("0", "false", "no", "off"):
            return False
    return default


def _read_str_list(data: Mapping[str, Any], key: str) -> List[str]:
    raw = data.get(key)
    if isinstance(raw, str) and raw:
        return [part for part in raw.split(os.pathsep) if part]
    if isinstance(raw, list):
        return [item for item in raw if isinstance(item, str) and item]
    return []


def _read_priorities(data: Mapping[str, Any]) -> Dict[str, int]:
    priorities = dict(DEFAULT_EV_PRIORITIES)
    raw = data.get("ev_priorities")
    if isinstance(raw, str):
        try:
            raw = json.loads(raw)
        except json.JSONDecodeError:
            raw = None
    if isinstance(raw, dict):
        for protocol, value in raw.items():
            if protocol in priorities and isinstance(value, int) and 1 <= value <= 20:
                priorities[protocol] = value
    if len(set(priorities.values())) != len(priorities):
        return dict(DEFAULT_EV_PRIORITIES)
    return priorities


@dataclass
class RunConfig:
    """Pipeline settings shared by every subcommand.

    Values come from built-in defaults, then `~/.ccsaudit/config.json` (or an
    explicit file), then `CCSAUDIT_<FIELD>` environment variables, then CLI
    flags via `with_overrides`.

    Example:
        >>> RunConfig().budget
        20
    """

    registry_paths: List[str] = field(default_factory=list)
    registry_format: str = "csv"
    cpo_alias_path: Optional[str] = None
    mfr_alias_path: Optional[str] = None
    trust_store: Optional[str] = None
    profile_path: Optional[str] = None
    output_dir: str = "ccsaudit-out"
    country: str = DEFAULT_COUNTRY
    budget: int = DEFAULT_BUDGET
    stations_per_cluster: int = DEFAULT_STATIONS_PER_CLUSTER
    sound_count: int = DEFAULT_SOUND_COUNT
    slac_timeout_s: float = DEFAULT_SLAC_STAGE_TIMEOUT_S
    sdp_retries: int = DEFAULT_SDP_RETRIES
    sdp_timeout_s: float = DEFAULT_SDP_TIMEOUT_S
    tls_deadline_s: float = DEFAULT_TLS_DEADLINE_S
    scenario_retries: int = DEFAULT_SCENARIO_RETRIES
    conflict_policy: str = DEFAULT_CONFLICT_POLICY
    mode: str = MODE_DESK
    transport: str = TRANSPORT_INPROC
    interface: Optional[str] = None
    reattribute_mo_networks: bool = False
    ev_priorities: Dict[str, int] = field(
        default_factory=lambda: dict(DEFAULT_EV_PRIORITIES)
    )

    @classmethod
    def from_mapping(cls, data: Mapping[str, Any]) -> "RunConfig":
        defaults = cls()
        return cls(
            registry_paths=_read_str_list(data=data, key="registry_paths"),
            registry_format=_read_choice(
                data=data, key="registry_format", default=defaults.registry_format
            ),
            cpo_alias_path=_read_optional_str(data=data, key="cpo_alias_path"),
            mfr_alias_path=_read_optional_str(data=data, key="mfr_alias_path"),
            trust_store=_read_optional_str(data=data, key="trust_store"),
            profile_path=_read_optional_str(data=data, key="profile_path"),
            output_dir=_read_optional_str(data=data, key="output_dir")
            or defaults.output_dir,
            country=(_read_optional_str(data=data, key="country") or defaults.country).upper(),
            budget=_read_positive_int(data=data, key="budget", default=defaults.budget),
            stations_per_cluster=_read_positive_int(
                data=data,
                key="stations_per_cluster",
                default=defaults.stations_per_cluster,
            ),
            sound_count=_read_positive_int(
                data=data, key="sound_count", default=defaults.sound_count
            ),
            slac_timeout_s=_read_positive_float(
                data=data, key="slac_timeout_s", default=defaults.slac_timeout_s
            ),
            sdp_retries=_read_positive_int(
                data=data, key="sdp_retries", default=defaults.sdp_retries
            ),
            sdp_timeout_s=_read_positive_float(
                data=data, key="sdp_timeout_s", default=defaults.sdp_timeout_s
            ),
            tls_deadline_s=_read_positive_float(
                data=data, key="tls_deadline_s", default=defaults.tls_deadline_s
            ),
            scenario_retries=_read_non_negative_int(
                data=data, key="scenario_retries", default=defaults.scenario_retries
            ),
            conflict_policy=_read_choice(
                data=data, key="conflict_policy", default=defaults.conflict_policy
            ),
            mode=_read_choice(data=data, key="mode", default=defaults.mode),
            transport=_read_choice(data=data, key="transport", default=defaults.transport),
            interface=_read_optional_str(data=data, key="interface"),
            reattribute_mo_networks=_read_bool(
                data=data,
                key="reattribute_mo_networks",
                default=defaults.reattribute_mo_networks,
            ),
            ev_priorities=_read_priorities(data=data),
        )

    @classmethod
    def load(
        cls,
        path: Optional[Path] = None,
        environ: Optional[Mapping[str, str]] = None,
    ) -> "RunConfig":
        """Load config file (tolerantly) and apply environment overrides.

        Args:
            path: Config file; defaults to `~/.ccsaudit/config.json`.
            environ: Environment mapping; defaults to `os.environ`.

        Returns:
            Config with malformed values replaced by defaults.
        """

        data: Dict[str, Any] = {}
        config_path = path if path is not None else CONFIG_PATH
        try:
            if config_path.exists():
                with open(config_path, "r", encoding="utf-8") as handle:
                    loaded = json.load(handle)
                if isinstance(loaded, dict):
                    data.update(loaded)
        except Exception:
            pass
        env = os.environ if environ is None else environ
        for item in fields(cls):
            env_key = f"{ENV_PREFIX}{item.name.upper()}"
            if env_key in env:
                data[item.name] = env[env_key]
        return cls.from_mapping(data=data)

    def save(self, path: Optional[Path] = None) -> None:
        config_path = path if path is not None else CONFIG_PATH
        try:
            (config_path.parent if path is not None else CONFIG_DIR).mkdir(
                parents=True, exist_ok=True
            )
            with open(config_path, "w", encoding="utf-8") as handle:
                json.dump(asdict(self), handle, indent=2)
        except Exception:
            # Not fatal if saving fails.
            pass

    def with_overrides(self, **overrides: Any) -> "RunConfig":
        """Return a copy with every non-None override applied."""

        applied = {key: value for key, value in overrides.items() if value is not None}
        return replace(self, **applied)

    def validate(self, require: Sequence[str] = ()) -> "RunConfig":
        """Check bounds and that required referenced paths exist.

        Args:
            require: Field names whose paths must exist (`registry_paths`,
                `trust_store`, ...).

        Returns:
            Self, for chaining.

        Raises:
            InputError: naming the first violated bound or missing path.
        """

        if self.budget < 1:
            raise InputError(f"budget must be >= 1, got {self.budget}")
        if self.stations_per_cluster < 1:
            raise InputError(
                f"stations_per_cluster must be >= 1, got {self.stations_per_cluster}"
            )
        for name in ("slac_timeout_s", "sdp_timeout_s", "tls_deadline_s"):
            if getattr(self, name) <= 0:
                raise InputError(f"{name} must be positive")
        if self.sdp_retries < 1 or self.scenario_retries < 0:
            raise InputError("sdp_retries must be >= 1 and scenario_retries >= 0")
        for name, allowed in _CHOICES.items():
            if getattr(self, name) not in allowed:
                raise InputError(f"{name} must be one of {', '.join(allowed)}")
        for name in require:
            if name == "registry_paths":
                if not self.registry_paths:
                    raise InputError("no registry files given")
                for item in self.registry_paths:
                    if not Path(item).exists():
                        raise InputError(f"registry file not found: {item}")
                continue
            assert name in _PATH_FIELDS, f"not a path field: {name}"
            value = getattr(self, name)
            if value is None:
                raise InputError(f"{name} is required")
            if not resolve_path(value).exists():
                raise InputError(f"{name} not found: {value}")
        return self
