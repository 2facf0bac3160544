from __future__ import annotations

import json
import tempfile
import unittest
from pathlib import Path
from unittest.mock import patch

import ccs_audit.config_store as config_store  # noqa: E402
from ccs_audit.errors import InputError  # noqa: E402


class ConfigStoreTests(unittest.TestCase):
    def test_probe_fields_round_trip(self) -> None:
        with tempfile.TemporaryDirectory() as tmpdir:
            self._with_temp_config(tmpdir)
            cfg = config_store.RunConfig(
                budget=19,
                sdp_retries=5,
                tls_deadline_s=2.5,
                conflict_policy="majority",
                ev_priorities={"ISO15118_20": 3, "ISO15118_2": 1, "DIN70121": 2},
            )
            cfg.save()
            loaded = config_store.RunConfig.load(environ={})
            self.assertEqual(loaded.budget, 19)
            self.assertEqual(loaded.sdp_retries, 5)
            self.assertEqual(loaded.tls_deadline_s, 2.5)
            self.assertEqual(loaded.conflict_policy, "majority")
            self.assertEqual(loaded.ev_priorities["ISO15118_2"], 1)

    def test_malformed_values_fall_back_to_defaults(self) -> None:
        with tempfile.TemporaryDirectory() as tmpdir:
            self._with_temp_config(tmpdir)
            payload = {
                "budget": -1,
                "sdp_timeout_s": "bad",
                "scenario_retries": True,
                "transport": "carrier-pigeon",
                "ev_priorities": {"DIN70121": 1, "ISO15118_2": 1},
            }
            config_store.CONFIG_DIR.mkdir(parents=True, exist_ok=True)
            config_store.CONFIG_PATH.write_text(json.dumps(payload), encoding="utf-8")
            loaded = config_store.RunConfig.load(environ={})
            defaults = config_store.RunConfig()
            self.assertEqual(loaded.budget, defaults.budget)
            self.assertEqual(loaded.sdp_timeout_s, defaults.sdp_timeout_s)
            self.assertEqual(loaded.scenario_retries, defaults.scenario_retries)
            self.assertEqual(loaded.transport, "inproc")
            self.assertEqual(loaded.ev_priorities, defaults.ev_priorities)

    def test_unreadable_file_is_ignored(self) -> None:
        with tempfile.TemporaryDirectory() as tmpdir:
            self._with_temp_config(tmpdir)
            config_store.CONFIG_PATH.write_text("{not json", encoding="utf-8")
            self.assertEqual(config_store.RunConfig.load(environ={}), config_store.RunConfig())

    def test_environment_overrides_file(self) -> None:
        with tempfile.TemporaryDirectory() as tmpdir:
            path = Path(tmpdir) / "config.json"
            path.write_text(json.dumps({"budget": 7, "country": "de"}), encoding="utf-8")
            loaded = config_store.RunConfig.load(
                path=path,
                environ={"CCSAUDIT_BUDGET": "12", "CCSAUDIT_REGISTRY_PATHS": "a.csv:b.csv"},
            )
            self.assertEqual(loaded.budget, 12)
            self.assertEqual(loaded.country, "DE")
            self.assertEqual(loaded.registry_paths, ["a.csv", "b.csv"])

    @patch.dict("os.environ", {"CCSAUDIT_TRANSPORT": "udp", "CCSAUDIT_SDP_RETRIES": "0"})
    def test_process_environment_is_read_by_default(self) -> None:
        with tempfile.TemporaryDirectory() as tmpdir:
            self._with_temp_config(tmpdir)
            loaded = config_store.RunConfig.load()
        self.assertEqual(loaded.transport, "udp")
        self.assertEqual(loaded.sdp_retries, config_store.RunConfig().sdp_retries)

    def test_overrides_skip_none_and_validate_bounds(self) -> None:
        cfg = config_store.RunConfig().with_overrides(budget=None, mode="live")
        self.assertEqual(cfg.budget, config_store.RunConfig().budget)
        self.assertEqual(cfg.mode, "live")
        with self.assertRaises(InputError):
            config_store.RunConfig(budget=0).validate()
        with self.assertRaises(InputError):
            config_store.RunConfig(registry_paths=["/nonexistent/registry.csv"]).validate(
                require=("registry_paths",)
            )
        with self.assertRaises(InputError):
            config_store.RunConfig().validate(require=("trust_store",))

    def test_resolve_path_prefers_existing_files(self) -> None:
        self.assertEqual(config_store.resolve_path("station_profiles.json").parent, config_store.DATA_DIR)
        with tempfile.TemporaryDirectory() as tmpdir:
            local = Path(tmpdir) / "station_profiles.json"
            local.write_text("[]", encoding="utf-8")
            self.assertEqual(config_store.resolve_path(str(local)), local)

    def _with_temp_config(self, tmpdir: str) -> None:
        path = Path(tmpdir)
        self.addCleanup(self._restore_paths)
        self._orig_dir = config_store.CONFIG_DIR
        self._orig_path = config_store.CONFIG_PATH
        config_store.CONFIG_DIR = path
        config_store.CONFIG_PATH = path / "config.json"

    def _restore_paths(self) -> None:
        config_store.CONFIG_DIR = self._orig_dir
        config_store.CONFIG_PATH = self._orig_path


if __name__ == "__main__":
    unittest.main()
