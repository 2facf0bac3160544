from __future__ import annotations

import csv
import io
import json
import unittest
from decimal import Decimal
from fractions import Fraction

from hypothesis import given, settings
from hypothesis import strategies as st

from ccs_audit.config_store import resolve_path  # noqa: E402
from ccs_audit.errors import InputError, SchemaError, UnknownClusterError  # noqa: E402
from ccs_audit.evse_sim import load_profile_fixtures  # noqa: E402
from ccs_audit.extrapolation import (  # noqa: E402
    FORMAT_CSV,
    FORMAT_JSON,
    FORMAT_MARKDOWN,
    aggregate,
    extrapolate,
    render_report,
    summary_from_payload,
    summary_to_payload,
)
from ccs_audit.format_utils import format_percent  # noqa: E402
from ccs_audit.market import ClusterKey, load_cluster_fixture, stats_from_counts  # noqa: E402
from registry_fixtures import key, synthetic_report  # noqa: E402


def _bundled_reports():
    """One report per bundled profile, carrying the flags the profile declares."""

    reports = []
    for profile in load_profile_fixtures(resolve_path("station_profiles.json")):
        flags = profile.expected_flags()
        reports.append(
            synthetic_report(
                profile.name,
                profile.cpo,
                profile.manufacturer,
                tls=flags["supports_tls"],
                iso2=flags["supports_iso2"],
                din=flags["supports_din"],
                preferred=flags["preferred_protocol"],
                model=profile.model,
                year=profile.install_year,
            )
        )
    return reports


def _bundled_summary():
    fixture = load_cluster_fixture(resolve_path("survey_clusters.json"))
    results = extrapolate(fixture.clusters, _bundled_reports())
    return aggregate(results, reference=fixture.reference_summary)


class TableReproductionTests(unittest.TestCase):
    def test_summary_rows(self) -> None:
        summary = _bundled_summary()
        self.assertEqual(summary.covered_share, Fraction(519, 1000))
        self.assertEqual(summary.tls_share_of_all, Fraction(142, 1000))
        self.assertEqual(summary.tls_share_of_covered, Fraction(142, 519))
        self.assertEqual(format_percent(summary.covered_share), "51.9")
        self.assertEqual(format_percent(summary.tls_share_of_all), "14.2")
        self.assertEqual(format_percent(summary.tls_share_of_covered), "27.4")

    def test_iso_share_is_recomputed_and_the_printed_value_noted(self) -> None:
        summary = _bundled_summary()
        self.assertEqual(summary.iso2_share_of_all, Fraction(505, 1000))
        self.assertEqual(format_percent(summary.iso2_share_of_covered), "97.3")
        notes = {note.metric: note for note in summary.notes}
        self.assertEqual(sorted(notes), ["iso2_share_of_all", "iso2_share_of_covered"])
        self.assertEqual(notes["iso2_share_of_covered"].printed, Decimal("93.8"))
        payload = summary_to_payload(summary)
        self.assertEqual(payload["metrics"]["iso2_share_of_covered"]["pct"], "97.3")
        self.assertEqual(payload["notes"][1]["printed_pct"], "93.8")

    def test_untested_clusters_stay_without_verdict(self) -> None:
        summary = _bundled_summary()
        by_key = {result.key: result for result in summary.results}
        self.assertIsNone(by_key[ClusterKey("tesla", "tesla")].verdict)
        self.assertEqual(by_key[ClusterKey("enbw", "alpitronic")].evidence_count, 4)
        self.assertEqual(summary.conflicts, ())

    def test_markdown_table(self) -> None:
        text = render_report(_bundled_summary(), FORMAT_MARKDOWN).decode("utf-8")
        lines = text.splitlines()
        self.assertTrue(lines[0].startswith("| CPO | CPO % | OEM |"))
        self.assertIn("| % Of All |  |  |  | 51.9 |  |  | 50.5 | 14.2 |", text)
        self.assertIn("| % Of Clusters |  |  |  |  |  |  | 97.3 | 27.4 |", text)
        self.assertIn("iso2_share_of_covered: computed 97.3%, printed 93.8%", text)
        enbw = [line for line in lines if line.startswith("| enbw |")]
        self.assertEqual(len(enbw), 1)
        self.assertIn("| HYC300 | 2019 |", text)

    def test_csv_and_json_renderings(self) -> None:
        summary = _bundled_summary()
        rows = list(csv.DictReader(io.StringIO(render_report(summary, FORMAT_CSV).decode("utf-8"))))
        metrics = {row["metric"]: row["value_pct"] for row in rows if row["row_type"] == "summary"}
        self.assertEqual(metrics["covered_share"], "51.9")
        self.assertEqual(len([row for row in rows if row["row_type"] == "cluster"]), len(summary.results))
        document = json.loads(render_report(summary, FORMAT_JSON))
        self.assertEqual(document["kind"], "national_summary")
        self.assertEqual(summary_from_payload(document), summary)
        with self.assertRaises(InputError):
            render_report(summary, "html")


class PolicyTests(unittest.TestCase):
    def setUp(self) -> None:
        self.clusters = stats_from_counts({key("enbw", "alpitronic"): 30, key("ewe", "alpitronic"): 10})
        self.reports = [
            synthetic_report("a", "enbw", "alpitronic", tls=False, iso2=True),
            synthetic_report("b", "enbw", "alpitronic", tls=False, iso2=True),
            synthetic_report("c", "enbw", "alpitronic", tls=True, iso2=True),
        ]

    def test_block_policy_withholds_a_verdict(self) -> None:
        results = extrapolate(self.clusters, self.reports, conflict_policy="block")
        self.assertIsNone(results[0].verdict)
        self.assertTrue(results[0].conflict)
        summary = aggregate(results)
        self.assertEqual(summary.covered_share, 0)
        self.assertEqual(summary.conflicts, (key("enbw", "alpitronic"),))

    def test_majority_policy_takes_the_common_verdict(self) -> None:
        results = extrapolate(self.clusters, self.reports, conflict_policy="majority")
        self.assertFalse(results[0].verdict.supports_tls)
        self.assertTrue(results[0].conflict)
        self.assertEqual(aggregate(results).covered_share, Fraction(3, 4))

    def test_majority_tie_still_withholds(self) -> None:
        results = extrapolate(self.clusters, self.reports[1:], conflict_policy="majority")
        self.assertIsNone(results[0].verdict)

    def test_inconclusive_reports_are_not_evidence(self) -> None:
        reports = [synthetic_report("x", "ewe", "alpitronic", tls=True, iso2=True, conclusive=False)]
        results = extrapolate(self.clusters, reports)
        self.assertEqual(results[1].evidence_count, 0)
        self.assertIsNone(results[1].verdict)

    def test_unknown_cluster_and_policy(self) -> None:
        with self.assertRaises(UnknownClusterError) as caught:
            extrapolate(self.clusters, [synthetic_report("z", "tesla", "tesla", tls=False, iso2=True)])
        self.assertEqual(caught.exception.cpo, "tesla")
        with self.assertRaises(InputError):
            extrapolate(self.clusters, self.reports, conflict_policy="vote")

    def test_empty_input(self) -> None:
        summary = aggregate(extrapolate([], []))
        self.assertEqual(summary.covered_share, 0)
        self.assertEqual(summary.tls_share_of_covered, 0)
        self.assertEqual(render_report(summary, FORMAT_MARKDOWN).decode("utf-8").count("\n"), 2)

    def test_malformed_payload_is_a_schema_error(self) -> None:
        with self.assertRaises(SchemaError):
            summary_from_payload({"metrics": {}, "clusters": []})


_FLAGS = st.tuples(st.booleans(), st.booleans(), st.booleans()).filter(lambda flags: flags[1] or flags[2])
_CLUSTER_SETS = st.lists(
    st.tuples(st.integers(min_value=0, max_value=5000), st.none() | _FLAGS),
    min_size=1,
    max_size=20,
).filter(lambda items: sum(count for count, _ in items) > 0)


class PointTallyTests(unittest.TestCase):
    @settings(max_examples=60, deadline=None)
    @given(_CLUSTER_SETS)
    def test_aggregate_equals_a_per_point_tally(self, items) -> None:
        counts = {key(f"cpo{index % 4}", f"mfr{index}"): count for index, (count, _) in enumerate(items)}
        flags_by_key = {key(f"cpo{index % 4}", f"mfr{index}"): flags for index, (_, flags) in enumerate(items)}
        reports = [
            synthetic_report(f"s{index}", item.cpo, item.manufacturer, tls=flags[0], iso2=flags[1], din=flags[2])
            for index, (item, flags) in enumerate(flags_by_key.items())
            if flags is not None
        ]
        summary = aggregate(extrapolate(stats_from_counts(counts), reports))

        points = []
        for cluster, count in counts.items():
            points.extend([flags_by_key[cluster]] * count)
        covered = [flags for flags in points if flags is not None]
        total = len(points)
        self.assertEqual(summary.covered_share, Fraction(len(covered), total))
        self.assertEqual(summary.tls_share_of_all, Fraction(sum(flags[0] for flags in covered), total))
        self.assertEqual(summary.iso2_share_of_all, Fraction(sum(flags[1] for flags in covered), total))
        self.assertEqual(summary.din_share_of_all, Fraction(sum(flags[2] for flags in covered), total))
        if covered:
            self.assertEqual(
                summary.tls_share_of_covered, Fraction(sum(flags[0] for flags in covered), len(covered))
            )
        else:
            self.assertEqual(summary.tls_share_of_covered, 0)


if __name__ == "__main__":
    unittest.main()
