import io
import json
import os
import tempfile
import unittest
from pathlib import Path

import pandas as pd

from src.cli import (PROJECT_ROOT, REPORT_COLUMNS, SWEEP_COLUMNS, detect_nonmonotonicity, load_scenario,
                     load_thresholds, main, render_report, run_sweep)
from src.errors import ConfigError, PreconditionError
from src.keyrate import asymptotic_rate
from src.schema_models import NoiseThresholds, NonMonotonicityReport, ScenarioConfig, SweepRow

LONG_TESTS = os.getenv("HDQKD_LONG_TESTS") == "1"
CONFIGS = PROJECT_ROOT / "configs"


def _scenario(**overrides) -> ScenarioConfig:
    base = {
        "d": 2,
        "noise": {"kind": "symmetric", "Q": 0.1},
        "sweep": {"axis": "N", "values": [1e5, 1e6, 1e7]},
    }
    base.update(overrides)
    return ScenarioConfig(**base)


class CliTestCase(unittest.TestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.dir = Path(self.tmp.name)

    def tearDown(self):
        self.tmp.cleanup()

    def run_cli(self, *argv: str, name: str = "out.csv"):
        out = self.dir / name
        code = main(list(argv) + ["--out", str(out)])
        return code, (out.read_text() if out.exists() else None)


class TestNonMonotonicity(unittest.TestCase):
    def rows(self, rates):
        return [SweepRow(axis=0.01 * i, rate=r, ell=0, m_opt=None, delta=None) for i, r in enumerate(rates)]

    def test_decreasing(self):
        report = detect_nonmonotonicity(self.rows([0.5, 0.4, 0.3, 0.0]))
        self.assertEqual(report.intervals, [])
        self.assertFalse(report.flagged)

    def test_single_bump(self):
        report = detect_nonmonotonicity(self.rows([0.5, 0.4, 0.45, 0.47, 0.2]))
        self.assertEqual(len(report.intervals), 1)
        self.assertAlmostEqual(report.intervals[0][0], 0.01)
        self.assertAlmostEqual(report.intervals[0][1], 0.03)

    def test_expected_increase_missing(self):
        report = detect_nonmonotonicity(self.rows([0.5, 0.4, 0.3]), expect_increase=True)
        self.assertTrue(report.flagged)

    def test_dataframe_input(self):
        df = pd.DataFrame({"axis": [0.0, 0.1, 0.2], "rate": [0.1, 0.2, 0.1]})
        self.assertEqual(detect_nonmonotonicity(df).intervals, [(0.0, 0.1)])

    def test_too_few_rows(self):
        with self.assertRaises(PreconditionError):
            detect_nonmonotonicity(self.rows([0.5, 0.4]))

    def test_report_block_is_commented_csv(self):
        report = NonMonotonicityReport(intervals=[(0.1, 0.15), (0.2, 0.25)], flagged=False, note="two bumps")
        lines = render_report(report, "csv").splitlines()
        self.assertEqual(lines[0], "# nonmonotonicity")
        self.assertTrue(all(line.startswith("# ") for line in lines))
        block = pd.read_csv(io.StringIO("\n".join(line[2:] for line in lines[1:])))
        self.assertEqual(list(block.columns), REPORT_COLUMNS)
        self.assertEqual(list(block["start"]), [0.1, 0.2])

    def test_empty_report_keeps_flag(self):
        report = NonMonotonicityReport(intervals=[], flagged=True, note="none found")
        lines = render_report(report, "csv").splitlines()
        self.assertEqual(len(lines), 3)
        self.assertEqual(lines[2], "# ,,True,none found")


class TestSweep(unittest.TestCase):
    def test_rate_nondecreasing_in_N(self):
        df, report = run_sweep(_scenario())
        self.assertEqual(list(df.columns), SWEEP_COLUMNS)
        self.assertEqual(list(df["axis"]), [100000, 1000000, 10000000])
        self.assertTrue(df["rate"].is_monotonic_increasing)
        self.assertIsNone(report)

    def test_rate_nonincreasing_in_Q(self):
        config = _scenario(N=10 ** 7, noise={"kind": "symmetric"},
                           sweep={"axis": "Q", "values": [0.0, 0.05, 0.1, 0.15]})
        df, report = run_sweep(config)
        self.assertTrue(df["rate"].is_monotonic_decreasing)
        self.assertEqual(df["rate"].iloc[-1], 0.0)
        self.assertEqual(report.intervals, [])

    def test_thread_count_does_not_change_rows(self):
        config = _scenario(d=3)
        single, _ = run_sweep(config, threads=1)
        many, _ = run_sweep(config, threads=4)
        self.assertTrue(single.equals(many))

    def test_fixed_m_policy(self):
        df, _ = run_sweep(_scenario(m_policy={"mode": "fixed", "fraction": 0.2}))
        self.assertEqual(list(df["m_opt"]), [20000, 200000, 2000000])

    def test_flags_propagate(self):
        df, _ = run_sweep(_scenario(sweep={"axis": "N", "values": [1e6]}, m_policy={"mode": "fixed", "m": 100000}))
        self.assertIn("beta_violates_hoeffding_condition", df["flags"].iloc[0])


class TestConfigs(unittest.TestCase):
    def test_fixtures_validate(self):
        fixtures = sorted(CONFIGS.glob("fig*.yaml"))
        self.assertEqual(len(fixtures), 12)
        for path in fixtures:
            config = load_scenario(path)
            self.assertGreaterEqual(len(config.sweep.points()), 3, msg=path.name)

    def test_asymmetric_fixtures_cover_each_regime(self):
        for d in (3, 5):
            bases = [load_scenario(CONFIGS / f"fig3_d{d}_basis{b}.yaml").noise.basis for b in (0, 1, 2)]
            self.assertEqual(bases, [0, 1, 2])

    def test_thresholds_file(self):
        qhat = load_thresholds(CONFIGS / "thresholds_d3.yaml", 3)
        self.assertEqual(qhat.qhat, NoiseThresholds.symmetric(3, 0.1).qhat)
        with self.assertRaises(ConfigError):
            load_thresholds(CONFIGS / "thresholds_d3.yaml", 5)

    def test_unknown_field_rejected(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "bad.yaml"
            path.write_text("d: 3\nnoise: {kind: symmetric, Q: 0.1}\nsweep: {axis: N, values: [1e5]}\ncolour: red\n")
            with self.assertRaises(ConfigError) as ctx:
                load_scenario(path)
            self.assertIn("colour", str(ctx.exception))


class TestMain(CliTestCase):
    def test_bounds(self):
        code, text = self.run_cli("bounds", "--d", "2", "--N", "10000000", "--m", "1000000")
        self.assertEqual(code, 0)
        record = pd.read_csv(io.StringIO(text)).iloc[0]
        self.assertAlmostEqual(record["delta_min"], 0.0348, delta=1e-3)
        self.assertEqual(record["branch"], "first")

    def test_keyrate_json(self):
        code, text = self.run_cli("keyrate", "--d", "3", "--N", "1000000", "--noise", "symmetric:0.05",
                                  "--m", "300000", "--format", "json", name="out.json")
        self.assertEqual(code, 0)
        record = json.loads(text)
        self.assertEqual(record["m"], 300000)
        self.assertGreater(record["rate"], 0.0)
        self.assertLessEqual(record["rate"], record["asymptotic_rate"])

    def test_keyrate_default_and_optimized_m(self):
        args = ["keyrate", "--d", "2", "--N", "100000", "--noise", "symmetric:0.0", "--format", "json"]
        code, text = self.run_cli(*args, name="half.json")
        self.assertEqual(code, 0)
        self.assertEqual(json.loads(text)["m"], 50000)
        self.assertIsNone(json.loads(text)["m_opt"])
        code, text = self.run_cli(*args, "--optimize-m", name="opt.json")
        self.assertEqual(code, 0)
        record = json.loads(text)
        self.assertEqual(record["m_opt"], record["m"])

    def test_keyrate_output_independent_of_threads(self):
        args = ["keyrate", "--d", "3", "--N", "1000000", "--noise", "symmetric:0.05", "--optimize-m"]
        _, first = self.run_cli(*args, "--threads", "1", name="a.csv")
        _, second = self.run_cli(*args, "--threads", "8", name="b.csv")
        self.assertEqual(first, second)

    def test_composite_dimension_is_config_error(self):
        code, _ = self.run_cli("keyrate", "--d", "4", "--N", "1000", "--noise", "symmetric:0.1")
        self.assertEqual(code, 2)

    def test_missing_config_file(self):
        code, _ = self.run_cli("sweep", "--config", str(self.dir / "nope.yaml"))
        self.assertEqual(code, 2)

    def test_strict_infeasibility(self):
        path = self.dir / "bad_thresholds.json"
        path.write_text(json.dumps({"d": 2, "rows": {"0": [0.0], "1": [1.0], "2": [0.0]}}))
        args = ["keyrate", "--d", "2", "--N", "100000", "--m", "50000", "--noise", f"matrix:{path}"]
        code, text = self.run_cli(*args)
        self.assertEqual(code, 0)
        self.assertIn("infeasible_statistics", text)
        code, _ = self.run_cli(*args, "--strict", name="strict.csv")
        self.assertEqual(code, 3)

    def test_simulate_is_deterministic(self):
        args = ["simulate", "--d", "2", "--N", "20000", "--m", "10000", "--channel", "depolarizing:0.05",
                "--thresholds", "symmetric:0.1", "--repeats", "3", "--seed", "7"]
        code, first = self.run_cli(*args, "--threads", "1", name="a.csv")
        self.assertEqual(code, 0)
        _, second = self.run_cli(*args, "--threads", "4", name="b.csv")
        self.assertEqual(first, second)
        df = pd.read_csv(io.StringIO(first))
        self.assertEqual(list(df["seed"]), [7, 8, 9])
        self.assertIn("q_1_1", df.columns)

    def test_simulate_with_files(self):
        code, text = self.run_cli("simulate", "--d", "3", "--N", "20000", "--m", "10000",
                                  "--channel", f"lambda:{CONFIGS / 'channel_d3.yaml'}",
                                  "--thresholds", str(CONFIGS / "thresholds_d3.yaml"))
        self.assertEqual(code, 0)
        self.assertEqual(len(pd.read_csv(io.StringIO(text))), 1)

    def test_verify_sampling(self):
        code, text = self.run_cli("verify-sampling", "--d", "2", "--N", "100", "--trials", "2000",
                                  "--delta-grid", "0.1,0.3", "--j", "0", "--c", "1", "--seed", "3")
        self.assertEqual(code, 0)
        df = pd.read_csv(io.StringIO(text))
        self.assertEqual(list(df.columns), ["delta", "j", "c", "trials", "failures", "upper99",
                                            "analytic_bound_log", "dominated"])
        self.assertEqual(len(df), 2)

    def test_verify_sampling_output_independent_of_threads(self):
        args = ["verify-sampling", "--d", "2", "--N", "100", "--trials", "5000", "--delta-grid", "0.1,0.3", "--seed", "5"]
        code, first = self.run_cli(*args, "--threads", "1", name="a.csv")
        self.assertEqual(code, 0)
        _, second = self.run_cli(*args, "--threads", "8", name="b.csv")
        self.assertEqual(first, second)

    def test_mub_table(self):
        code, text = self.run_cli("mub-table", "--d", "3", name="table.txt")
        self.assertEqual(code, 0)
        self.assertIn("(0,1) (1,1) (2,1)", text)
        self.assertNotIn("False", text)

    def test_sweep_csv_carries_report(self):
        path = self.dir / "basis1.yaml"
        path.write_text("d: 3\nN: 10000000\nnoise: {kind: asymmetric, basis: 1, fixed_Q: 0.1}\n"
                        "sweep: {axis: Q, values: [0.0, 0.05, 0.1, 0.15]}\n")
        code, text = self.run_cli("sweep", "--config", str(path))
        self.assertEqual(code, 0)
        rows = pd.read_csv(io.StringIO(text), comment="#")
        self.assertEqual(list(rows.columns), SWEEP_COLUMNS)
        self.assertEqual(len(rows), 4)
        tail = text.split("# nonmonotonicity\n")[1].splitlines()
        block = pd.read_csv(io.StringIO("\n".join(line[2:] for line in tail)))
        self.assertEqual(list(block.columns), REPORT_COLUMNS)
        no_interval = block["start"].isna().all()
        self.assertEqual(bool(block["flagged"].iloc[0]), bool(no_interval))

    def test_sweep_output_independent_of_threads(self):
        path = self.dir / "fixed.yaml"
        path.write_text("d: 3\nN: 1000000\nnoise: {kind: symmetric}\nm_policy: {mode: fixed, fraction: 0.1}\n"
                        "sweep: {axis: Q, values: [0.0, 0.02, 0.04, 0.06, 0.08]}\n")
        code, first = self.run_cli("sweep", "--config", str(path), "--threads", "1", name="a.csv")
        self.assertEqual(code, 0)
        _, second = self.run_cli("sweep", "--config", str(path), "--threads", "8", name="b.csv")
        self.assertEqual(first, second)
        self.assertIn("# nonmonotonicity", first)

    def test_N_sweep_has_no_report(self):
        path = self.dir / "n_axis.yaml"
        path.write_text("d: 2\nnoise: {kind: symmetric, Q: 0.05}\nm_policy: {mode: fixed, fraction: 0.2}\n"
                        "sweep: {axis: N, values: [100000, 1000000, 10000000]}\n")
        code, text = self.run_cli("sweep", "--config", str(path))
        self.assertEqual(code, 0)
        self.assertNotIn("#", text)

    def test_sweep_json_report(self):
        path = self.dir / "fig3.yaml"
        path.write_text("d: 3\nN: 10000000\nnoise: {kind: asymmetric, basis: 1, fixed_Q: 0.1}\n"
                        "sweep: {axis: Q, values: [0.0, 0.05, 0.1, 0.15]}\n")
        code, text = self.run_cli("sweep", "--config", str(path), "--format", "json", name="out.json")
        self.assertEqual(code, 0)
        payload = json.loads(text)
        self.assertEqual(len(payload["rows"]), 4)
        self.assertIn("intervals", payload["nonmonotonicity"])


@unittest.skipUnless(LONG_TESTS, "set HDQKD_LONG_TESTS=1 for the figure fixtures")
class TestFigureFixtures(unittest.TestCase):
    def test_rate_against_N(self):
        for d in (2, 3, 5):
            config = load_scenario(CONFIGS / f"fig1_d{d}.yaml")
            df, _ = run_sweep(config, threads=4)
            self.assertTrue(df["rate"].is_monotonic_increasing, msg=f"d={d}")
            limit = asymptotic_rate(config.thresholds(), config.leak)
            self.assertTrue((df["rate"] <= limit).all())

    def test_rate_against_Q(self):
        for d in (2, 3, 5):
            df, _ = run_sweep(load_scenario(CONFIGS / f"fig2_d{d}.yaml"), threads=4)
            self.assertTrue(df["rate"].is_monotonic_decreasing, msg=f"d={d}")

    def test_asymmetric_sweep_emits_report(self):
        df, report = run_sweep(load_scenario(CONFIGS / "fig3_d5_basis1.yaml"), threads=4)
        self.assertEqual(len(df), 31)
        self.assertIsNotNone(report)

    def test_asymmetric_regimes(self):
        for b in (0, 1, 2):
            df, report = run_sweep(load_scenario(CONFIGS / f"fig3_d5_basis{b}.yaml"), threads=4)
            self.assertEqual(len(df), 31, msg=f"basis={b}")
            self.assertIsNotNone(report)
            if b != 1:
                self.assertFalse(report.flagged, msg=f"basis={b}")


if __name__ == "__main__":
    unittest.main()
