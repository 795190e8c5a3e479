import contextlib
import io
import json
import math
import os
import tempfile
import unittest
from unittest import mock

import numpy as np
import pandas as pd

from bbvi.config import ExperimentConfig, build_schedule, build_target, build_family, load_config, resolve_seed, save_config
from bbvi.errors import ConfigurationError
from bbvi.main import main
from bbvi.models import RunResult, SweepRow, TrajectoryRecord, VerificationReport
from bbvi.services import report_writer
from bbvi.services.sweep_runner import SweepRunner, run_sweep, summarize_sweep
from bbvi.targets import LogisticTarget, QuadraticTarget
from bbvi.utils import make_stream
from tests.helpers import slow

CONFIG_DIR = os.path.join(os.path.dirname(__file__), '..', 'config')

SMALL = {
    "target.dim": 2,
    "target.condition_number": 2.0,
    "target.smoothness": 2.0,
    "run.iterations": 300,
    "run.replications": 2,
    "run.checkpoint_every": 50,
    "sweep.stepsizes": [0.01, 0.05],
    "sweep.init_scales": [1.0, 0.001],
}


def small_config(**overrides) -> ExperimentConfig:
    values = dict(SMALL)
    values.update(overrides)
    return ExperimentConfig.from_mapping(values)


class TestConfiguration(unittest.TestCase):

    def test_defaults(self):
        config = load_config()
        self.assertEqual(len(config.sweep_stepsizes), 13)
        self.assertAlmostEqual(config.sweep_stepsizes[0], 1e-6)
        self.assertAlmostEqual(config.sweep_stepsizes[-1], 1.0)
        self.assertEqual(config.sweep_init_scales, [1.0, 1e-3, 1e-5])
        self.assertEqual(config.estimator_samples, 10)
        self.assertEqual(config.run_eps_kl, 1.0)
        self.assertEqual(config.variants, [("prox_sgd", "identity"), ("sgd", "identity"), ("sgd", "softplus")])

    def test_shipped_config_loads(self):
        config = load_config(os.path.join(CONFIG_DIR, 'config.yaml'))
        self.assertEqual(config.target_dim, 10)
        self.assertEqual(config.target_smoothness, 100.0)
        self.assertEqual(len(config.sweep_stepsizes), 13)

    def test_round_trip(self):
        config = small_config(**{"target.mean": [0.5, -1.0], "run.eps_kl": math.inf})
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, 'config.yaml')
            save_config(config, path)
            self.assertEqual(load_config(path), config)

    def test_nested_sections_are_flattened(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, 'config.yaml')
            with open(path, 'w') as f:
                f.write("target:\n  dim: 3\nrun:\n  iterations: 1e4\n")
            config = load_config(path)
        self.assertEqual(config.target_dim, 3)
        self.assertEqual(config.run_iterations, 10_000)

    def test_errors(self):
        with self.assertRaises(ConfigurationError):
            load_config("missing.cfg")
        with self.assertRaises(ConfigurationError):
            ExperimentConfig.from_mapping({"target.colour": "red"})
        with self.assertRaises(ConfigurationError):
            ExperimentConfig.from_mapping({"run.replications": 0})
        with self.assertRaises(ConfigurationError):
            ExperimentConfig.from_mapping({"run.eps_kl": 0.0})
        with self.assertRaises(ConfigurationError):
            ExperimentConfig.from_mapping({"target.dim": 2.5})
        with self.assertRaises(ConfigurationError):
            ExperimentConfig.from_mapping({"sweep.variants": ["prox_sgd/tanh"]})

    def test_resolve_seed(self):
        config = small_config(**{"run.base_seed": 5})
        with mock.patch.dict(os.environ, {"BBVI_LAB_SEED": "99"}):
            self.assertEqual(resolve_seed(3, config), 3)
            self.assertEqual(resolve_seed(None, config), 99)
        with mock.patch.dict(os.environ, {"BBVI_LAB_SEED": "abc"}):
            with self.assertRaises(ConfigurationError):
                resolve_seed(None, config)
        with mock.patch.dict(os.environ, {"BBVI_LAB_SEED": ""}):
            self.assertEqual(resolve_seed(None, config), 5)

    def test_build_target(self):
        generated = build_target(small_config(), make_stream(1))
        self.assertAlmostEqual(generated.condition_number, 2.0, delta=1e-8)
        explicit = build_target(small_config(**{"target.matrix": [[2.0, 0.0], [0.0, 1.0]]}), make_stream(1))
        self.assertIsInstance(explicit, QuadraticTarget)
        np.testing.assert_array_equal(explicit.mu, np.zeros(2))
        logistic = build_target(small_config(**{"target.kind": "logistic"}), make_stream(1))
        self.assertIsInstance(logistic, LogisticTarget)
        with self.assertRaises(ConfigurationError):
            build_target(small_config(**{"target.matrix": [[1.0, 2.0], [2.0, 1.0]]}), make_stream(1))

    def test_build_schedule(self):
        config = small_config(**{"optimizer.schedule": "theory"})
        target = build_target(config, make_stream(2))
        schedule = build_schedule(config, target, build_family(config))
        self.assertEqual(schedule.kind, "two_stage")
        self.assertEqual(build_schedule(small_config(), target, build_family(config), stepsize=0.3).gamma, 0.3)


class TestSweep(unittest.TestCase):

    def test_rows_are_sorted_and_complete(self):
        rows = run_sweep(small_config(), base_seed=4)
        self.assertEqual(len(rows), 3 * 2 * 2 * 2)
        self.assertEqual(rows, sorted(rows))
        for row in rows:
            self.assertLessEqual(row.iters_to_eps, 300)
            if not row.failed:
                self.assertGreaterEqual(row.final_kl, -1e-10)

    def test_infinite_threshold(self):
        rows = run_sweep(small_config(**{"run.eps_kl": math.inf}), base_seed=4)
        self.assertTrue(all(row.iters_to_eps == 0 and not row.censored for row in rows))

    def test_stable_prox_sgd_cell_is_uncensored(self):
        config = small_config(**{"sweep.variants": ["prox_sgd/identity"], "sweep.stepsizes": [0.05], "sweep.init_scales": [1.0], "run.iterations": 2000})
        rows = run_sweep(config, base_seed=8)
        self.assertTrue(all(not row.censored and row.iters_to_eps < 2000 for row in rows))

    def test_huge_stepsize_is_flagged_not_raised(self):
        config = small_config(**{"sweep.variants": ["sgd/identity"], "sweep.stepsizes": [1e6], "sweep.init_scales": [1.0], "run.eps_kl": 1e-3})
        rows = run_sweep(config, base_seed=8)
        self.assertEqual(len(rows), 2)
        for row in rows:
            self.assertTrue(row.failed)
            self.assertTrue(row.censored)
            self.assertEqual(row.iters_to_eps, 300)
            self.assertTrue(math.isnan(row.final_kl))

    def test_thread_count_does_not_change_rows(self):
        config = small_config()
        single = run_sweep(config, base_seed=11, threads=1)
        several = run_sweep(config, base_seed=11, threads=4)
        self.assertEqual([(r.optimizer, r.conditioner, r.stepsize, r.init_scale, r.trial, r.iters_to_eps, r.final_kl) for r in single],
                         [(r.optimizer, r.conditioner, r.stepsize, r.init_scale, r.trial, r.iters_to_eps, r.final_kl) for r in several])

    def test_rejects_invalid_variants(self):
        with self.assertRaises(ConfigurationError):
            SweepRunner(small_config(**{"sweep.variants": ["prox_sgd/softplus"]}), 0)

    def test_summary_picks_the_best_stepsize(self):
        rows = [
            SweepRow("sgd", "identity", 0.1, 1.0, 0, 50, False, 0.5),
            SweepRow("sgd", "identity", 0.1, 1.0, 1, 70, False, 0.5),
            SweepRow("sgd", "identity", 0.01, 1.0, 0, 400, False, 0.5),
            SweepRow("sgd", "identity", 0.01, 1.0, 1, 500, True, 2.0),
        ]
        summary = summarize_sweep(rows)
        self.assertEqual(len(summary), 1)
        self.assertEqual(summary.loc[0, "best_stepsize"], 0.1)
        self.assertEqual(summary.loc[0, "mean_iters"], 60.0)


class TestReportWriter(unittest.TestCase):

    def test_sweep_csv(self):
        rows = [SweepRow("prox_sgd", "identity", 0.1, 1e-5, 0, 12, False, 0.25), SweepRow("sgd", "softplus", 0.1, 1.0, 1, 300, True, 3.0)]
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, 'out', 'sweep.csv')
            report_writer.write_sweep(path, rows)
            with open(path) as f:
                lines = f.read().split("\n")
        self.assertEqual(lines[0], "trial,optimizer,conditioner,stepsize,init_scale,iters_to_eps,censored,final_kl")
        self.assertEqual(lines[1], "0,prox_sgd,identity,0.10000000000000001,1.0000000000000001e-05,12,0,0.25")
        self.assertEqual(lines[2], "1,sgd,softplus,0.10000000000000001,1,300,1,3")

    def test_trajectory_csv(self):
        result = RunResult([TrajectoryRecord(0, 2.0, 4.0, 1.5, 0), TrajectoryRecord(10, None, None, 1.25, 2)], None)
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, 'trajectory.csv')
            report_writer.write_trajectories(path, [(0, result)], "sgd", "identity", "cfe", 0.5, 1.0)
            frame = pd.read_csv(path)
            with open(path) as f:
                header = f.readline().strip()
        self.assertEqual(header, "trial,optimizer,conditioner,estimator,stepsize,init_scale,iteration,kl,param_dist_sq,elbo,clamps")
        self.assertEqual(list(frame["iteration"]), [0, 10])
        self.assertTrue(np.isnan(frame.loc[1, "kl"]))

    def test_jsonl_report(self):
        reports = [VerificationReport("a", "pass", 0.5, 4.0, "fine", 7), VerificationReport("b", "skip", math.nan, math.nan, "gate", 6)]
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, 'report.jsonl')
            report_writer.write_report(path, reports)
            with open(path) as f:
                records = [json.loads(line) for line in f]
        self.assertEqual(records[0], {"name": "a", "status": "pass", "statistic": 0.5, "tolerance": 4.0, "seed": 7, "detail": "fine"})
        self.assertEqual(records[1]["statistic"], "nan")
        table = report_writer.summary_table(reports)
        self.assertIn("1 passed, 1 skipped, 0 failed", table)


class TestCli(unittest.TestCase):

    def _main(self, argv):
        out, err = io.StringIO(), io.StringIO()
        with contextlib.redirect_stdout(out), contextlib.redirect_stderr(err):
            code = main(argv)
        return code, out.getvalue(), err.getvalue()

    def _write_config(self, tmp, **overrides):
        path = os.path.join(tmp, 'small.yaml')
        save_config(small_config(**overrides), path)
        return path

    def test_constants(self):
        code, out, _ = self._main(["constants"])
        self.assertEqual(code, 0)
        values = dict(line.split() for line in out.strip().splitlines())
        self.assertAlmostEqual(float(values["L_h"]), 0.167096, delta=1e-3)
        self.assertAlmostEqual(float(values["L_s_factor"]), 0.26034, delta=1e-3)

    def test_usage_errors(self):
        code, _, err = self._main(["bogus"])
        self.assertEqual(code, 2)
        self.assertIn("usage", err)
        code, _, _ = self._main(["sweep", "--frobnicate"])
        self.assertEqual(code, 2)

    def test_missing_config(self):
        code, _, _ = self._main(["sweep", "--config", "missing.cfg"])
        self.assertEqual(code, 2)

    def test_verify_exit_codes_and_report(self):
        passing = [VerificationReport("softplus_constants", "pass", 1e-5, 1e-3, "ok", 3), VerificationReport("rate_bound", "skip", math.nan, 2.0, "gate", 4)]
        failing = passing + [VerificationReport("linearity[cholesky]", "fail", 1e-3, 1e-12, "off", 5)]
        with tempfile.TemporaryDirectory() as tmp:
            out = os.path.join(tmp, "verification.jsonl")
            with mock.patch("bbvi.main.run_suite", return_value=passing) as suite:
                code, table, _ = self._main(["verify", "--seed", "12", "--threads", "2", "--out", out])
            suite.assert_called_once_with(12, 2)
            self.assertEqual(code, 0)
            self.assertIn("1 passed, 1 skipped, 0 failed", table)
            with open(out) as f:
                records = [json.loads(line) for line in f]
            self.assertEqual([record["name"] for record in records], ["softplus_constants", "rate_bound"])
            self.assertEqual(set(records[0]), {"name", "status", "statistic", "tolerance", "seed", "detail"})
            self.assertEqual(records[1]["statistic"], "nan")
            with mock.patch("bbvi.main.run_suite", return_value=failing):
                code, table, _ = self._main(["verify", "--seed", "12", "--out", out])
            self.assertEqual(code, 1)
            self.assertIn("1 passed, 1 skipped, 1 failed", table)

    def test_run_writes_trajectories(self):
        with tempfile.TemporaryDirectory() as tmp:
            config = self._write_config(tmp)
            out = os.path.join(tmp, 'trajectory.csv')
            code, _, _ = self._main(["run", "--config", config, "--out", out, "--seed", "3", "--trials", "2", "--optimizer", "sgd", "--stepsize", "0.02"])
            self.assertEqual(code, 0)
            frame = pd.read_csv(out)
        self.assertEqual(sorted(set(frame["trial"])), [0, 1])
        self.assertEqual(set(frame["optimizer"]), {"sgd"})
        self.assertEqual(list(frame[frame["trial"] == 0]["iteration"]), [0, 50, 100, 150, 200, 250, 300])

    def test_sweep_is_byte_identical_across_runs_and_threads(self):
        with tempfile.TemporaryDirectory() as tmp:
            config = self._write_config(tmp)
            outputs = []
            for threads in ("1", "3"):
                out = os.path.join(tmp, f'sweep-{threads}.csv')
                code, table, _ = self._main(["sweep", "--config", config, "--out", out, "--seed", "9", "--threads", threads])
                self.assertEqual(code, 0)
                self.assertIn("best_stepsize", table)
                with open(out, 'rb') as f:
                    outputs.append(f.read())
        self.assertEqual(outputs[0], outputs[1])


class TestQuadraticSweepAcceptance(unittest.TestCase):
    """Iterations to KL <= 1 on the 10-dimensional, kappa = 10, L = 100 Gaussian."""

    @slow
    def test_proximal_sgd_is_robust_to_initialization(self):
        # Stepsizes below 1e-4 do not reach the threshold within T for any variant.
        config = ExperimentConfig.from_mapping({"run.iterations": 10_000})
        stepsizes = [gamma for gamma in config.sweep_stepsizes if gamma >= 0.99e-4]
        summary = summarize_sweep(run_sweep(config, stepsizes=stepsizes, base_seed=0, threads=max(8, os.cpu_count() or 1)))
        best = summary.set_index(["optimizer", "conditioner", "init_scale"])["mean_iters"]
        self.assertLessEqual(best[("prox_sgd", "identity", 1e-5)], best[("sgd", "softplus", 1e-5)])
        prox = [best[("prox_sgd", "identity", scale)] for scale in (1.0, 1e-3, 1e-5)]
        softplus = [best[("sgd", "softplus", scale)] for scale in (1.0, 1e-3, 1e-5)]
        self.assertLessEqual(max(prox) / max(min(prox), 1), 10.0)
        self.assertGreater(max(softplus) / max(min(softplus), 1), max(prox) / max(min(prox), 1))


if __name__ == '__main__':
    unittest.main()
