import json
import os
import tempfile
import unittest

import numpy as np
import pandas as pd

from click.testing import CliRunner

from isearch.cli import Session, bundled_configs, main, resolve_config, run_experiment_config
from isearch.configure import ExperimentConfig
from isearch.matstore import RandomSource, read_matrix_csv, write_matrix_csv

SMALL_MODEL = {
    "m1": 20,
    "n_i": 40,
    "inlier": {"kind": "uniform_subspace", "r": 3},
    "outliers": [{"kind": "uniform", "count": 0}],
}


def summary(output: str) -> dict:
    return json.loads(output.strip().splitlines()[-1])


class TestCli(unittest.TestCase):
    def setUp(self):
        self.runner = CliRunner(mix_stderr=False)
        self.tmp = tempfile.TemporaryDirectory()
        self.dir = self.tmp.name

    def tearDown(self):
        self.tmp.cleanup()

    def path(self, name: str) -> str:
        return os.path.join(self.dir, name)

    def write_json(self, name: str, payload: dict) -> str:
        with open(self.path(name), "w") as fo:
            json.dump(payload, fo)
        return self.path(name)

    def invoke(self, *args: str):
        return self.runner.invoke(main, ["--quiet", *args])

    def test_bundled_fig1(self):
        result = self.invoke("experiment", "fig1", "--out-dir", self.dir)
        self.assertEqual(result.exit_code, 0, result.stderr)
        out = summary(result.stdout)
        self.assertEqual(out["name"], "fig1")
        self.assertGreater(out["separation_margin"], 0)
        scores = pd.read_csv(self.path("scores.csv"))
        self.assertEqual(len(scores), 250)
        self.assertEqual(
            list(scores.columns), ["index", "innovation", "residual", "outlier"]
        )
        self.assertEqual(int(scores["outlier"].sum()), 50)
        self.assertEqual(read_matrix_csv(self.path("basis.csv")).shape, (40, 5))
        self.assertTrue(os.path.isfile(self.path("config.json")))

    def test_config_round_trip(self):
        for name in bundled_configs():
            with open(resolve_config(name)) as fo:
                cfg = ExperimentConfig.model_validate_json(fo.read())
            again = ExperimentConfig.model_validate_json(cfg.model_dump_json())
            self.assertEqual(again, cfg, name)

    def test_structured_outliers_centre_near_inliers(self):
        with open(resolve_config("fig3_structured")) as fo:
            cfg = ExperimentConfig.model_validate_json(fo.read())
        assert cfg.sweep is not None
        self.assertEqual(cfg.sweep.model.outliers[0].q_mode, "near_subspace")
        with open(resolve_config("fig4_snr")) as fo:
            cfg = ExperimentConfig.model_validate_json(fo.read())
        assert cfg.sweep is not None
        modes = [out.q_mode for out in cfg.sweep.model.outliers if out.kind == "clustered"]
        self.assertEqual(modes, ["random"])

    def test_run_experiment_config(self):
        session = Session(seed=None, threads=1, trace=None, quiet=True)
        out = run_experiment_config("alg2_cluster_correction", session, self.dir)
        self.assertLessEqual(out["error_after"], 0.05)
        self.assertGreater(out["error_before"], out["error_after"])
        labels = np.loadtxt(self.path("labels.csv"), dtype=int)
        self.assertEqual(labels.size, 90)

    def test_infeasible_config(self):
        bad = {
            "mode": "run",
            "model": {"m1": 5, "n_i": 10, "inlier": {"kind": "uniform_subspace", "r": 7}},
            "method": {"rank": 7},
        }
        result = self.invoke("experiment", self.write_json("bad.json", bad))
        self.assertEqual(result.exit_code, 2)
        self.assertIn("inlier.r", result.stderr)
        payload = json.loads(result.stderr.strip().splitlines()[-1])
        self.assertEqual(payload["error"], "ValidationError")

    def test_unknown_config(self):
        result = self.invoke("experiment", "no_such_config")
        self.assertEqual(result.exit_code, 2)

    def test_gen_then_run(self):
        model = self.write_json("model.json", {**SMALL_MODEL, "outliers": []})
        result = self.invoke("--seed", "3", "gen", "--model", model, "--out", self.path("ds"))
        self.assertEqual(result.exit_code, 0, result.stderr)
        self.assertEqual(summary(result.stdout)["n_i"], 40)
        data = self.path(os.path.join("ds", "data.csv"))
        self.assertTrue(os.path.isfile(data))

        result = self.invoke(
            "run",
            "--data",
            data,
            "--rank",
            "3",
            "--out-scores",
            self.path("scores.csv"),
            "--out-basis",
            self.path("basis.csv"),
            "--solver-stats",
            self.path("stats.json"),
        )
        self.assertEqual(result.exit_code, 0, result.stderr)
        out = summary(result.stdout)
        self.assertEqual(out["r"], 3)
        self.assertEqual(out["flagged"], 0)
        with open(self.path("stats.json")) as fo:
            stats = json.load(fo)
        self.assertEqual(len(stats["iterations"]), 40)
        self.assertEqual(stats["unconverged"], [])

    def test_run_flag_conflict(self):
        data = self.path("d.csv")
        write_matrix_csv(data, np.eye(3))
        result = self.invoke(
            "run", "--data", data, "--rank", "1", "--adaptive", "--keep-fraction", "0.5"
        )
        self.assertNotEqual(result.exit_code, 0)

    def test_pca_and_cop(self):
        data = self.path("d.csv")
        write_matrix_csv(data, RandomSource(seed=4).normal(6, 15))
        result = self.invoke("pca", "--data", data, "--rank", "2", "--out", self.path("b.csv"))
        self.assertEqual(result.exit_code, 0, result.stderr)
        self.assertEqual(read_matrix_csv(self.path("b.csv")).shape, (6, 2))
        result = self.invoke("cop", "--data", data, "--out", self.path("c.csv"))
        self.assertEqual(result.exit_code, 0, result.stderr)
        frame = pd.read_csv(self.path("c.csv"))
        self.assertEqual(list(frame.columns), ["index", "coherence"])
        self.assertEqual(len(frame), 15)

    def test_cop_honours_rank_ratio(self):
        data = RandomSource(seed=5).normal(6, 15)
        data[5] *= 1e-3
        path = self.path("d.csv")
        write_matrix_csv(path, data)
        ranks = []
        for ratio in (1e-6, 0.05):
            cfg = {"mode": "cop", "data": path, "method": {"rank_ratio": ratio}}
            path_cfg = self.write_json("cop.json", cfg)
            result = self.invoke("experiment", path_cfg, "--out-dir", self.dir)
            self.assertEqual(result.exit_code, 0, result.stderr)
            ranks.append(summary(result.stdout)["r_d"])
        self.assertEqual(ranks, [6, 5])

    def test_missing_data(self):
        result = self.invoke(
            "pca", "--data", self.path("missing.csv"), "--rank", "2", "--out", self.path("b.csv")
        )
        self.assertEqual(result.exit_code, 1)
        self.assertIn("InvalidInput", result.stderr)

    def test_sweep_two_methods(self):
        spec = {"model": SMALL_MODEL, "axes": {"n_o": [0, 5]}, "trials_per_cell": 2}
        path = self.write_json("sweep.json", spec)
        args = ["--seed", "9", "sweep", "--config", path, "--method", "isearch"]
        args += ["--method", "cop", "--out", self.path("grid.csv")]
        result = self.invoke(*args)
        self.assertEqual(result.exit_code, 0, result.stderr)
        out = summary(result.stdout)
        self.assertEqual(out["isearch"][0], 1.0)
        with open(self.path("grid_isearch.csv"), "rb") as fo:
            first = fo.read()
        self.assertTrue(os.path.isfile(self.path("grid_cop.csv")))
        header = pd.read_csv(self.path("grid_isearch.csv")).columns.tolist()
        self.assertEqual(header, ["n_o", "probability"])
        errors = pd.read_csv(self.path("grid_isearch_errors.csv"))
        self.assertEqual(errors.columns.tolist(), ["n_o", "mean_log_recovery_error"])
        again = self.invoke(*args)
        self.assertEqual(again.exit_code, 0, again.stderr)
        with open(self.path("grid_isearch.csv"), "rb") as fo:
            self.assertEqual(fo.read(), first)

    def test_configs_listing(self):
        result = self.invoke("configs")
        self.assertEqual(result.exit_code, 0)
        names = result.stdout.split()
        self.assertIn("fig1", names)
        self.assertEqual(names, bundled_configs())

    def test_version(self):
        result = self.runner.invoke(main, ["--version"])
        self.assertEqual(result.exit_code, 0)
        self.assertIn("isearch", result.stdout)
