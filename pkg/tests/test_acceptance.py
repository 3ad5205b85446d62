"""
Monte Carlo checks at experiment scale; minutes, not seconds

Enable with ISEARCH_SLOW_TESTS=1 (hatch run test-slow)
"""

import os
import tempfile
import unittest

import numpy as np

from isearch.cli import resolve_config
from isearch.cluster import clustering_error, correct_labeling
from isearch.configure import ExperimentConfig, ModelSpec
from isearch.core import isearch_options, run_isearch
from isearch.evalkit import TrialOptions, run_sweep, run_trial, set_axis
from isearch.matstore import RandomSource, spawn_seed
from isearch.synthgen import corrupt_labels, gen_dataset
from isearch.utils import env_flag

SLOW = env_flag("ISEARCH_SLOW_TESTS", False)
TRIALS = 20


def bundled(name: str) -> ExperimentConfig:
    with open(resolve_config(name)) as fo:
        return ExperimentConfig.model_validate_json(fo.read())


def trial_options(cfg: ExperimentConfig | None = None) -> TrialOptions:
    if cfg is None:
        iopts = isearch_options(threads=1)
    else:
        iopts = isearch_options(cfg.method, cfg.solver, threads=1)
    return TrialOptions(isearch=iopts)


def seeds(master: int, count: int = TRIALS) -> list[int]:
    return [spawn_seed(master, 0, t) for t in range(count)]


@unittest.skipUnless(SLOW, "set ISEARCH_SLOW_TESTS=1")
class TestSeparation(unittest.TestCase):
    def test_fig1(self):
        cfg = bundled("fig1")
        assert cfg.model is not None
        opts = trial_options(cfg)
        passed = [
            run_trial(cfg.model, "isearch", s, opts).separation_margin > 0 for s in seeds(1)
        ]
        self.assertGreaterEqual(sum(passed), 19)

    def test_fig1_noisy(self):
        cfg = bundled("fig1")
        assert cfg.model is not None
        noisy = cfg.model.model_copy(update={"snr": 4.0})
        opts = trial_options(cfg)
        passed = [run_trial(noisy, "isearch", s, opts).separation_margin > 0 for s in seeds(2)]
        self.assertGreaterEqual(sum(passed), 18)

    def test_innovation_beats_coherence(self):
        cfg = bundled("fig5_inno_vs_coh")
        assert cfg.sweep is not None
        opts = trial_options(cfg)
        inno = coh = 0
        for s in seeds(6):
            inno += run_trial(cfg.sweep.model, "isearch", s, opts).separation_margin > 0
            coh += not run_trial(cfg.sweep.model, "cop", s, opts).separation_margin > 0
        self.assertGreaterEqual(inno, 16)
        self.assertGreaterEqual(coh, 16)


@unittest.skipUnless(SLOW, "set ISEARCH_SLOW_TESTS=1")
class TestRecovery(unittest.TestCase):
    def test_phase_corner(self):
        """
        40 inliers in 4 dims survive 3000 outliers in 100 dims
        """
        cfg = bundled("fig2_phase")
        assert cfg.sweep is not None
        opts = trial_options(cfg)
        model = set_axis(cfg.sweep.model, "n_i", 40)
        for n_o, needed in ((3000, 18), (0, 20)):
            spec = set_axis(model, "n_o", n_o)
            wins = sum(run_trial(spec, "isearch", s, opts).success for s in seeds(n_o + 1))
            self.assertGreaterEqual(wins, needed, f"n_o={n_o}")

    def test_structured_outliers(self):
        cfg = bundled("fig3_structured")
        assert cfg.sweep is not None
        grid = run_sweep(cfg.sweep, "isearch", cfg.seed, trial_options(cfg), threads=4)
        probs = grid.probabilities
        self.assertGreaterEqual(probs[0], 0.9)
        for before, after in zip(probs, probs[1:]):
            self.assertLessEqual(after, before + 0.1)

    def test_clustered_inliers_against_pca(self):
        cfg = bundled("fig6_clustered_inliers")
        assert cfg.sweep is not None
        spec = set_axis(cfg.sweep.model, "inlier.gamma", 0.25)
        opts = trial_options(cfg)
        inno = [run_trial(spec, "isearch", s, opts) for s in seeds(7)]
        pca = [run_trial(spec, "pca", s, opts) for s in seeds(7)]
        inno_log = np.mean([rec.log_recovery_error for rec in inno])
        pca_log = np.mean([rec.log_recovery_error for rec in pca])
        self.assertLessEqual(inno_log, pca_log - 1.0)


@unittest.skipUnless(SLOW, "set ISEARCH_SLOW_TESTS=1")
class TestNoise(unittest.TestCase):
    def test_detection_at_high_snr(self):
        cfg = bundled("fig4_snr")
        assert cfg.sweep is not None
        opts = trial_options(cfg)
        for snr in (10, 20):
            spec = set_axis(cfg.sweep.model, "snr", snr)
            hits = sum(
                run_trial(spec, "isearch", s, opts).detection_success for s in seeds(snr)
            )
            self.assertGreaterEqual(hits / TRIALS, 0.8, f"snr={snr}")


@unittest.skipUnless(SLOW, "set ISEARCH_SLOW_TESTS=1")
class TestCorrection(unittest.TestCase):
    def test_corrupted_clusters(self):
        cfg = bundled("alg2_cluster_correction")
        assert cfg.model is not None
        opts = isearch_options(cfg.method, cfg.solver)
        for s in seeds(8, 10):
            rng = RandomSource(seed=s)
            ds = gen_dataset(cfg.model, rng)
            noisy = corrupt_labels(ds.groups, cfg.corruption, 3, rng)
            _, fixed = correct_labeling(ds.data, noisy, 3, 2, opts)
            self.assertLessEqual(clustering_error(fixed.labels, ds.groups), 0.05)


@unittest.skipUnless(SLOW, "set ISEARCH_SLOW_TESTS=1")
class TestDeterminism(unittest.TestCase):
    def test_same_seed_same_grid(self):
        cfg = bundled("fig3_structured")
        assert cfg.sweep is not None
        sweep = cfg.sweep.model_copy(update={"trials_per_cell": 5})
        with tempfile.TemporaryDirectory() as tmp:
            blobs = []
            for threads in (1, 3):
                path = os.path.join(tmp, f"grid{threads}.csv")
                run_sweep(sweep, "isearch", 4, trial_options(cfg), threads=threads).to_csv(path)
                with open(path, "rb") as fo:
                    blobs.append(fo.read())
        self.assertEqual(blobs[0], blobs[1])

    def test_same_seed_same_profile(self):
        spec = ModelSpec.model_validate(
            {
                "m1": 40,
                "n_i": 200,
                "inlier": {"kind": "uniform_subspace", "r": 5},
                "outliers": [{"kind": "uniform", "count": 50}],
            }
        )
        opts = trial_options().isearch
        runs = [run_isearch(gen_dataset(spec, RandomSource(seed=1)).data, 5, opts) for _ in range(2)]
        self.assertTrue(np.array_equal(runs[0].profile.values, runs[1].profile.values))
