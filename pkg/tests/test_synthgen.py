import json
import os
import tempfile
import unittest

import numpy as np

from pydantic import ValidationError

from isearch.configure import ModelSpec
from isearch.matstore import RandomSource, orthonormal_basis
from isearch.synthgen import (
    apply_noise,
    corrupt_labels,
    gen_dataset,
    load_dataset,
    save_dataset,
)
from isearch.typed import INLIER, OUTLIER


def fig1_spec(**extra) -> ModelSpec:
    payload = {
        "m1": 40,
        "n_i": 200,
        "inlier": {"kind": "uniform_subspace", "r": 5},
        "outliers": [{"kind": "uniform", "count": 50}],
    }
    payload.update(extra)
    return ModelSpec.model_validate(payload)


class TestModels(unittest.TestCase):
    def test_fig1_layout(self):
        ds = gen_dataset(fig1_spec(), RandomSource(seed=1))
        self.assertEqual(ds.data.shape, (40, 250))
        self.assertEqual((ds.n_i, ds.n_o), (200, 50))
        inliers = ds.data[:, ds.labels == INLIER]
        resid = np.linalg.norm(ds.truth_basis.residual(inliers), axis=0)
        self.assertLessEqual(resid.max(), 1e-10)
        np.testing.assert_allclose(np.linalg.norm(ds.data, axis=0), 1.0, atol=1e-12)

    def test_permutation_bookkeeping(self):
        """
        Undoing the recorded permutation gives the [B A] block layout
        """
        ds = gen_dataset(fig1_spec(), RandomSource(seed=2))
        labels = ds.labels[np.argsort(ds.permutation)]
        expected = np.array([OUTLIER] * 50 + [INLIER] * 200)
        self.assertTrue(np.array_equal(labels, expected))
        layout = ds.unpermuted()
        self.assertTrue(np.array_equal(layout[:, ds.permutation], ds.data))

    def test_clustered_outlier_norms(self):
        eta = 0.1
        spec = ModelSpec.model_validate(
            {
                "m1": 20,
                "n_i": 30,
                "inlier": {"kind": "uniform_subspace", "r": 3},
                "outliers": [{"kind": "clustered", "count": 40, "eta": eta}],
            }
        )
        ds = gen_dataset(spec, RandomSource(seed=3))
        norms = np.linalg.norm(ds.data[:, ds.outlier_mask], axis=0)
        scale = np.sqrt(1 + eta**2)
        self.assertTrue(np.all(norms >= (1 - eta) / scale - 1e-12))
        self.assertTrue(np.all(norms <= (1 + eta) / scale + 1e-12))

    def test_near_subspace_centre(self):
        spec = ModelSpec.model_validate(
            {
                "m1": 20,
                "n_i": 30,
                "inlier": {"kind": "uniform_subspace", "r": 3},
                "outliers": [
                    {"kind": "clustered", "count": 10, "eta": 0.1, "q_mode": "near_subspace"}
                ],
            }
        )
        ds = gen_dataset(spec, RandomSource(seed=4))
        self.assertEqual(ds.n_o, 10)

    def test_dependent_outliers_dimension(self):
        spec = ModelSpec.model_validate(
            {
                "m1": 30,
                "n_i": 40,
                "inlier": {"kind": "uniform_subspace", "r": 5},
                "outliers": [
                    {"kind": "dependent", "count": 20, "r_o": 3, "intersect_dim": 1}
                ],
            }
        )
        ds = gen_dataset(spec, RandomSource(seed=5))
        outliers = ds.data[:, ds.outlier_mask]
        self.assertEqual(np.linalg.matrix_rank(outliers, tol=1e-8), 3)
        joint = np.hstack([ds.truth_basis.basis, outliers])
        self.assertEqual(np.linalg.matrix_rank(joint, tol=1e-8), 7)

    def test_close_outliers(self):
        spec = ModelSpec.model_validate(
            {
                "m1": 50,
                "n_i": 60,
                "inlier": {"kind": "uniform_subspace", "r": 8},
                "outliers": [{"kind": "close", "count": 20}],
            }
        )
        ds = gen_dataset(spec, RandomSource(seed=6))
        self.assertEqual(np.linalg.matrix_rank(ds.data, tol=1e-8), 10)
        np.testing.assert_allclose(np.linalg.norm(ds.data, axis=0), 1.0, atol=1e-12)

    def test_union_membership(self):
        spec = ModelSpec.model_validate(
            {"m1": 20, "n_i": 45, "inlier": {"kind": "union", "m": 3, "d": 2}}
        )
        ds = gen_dataset(spec, RandomSource(seed=7))
        self.assertEqual(ds.truth_basis.dim, 6)
        subs = [orthonormal_basis(ds.data[:, ds.groups == k]) for k in range(3)]
        for k, sub in enumerate(subs):
            self.assertEqual(sub.dim, 2)
            for j in range(3):
                resid = np.linalg.norm(sub.residual(ds.data[:, ds.groups == j]), axis=0)
                if j == k:
                    self.assertLessEqual(resid.max(), 1e-10)
                else:
                    self.assertGreater(resid.min(), 0.1 - 1e-9)

    def test_clustered_inliers(self):
        spec = ModelSpec.model_validate(
            {
                "m1": 30,
                "n_i": 25,
                "inlier": {"kind": "clustered", "r": 4, "gamma": 0.25},
            }
        )
        ds = gen_dataset(spec, RandomSource(seed=8))
        np.testing.assert_allclose(np.linalg.norm(ds.data, axis=0), 1.0, atol=1e-12)
        resid = np.linalg.norm(ds.truth_basis.residual(ds.data), axis=0)
        self.assertLessEqual(resid.max(), 1e-10)

    def test_same_seed_same_dataset(self):
        first = gen_dataset(fig1_spec(), RandomSource(seed=9))
        second = gen_dataset(fig1_spec(), RandomSource(seed=9))
        self.assertTrue(np.array_equal(first.data, second.data))
        self.assertTrue(np.array_equal(first.labels, second.labels))


class TestInfeasible(unittest.TestCase):
    def test_rank_above_ambient(self):
        with self.assertRaises(ValidationError) as ctx:
            ModelSpec.model_validate(
                {"m1": 5, "n_i": 10, "inlier": {"kind": "uniform_subspace", "r": 7}}
            )
        self.assertIn("inlier.r", str(ctx.exception))

    def test_dependent_dimensions(self):
        base = {"m1": 10, "n_i": 10, "inlier": {"kind": "uniform_subspace", "r": 3}}
        for outlier in (
            {"kind": "dependent", "count": 5, "r_o": 12},
            {"kind": "dependent", "count": 5, "r_o": 2, "intersect_dim": 3},
        ):
            with self.assertRaises(ValidationError):
                ModelSpec.model_validate({**base, "outliers": [outlier]})

    def test_union_counts(self):
        with self.assertRaises(ValidationError):
            ModelSpec.model_validate(
                {
                    "m1": 20,
                    "n_i": 10,
                    "inlier": {"kind": "union", "m": 2, "d": 2, "counts": [3, 3]},
                }
            )

    def test_non_positive_eta(self):
        with self.assertRaises(ValidationError):
            ModelSpec.model_validate(
                {
                    "m1": 20,
                    "n_i": 10,
                    "inlier": {"kind": "uniform_subspace", "r": 2},
                    "outliers": [{"kind": "clustered", "count": 3, "eta": 0.0}],
                }
            )


class TestNoise(unittest.TestCase):
    def test_zero_noise(self):
        ds = gen_dataset(fig1_spec(), RandomSource(seed=10))
        same = apply_noise(ds, 0.0, RandomSource(seed=11))
        self.assertTrue(np.array_equal(same.data, ds.data))

    def test_snr_four(self):
        """
        Noise is drawn after the clean data, so the clean twin shares the seed
        """
        clean = gen_dataset(fig1_spec(), RandomSource(seed=12))
        noisy = gen_dataset(fig1_spec(snr=4), RandomSource(seed=12))
        sigma = noisy.spec.noise_level
        self.assertAlmostEqual(sigma, 0.5)
        inl = clean.labels == INLIER
        a = clean.data[:, inl]
        e = noisy.data[:, inl] * (1 + sigma**2) - a
        snr = np.linalg.norm(a) ** 2 / np.linalg.norm(e) ** 2
        self.assertLess(abs(snr - 4.0), 0.4)
        self.assertTrue(np.array_equal(clean.data[:, ~inl], noisy.data[:, ~inl]))

    def test_noisy_residual_bound(self):
        sigma = 0.3
        ds = gen_dataset(fig1_spec(sigma_n=sigma), RandomSource(seed=13))
        resid = np.linalg.norm(
            ds.truth_basis.residual(ds.data[:, ds.labels == INLIER]), axis=0
        )
        self.assertTrue(np.all(resid <= sigma / (1 + sigma**2) + 1e-12))


class TestLabels(unittest.TestCase):
    def test_corrupt_exact_fraction(self):
        labels = np.repeat(np.arange(3), 30)
        bad = corrupt_labels(labels, 0.25, 3, RandomSource(seed=14))
        self.assertEqual(int(np.sum(bad != labels)), 22)
        self.assertTrue(np.all((bad >= 0) & (bad < 3)))

    def test_save_and_load(self):
        ds = gen_dataset(fig1_spec(), RandomSource(seed=15))
        with tempfile.TemporaryDirectory() as tmp:
            save_dataset(ds, tmp)
            for name in ("data.csv", "labels.csv", "basis.csv", "meta.json"):
                self.assertTrue(os.path.isfile(os.path.join(tmp, name)))
            with open(os.path.join(tmp, "meta.json")) as fo:
                meta = json.load(fo)
            self.assertEqual(meta["seed"], 15)
            back = load_dataset(tmp)
        self.assertTrue(np.array_equal(back.data, ds.data))
        self.assertTrue(np.array_equal(back.labels, ds.labels))
        self.assertTrue(np.array_equal(back.permutation, ds.permutation))
        self.assertEqual(back.spec, ds.spec)
