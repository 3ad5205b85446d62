"""
synthgen.py: synthetic data models with ground-truth labels

Inliers come from one of three models (uniform on a subspace, union of
subspaces, a cluster inside a subspace); outliers from any mix of four
(uniform in the ambient space, a cluster around q, a second subspace U_o,
close to U via [U H]G). Columns are stored as [B A] and then shuffled by a
recorded permutation, so labels, groups and the permutation always agree.
"""

import json
import logging
import os

from dataclasses import dataclass, replace

import numpy as np

from .configure import (
    CloseOutliers,
    ClusteredInliers,
    ClusteredOutliers,
    DependentOutliers,
    ModelSpec,
    UniformAmbient,
    UniformOnSubspace,
    UnionOfSubspaces,
    check_model,
)
from .matstore import (
    RandomSource,
    SubspaceBasis,
    column_norms,
    orthonormal_basis,
    random_orthonormal,
    read_matrix_csv,
    sample_unit_sphere,
    write_matrix_csv,
)
from .typed import INLIER, OUTLIER, DataMatrix, IntVector
from .utils import CustomEncoder, InvalidInput, InvalidSpec

logger = logging.getLogger(__name__)

# a union draw is redone when an inlier sits this close to a foreign subspace
UNION_SEPARATION = 0.1
MAX_REDRAWS = 50


@dataclass(kw_only=True, slots=True)
class Dataset:
    """
    Generated data plus everything needed to score a method on it
    """

    data: DataMatrix
    labels: IntVector
    truth_basis: SubspaceBasis
    # union subspace index for inliers (0 otherwise), -1 for outliers
    groups: IntVector
    # column j of data is column permutation[j] of the [B A] block layout
    permutation: IntVector
    spec: ModelSpec
    seed: int | None = None

    @property
    def n_i(self) -> int:
        return int(np.sum(self.labels == INLIER))

    @property
    def n_o(self) -> int:
        return int(np.sum(self.labels == OUTLIER))

    @property
    def outlier_mask(self) -> np.ndarray:
        return self.labels == OUTLIER

    def unpermuted(self) -> DataMatrix:
        """
        Columns back in the generation layout [B A]
        """
        return self.data[:, np.argsort(self.permutation)]

    def meta(self) -> dict:
        return {
            "spec": self.spec.model_dump(mode="json"),
            "seed": self.seed,
            "n_i": self.n_i,
            "n_o": self.n_o,
            "r": self.truth_basis.dim,
            "noise": self.spec.noise_level,
            "groups": self.groups.tolist(),
            "permutation": self.permutation.tolist(),
        }


def _split_counts(total: int, parts: int) -> list[int]:
    base, extra = divmod(total, parts)
    return [base + (1 if k < extra else 0) for k in range(parts)]


def _uniform_in(rng: RandomSource, basis: SubspaceBasis, count: int) -> DataMatrix:
    """
    Points uniform on the unit sphere of span(basis)
    """
    if count == 0:
        return np.zeros((basis.ambient, 0))
    return basis.basis @ sample_unit_sphere(rng, basis.dim, count)


def _complement_directions(
    rng: RandomSource, basis: SubspaceBasis, k: int
) -> DataMatrix:
    """
    k random orthonormal directions orthogonal to span(basis)
    """
    if k == 0:
        return np.zeros((basis.ambient, 0))
    g = basis.residual(rng.normal(basis.ambient, k))
    # twice, so the result is orthogonal to working precision
    g = basis.residual(np.linalg.qr(g)[0])
    return np.linalg.qr(g)[0]


def _inliers_uniform(
    model: UniformOnSubspace, spec: ModelSpec, rng: RandomSource
) -> tuple[DataMatrix, SubspaceBasis, IntVector]:
    basis = random_orthonormal(rng, spec.m1, model.r)
    return _uniform_in(rng, basis, spec.n_i), basis, np.zeros(spec.n_i, dtype=np.int64)


def _inliers_union(
    model: UnionOfSubspaces, spec: ModelSpec, rng: RandomSource
) -> tuple[DataMatrix, SubspaceBasis, IntVector]:
    counts = model.counts or _split_counts(spec.n_i, model.m)
    groups = np.repeat(np.arange(model.m), counts).astype(np.int64)
    for attempt in range(MAX_REDRAWS):
        subs = [random_orthonormal(rng, spec.m1, model.d) for _ in range(model.m)]
        blocks = [_uniform_in(rng, sub, n) for sub, n in zip(subs, counts)]
        stacked = np.hstack([sub.basis for sub in subs])
        full = np.linalg.matrix_rank(stacked, tol=1e-8) == model.r
        separated = all(
            np.all(column_norms(other.residual(block)) >= UNION_SEPARATION)
            for k, block in enumerate(blocks)
            for j, other in enumerate(subs)
            if j != k and block.shape[1]
        )
        if full and separated:
            basis = orthonormal_basis(stacked)
            return np.hstack(blocks), basis, groups
        logger.debug("Degenerate union draw, retrying", extra={"attempt": attempt})
    raise InvalidSpec(f"Could not draw a separated union after {MAX_REDRAWS} tries")


def _inliers_clustered(
    model: ClusteredInliers, spec: ModelSpec, rng: RandomSource
) -> tuple[DataMatrix, SubspaceBasis, IntVector]:
    basis = random_orthonormal(rng, spec.m1, model.r)
    w = sample_unit_sphere(rng, model.r, 1)
    groups = np.zeros(spec.n_i, dtype=np.int64)
    if spec.n_i == 0:
        return np.zeros((spec.m1, 0)), basis, groups
    s = w + model.gamma * sample_unit_sphere(rng, model.r, spec.n_i)
    a = basis.basis @ s
    norms = column_norms(a)
    if np.any(norms < 1e-12):
        raise InvalidSpec("inlier.gamma: a clustered inlier collapsed to zero")
    return a / norms, basis, groups


def _outliers(
    out: UniformAmbient | ClusteredOutliers | DependentOutliers | CloseOutliers,
    truth: SubspaceBasis,
    spec: ModelSpec,
    rng: RandomSource,
) -> DataMatrix:
    m1 = spec.m1
    if out.count == 0:
        return np.zeros((m1, 0))
    if isinstance(out, UniformAmbient):
        return sample_unit_sphere(rng, m1, out.count)
    if isinstance(out, ClusteredOutliers):
        if out.q_mode == "near_subspace":
            p = sample_unit_sphere(rng, m1, 1)
            h = rng.normal(truth.dim + 1, 1)
            q = np.hstack([truth.basis, p]) @ h
            q = q / np.linalg.norm(q)
        else:
            q = sample_unit_sphere(rng, m1, 1)
        v = sample_unit_sphere(rng, m1, out.count)
        return (q + out.eta * v) / np.sqrt(1.0 + out.eta**2)
    if isinstance(out, DependentOutliers):
        shared = truth.basis[:, : out.intersect_dim]
        fresh = _complement_directions(rng, truth, out.r_o - out.intersect_dim)
        u_o = orthonormal_basis(np.hstack([shared, fresh]))
        return _uniform_in(rng, u_o, out.count)
    if isinstance(out, CloseOutliers):
        h = rng.normal(m1, out.extra_dim)
        g = rng.normal(truth.dim + out.extra_dim, out.count)
        b = np.hstack([truth.basis, h]) @ g
        return b / column_norms(b)
    raise InvalidSpec(f"Unknown outlier model: {out}")


def gen_dataset(spec: ModelSpec, rng: RandomSource) -> Dataset:
    """
    Draw a dataset honouring `spec` exactly (before noise, which is applied here too)
    """
    check_model(spec)
    inlier = spec.inlier
    if isinstance(inlier, UniformOnSubspace):
        a, truth, inlier_groups = _inliers_uniform(inlier, spec, rng)
    elif isinstance(inlier, UnionOfSubspaces):
        a, truth, inlier_groups = _inliers_union(inlier, spec, rng)
    elif isinstance(inlier, ClusteredInliers):
        a, truth, inlier_groups = _inliers_clustered(inlier, spec, rng)
    else:
        raise InvalidSpec(f"Unknown inlier model: {inlier}")

    blocks = [_outliers(out, truth, spec, rng) for out in spec.outliers]
    b = np.hstack(blocks) if blocks else np.zeros((spec.m1, 0))
    layout = np.hstack([b, a])
    labels = np.concatenate(
        [np.full(b.shape[1], OUTLIER), np.full(a.shape[1], INLIER)]
    ).astype(np.int64)
    groups = np.concatenate(
        [np.full(b.shape[1], -1, dtype=np.int64), inlier_groups]
    ).astype(np.int64)

    perm = rng.permutation(layout.shape[1]).astype(np.int64)
    ds = Dataset(
        data=np.ascontiguousarray(layout[:, perm]),
        labels=labels[perm],
        truth_basis=truth,
        groups=groups[perm],
        permutation=perm,
        spec=spec,
        seed=rng.seed,
    )
    if spec.noise_level > 0:
        ds = apply_noise(ds, spec.noise_level, rng)
    return ds


def apply_noise(ds: Dataset, sigma_n: float, rng: RandomSource) -> Dataset:
    """
    Inlier a -> (a + sigma_n u) / (1 + sigma_n^2), u uniform on the sphere

    The divisor is 1 + sigma_n^2 as written in the noise model, not its square root
    """
    if sigma_n < 0:
        raise InvalidInput(f"sigma_n must be non-negative: {sigma_n}")
    if sigma_n == 0:
        return ds
    inliers = np.flatnonzero(ds.labels == INLIER)
    data = ds.data.copy()
    if inliers.size:
        u = sample_unit_sphere(rng, data.shape[0], inliers.size)
        data[:, inliers] = (data[:, inliers] + sigma_n * u) / (1.0 + sigma_n**2)
    return replace(ds, data=data)


def corrupt_labels(
    labels: IntVector, fraction: float, num_clusters: int, rng: RandomSource
) -> IntVector:
    """
    Move exactly floor(fraction * n) random columns to a different cluster
    """
    if not 0 <= fraction < 1:
        raise InvalidInput(f"fraction must be in [0, 1): {fraction}")
    if num_clusters < 2:
        return labels.copy()
    out = labels.copy()
    n_bad = int(np.floor(fraction * labels.size))
    picked = rng.choice(labels.size, n_bad)
    shifts = rng.integers(1, num_clusters, size=n_bad)
    out[picked] = (labels[picked] + shifts) % num_clusters
    return out


def save_dataset(ds: Dataset, folder: str) -> None:
    """
    Write data.csv, labels.csv, basis.csv and meta.json into folder
    """
    os.makedirs(folder, exist_ok=True)
    write_matrix_csv(os.path.join(folder, "data.csv"), ds.data)
    np.savetxt(os.path.join(folder, "labels.csv"), ds.labels, fmt="%d")
    write_matrix_csv(os.path.join(folder, "basis.csv"), ds.truth_basis.basis)
    with open(os.path.join(folder, "meta.json"), "w") as fo:
        json.dump(ds.meta(), fo, indent=2, cls=CustomEncoder)


def load_dataset(folder: str) -> Dataset:
    with open(os.path.join(folder, "meta.json")) as fo:
        meta = json.load(fo)
    labels = np.loadtxt(os.path.join(folder, "labels.csv"), dtype=np.int64, ndmin=1)
    return Dataset(
        data=read_matrix_csv(os.path.join(folder, "data.csv")),
        labels=labels,
        truth_basis=SubspaceBasis(
            basis=read_matrix_csv(os.path.join(folder, "basis.csv"))
        ),
        groups=np.asarray(meta["groups"], dtype=np.int64),
        permutation=np.asarray(meta["permutation"], dtype=np.int64),
        spec=ModelSpec.model_validate(meta["spec"]),
        seed=meta.get("seed"),
    )
