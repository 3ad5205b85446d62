"""
cluster.py: clustering with innovation affinities, and cluster error correction

isearch_cluster builds W = |C*^T D| from the optimal directions, symmetrises
it and runs normalised spectral clustering. correct_clusters takes an
existing (noisy) clustering, recovers one subspace per cluster with
innovation search and reassigns every point to the subspace it projects
onto most strongly.
"""

import logging

from dataclasses import dataclass

import numpy as np

from scipy.linalg import eigh
from scipy.optimize import linear_sum_assignment
from sklearn.cluster import KMeans
from sklearn.preprocessing import normalize

from .core import IsearchOptions, PreprocessedData, preprocess, run_isearch
from .innovation_solver import DirectionSet, solve_all
from .log import logged
from .matstore import RandomSource, SubspaceBasis, check_finite, column_norms
from .typed import DataMatrix, IntVector
from .utils import InvalidInput, IsolatedNode

logger = logging.getLogger(__name__)

KMEANS_RESTARTS = 10
SYMMETRY_TOL = 1e-12


@dataclass(kw_only=True, slots=True)
class AffinityMatrix:
    w: DataMatrix

    def __post_init__(self) -> None:
        if self.w.ndim != 2 or self.w.shape[0] != self.w.shape[1]:
            raise InvalidInput(f"Affinity must be square, got {self.w.shape}")
        if np.max(np.abs(self.w - self.w.T), initial=0.0) > SYMMETRY_TOL:
            raise InvalidInput("Affinity matrix is not symmetric")
        if np.any(self.w < 0):
            raise InvalidInput("Affinity matrix has negative entries")


@dataclass(kw_only=True, slots=True)
class Clustering:
    labels: IntVector
    num_clusters: int

    def __post_init__(self) -> None:
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.num_clusters < 1:
            raise InvalidInput(f"num_clusters must be positive: {self.num_clusters}")
        if np.any(self.labels < 0) or np.any(self.labels >= self.num_clusters):
            raise InvalidInput(f"Labels must be in [0, {self.num_clusters})")


def affinity_from_directions(
    pre: PreprocessedData, dirs: DirectionSet
) -> AffinityMatrix:
    """
    |C^T D| + |C^T D|^T with the (always 2) diagonal removed
    """
    a = np.abs(dirs.directions.T @ pre.reduced)
    w = a + a.T
    np.fill_diagonal(w, 0.0)
    return AffinityMatrix(w=w)


def spectral_cluster(w: AffinityMatrix, L: int, rng: RandomSource) -> Clustering:
    """
    k-means on the row-normalised bottom-L eigenvectors of I - D^-1/2 W D^-1/2
    """
    mat = w.w
    n = mat.shape[0]
    if not 1 <= L <= n:
        raise InvalidInput(f"Number of clusters must be in [1, {n}]: {L}")
    degree = mat.sum(axis=1)
    isolated = np.flatnonzero(degree <= 0)
    if isolated.size:
        raise IsolatedNode(int(isolated[0]))
    inv_sqrt = 1.0 / np.sqrt(degree)
    laplacian = np.eye(n) - inv_sqrt[:, None] * mat * inv_sqrt[None, :]
    laplacian = (laplacian + laplacian.T) / 2
    _, vectors = eigh(laplacian, subset_by_index=[0, L - 1])
    embedding = normalize(vectors, norm="l2", axis=1)
    km = KMeans(n_clusters=L, n_init=KMEANS_RESTARTS, random_state=rng.child_seed())
    labels = km.fit_predict(embedding)
    return Clustering(labels=labels.astype(np.int64), num_clusters=L)


def clustering_error(pred: IntVector, truth: IntVector) -> float:
    """
    Fraction of points misassigned under the best one-to-one label matching
    """
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape or pred.size == 0:
        raise InvalidInput(f"Label vectors differ: {pred.shape} vs {truth.shape}")
    _, pred_idx = np.unique(pred, return_inverse=True)
    _, true_idx = np.unique(truth, return_inverse=True)
    counts = np.zeros((pred_idx.max() + 1, true_idx.max() + 1))
    np.add.at(counts, (pred_idx, true_idx), 1)
    rows, cols = linear_sum_assignment(counts, maximize=True)
    return float(1.0 - counts[rows, cols].sum() / pred.size)


@logged
def isearch_cluster(
    d: DataMatrix, L: int, opts: IsearchOptions | None, rng: RandomSource
) -> Clustering:
    opts = opts or IsearchOptions()
    pre = preprocess(d, rank_ratio=opts.rank_ratio, reduce=opts.reduce)
    dirs = solve_all(pre.reduced, opts.solver)
    return spectral_cluster(affinity_from_directions(pre, dirs), L, rng)


@logged
def correct_clusters(
    clusters: list[DataMatrix],
    r_per_cluster: int | list[int],
    opts: IsearchOptions | None = None,
) -> tuple[list[SubspaceBasis], Clustering]:
    """
    Recover a subspace per cluster, then send each point to argmax_k ||d^T U_k||

    Relabeled columns follow the concatenation order of `clusters`; ties go
    to the lowest cluster index
    """
    if not clusters:
        raise InvalidInput("No clusters given")
    ranks = (
        [r_per_cluster] * len(clusters)
        if isinstance(r_per_cluster, int)
        else list(r_per_cluster)
    )
    if len(ranks) != len(clusters):
        raise InvalidInput(f"{len(ranks)} ranks for {len(clusters)} clusters")
    mats = [check_finite(c, what=f"cluster {k}") for k, c in enumerate(clusters)]
    bases = [run_isearch(c, r, opts).recovery.basis for c, r in zip(mats, ranks)]
    data = np.hstack(mats)
    energy = np.stack([column_norms(b.basis.T @ data) for b in bases])
    labels = np.argmax(energy, axis=0).astype(np.int64)
    logger.info(
        "Clusters corrected",
        extra={"clusters": len(mats), "columns": data.shape[1]},
    )
    return bases, Clustering(labels=labels, num_clusters=len(mats))


def correct_labeling(
    d: DataMatrix,
    labels: IntVector,
    num_clusters: int,
    r_per_cluster: int | list[int],
    opts: IsearchOptions | None = None,
) -> tuple[list[SubspaceBasis], Clustering]:
    """
    correct_clusters for a labelled data matrix; result in the column order of d
    """
    arr = check_finite(d, what="data")
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size != arr.shape[1]:
        raise InvalidInput(f"{labels.size} labels for {arr.shape[1]} columns")
    if np.any(labels < 0) or np.any(labels >= num_clusters):
        raise InvalidInput(f"Labels must be in [0, {num_clusters})")
    members = [np.flatnonzero(labels == k) for k in range(num_clusters)]
    empty = [k for k, m in enumerate(members) if m.size == 0]
    if empty:
        raise InvalidInput(f"Cluster {empty[0]} is empty")
    bases, grouped = correct_clusters([arr[:, m] for m in members], r_per_cluster, opts)
    relabeled = np.empty_like(labels)
    relabeled[np.concatenate(members)] = grouped.labels
    return bases, Clustering(labels=relabeled, num_clusters=num_clusters)
