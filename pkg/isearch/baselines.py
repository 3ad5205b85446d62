"""
baselines.py: coherence pursuit and plain PCA, for comparison
"""

from dataclasses import dataclass

import numpy as np

from .core import ADD_TOL_NOISELESS, PreprocessedData, RecoveryResult, span_in_order
from .matstore import SubspaceBasis, orthonormal_basis, svd_thin
from .typed import DataMatrix, IntVector, Vector
from .utils import InvalidInput


@dataclass(kw_only=True, slots=True)
class CoherenceProfile:
    """
    Higher value = more inlier-like
    """

    values: Vector

    def order(self) -> IntVector:
        """
        Column indices by decreasing coherence, ties by index
        """
        return np.argsort(-self.values, kind="stable").astype(np.int64)


def coherence_values(pre: PreprocessedData, p: int = 2) -> CoherenceProfile:
    """
    value(i) = sum over k != i of |d_i^T d_k|^p
    """
    if p not in (1, 2):
        raise InvalidInput(f"Coherence power must be 1 or 2: {p}")
    gram = np.abs(pre.reduced.T @ pre.reduced) ** p
    np.fill_diagonal(gram, 0.0)
    return CoherenceProfile(values=gram.sum(axis=0))


def pca_recover(d: DataMatrix, r: int) -> SubspaceBasis:
    """
    Top-r left singular vectors
    """
    u, _, _ = svd_thin(d)
    if not 1 <= r <= u.shape[1]:
        raise InvalidInput(f"r must be in [1, {u.shape[1]}]: {r}")
    return SubspaceBasis(basis=np.ascontiguousarray(u[:, :r]))


def cop_recover(
    pre: PreprocessedData,
    profile: CoherenceProfile,
    r: int,
    add_tol: float = ADD_TOL_NOISELESS,
) -> RecoveryResult:
    """
    Span of the most coherent columns, skipping near-duplicates
    """
    y, selected = span_in_order(pre, profile.order(), r, add_tol)
    return RecoveryResult(
        basis=orthonormal_basis(pre.projector @ y), selected_columns=selected
    )
