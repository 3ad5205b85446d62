"""
matstore.py: dense linear algebra, seeded sampling and matrix CSV I/O

Everything else in the package goes through these helpers, so the
conventions live here: data points are columns, matrices are float64,
and randomness only ever comes from a RandomSource.

RandomSource wraps NumPy's counter-based Philox bit generator. Gaussian
draws use NumPy's ziggurat sampler over that stream, and sphere samples are
normalised Gaussian vectors, so a seed reproduces the same matrices on any
platform running the same NumPy.
"""

import os

from dataclasses import dataclass, field

import numpy as np

from .typed import DataMatrix, Vector
from .utils import InvalidInput, ZeroColumn

ZERO_COLUMN_TOL = 1e-14
ORTHO_TOL = 1e-10


@dataclass(kw_only=True, slots=True)
class RandomSource:
    """
    Seeded, single-owner random stream
    """

    seed: int
    generator: np.random.Generator = field(init=False, repr=False)

    def __post_init__(self) -> None:
        if self.seed < 0 or self.seed >= 2**64:
            raise InvalidInput(f"Seed must be an unsigned 64-bit integer: {self.seed}")
        self.generator = np.random.Generator(np.random.Philox(self.seed))

    def normal(self, *shape: int) -> DataMatrix:
        return self.generator.standard_normal(shape)

    def permutation(self, n: int) -> np.ndarray:
        return self.generator.permutation(n)

    def choice(self, n: int, size: int) -> np.ndarray:
        """
        `size` distinct indices out of range(n)
        """
        return self.generator.choice(n, size=size, replace=False)

    def integers(self, low: int, high: int, size: int | None = None) -> np.ndarray:
        return self.generator.integers(low, high, size=size)

    def child_seed(self) -> int:
        """
        A fresh 31-bit seed for libraries that only take int seeds (sklearn)
        """
        return int(self.generator.integers(0, 2**31 - 1))


def spawn_seed(master: int, *key: int) -> int:
    """
    Derive a 64-bit seed for (cell, trial, ...) from a master seed
    """
    seq = np.random.SeedSequence(master, spawn_key=tuple(int(k) for k in key))
    return int(seq.generate_state(1, np.uint64)[0])


@dataclass(kw_only=True, slots=True)
class SubspaceBasis:
    """
    Orthonormal M1 x r basis of a recovered or ground-truth subspace
    """

    basis: DataMatrix

    def __post_init__(self) -> None:
        if self.basis.ndim != 2 or self.basis.shape[1] < 1:
            raise InvalidInput(f"Basis needs at least one column: {self.basis.shape}")
        gram = self.basis.T @ self.basis
        err = np.max(np.abs(gram - np.eye(gram.shape[0])))
        if err > ORTHO_TOL:
            raise InvalidInput(f"Basis columns are not orthonormal ({err:.3g})")

    @property
    def dim(self) -> int:
        return int(self.basis.shape[1])

    @property
    def ambient(self) -> int:
        return int(self.basis.shape[0])

    def projector(self) -> DataMatrix:
        return self.basis @ self.basis.T

    def residual(self, m: DataMatrix) -> DataMatrix:
        """
        (I - BB^T) m
        """
        return m - self.basis @ (self.basis.T @ m)


def check_finite(m: DataMatrix, what: str = "matrix") -> DataMatrix:
    arr = np.asarray(m, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise InvalidInput(f"{what} must be a non-empty 2-d array, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InvalidInput(f"{what} contains non-finite entries")
    return arr


def svd_thin(m: DataMatrix) -> tuple[DataMatrix, Vector, DataMatrix]:
    """
    Thin SVD m = U diag(s) V^T, singular values descending

    Returns (U, s, V) with V (not V^T) so both factors hold vectors as columns
    """
    arr = check_finite(m)
    u, s, vt = np.linalg.svd(arr, full_matrices=False)
    return u, s, vt.T


def column_norms(m: DataMatrix) -> Vector:
    return np.linalg.norm(m, axis=0)


def normalize_columns_unit(m: DataMatrix) -> DataMatrix:
    """
    Scale every column to unit l2 norm
    """
    arr = check_finite(m)
    norms = column_norms(arr)
    small = np.flatnonzero(norms < ZERO_COLUMN_TOL)
    if small.size:
        idx = int(small[0])
        raise ZeroColumn(idx, float(norms[idx]))
    return arr / norms


def sample_unit_sphere(rng: RandomSource, dim: int, count: int) -> DataMatrix:
    """
    `count` points drawn uniformly from the unit sphere in R^dim
    """
    if dim < 1 or count < 1:
        raise InvalidInput(f"dim and count must be positive: {dim}, {count}")
    g = rng.normal(dim, count)
    # a Gaussian column is never exactly zero in practice; redraw if it is
    norms = column_norms(g)
    while np.any(norms < ZERO_COLUMN_TOL):
        bad = norms < ZERO_COLUMN_TOL
        g[:, bad] = rng.normal(dim, int(bad.sum()))
        norms = column_norms(g)
    return g / norms


def orthonormal_basis(columns: DataMatrix, rel_tol: float = 1e-8) -> SubspaceBasis:
    """
    Orthonormal basis of the numerical column space (s_i > rel_tol * s_1)
    """
    u, s, _ = svd_thin(columns)
    if s[0] <= 0:
        raise InvalidInput("Cannot build a basis from an all-zero matrix")
    rank = max(1, int(np.sum(s > rel_tol * s[0])))
    return SubspaceBasis(basis=np.ascontiguousarray(u[:, :rank]))


def random_orthonormal(rng: RandomSource, dim: int, r: int) -> SubspaceBasis:
    """
    Uniformly random r-dimensional subspace of R^dim
    """
    if r < 1 or r > dim:
        raise InvalidInput(f"Need 1 <= r <= dim, got r={r}, dim={dim}")
    q, rr = np.linalg.qr(rng.normal(dim, r))
    # sign fix makes the basis (not just the span) Haar distributed
    q = q * np.sign(np.where(np.diag(rr) == 0, 1.0, np.diag(rr)))
    return SubspaceBasis(basis=q)


def read_matrix_csv(path: str) -> DataMatrix:
    """
    One matrix row per line, comma separated, no header
    """
    if not os.path.isfile(path):
        raise InvalidInput(f"No such matrix file: {path}")
    try:
        arr = np.loadtxt(path, delimiter=",", dtype=np.float64, ndmin=2)
    except ValueError as err:
        raise InvalidInput(f"Could not parse {path}: {err}") from err
    return check_finite(arr, what=path)


def write_matrix_csv(path: str, m: DataMatrix) -> None:
    arr = np.asarray(m, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[:, None]
    folder = os.path.dirname(os.path.abspath(path))
    os.makedirs(folder, exist_ok=True)
    np.savetxt(path, arr, delimiter=",", fmt="%.17g")
