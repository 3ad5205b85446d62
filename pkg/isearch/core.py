"""
core.py: outlier detection and subspace recovery by innovation search

The pipeline, in order:

    preprocess       project onto the top r_d left singular vectors, normalise
    solve_all        optimal direction c*_i for every column (innovation_solver)
    innovation_values  x(i) = 1 / ||D^T c*_i||_1
    build_basis_*    span of the lowest-innovation columns
    detect_outliers  relative residual of each column against that span

run_isearch strings these together and is what the cli, evalkit and cluster
correction call.
"""

import logging

from dataclasses import dataclass, field

import numpy as np

from .configure import MethodConfig, SolverConfig
from .innovation_solver import DirectionSet, SolverOptions, solve_all
from .log import logged
from .matstore import (
    SubspaceBasis,
    check_finite,
    column_norms,
    normalize_columns_unit,
    orthonormal_basis,
    svd_thin,
)
from .typed import BoolVector, DataMatrix, IntVector, Vector
from .utils import InvalidInput, RankDeficient, env_float

logger = logging.getLogger(__name__)

ADD_TOL_NOISELESS = 1e-3
ADD_TOL_NOISY = 5e-2
FRACTION_RANK_TOL = 1e-8
PROFILE_SLACK = 1e-9


@dataclass(kw_only=True, slots=True)
class PreprocessedData:
    """
    reduced = normalize(Q^T D); Q is M1 x r_d with orthonormal columns
    """

    reduced: DataMatrix
    projector: DataMatrix
    rank: int
    original_norms: Vector

    @property
    def num_columns(self) -> int:
        return int(self.reduced.shape[1])


@dataclass(kw_only=True, slots=True)
class InnovationProfile:
    values: Vector

    def __post_init__(self) -> None:
        if np.any(self.values <= 0) or np.any(self.values > 1 + PROFILE_SLACK):
            bad = np.flatnonzero((self.values <= 0) | (self.values > 1 + PROFILE_SLACK))
            msg = f"Innovation value out of (0, 1] at column {int(bad[0])}"
            raise InvalidInput(msg)

    def order(self) -> IntVector:
        """
        Column indices by increasing innovation value, ties by index
        """
        return np.argsort(self.values, kind="stable").astype(np.int64)


@dataclass(kw_only=True, slots=True)
class RecoveryResult:
    basis: SubspaceBasis
    selected_columns: IntVector
    # None when the ranking was not an innovation profile (CoP)
    profile: InnovationProfile | None = None


@dataclass(kw_only=True, slots=True)
class OutlierVerdicts:
    """
    scores[k] = ||(I - UU^T) d_k|| / ||d_k||; outlier iff score >= threshold
    """

    scores: Vector
    outliers: BoolVector
    threshold: float


@dataclass(kw_only=True, slots=True)
class IsearchOptions:
    rank_ratio: float = field(
        default_factory=lambda: env_float("ISEARCH_RANK_RATIO", 1e-4)
    )
    reduce: bool = True
    # r_d; None: estimated from the spectrum
    reduced_rank: int | None = None
    # None: ADD_TOL_NOISELESS
    add_tol: float | None = None
    # None: adaptive column sampling
    keep_fraction: float | None = None
    residual_threshold: float = 0.2
    solver: SolverOptions = field(default_factory=SolverOptions)


@dataclass(kw_only=True, slots=True)
class IsearchRun:
    pre: PreprocessedData
    directions: DirectionSet
    profile: InnovationProfile
    recovery: RecoveryResult
    verdicts: OutlierVerdicts


def solver_options(
    cfg: SolverConfig | None = None, threads: int | None = None
) -> SolverOptions:
    """
    Environment defaults overridden by whatever the config sets
    """
    opts = SolverOptions()
    if cfg is not None:
        for name, value in cfg.model_dump(exclude_none=True).items():
            setattr(opts, name, value)
    if threads is not None:
        opts.threads = max(1, threads)
    return opts


def isearch_options(
    method: MethodConfig | None = None,
    solver: SolverConfig | None = None,
    threads: int | None = None,
    noisy: bool = False,
) -> IsearchOptions:
    method = method or MethodConfig()
    opts = IsearchOptions(
        reduce=method.reduce,
        add_tol=method.add_tol,
        keep_fraction=method.keep_fraction,
        residual_threshold=method.residual_threshold,
        solver=solver_options(solver, threads),
    )
    if method.rank_ratio is not None:
        opts.rank_ratio = method.rank_ratio
    if opts.add_tol is None and noisy:
        opts.add_tol = ADD_TOL_NOISY
    return opts


def estimate_rank(singular_values: Vector, threshold_ratio: float) -> int:
    """
    Number of singular values above threshold_ratio * s_1, at least one
    """
    s = np.asarray(singular_values, dtype=np.float64)
    if not 0 < threshold_ratio < 1:
        raise InvalidInput(f"threshold_ratio must be in (0, 1): {threshold_ratio}")
    if s.size == 0 or s[0] <= 0:
        raise InvalidInput("Cannot estimate the rank of an all-zero spectrum")
    return max(1, int(np.sum(s > threshold_ratio * s[0])))


@logged
def preprocess(
    d: DataMatrix,
    rank_ratio: float = 1e-4,
    reduce: bool = True,
    rank: int | None = None,
) -> PreprocessedData:
    """
    Reduce to the numerical column space and normalise columns

    rank overrides the spectral estimate of r_d; reduce=False keeps Q = I
    """
    arr = check_finite(d, what="data")
    norms = column_norms(arr)
    # fail on zero columns of the input, before any projection
    normalize_columns_unit(arr)
    if not reduce:
        q = np.eye(arr.shape[0])
        return PreprocessedData(
            reduced=arr / norms,
            projector=q,
            rank=arr.shape[0],
            original_norms=norms,
        )
    u, s, _ = svd_thin(arr)
    r_d = rank if rank is not None else estimate_rank(s, rank_ratio)
    if not 1 <= r_d <= s.size:
        raise InvalidInput(f"Reduced rank must be in [1, {s.size}]: {r_d}")
    q = np.ascontiguousarray(u[:, :r_d])
    reduced = normalize_columns_unit(q.T @ arr)
    logger.debug("Preprocessed data", extra={"shape": arr.shape, "r_d": r_d})
    return PreprocessedData(
        reduced=reduced, projector=q, rank=r_d, original_norms=norms
    )


def innovation_values(pre: PreprocessedData, dirs: DirectionSet) -> InnovationProfile:
    if dirs.objectives.size != pre.num_columns:
        msg = f"{dirs.objectives.size} directions for {pre.num_columns} columns"
        raise InvalidInput(msg)
    return InnovationProfile(values=1.0 / dirs.objectives)


def span_in_order(
    pre: PreprocessedData, order: IntVector, r: int, add_tol: float
) -> tuple[DataMatrix, IntVector]:
    """
    Walk columns in `order`, keeping each one whose residual against the
    kept ones exceeds add_tol, until r are kept

    Returns an orthonormal basis of the kept columns in reduced coordinates
    """
    if r < 1:
        raise InvalidInput(f"r must be positive: {r}")
    if r > pre.rank:
        raise RankDeficient(pre.rank, r)
    partial = np.zeros((pre.rank, 0))
    selected: list[int] = []
    for idx in order:
        col = pre.reduced[:, idx]
        resid = col - partial @ (partial.T @ col)
        # second pass keeps the partial basis orthonormal to working precision
        resid = resid - partial @ (partial.T @ resid)
        norm = float(np.linalg.norm(resid))
        if norm <= add_tol:
            continue
        partial = np.column_stack([partial, resid / norm])
        selected.append(int(idx))
        if len(selected) == r:
            break
    if len(selected) < r:
        raise RankDeficient(len(selected), r)
    y, _ = np.linalg.qr(pre.reduced[:, selected])
    return y, np.asarray(selected, dtype=np.int64)


def build_basis_adaptive(
    pre: PreprocessedData,
    profile: InnovationProfile,
    r: int,
    add_tol: float = ADD_TOL_NOISELESS,
) -> RecoveryResult:
    y, selected = span_in_order(pre, profile.order(), r, add_tol)
    basis = orthonormal_basis(pre.projector @ y)
    return RecoveryResult(basis=basis, selected_columns=selected, profile=profile)


def build_basis_fraction(
    pre: PreprocessedData, profile: InnovationProfile, keep_fraction: float
) -> RecoveryResult:
    """
    Span of the floor(keep_fraction * M2) lowest-innovation columns
    """
    if not 0 < keep_fraction < 1:
        raise InvalidInput(f"keep_fraction must be in (0, 1): {keep_fraction}")
    keep = int(np.floor(keep_fraction * pre.num_columns))
    if keep < 1:
        raise InvalidInput(f"keep_fraction {keep_fraction} keeps no columns")
    selected = profile.order()[:keep]
    span = orthonormal_basis(pre.reduced[:, selected], rel_tol=FRACTION_RANK_TOL)
    basis = orthonormal_basis(pre.projector @ span.basis)
    return RecoveryResult(basis=basis, selected_columns=selected, profile=profile)


def detect_outliers(
    d: DataMatrix, basis: SubspaceBasis, residual_threshold: float = 0.2
) -> OutlierVerdicts:
    arr = check_finite(d, what="data")
    if arr.shape[0] != basis.ambient:
        msg = f"Data has {arr.shape[0]} rows, basis has {basis.ambient}"
        raise InvalidInput(msg)
    norms = column_norms(arr)
    resid = column_norms(basis.residual(arr))
    scores = np.divide(resid, norms, out=np.zeros_like(resid), where=norms > 0)
    scores = np.clip(scores, 0.0, 1.0)
    return OutlierVerdicts(
        scores=scores,
        outliers=scores >= residual_threshold,
        threshold=residual_threshold,
    )


def flag_top_innovation(profile: InnovationProfile, n_outliers: int) -> BoolVector:
    """
    The n_outliers columns with the largest innovation values
    """
    n = profile.values.size
    if not 0 <= n_outliers <= n:
        raise InvalidInput(f"n_outliers must be in [0, {n}]: {n_outliers}")
    flags = np.zeros(n, dtype=bool)
    flags[np.argsort(-profile.values, kind="stable")[:n_outliers]] = True
    return flags


@logged
def run_isearch(d: DataMatrix, r: int, opts: IsearchOptions | None = None) -> IsearchRun:
    """
    Outlier branch end to end: directions, profile, basis, verdicts
    """
    opts = opts or IsearchOptions()
    pre = preprocess(
        d, rank_ratio=opts.rank_ratio, reduce=opts.reduce, rank=opts.reduced_rank
    )
    dirs = solve_all(pre.reduced, opts.solver)
    profile = innovation_values(pre, dirs)
    if opts.keep_fraction is None:
        add_tol = ADD_TOL_NOISELESS if opts.add_tol is None else opts.add_tol
        recovery = build_basis_adaptive(pre, profile, r, add_tol)
    else:
        recovery = build_basis_fraction(pre, profile, opts.keep_fraction)
    verdicts = detect_outliers(d, recovery.basis, opts.residual_threshold)
    extra = {
        "r_d": pre.rank,
        "r": recovery.basis.dim,
        "flagged": int(verdicts.outliers.sum()),
    }
    logger.info("Innovation search finished", extra=extra)
    return IsearchRun(
        pre=pre,
        directions=dirs,
        profile=profile,
        recovery=recovery,
        verdicts=verdicts,
    )
