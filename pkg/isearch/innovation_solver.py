"""
innovation_solver.py: the direction search program

For a column d of the (reduced, unit-column) data D, find

    c* = argmin ||D^T c||_1  subject to  c^T d = 1

by ADMM on the splitting z = D^T c:

    c <- argmin_{d^T c = 1} ||D^T c - z + u||^2   (closed form, KKT border)
    z <- soft_threshold(D^T c + u, 1 / rho)
    u <- u + D^T c - z

The c-step only needs G = D D^T, which does not depend on the target column
or on rho, so one Cholesky factorisation serves every column and survives
penalty changes. solve_all runs every column at once as matrix operations
and freezes columns as they converge.

Columns still short of the stopping rule after max_iters are finished
exactly (`polish`): the dual program

    max lam  subject to  D s = lam d,  -1 <= s <= 1

is a linear program with only r_d equality rows, and its equality
multipliers are c* up to scale. ADMM's own iterate is kept if it is better.

lp_oracle_direction solves the primal program as an LP (HiGHS dual simplex)
for small test problems; it shares no code with the solver path.
"""

import json
import logging
import time

from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from scipy.linalg import LinAlgError, cho_factor, cho_solve
from scipy.optimize import linprog

from .log import logged
from .matstore import check_finite, column_norms
from .typed import BoolVector, DataMatrix, IntVector, Vector
from .utils import (
    CustomEncoder,
    InvalidInput,
    IsearchError,
    SizeLimit,
    Unconverged,
    env_flag,
    env_float,
    env_int,
)

logger = logging.getLogger(__name__)

UNIT_TOL = 1e-8
ORACLE_MAX_ROWS = 8
ORACLE_MAX_COLS = 30


def _check_unit(data: DataMatrix) -> DataMatrix:
    arr = check_finite(data)
    norms = column_norms(arr)
    bad = np.flatnonzero(np.abs(norms - 1.0) > UNIT_TOL)
    if bad.size:
        msg = f"Data columns must have unit norm; column {int(bad[0])} has {norms[bad[0]]:.6g}"
        raise InvalidInput(msg)
    return arr


@dataclass(kw_only=True, slots=True)
class SolverOptions:
    """
    ADMM settings. Defaults come from the environment at construction time
    """

    rho: float = field(default_factory=lambda: env_float("ISEARCH_ADMM_RHO", 1.0))
    # primal stop: ||D^T c - z||_2 <= sqrt(M2) * tol; c^T d = 1 holds exactly
    tol: float = field(default_factory=lambda: env_float("ISEARCH_ADMM_TOL", 1e-6))
    # dual stop: rho ||D (z - z_prev)||_2 <= sqrt(r_d) * dual_tol
    dual_tol: float = field(
        default_factory=lambda: env_float("ISEARCH_ADMM_DUAL_TOL", 1e-6)
    )
    max_iters: int = field(
        default_factory=lambda: env_int("ISEARCH_ADMM_MAX_ITERS", 2000)
    )
    adaptive_rho: bool = field(
        default_factory=lambda: env_flag("ISEARCH_ADMM_ADAPTIVE_RHO", False)
    )
    rho_period: int = 50
    rho_mu: float = 10.0
    rho_tau: float = 2.0
    # rho changes allowed per column
    rho_max_updates: int = 5
    ridge: float = 1e-10
    # finish columns that hit max_iters with the exact dual LP
    polish: bool = field(default_factory=lambda: env_flag("ISEARCH_ADMM_POLISH", True))
    threads: int = field(default_factory=lambda: env_int("ISEARCH_THREADS", 1))
    # False: keep the last iterate of unconverged columns instead of raising
    strict: bool = True

    def __post_init__(self) -> None:
        if self.rho <= 0 or self.tol <= 0 or self.dual_tol <= 0:
            raise InvalidInput("rho, tol and dual_tol must be positive")
        if self.max_iters < 1:
            raise InvalidInput(f"max_iters must be positive: {self.max_iters}")
        self.threads = max(1, int(self.threads))


@dataclass(kw_only=True, slots=True)
class DirectionProblem:
    """
    One column program: data (r_d x M2, unit columns) and the target index
    """

    data: DataMatrix
    target_index: int

    def __post_init__(self) -> None:
        n = np.shape(self.data)[1] if np.ndim(self.data) == 2 else 0
        if not 0 <= self.target_index < n:
            raise InvalidInput(f"target_index {self.target_index} out of range {n}")
        self.data = _check_unit(self.data)

    @property
    def target(self) -> Vector:
        return self.data[:, self.target_index]


@dataclass(kw_only=True, slots=True)
class SolverStats:
    iterations: IntVector
    primal_residual: Vector
    dual_residual: Vector
    rho: Vector
    converged: BoolVector
    # finished by the dual LP after max_iters
    polished: BoolVector
    seconds: float = 0.0


@dataclass(kw_only=True, slots=True)
class DirectionSet:
    """
    Column i of `directions` is c*_i; objectives[i] = ||D^T c*_i||_1
    """

    directions: DataMatrix
    objectives: Vector
    stats: SolverStats

    def stats_json(self) -> str:
        payload = asdict(self.stats)
        payload["unconverged"] = np.flatnonzero(~self.stats.converged).tolist()
        return json.dumps(payload, cls=CustomEncoder, indent=2)


class _Factor:
    """
    Cholesky factor of D D^T plus the per-column KKT border terms
    """

    def __init__(self, data: DataMatrix, ridge: float) -> None:
        gram = data @ data.T
        try:
            self.cho = cho_factor(gram, lower=True, check_finite=False)
        except LinAlgError:
            logger.info("Gram matrix not positive definite, adding ridge")
            gram = gram + ridge * np.eye(gram.shape[0])
            self.cho = cho_factor(gram, lower=True, check_finite=False)
        # column j: G^{-1} d_j and d_j^T G^{-1} d_j
        self.ginv_d = cho_solve(self.cho, data, check_finite=False)
        self.d_ginv_d = np.einsum("ij,ij->j", data, self.ginv_d)


def _soft_threshold(v: DataMatrix, thr: Vector) -> DataMatrix:
    return np.sign(v) * np.maximum(np.abs(v) - thr, 0.0)


def _admm_block(
    data: DataMatrix, factor: _Factor, targets: IntVector, opts: SolverOptions
) -> tuple[DataMatrix, SolverStats]:
    """
    Run ADMM for the columns in `targets` simultaneously
    """
    r_d, m2 = data.shape
    k = targets.size
    d_t = data[:, targets]
    border = factor.ginv_d[:, targets]
    border_scale = factor.d_ginv_d[targets]

    c = d_t.copy()
    z = data.T @ c
    u = np.zeros_like(z)
    rho = np.full(k, float(opts.rho))
    updates = np.zeros(k, dtype=np.int64)
    iterations = np.zeros(k, dtype=np.int64)
    primal = np.full(k, np.inf)
    dual = np.full(k, np.inf)
    converged = np.zeros(k, dtype=bool)
    eps_primal = np.sqrt(m2) * opts.tol
    eps_dual = np.sqrt(r_d) * opts.dual_tol

    active = np.arange(k)
    for it in range(1, opts.max_iters + 1):
        z_a = z[:, active]
        u_a = u[:, active]
        a = cho_solve(factor.cho, data @ (z_a - u_a), check_finite=False)
        lam = (np.einsum("ij,ij->j", d_t[:, active], a) - 1.0) / border_scale[active]
        c_a = a - border[:, active] * lam
        dc = data.T @ c_a
        z_new = _soft_threshold(dc + u_a, 1.0 / rho[active])
        resid = dc - z_new
        p_res = np.linalg.norm(resid, axis=0)
        d_res = rho[active] * np.linalg.norm(data @ (z_new - z_a), axis=0)

        c[:, active] = c_a
        z[:, active] = z_new
        u[:, active] = u_a + resid
        iterations[active] = it
        primal[active] = p_res
        dual[active] = d_res

        done = (p_res <= eps_primal) & (d_res <= eps_dual)
        converged[active[done]] = True

        if opts.adaptive_rho and it % opts.rho_period == 0:
            movable = ~done & (updates[active] < opts.rho_max_updates)
            grow = active[movable & (p_res > opts.rho_mu * d_res)]
            shrink = active[movable & (d_res > opts.rho_mu * p_res)]
            updates[grow] += 1
            updates[shrink] += 1
            rho[grow] *= opts.rho_tau
            u[:, grow] /= opts.rho_tau
            rho[shrink] /= opts.rho_tau
            u[:, shrink] *= opts.rho_tau

        active = active[~done]
        if active.size == 0:
            break

    stats = SolverStats(
        iterations=iterations,
        primal_residual=primal,
        dual_residual=dual,
        rho=rho,
        converged=converged,
        polished=np.zeros(k, dtype=bool),
    )
    return c, stats


def _objectives(data: DataMatrix, directions: DataMatrix) -> Vector:
    return np.abs(data.T @ directions).sum(axis=0)


def _dual_lp_direction(data: DataMatrix, index: int) -> Vector | None:
    """
    c* from the multipliers of  max lam  s.t.  D s - lam d = 0,  |s| <= 1
    """
    r_d, m2 = data.shape
    target = data[:, index]
    cost = np.zeros(m2 + 1)
    cost[-1] = -1.0
    a_eq = np.hstack([data, -target[:, None]])
    bounds = [(-1.0, 1.0)] * m2 + [(None, None)]
    result = linprog(
        cost, A_eq=a_eq, b_eq=np.zeros(r_d), bounds=bounds, method="highs-ds"
    )
    if not result.success:
        logger.warning(
            "Dual LP failed", extra={"column": index, "reason": str(result.message)}
        )
        return None
    y = np.asarray(result.eqlin.marginals, dtype=np.float64)
    # the multiplier sign depends on the solver's convention; d^T c = 1 fixes both
    scale = float(target @ y)
    if not np.isfinite(scale) or abs(scale) < UNIT_TOL:
        return None
    return y / scale


def _polish(
    data: DataMatrix,
    targets: IntVector,
    directions: DataMatrix,
    stats: SolverStats,
) -> None:
    """
    Replace unconverged columns in place by the exact optimum

    Position i of `directions` and `stats` belongs to data column targets[i]
    """
    pending = np.flatnonzero(~stats.converged)
    for i in pending.tolist():
        j = int(targets[i])
        exact = _dual_lp_direction(data, j)
        if exact is None:
            continue
        current = float(np.abs(data.T @ directions[:, i]).sum())
        best = float(np.abs(data.T @ exact).sum())
        # any feasible iterate bounds the optimum from above
        if best > current + 1e-6 * (1.0 + current):
            logger.warning("Dual LP worse than the iterate", extra={"column": j})
            continue
        if best < current:
            directions[:, i] = exact
        stats.converged[i] = True
        stats.polished[i] = True
    logger.info(
        "Finished unconverged columns exactly",
        extra={"polished": int(stats.polished.sum()), "asked": int(pending.size)},
    )


def solve_direction(
    p: DirectionProblem, opts: SolverOptions | None = None
) -> tuple[Vector, float]:
    """
    Optimal direction and objective for a single target column
    """
    opts = opts or SolverOptions()
    factor = _Factor(p.data, opts.ridge)
    targets = np.array([p.target_index], dtype=np.int64)
    c, stats = _admm_block(p.data, factor, targets, opts)
    if opts.polish and not stats.converged[0]:
        _polish(p.data, targets, c, stats)
    direction = c[:, 0]
    objective = float(_objectives(p.data, c)[0])
    if not stats.converged[0]:
        residuals = {
            "primal": float(stats.primal_residual[0]),
            "dual": float(stats.dual_residual[0]),
        }
        msg = f"ADMM did not converge in {opts.max_iters} iterations: {residuals}"
        raise Unconverged(
            msg,
            columns=[p.target_index],
            residuals=residuals,
            direction=direction,
            objective=objective,
        )
    return direction, objective


@logged
def solve_all(data: DataMatrix, opts: SolverOptions | None = None) -> DirectionSet:
    """
    Solve the program for every column; one shared factorisation

    Column chunks run on `opts.threads` threads; results are placed by index
    """
    opts = opts or SolverOptions()
    data = _check_unit(data)
    start = time.perf_counter()
    factor = _Factor(data, opts.ridge)
    m2 = data.shape[1]
    chunks = [ch for ch in np.array_split(np.arange(m2), opts.threads) if ch.size]

    if len(chunks) == 1:
        results = [_admm_block(data, factor, chunks[0], opts)]
    else:
        with ThreadPoolExecutor(max_workers=len(chunks)) as pool:
            results = list(
                pool.map(lambda ch: _admm_block(data, factor, ch, opts), chunks)
            )

    directions = np.empty_like(data)
    parts: dict[str, list[np.ndarray]] = {
        "iterations": [],
        "primal_residual": [],
        "dual_residual": [],
        "rho": [],
        "converged": [],
        "polished": [],
    }
    for chunk, (c, st) in zip(chunks, results):
        directions[:, chunk] = c
        for name in parts:
            parts[name].append(getattr(st, name))
    stats = SolverStats(
        iterations=np.concatenate(parts["iterations"]),
        primal_residual=np.concatenate(parts["primal_residual"]),
        dual_residual=np.concatenate(parts["dual_residual"]),
        rho=np.concatenate(parts["rho"]),
        converged=np.concatenate(parts["converged"]),
        polished=np.concatenate(parts["polished"]),
    )
    if opts.polish and not stats.converged.all():
        _polish(data, np.arange(m2), directions, stats)
    stats.seconds = time.perf_counter() - start
    dirs = DirectionSet(
        directions=directions,
        objectives=_objectives(data, directions),
        stats=stats,
    )
    failed = np.flatnonzero(~stats.converged).tolist()
    extra = {
        "columns": m2,
        "unconverged": len(failed),
        "polished": int(stats.polished.sum()),
        "max_iterations": int(stats.iterations.max()),
        "seconds": round(stats.seconds, 4),
    }
    logger.info("Direction search finished", extra=extra)
    if failed:
        residuals = {
            "primal": float(stats.primal_residual[failed].max()),
            "dual": float(stats.dual_residual[failed].max()),
        }
        msg = f"ADMM did not converge for {len(failed)} of {m2} columns: {residuals}"
        if opts.strict:
            raise Unconverged(msg, columns=failed, residuals=residuals, partial=dirs)
        logger.warning(msg, extra={"columns": failed[:20]})
    return dirs


def lp_oracle_direction(p: DirectionProblem) -> tuple[Vector, float]:
    """
    Exact optimum as the LP  min sum t  s.t.  -t <= D^T c <= t,  d^T c = 1
    """
    r_d, m2 = p.data.shape
    if r_d > ORACLE_MAX_ROWS or m2 > ORACLE_MAX_COLS:
        msg = f"LP oracle limited to {ORACLE_MAX_ROWS}x{ORACLE_MAX_COLS}, got {r_d}x{m2}"
        raise SizeLimit(msg)
    dt = p.data.T
    eye = np.eye(m2)
    cost = np.concatenate([np.zeros(r_d), np.ones(m2)])
    a_ub = np.vstack([np.hstack([dt, -eye]), np.hstack([-dt, -eye])])
    b_ub = np.zeros(2 * m2)
    a_eq = np.concatenate([p.target, np.zeros(m2)])[None, :]
    bounds = [(None, None)] * r_d + [(0, None)] * m2
    result = linprog(
        cost,
        A_ub=a_ub,
        b_ub=b_ub,
        A_eq=a_eq,
        b_eq=np.array([1.0]),
        bounds=bounds,
        method="highs-ds",
    )
    # the program is always feasible (c = d) and bounded below by 1
    if not result.success:
        raise IsearchError(f"LP oracle failed: {result.message}")
    direction = np.asarray(result.x[:r_d], dtype=np.float64)
    objective = float(np.abs(dt @ direction).sum())
    return direction, objective
