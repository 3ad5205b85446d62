"""
evalkit.py: metrics, single trials and Monte Carlo sweeps

A trial draws a dataset from a ModelSpec with a given seed, runs one method
end to end and records recovery error, detection and separation. A sweep
runs trials over the cartesian product of named axes; every (cell, trial)
gets its own seed derived from the master seed, so grids are reproducible
whatever the number of worker threads.
"""

import itertools
import json
import logging
import time

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Any, TextIO

import numpy as np
import pandas as pd

from tqdm import tqdm

from .baselines import coherence_values, cop_recover, pca_recover
from .configure import ModelSpec, SweepSpec
from .core import (
    ADD_TOL_NOISELESS,
    ADD_TOL_NOISY,
    IsearchOptions,
    detect_outliers,
    preprocess,
    run_isearch,
)
from .log import logged
from .matstore import RandomSource, SubspaceBasis, spawn_seed
from .synthgen import Dataset, gen_dataset
from .typed import INLIER, OUTLIER, Criterion, IntVector, JSONObject, Method, Vector
from .utils import CustomEncoder, InvalidInput, InvalidSpec, IsearchError

logger = logging.getLogger(__name__)

SUCCESS_THRESHOLD = 1e-2
# log10 of a zero recovery error is reported as this
LOG_ERROR_FLOOR = -16.0

# sweep axis shortcuts
AXIS_ALIASES = {"n_o": "outliers.0.count"}


def recovery_error(truth: SubspaceBasis, recovered: SubspaceBasis) -> float:
    """
    ||(I - UU^T) U_hat||_F / ||U||_F
    """
    if truth.ambient != recovered.ambient:
        msg = f"Ambient dimensions differ: {truth.ambient} vs {recovered.ambient}"
        raise InvalidInput(msg)
    num = np.linalg.norm(truth.residual(recovered.basis), "fro")
    return float(num / np.linalg.norm(truth.basis, "fro"))


def detection_success(scores_f: Vector, labels: IntVector) -> bool:
    """
    Every inlier residual strictly below every outlier residual
    """
    inl = scores_f[labels == INLIER]
    out = scores_f[labels == OUTLIER]
    if inl.size == 0 or out.size == 0:
        return True
    return bool(inl.max() < out.min())


def separation_margin(outlyingness: Vector, labels: IntVector) -> float:
    """
    min over outliers minus max over inliers; NaN if a class is empty
    """
    inl = outlyingness[labels == INLIER]
    out = outlyingness[labels == OUTLIER]
    if inl.size == 0 or out.size == 0:
        return float("nan")
    return float(out.min() - inl.max())


@dataclass(kw_only=True, slots=True)
class TrialOptions:
    isearch: IsearchOptions = field(default_factory=IsearchOptions)
    coherence_power: int = 2


@dataclass(kw_only=True, slots=True)
class TrialRecord:
    spec: ModelSpec
    method: Method
    seed: int
    recovery_error: float
    log_recovery_error: float
    success: bool
    detection_success: bool
    separation_margin: float
    wall_time: float
    error: str | None = None

    def passed(self, criterion: Criterion) -> bool:
        if criterion == "recovery":
            return self.success
        if criterion == "detection":
            return self.detection_success
        return bool(self.separation_margin > 0)

    def to_json(self) -> JSONObject:
        return {
            "spec": self.spec.model_dump(mode="json"),
            "method": self.method,
            "seed": self.seed,
            "recovery_error": self.recovery_error,
            "log_recovery_error": self.log_recovery_error,
            "success": self.success,
            "detection_success": self.detection_success,
            "separation_margin": self.separation_margin,
            "wall_time": self.wall_time,
            "error": self.error,
        }


@dataclass(kw_only=True, slots=True)
class MethodOutcome:
    basis: SubspaceBasis
    residuals: Vector
    # larger = more outlier-like; NaN when the method does not rank columns
    outlyingness: Vector


def run_method(ds: Dataset, method: Method, opts: TrialOptions) -> MethodOutcome:
    """
    Recover the inlier subspace of ds with `method`, knowing only its rank
    """
    r = ds.truth_basis.dim
    iopts = opts.isearch
    if iopts.add_tol is None and ds.spec.noise_level > 0:
        iopts = replace(iopts, add_tol=ADD_TOL_NOISY)
    if method == "isearch":
        run = run_isearch(ds.data, r, iopts)
        return MethodOutcome(
            basis=run.recovery.basis,
            residuals=run.verdicts.scores,
            outlyingness=run.profile.values,
        )
    if method == "cop":
        pre = preprocess(ds.data, rank_ratio=iopts.rank_ratio, reduce=iopts.reduce)
        coherence = coherence_values(pre, opts.coherence_power)
        add_tol = ADD_TOL_NOISELESS if iopts.add_tol is None else iopts.add_tol
        basis = cop_recover(pre, coherence, r, add_tol).basis
        verdicts = detect_outliers(ds.data, basis, iopts.residual_threshold)
        return MethodOutcome(
            basis=basis, residuals=verdicts.scores, outlyingness=-coherence.values
        )
    if method == "pca":
        basis = pca_recover(ds.data, r)
        verdicts = detect_outliers(ds.data, basis, iopts.residual_threshold)
        nan = np.full(ds.data.shape[1], np.nan)
        return MethodOutcome(basis=basis, residuals=verdicts.scores, outlyingness=nan)
    raise InvalidInput(f"Unknown method: {method}")


def run_trial(
    spec: ModelSpec, method: Method, seed: int, opts: TrialOptions | None = None
) -> TrialRecord:
    """
    Generate data for `seed`, run `method`, score it; errors give a failed record
    """
    opts = opts or TrialOptions()
    start = time.perf_counter()
    try:
        ds = gen_dataset(spec, RandomSource(seed=seed))
        outcome = run_method(ds, method, opts)
    except (IsearchError, np.linalg.LinAlgError) as err:
        logger.info(
            "Trial failed",
            extra={"seed": seed, "method": method, "error": str(err)},
        )
        return TrialRecord(
            spec=spec,
            method=method,
            seed=seed,
            recovery_error=float("nan"),
            log_recovery_error=float("nan"),
            success=False,
            detection_success=False,
            separation_margin=float("nan"),
            wall_time=time.perf_counter() - start,
            error=f"{type(err).__name__}: {err}",
        )
    err_value = recovery_error(ds.truth_basis, outcome.basis)
    log_err = np.log10(err_value) if err_value > 0 else LOG_ERROR_FLOOR
    return TrialRecord(
        spec=spec,
        method=method,
        seed=seed,
        recovery_error=err_value,
        log_recovery_error=float(max(log_err, LOG_ERROR_FLOOR)),
        success=err_value < SUCCESS_THRESHOLD,
        detection_success=detection_success(outcome.residuals, ds.labels),
        separation_margin=separation_margin(outcome.outlyingness, ds.labels),
        wall_time=time.perf_counter() - start,
    )


def set_axis(model: ModelSpec, name: str, value: int | float) -> ModelSpec:
    """
    Copy of `model` with the field at dotted path `name` set to `value`
    """
    if name == "n_o" and len(model.outliers) != 1:
        msg = f"axes.n_o needs exactly one outlier block, model has {len(model.outliers)}"
        raise InvalidSpec(msg)
    payload: Any = model.model_dump()
    path = AXIS_ALIASES.get(name, name).split(".")
    target = payload
    try:
        for key in path[:-1]:
            target = target[int(key)] if isinstance(target, list) else target[key]
        last = path[-1]
        if isinstance(target, list):
            target[int(last)] = value
        elif isinstance(target, dict) and last in target:
            target[last] = value
        else:
            raise KeyError(last)
    except (KeyError, IndexError, ValueError, TypeError) as err:
        raise InvalidSpec(f"axes.{name}: no such model field ({err})") from err
    return ModelSpec.model_validate(payload)


@dataclass(kw_only=True, slots=True)
class SweepGrid:
    """
    Success probability per cell; cells in row-major order of the axes
    """

    axes: dict[str, list[int | float]]
    method: Method
    criterion: Criterion
    trials_per_cell: int
    probabilities: list[float]
    mean_log_errors: list[float]

    def _cells(self) -> pd.DataFrame:
        cells = list(itertools.product(*self.axes.values()))
        return pd.DataFrame(cells, columns=list(self.axes))

    def to_frame(self) -> pd.DataFrame:
        """
        Axis columns then "probability", one row per cell
        """
        frame = self._cells()
        frame["probability"] = self.probabilities
        return frame

    def errors_frame(self) -> pd.DataFrame:
        frame = self._cells()
        frame["mean_log_recovery_error"] = self.mean_log_errors
        return frame

    def to_csv(self, path: str, errors_path: str | None = None) -> None:
        self.to_frame().to_csv(path, index=False, float_format="%.17g")
        if errors_path:
            self.errors_frame().to_csv(errors_path, index=False, float_format="%.17g")


def _cell_summary(
    records: list[TrialRecord], criterion: Criterion
) -> tuple[float, float]:
    passed = sum(rec.passed(criterion) for rec in records)
    logs = [rec.log_recovery_error for rec in records if rec.error is None]
    mean_log = float(np.mean(logs)) if logs else float("nan")
    return passed / len(records), mean_log


@logged
def run_sweep(
    sweep: SweepSpec,
    method: Method,
    master_seed: int,
    opts: TrialOptions | None = None,
    threads: int = 1,
    trace: TextIO | None = None,
    progress: bool = False,
) -> SweepGrid:
    """
    Run sweep.trials_per_cell trials in every cell of the axes grid

    Trial t of cell c uses seed spawn_seed(master_seed, c, t), so the same
    data is drawn for every method and every thread count
    """
    opts = opts or TrialOptions()
    names = list(sweep.axes)
    cells = list(itertools.product(*sweep.axes.values()))
    specs = []
    for values in cells:
        spec = sweep.model
        for name, value in zip(names, values):
            spec = set_axis(spec, name, value)
        specs.append(spec)
    trials = sweep.trials_per_cell
    jobs = [(c, t) for c in range(len(cells)) for t in range(trials)]

    def _job(job: tuple[int, int]) -> TrialRecord:
        cell, trial = job
        return run_trial(specs[cell], method, spawn_seed(master_seed, cell, trial), opts)

    bar = tqdm(total=len(jobs), desc=f"sweep {method}", disable=not progress)
    records: list[TrialRecord] = []
    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        # map keeps job order, so records line up with jobs
        for rec in pool.map(_job, jobs):
            records.append(rec)
            bar.update(1)
    bar.close()

    if trace is not None:
        for (cell, trial), rec in zip(jobs, records):
            line = {"cell": cell, "trial": trial, **rec.to_json()}
            trace.write(json.dumps(line, cls=CustomEncoder) + "\n")

    probabilities = []
    mean_logs = []
    for cell in range(len(cells)):
        chunk = records[cell * trials : (cell + 1) * trials]
        prob, mean_log = _cell_summary(chunk, sweep.criterion)
        probabilities.append(prob)
        mean_logs.append(mean_log)
    logger.info(
        "Sweep finished",
        extra={"method": method, "cells": len(cells), "trials": len(jobs)},
    )
    return SweepGrid(
        axes={name: list(values) for name, values in sweep.axes.items()},
        method=method,
        criterion=sweep.criterion,
        trials_per_cell=trials,
        probabilities=probabilities,
        mean_log_errors=mean_logs,
    )
