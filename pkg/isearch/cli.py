"""
cli.py: the isearch command line

Every subcommand builds an ExperimentConfig and hands it to `execute`, the
same path `isearch experiment config.json` takes, so a flag-driven run and
a config-driven run of the same mode behave identically.

Exit status: 0 on success, 2 when the config or flags do not validate
(field diagnostics as JSON on stderr), 1 when a method fails at runtime.
"""

import glob
import json
import logging
import os
import sys

from collections.abc import Callable
from dataclasses import dataclass
from functools import wraps
from typing import Any

import click
import numpy as np
import pandas as pd

from pydantic import ValidationError

from . import __version__
from .baselines import coherence_values, pca_recover
from .cluster import clustering_error, correct_clusters, correct_labeling, isearch_cluster
from .configure import ExperimentConfig, MethodConfig, SolverConfig, UnionOfSubspaces
from .core import isearch_options, preprocess, run_isearch
from .evalkit import TrialOptions, recovery_error, run_sweep, separation_margin
from .log import configure_logging
from .matstore import RandomSource, read_matrix_csv, write_matrix_csv
from .synthgen import Dataset, corrupt_labels, gen_dataset, save_dataset
from .typed import DataMatrix, JSONObject
from .utils import CustomEncoder, InvalidSpec, IsearchError, env_int, load_env

logger = logging.getLogger(__name__)

HERE = os.path.dirname(os.path.abspath(__file__))
CONFIG_DIRS = (
    os.path.join(HERE, "configs"),
    os.path.join(os.path.dirname(HERE), "configs"),
)


@dataclass(kw_only=True, slots=True)
class Session:
    """
    Global flags shared by every subcommand
    """

    seed: int | None
    threads: int
    trace: str | None
    quiet: bool


@dataclass(kw_only=True, slots=True)
class Outputs:
    """
    Where a mode writes its files; None means do not write
    """

    scores: str | None = None
    basis: str | None = None
    labels: str | None = None
    dataset: str | None = None
    solver_stats: str | None = None
    grid: str | None = None


def _fail(code: int, err: Exception) -> None:
    payload: JSONObject = {"error": type(err).__name__, "message": str(err)}
    if isinstance(err, ValidationError):
        payload["fields"] = [
            {
                "field": ".".join(str(part) for part in item["loc"]),
                "message": item["msg"],
            }
            for item in err.errors()
        ]
    click.echo(json.dumps(payload, cls=CustomEncoder), err=True)
    sys.exit(code)


def guarded(f: Callable[..., None]) -> Callable[..., None]:
    """
    Turn validation errors into exit 2 and method errors into exit 1
    """

    @wraps(f)
    def wrapper(*args: Any, **kwargs: Any) -> None:
        try:
            f(*args, **kwargs)
        except (ValidationError, InvalidSpec) as err:
            _fail(2, err)
        except (IsearchError, np.linalg.LinAlgError, OSError) as err:
            logger.info("Command failed", extra={"error": str(err)})
            _fail(1, err)

    return wrapper


def _summary(payload: JSONObject) -> None:
    click.echo(json.dumps(payload, cls=CustomEncoder))


def _seed(cfg: ExperimentConfig, session: Session) -> int:
    return cfg.seed if session.seed is None else session.seed


def _inputs(cfg: ExperimentConfig, session: Session) -> tuple[DataMatrix, Dataset | None]:
    if cfg.data is not None:
        return read_matrix_csv(cfg.data), None
    assert cfg.model is not None
    ds = gen_dataset(cfg.model, RandomSource(seed=_seed(cfg, session)))
    return ds.data, ds


def _rank(cfg: ExperimentConfig, ds: Dataset | None) -> int:
    if cfg.method.rank is not None:
        return cfg.method.rank
    if ds is None:
        raise InvalidSpec("method.rank: required without a model")
    return ds.truth_basis.dim


def _noisy(cfg: ExperimentConfig) -> bool:
    return cfg.model is not None and cfg.model.noise_level > 0


def _mode_gen(cfg: ExperimentConfig, session: Session, out: Outputs) -> JSONObject:
    assert cfg.model is not None
    ds = gen_dataset(cfg.model, RandomSource(seed=_seed(cfg, session)))
    if out.dataset:
        save_dataset(ds, out.dataset)
    return {"mode": "gen", "m1": cfg.model.m1, "n_i": ds.n_i, "n_o": ds.n_o}


def _mode_run(cfg: ExperimentConfig, session: Session, out: Outputs) -> JSONObject:
    data, ds = _inputs(cfg, session)
    opts = isearch_options(cfg.method, cfg.solver, session.threads, _noisy(cfg))
    run = run_isearch(data, _rank(cfg, ds), opts)
    if out.scores:
        frame = pd.DataFrame(
            {
                "index": np.arange(data.shape[1]),
                "innovation": run.profile.values,
                "residual": run.verdicts.scores,
                "outlier": run.verdicts.outliers.astype(int),
            }
        )
        frame.to_csv(out.scores, index=False, float_format="%.17g")
    if out.basis:
        write_matrix_csv(out.basis, run.recovery.basis.basis)
    if out.solver_stats:
        with open(out.solver_stats, "w") as fo:
            fo.write(run.directions.stats_json())
    summary: JSONObject = {
        "mode": "run",
        "r_d": run.pre.rank,
        "r": run.recovery.basis.dim,
        "flagged": int(run.verdicts.outliers.sum()),
    }
    if ds is not None:
        summary["separation_margin"] = separation_margin(run.profile.values, ds.labels)
        summary["recovery_error"] = recovery_error(ds.truth_basis, run.recovery.basis)
    return summary


def _mode_cop(cfg: ExperimentConfig, session: Session, out: Outputs) -> JSONObject:
    data, ds = _inputs(cfg, session)
    opts = isearch_options(cfg.method, cfg.solver, session.threads)
    pre = preprocess(data, rank_ratio=opts.rank_ratio, reduce=opts.reduce)
    coherence = coherence_values(pre, cfg.method.coherence_power)
    if out.scores:
        frame = pd.DataFrame(
            {"index": np.arange(data.shape[1]), "coherence": coherence.values}
        )
        frame.to_csv(out.scores, index=False, float_format="%.17g")
    summary: JSONObject = {"mode": "cop", "columns": int(data.shape[1]), "r_d": pre.rank}
    if ds is not None:
        summary["separation_margin"] = separation_margin(-coherence.values, ds.labels)
    return summary


def _mode_pca(cfg: ExperimentConfig, session: Session, out: Outputs) -> JSONObject:
    data, ds = _inputs(cfg, session)
    basis = pca_recover(data, _rank(cfg, ds))
    if out.basis:
        write_matrix_csv(out.basis, basis.basis)
    summary: JSONObject = {"mode": "pca", "r": basis.dim}
    if ds is not None:
        summary["recovery_error"] = recovery_error(ds.truth_basis, basis)
    return summary


def _num_clusters(cfg: ExperimentConfig) -> int:
    if cfg.num_clusters is not None:
        return cfg.num_clusters
    inlier = cfg.model.inlier if cfg.model is not None else None
    if isinstance(inlier, UnionOfSubspaces):
        return inlier.m
    raise InvalidSpec("num_clusters: required without a union-of-subspaces model")


def _mode_cluster(cfg: ExperimentConfig, session: Session, out: Outputs) -> JSONObject:
    data, ds = _inputs(cfg, session)
    num = _num_clusters(cfg)
    opts = isearch_options(cfg.method, cfg.solver, session.threads, _noisy(cfg))
    rng = RandomSource(seed=_seed(cfg, session))
    clustering = isearch_cluster(data, num, opts, rng)
    if out.labels:
        np.savetxt(out.labels, clustering.labels, fmt="%d")
    summary: JSONObject = {"mode": "cluster", "num_clusters": num}
    if ds is not None:
        inliers = ds.groups >= 0
        summary["clustering_error"] = clustering_error(
            clustering.labels[inliers], ds.groups[inliers]
        )
    return summary


def _mode_correct(cfg: ExperimentConfig, session: Session, out: Outputs) -> JSONObject:
    opts = isearch_options(cfg.method, cfg.solver, session.threads, _noisy(cfg))
    summary: JSONObject = {"mode": "correct"}
    if cfg.clusters is not None:
        paths = sorted(glob.glob(os.path.join(cfg.clusters, "*.csv")))
        if not paths:
            raise InvalidSpec(f"clusters: no .csv files in {cfg.clusters}")
        assert cfg.method.rank is not None
        mats = [read_matrix_csv(path) for path in paths]
        _, relabeled = correct_clusters(mats, cfg.method.rank, opts)
        summary["files"] = [os.path.basename(path) for path in paths]
    else:
        assert cfg.model is not None
        inlier = cfg.model.inlier
        if not isinstance(inlier, UnionOfSubspaces) or cfg.model.outliers:
            raise InvalidSpec("model: correction needs union inliers and no outliers")
        rng = RandomSource(seed=_seed(cfg, session))
        ds = gen_dataset(cfg.model, rng)
        num = _num_clusters(cfg)
        noisy_labels = corrupt_labels(ds.groups, cfg.corruption, num, rng)
        rank = cfg.method.rank or inlier.d
        _, relabeled = correct_labeling(ds.data, noisy_labels, num, rank, opts)
        summary["error_before"] = clustering_error(noisy_labels, ds.groups)
        summary["error_after"] = clustering_error(relabeled.labels, ds.groups)
    if out.labels:
        np.savetxt(out.labels, relabeled.labels, fmt="%d")
    summary["num_clusters"] = relabeled.num_clusters
    return summary


def _trial_options(cfg: ExperimentConfig) -> TrialOptions:
    # trials run in parallel, so the solver inside each one stays single threaded
    iopts = isearch_options(cfg.method, cfg.solver, threads=1)
    return TrialOptions(isearch=iopts, coherence_power=cfg.method.coherence_power)


def _mode_sweep(cfg: ExperimentConfig, session: Session, out: Outputs) -> JSONObject:
    assert cfg.sweep is not None
    opts = _trial_options(cfg)
    summary: JSONObject = {"mode": "sweep"}
    trace = open(session.trace, "w") if session.trace else None
    try:
        for method in cfg.methods:
            grid = run_sweep(
                cfg.sweep,
                method,
                _seed(cfg, session),
                opts,
                threads=session.threads,
                trace=trace,
                progress=not session.quiet,
            )
            if out.grid:
                path = out.grid
                if len(cfg.methods) > 1:
                    path = os.path.join(os.path.dirname(path) or ".", f"grid_{method}.csv")
                stem, ext = os.path.splitext(path)
                grid.to_csv(path, errors_path=f"{stem}_errors{ext or '.csv'}")
            summary[method] = grid.probabilities
    finally:
        if trace is not None:
            trace.close()
    return summary


MODES: dict[str, Callable[[ExperimentConfig, Session, Outputs], JSONObject]] = {
    "gen": _mode_gen,
    "run": _mode_run,
    "cop": _mode_cop,
    "pca": _mode_pca,
    "cluster": _mode_cluster,
    "correct": _mode_correct,
    "sweep": _mode_sweep,
}


def execute(cfg: ExperimentConfig, session: Session, out: Outputs) -> JSONObject:
    """
    Run the mode a config declares and print its one-line summary
    """
    summary = MODES[cfg.mode](cfg, session, out)
    if cfg.name:
        summary = {"name": cfg.name, **summary}
    _summary(summary)
    return summary


def default_outputs(cfg: ExperimentConfig, out_dir: str) -> Outputs:
    os.makedirs(out_dir, exist_ok=True)

    def where(name: str) -> str:
        return os.path.join(out_dir, name)

    if cfg.mode == "gen":
        return Outputs(dataset=where("dataset"))
    if cfg.mode == "run":
        return Outputs(
            scores=where("scores.csv"),
            basis=where("basis.csv"),
            solver_stats=where("solver_stats.json"),
        )
    if cfg.mode == "cop":
        return Outputs(scores=where("scores.csv"))
    if cfg.mode == "pca":
        return Outputs(basis=where("basis.csv"))
    if cfg.mode in ("cluster", "correct"):
        return Outputs(labels=where("labels.csv"))
    return Outputs(grid=where(f"grid_{cfg.methods[0]}.csv"))


def resolve_config(name: str) -> str:
    """
    A config path, or the name of a bundled config (fig1, fig2_phase, ...)
    """
    if os.path.isfile(name):
        return name
    stem = name[:-5] if name.endswith(".json") else name
    for folder in CONFIG_DIRS:
        path = os.path.join(folder, f"{stem}.json")
        if os.path.isfile(path):
            return path
    raise InvalidSpec(f"config: no file or bundled config named {name}")


def run_experiment_config(
    config: str, session: Session, out_dir: str | None = None
) -> JSONObject:
    """
    Validate a config, write the resolved copy next to its outputs, execute it
    """
    path = resolve_config(config)
    with open(path) as fo:
        cfg = ExperimentConfig.model_validate_json(fo.read())
    folder = out_dir or cfg.out_dir
    outputs = default_outputs(cfg, folder)
    with open(os.path.join(folder, "config.json"), "w") as fo:
        fo.write(cfg.model_dump_json(indent=2))
    return execute(cfg, session, outputs)


def bundled_configs() -> list[str]:
    names: set[str] = set()
    for folder in CONFIG_DIRS:
        names.update(
            os.path.basename(p)[:-5] for p in glob.glob(os.path.join(folder, "*.json"))
        )
    return sorted(names)


def _solver_config(rho: float | None, tol: float | None, iters: int | None) -> SolverConfig:
    return SolverConfig(rho=rho, tol=tol, max_iters=iters)


def solver_flags(f: Callable[..., None]) -> Callable[..., None]:
    f = click.option("--admm-max-iters", type=int, default=None)(f)
    f = click.option("--admm-tol", type=float, default=None)(f)
    f = click.option("--admm-rho", type=float, default=None)(f)
    return f


@click.group(context_settings={"help_option_names": ["-h", "--help"]})
@click.option("--seed", type=int, default=None, help="Master seed (u64)")
@click.option("--threads", type=int, default=None, help="Worker threads")
@click.option("--trace", type=click.Path(dir_okay=False), default=None)
@click.option("--log-level", default=None, help="DEBUG, INFO, WARNING...")
@click.option("--quiet", is_flag=True, help="No progress bars")
@click.version_option(__version__, prog_name="isearch")
@click.pass_context
def main(
    ctx: click.Context,
    seed: int | None,
    threads: int | None,
    trace: str | None,
    log_level: str | None,
    quiet: bool,
) -> None:
    """
    Innovation search: outlier detection, subspace recovery and clustering
    """
    load_env()
    configure_logging(log_level)
    ctx.obj = Session(
        seed=seed,
        threads=max(1, threads if threads is not None else env_int("ISEARCH_THREADS", 1)),
        trace=trace,
        quiet=quiet,
    )


@main.command()
@click.argument("config")
@click.option("--out-dir", type=click.Path(file_okay=False), default=None)
@click.pass_obj
@guarded
def experiment(session: Session, config: str, out_dir: str | None) -> None:
    """
    Run a JSON experiment config (or a bundled one by name)
    """
    run_experiment_config(config, session, out_dir)


@main.command()
def configs() -> None:
    """
    List the bundled experiment configs
    """
    for name in bundled_configs():
        click.echo(name)


@main.command()
@click.option("--model", "model_path", type=click.Path(dir_okay=False), required=True)
@click.option("--out", type=click.Path(file_okay=False), required=True)
@click.pass_obj
@guarded
def gen(session: Session, model_path: str, out: str) -> None:
    """
    Draw a synthetic dataset from a model JSON into a directory
    """
    with open(model_path) as fo:
        model = json.load(fo)
    cfg = ExperimentConfig.model_validate({"mode": "gen", "model": model})
    execute(cfg, session, Outputs(dataset=out))


@main.command()
@click.option("--data", type=click.Path(dir_okay=False), required=True)
@click.option("--rank", type=int, required=True)
@click.option("--keep-fraction", type=float, default=None)
@click.option("--adaptive", is_flag=True, help="Adaptive column sampling (default)")
@click.option("--add-tol", type=float, default=None)
@click.option("--residual-threshold", type=float, default=0.2, show_default=True)
@click.option("--rank-ratio", type=float, default=None)
@click.option("--no-reduce", is_flag=True, help="Skip the SVD reduction step")
@click.option("--out-scores", type=click.Path(dir_okay=False), default=None)
@click.option("--out-basis", type=click.Path(dir_okay=False), default=None)
@click.option("--solver-stats", type=click.Path(dir_okay=False), default=None)
@solver_flags
@click.pass_obj
@guarded
def run(
    session: Session,
    data: str,
    rank: int,
    keep_fraction: float | None,
    adaptive: bool,
    add_tol: float | None,
    residual_threshold: float,
    rank_ratio: float | None,
    no_reduce: bool,
    out_scores: str | None,
    out_basis: str | None,
    solver_stats: str | None,
    admm_rho: float | None,
    admm_tol: float | None,
    admm_max_iters: int | None,
) -> None:
    """
    Innovation values, recovered basis and outlier verdicts for a data CSV
    """
    if adaptive and keep_fraction is not None:
        raise click.UsageError("--adaptive and --keep-fraction are exclusive")
    method = MethodConfig(
        rank=rank,
        keep_fraction=keep_fraction,
        add_tol=add_tol,
        residual_threshold=residual_threshold,
        rank_ratio=rank_ratio,
        reduce=not no_reduce,
    )
    cfg = ExperimentConfig(
        mode="run",
        data=data,
        method=method,
        solver=_solver_config(admm_rho, admm_tol, admm_max_iters),
    )
    outputs = Outputs(scores=out_scores, basis=out_basis, solver_stats=solver_stats)
    execute(cfg, session, outputs)


@main.command()
@click.option("--data", type=click.Path(dir_okay=False), required=True)
@click.option("--out", type=click.Path(dir_okay=False), required=True)
@click.option("--power", type=click.Choice(["1", "2"]), default="2", show_default=True)
@click.pass_obj
@guarded
def cop(session: Session, data: str, out: str, power: str) -> None:
    """
    Coherence values of every column
    """
    method = MethodConfig(coherence_power=1 if power == "1" else 2)
    cfg = ExperimentConfig(mode="cop", data=data, method=method)
    execute(cfg, session, Outputs(scores=out))


@main.command()
@click.option("--data", type=click.Path(dir_okay=False), required=True)
@click.option("--rank", type=int, required=True)
@click.option("--out", type=click.Path(dir_okay=False), required=True)
@click.pass_obj
@guarded
def pca(session: Session, data: str, rank: int, out: str) -> None:
    """
    Plain PCA basis of rank r
    """
    cfg = ExperimentConfig(mode="pca", data=data, method=MethodConfig(rank=rank))
    execute(cfg, session, Outputs(basis=out))


@main.command()
@click.option("--data", type=click.Path(dir_okay=False), required=True)
@click.option("--num-clusters", type=int, required=True)
@click.option("--out", type=click.Path(dir_okay=False), required=True)
@solver_flags
@click.pass_obj
@guarded
def cluster(
    session: Session,
    data: str,
    num_clusters: int,
    out: str,
    admm_rho: float | None,
    admm_tol: float | None,
    admm_max_iters: int | None,
) -> None:
    """
    Spectral clustering of the innovation affinity
    """
    cfg = ExperimentConfig(
        mode="cluster",
        data=data,
        num_clusters=num_clusters,
        solver=_solver_config(admm_rho, admm_tol, admm_max_iters),
    )
    execute(cfg, session, Outputs(labels=out))


@main.command()
@click.option("--clusters", type=click.Path(file_okay=False), required=True)
@click.option("--rank", type=int, required=True)
@click.option("--out", type=click.Path(dir_okay=False), required=True)
@solver_flags
@click.pass_obj
@guarded
def correct(
    session: Session,
    clusters: str,
    rank: int,
    out: str,
    admm_rho: float | None,
    admm_tol: float | None,
    admm_max_iters: int | None,
) -> None:
    """
    Reassign points of a directory of cluster CSVs to their best subspace
    """
    cfg = ExperimentConfig(
        mode="correct",
        clusters=clusters,
        method=MethodConfig(rank=rank),
        solver=_solver_config(admm_rho, admm_tol, admm_max_iters),
    )
    execute(cfg, session, Outputs(labels=out))


@main.command()
@click.option("--config", "sweep_path", type=click.Path(dir_okay=False), required=True)
@click.option(
    "--method",
    "methods",
    type=click.Choice(["isearch", "cop", "pca"]),
    multiple=True,
    default=("isearch",),
    show_default=True,
)
@click.option("--out", type=click.Path(dir_okay=False), required=True)
@click.pass_obj
@guarded
def sweep(session: Session, sweep_path: str, methods: tuple[str, ...], out: str) -> None:
    """
    Monte Carlo sweep over a grid of model parameters (SweepSpec JSON)
    """
    with open(sweep_path) as fo:
        spec = json.load(fo)
    cfg = ExperimentConfig.model_validate(
        {"mode": "sweep", "sweep": spec, "methods": list(methods)}
    )
    execute(cfg, session, Outputs(grid=out))
