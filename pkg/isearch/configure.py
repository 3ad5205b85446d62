"""
Model the data-generation specs and experiment configs

Everything a user writes as JSON is a pydantic model here, so a config
validates field by field and round-trips through model_dump_json.
"""

from typing import Annotated, Literal, Union

try:
    from typing import Self
except ImportError:  # python < 3.11
    from typing_extensions import Self

from pydantic import (
    BaseModel,
    ConfigDict,
    Field,
    NonNegativeFloat,
    NonNegativeInt,
    PositiveFloat,
    PositiveInt,
    model_validator,
)

from .typed import Criterion, Method, Mode
from .utils import InvalidSpec

U64_MAX = 2**64 - 1


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class UniformOnSubspace(_Strict):
    """
    Inliers uniform on the unit sphere of a random r-dim subspace
    """

    kind: Literal["uniform_subspace"] = "uniform_subspace"
    r: PositiveInt


class UnionOfSubspaces(_Strict):
    """
    Inliers spread over m random d-dim subspaces whose direct sum is U
    """

    kind: Literal["union"] = "union"
    m: PositiveInt
    d: PositiveInt
    # points per subspace; None splits n_i as evenly as possible
    counts: list[NonNegativeInt] | None = None

    @property
    def r(self) -> int:
        return self.m * self.d


class ClusteredInliers(_Strict):
    """
    Inliers U s / |U s| with s = w + gamma z around a unit centre w
    """

    kind: Literal["clustered"] = "clustered"
    r: PositiveInt
    gamma: PositiveFloat


InlierModel = Annotated[
    Union[UniformOnSubspace, UnionOfSubspaces, ClusteredInliers],
    Field(discriminator="kind"),
]


class UniformAmbient(_Strict):
    kind: Literal["uniform"] = "uniform"
    count: NonNegativeInt


class ClusteredOutliers(_Strict):
    """
    b = (q + eta v) / sqrt(1 + eta^2) around a unit centre q

    q_mode "random" draws q on the sphere, "near_subspace" normalises [U p] h
    """

    kind: Literal["clustered"] = "clustered"
    count: NonNegativeInt
    eta: PositiveFloat
    q_mode: Literal["random", "near_subspace"] = "random"


class DependentOutliers(_Strict):
    """
    Outliers uniform in a second subspace U_o sharing intersect_dim dims with U
    """

    kind: Literal["dependent"] = "dependent"
    count: NonNegativeInt
    r_o: PositiveInt
    intersect_dim: NonNegativeInt = 0


class CloseOutliers(_Strict):
    """
    Outliers [U H] G, normalised, with H spanning extra_dim random directions
    """

    kind: Literal["close"] = "close"
    count: NonNegativeInt
    extra_dim: PositiveInt = 2


OutlierModel = Annotated[
    Union[UniformAmbient, ClusteredOutliers, DependentOutliers, CloseOutliers],
    Field(discriminator="kind"),
]


class ModelSpec(_Strict):
    """
    Full description of a synthetic dataset
    """

    m1: PositiveInt
    n_i: NonNegativeInt
    inlier: InlierModel
    outliers: list[OutlierModel] = Field(default_factory=list)
    sigma_n: NonNegativeFloat = 0.0
    # when given, overrides sigma_n with 1/sqrt(snr)
    snr: PositiveFloat | None = None

    @property
    def r(self) -> int:
        return self.inlier.r

    @property
    def n_o(self) -> int:
        return sum(o.count for o in self.outliers)

    @property
    def m2(self) -> int:
        return self.n_i + self.n_o

    @property
    def noise_level(self) -> float:
        if self.snr is not None:
            return float(self.snr) ** -0.5
        return float(self.sigma_n)

    @model_validator(mode="after")
    def _feasible(self) -> Self:
        check_model(self)
        return self


def check_model(spec: ModelSpec) -> None:
    """
    Raise InvalidSpec naming the first field whose value cannot be realised
    """
    m1 = spec.m1
    inlier = spec.inlier
    if inlier.r > m1:
        raise InvalidSpec(f"inlier.r ({inlier.r}) exceeds m1 ({m1})")
    if spec.m2 < 1:
        raise InvalidSpec("n_i + n_o must be at least 1")
    if isinstance(inlier, UnionOfSubspaces) and inlier.counts is not None:
        if len(inlier.counts) != inlier.m:
            msg = f"inlier.counts has {len(inlier.counts)} entries, inlier.m is {inlier.m}"
            raise InvalidSpec(msg)
        if sum(inlier.counts) != spec.n_i:
            msg = f"inlier.counts sums to {sum(inlier.counts)}, n_i is {spec.n_i}"
            raise InvalidSpec(msg)
    for i, out in enumerate(spec.outliers):
        where = f"outliers.{i}"
        if isinstance(out, DependentOutliers):
            if out.r_o > m1:
                raise InvalidSpec(f"{where}.r_o ({out.r_o}) exceeds m1 ({m1})")
            if out.intersect_dim > min(inlier.r, out.r_o):
                msg = f"{where}.intersect_dim ({out.intersect_dim}) exceeds min(r, r_o)"
                raise InvalidSpec(msg)
            if inlier.r + out.r_o - out.intersect_dim > m1:
                msg = f"{where}: r + r_o - intersect_dim exceeds m1 ({m1})"
                raise InvalidSpec(msg)
        if isinstance(out, CloseOutliers) and inlier.r + out.extra_dim > m1:
            raise InvalidSpec(f"{where}.extra_dim: r + extra_dim exceeds m1 ({m1})")
        if isinstance(out, ClusteredOutliers) and out.q_mode == "near_subspace":
            if inlier.r + 1 > m1:
                raise InvalidSpec(f"{where}.q_mode: near_subspace needs r < m1")


class SolverConfig(_Strict):
    """
    ADMM settings; None means the environment/default value
    """

    rho: PositiveFloat | None = None
    tol: PositiveFloat | None = None
    dual_tol: PositiveFloat | None = None
    max_iters: PositiveInt | None = None
    adaptive_rho: bool | None = None
    polish: bool | None = None
    strict: bool | None = None


class MethodConfig(_Strict):
    """
    Options of the recovery / detection methods
    """

    rank: PositiveInt | None = None
    # None means adaptive column sampling
    keep_fraction: Annotated[float, Field(gt=0.0, lt=1.0)] | None = None
    add_tol: PositiveFloat | None = None
    residual_threshold: Annotated[float, Field(ge=0.0, le=1.0)] = 0.2
    rank_ratio: Annotated[float, Field(gt=0.0, lt=1.0)] | None = None
    reduce: bool = True
    coherence_power: Literal[1, 2] = 2


class SweepSpec(_Strict):
    """
    A grid of ModelSpec variations; axis names are dotted paths into the model
    """

    model: ModelSpec
    axes: dict[str, list[int | float]]
    trials_per_cell: PositiveInt = 20
    criterion: Criterion = "recovery"

    @model_validator(mode="after")
    def _non_empty(self) -> Self:
        if not self.axes:
            raise ValueError("axes: at least one axis is required")
        for name, values in self.axes.items():
            if not values:
                raise ValueError(f"axes.{name}: no values")
        return self


class ExperimentConfig(_Strict):
    """
    One reproducible cli run, read from a JSON file
    """

    mode: Mode
    name: str | None = None
    seed: Annotated[int, Field(ge=0, le=U64_MAX)] = 0
    model: ModelSpec | None = None
    data: str | None = None
    clusters: str | None = None
    num_clusters: PositiveInt | None = None
    corruption: Annotated[float, Field(ge=0.0, lt=1.0)] = 0.25
    method: MethodConfig = Field(default_factory=MethodConfig)
    solver: SolverConfig = Field(default_factory=SolverConfig)
    sweep: SweepSpec | None = None
    methods: list[Method] = Field(default_factory=lambda: ["isearch"])
    out_dir: str = "."

    @model_validator(mode="after")
    def _inputs_for_mode(self) -> Self:
        has_input = self.data is not None or self.model is not None
        if self.mode == "gen" and self.model is None:
            raise ValueError("model: required for mode 'gen'")
        if self.mode in ("run", "cop", "pca", "cluster") and not has_input:
            raise ValueError(f"data: mode '{self.mode}' needs data or model")
        if self.mode in ("run", "pca") and self.model is None:
            if self.method.rank is None:
                raise ValueError(f"method.rank: required for mode '{self.mode}'")
        if self.mode == "cluster" and self.num_clusters is None:
            if not isinstance(getattr(self.model, "inlier", None), UnionOfSubspaces):
                raise ValueError("num_clusters: required for mode 'cluster'")
        if self.mode == "correct":
            if self.clusters is None and self.model is None:
                raise ValueError("clusters: mode 'correct' needs clusters or model")
            if self.clusters is not None and self.method.rank is None:
                raise ValueError("method.rank: required with clusters")
        if self.mode == "sweep" and self.sweep is None:
            raise ValueError("sweep: required for mode 'sweep'")
        return self
