import dataclasses
import typing as T

from validobj.errors import ValidationError
from validobj.validation import parse_input

from .errors import ConfigError

# Cannot use `from __future__ import annotations` because validobj does not
# support annotations


@dataclasses.dataclass
class FitConfig:
    """
    Settings for the block alternating maximum likelihood fit
    """

    err0: float = 0.01
    """Stop when the log-likelihood changes by less than this (outer and inner loops)"""

    eps0: float = 0.005
    """Margin subtracted from the smallest eigenvalue when shifting the
    loading subproblem matrices to be positive definite"""

    max_outer: int = 500
    """Cap on outer iterations"""

    max_inner: int = 200
    """Cap on iterations of each inner loop (loading updates and EM)"""

    init: str = "svd"
    """Starting point: ``svd``, ``random:<seed>`` or ``provided``"""

    label_check: bool = True
    """With the svd start, also fit from the start that gives the strongest
    components to the column factors and keep the better of the two"""

    restarts: int = 1
    """Number of starts; starts after the first are random"""

    restart_seed: int = 0
    """Seed of the first random restart, later restarts add their index"""

    variance_floor: float = 1e-10
    """Variance updates below this are clamped"""

    gradient_check: bool = True
    """Compute the finite difference gradient at the estimate"""

    gradient_step: float = 1e-5
    """Relative step of the finite difference gradient"""

    def __post_init__(self):
        if not self.err0 > 0:
            raise ConfigError(f"err0 must be positive, got {self.err0}")
        if not self.eps0 > 0:
            raise ConfigError(f"eps0 must be positive, got {self.eps0}")
        if self.max_outer < 1 or self.max_inner < 1:
            raise ConfigError("max_outer and max_inner must be at least 1")
        if self.restarts < 1:
            raise ConfigError(f"restarts must be at least 1, got {self.restarts}")
        if not self.variance_floor > 0:
            raise ConfigError("variance_floor must be positive")
        if not self.gradient_step > 0:
            raise ConfigError("gradient_step must be positive")
        # validates the init string
        self.init_mode

    @property
    def init_mode(self) -> str:
        mode, _, arg = self.init.partition(":")
        if mode in ("svd", "provided") and not arg:
            return mode
        if mode == "random":
            try:
                int(arg)
            except ValueError:
                raise ConfigError(
                    f"random init needs an integer seed (random:<seed>), got {self.init!r}"
                ) from None
            return mode
        raise ConfigError(
            f"init must be 'svd', 'random:<seed>' or 'provided', got {self.init!r}"
        )

    @property
    def init_seed(self) -> T.Optional[int]:
        if self.init_mode == "random":
            return int(self.init.partition(":")[2])
        return None


@dataclasses.dataclass
class DistributionConfig:
    """
    Distribution of the latent factor scores
    """

    kind: T.Literal["gaussian", "centered_chi_square"] = "gaussian"

    df: float = 1.0
    """Degrees of freedom of the chi-square variant"""

    def __post_init__(self):
        if not self.df > 0:
            raise ConfigError(f"df must be positive, got {self.df}")


@dataclasses.dataclass
class GridPoint:
    p: int
    q: int


@dataclasses.dataclass
class StudyConfig:
    """
    Contents of a Monte Carlo study document
    """

    grid: T.List[GridPoint]
    """(p, q) cells"""

    psiF: T.List[T.List[float]]
    """Row factor variance settings; each entry is one diagonal of length r"""

    psiE: T.List[float]
    """Column factor variance diagonal, length c"""

    sigma2: float = 0.01

    replicates: int = 100

    factor_dist: DistributionConfig = dataclasses.field(
        default_factory=lambda: DistributionConfig()
    )

    base_seed: int = 0

    fit: FitConfig = dataclasses.field(
        default_factory=lambda: FitConfig(gradient_check=False)
    )

    init: T.Literal["svd", "truth"] = "svd"
    """Start each fit from the SVD of the data, or from the sampled parameters.
    ``truth`` is an oracle start: with a loose ``err0`` the fit stops close to
    the true parameters, so its metrics are not those of the maximum
    likelihood estimate"""

    metrics: T.List[str] = dataclasses.field(
        default_factory=lambda: ["r2", "variances", "clt", "coverage"]
    )

    delta_grid: T.Optional[T.List[float]] = None
    """Ratios psiF/psiE for a delta sweep (single factor cells only)"""

    skip_degenerate: bool = True
    """Drop delta == 1 from a sweep grid"""

    ci_level: float = 0.95

    threads: int = 1

    full_scale: bool = False
    """Allow cells with p or q above the desk scale limit"""

    def __post_init__(self):
        if not self.grid:
            raise ConfigError("study grid is empty")
        if not self.psiF or any(len(d) == 0 for d in self.psiF):
            raise ConfigError("psiF needs at least one non-empty diagonal")
        if not self.psiE:
            raise ConfigError("psiE must not be empty")
        if len({len(d) for d in self.psiF}) != 1:
            raise ConfigError("every psiF diagonal must have the same length")
        if not self.sigma2 > 0:
            raise ConfigError(f"sigma2 must be positive, got {self.sigma2}")
        if self.replicates < 1:
            raise ConfigError("replicates must be at least 1")
        if self.threads < 1:
            raise ConfigError("threads must be at least 1")
        if not 0 < self.ci_level < 1:
            raise ConfigError(f"ci_level must be in (0, 1), got {self.ci_level}")
        unknown = set(self.metrics) - set(METRICS)
        if unknown:
            raise ConfigError(f"unknown metrics: {', '.join(sorted(unknown))}")
        for point in self.grid:
            if point.p < 2 or point.q < 2:
                raise ConfigError(f"grid cell ({point.p}, {point.q}) is too small")
            if min(point.p, point.q) <= max(self.r, self.c):
                raise ConfigError(
                    f"grid cell ({point.p}, {point.q}) cannot identify r={self.r}, c={self.c}"
                )
            if max(point.p, point.q) > DESK_SCALE_LIMIT and not self.full_scale:
                raise ConfigError(
                    f"grid cell ({point.p}, {point.q}) exceeds the desk scale limit "
                    f"{DESK_SCALE_LIMIT}; set full_scale to run it"
                )
        if self.delta_grid is not None:
            if self.r != 1 or self.c != 1:
                raise ConfigError("a delta sweep needs r = c = 1")
            if any(not d > 0 for d in self.delta_grid):
                raise ConfigError("delta values must be positive")

    @property
    def r(self) -> int:
        return len(self.psiF[0])

    @property
    def c(self) -> int:
        return len(self.psiE)


@dataclasses.dataclass
class ParamsDocument:
    """
    JSON form of the model parameters; matrices are row-major nested lists
    """

    p: int
    q: int
    r: int
    c: int
    L: T.List[T.List[float]]
    Lambda: T.List[T.List[float]]
    psiF: T.List[float]
    psiE: T.List[float]
    sigma2: float
    schema_version: int = 1


METRICS = ("r2", "variances", "clt", "coverage")

#: cells with p or q above this need ``full_scale``
DESK_SCALE_LIMIT = 500

_T = T.TypeVar("_T")


def load(data: T.Any, cls: T.Type[_T], what: str) -> _T:
    """Parse a decoded JSON document into a configuration dataclass"""
    try:
        return parse_input(data, cls)
    except ConfigError:
        raise
    except (ValidationError, TypeError, ValueError) as e:
        raise ConfigError(f"Error in {what}: {e}") from e
