# SPDX-License-Identifier: MIT
"""
Monte Carlo studies: loading recovery, variance accuracy, large-sample
behaviour and the dependence on the variance ratio Δ = σ²_F / σ²_E.

Loadings are sampled once per cell and held fixed across replicates so the
metrics measure estimation error only. Every replicate draws its data from
its own seed, which makes a study reproducible bit for bit independently of
the number of worker threads.
"""

from __future__ import annotations

import concurrent.futures
import dataclasses
import logging
import os
import pathlib
import typing as T

import numpy as np
import scipy.stats

from . import _io
from .asymptotics import corrected_sigma2, limiting_variances, loading_ci
from .config import DESK_SCALE_LIMIT, StudyConfig
from .errors import ConfigError, DivergentVarianceError, Error, ModelConditionError
from .estimator import fit
from .model import (
    NEAR_DEGENERATE_GAP,
    Dims,
    ModelParams,
    align_for_comparison,
    loading_accuracy_r2,
    variance_gaps,
)
from .sampler import FactorDistribution, sample, sample_params

logger = logging.getLogger(__name__)

#: offset separating the per-cell loading seeds from the replicate seeds
CELL_SEED_OFFSET = 10_000_019

#: smallest replicate count accepted by :func:`clt_check`
CLT_MIN_REPLICATES = 200

CLT_TARGETS = ("loadings", "psiF", "psiE", "sigma2")


@dataclasses.dataclass(frozen=True)
class Cell:
    """One (p, q, Ψ_F) combination of a study"""

    index: int
    p: int
    q: int
    psiF: T.Tuple[float, ...]
    psiE: T.Tuple[float, ...]
    sigma2: float

    @property
    def dims(self) -> Dims:
        return Dims(self.p, self.q, len(self.psiF), len(self.psiE))


@dataclasses.dataclass(frozen=True, eq=False)
class ReplicateRecord:
    cell: int
    replicate: int
    seed: int
    ok: bool
    reason: str = ""
    """Why the replicate was excluded from the aggregates"""
    start: str = ""
    """``oracle`` for fits started at the true parameters, else the
    :attr:`FitResult.labels` of the fit"""
    converged: bool = False
    iterations: int = 0
    loglik: float = float("nan")
    r2_L: T.Optional[np.ndarray] = None
    r2_Lambda: T.Optional[np.ndarray] = None
    psiF: T.Optional[np.ndarray] = None
    psiE: T.Optional[np.ndarray] = None
    sigma2: float = float("nan")
    sigma2_corrected: float = float("nan")
    err_L: T.Optional[np.ndarray] = None
    """√p (L̂ − L) for the first column, one entry per row of L"""
    err_Lambda: T.Optional[np.ndarray] = None
    """√q (Λ̂ − Λ) for the first column"""
    err_psiF: T.Optional[np.ndarray] = None
    err_psiE: T.Optional[np.ndarray] = None
    err_sigma2: float = float("nan")
    """√(pq) (σ̂̃² − σ²)"""
    coverage_L: float = float("nan")
    coverage_Lambda: float = float("nan")


@dataclasses.dataclass(frozen=True, eq=False)
class CellSummary:
    cell: Cell
    truth: ModelParams
    replicates: int
    successes: int
    failures: int
    convergence_rate: float
    mean_iterations: float
    degenerate: bool
    """Some row variance is within 5% of some column variance"""

    r2_L: float = float("nan")
    r2_Lambda: float = float("nan")
    r2_L_columns: np.ndarray = dataclasses.field(default_factory=lambda: np.array([]))
    r2_Lambda_columns: np.ndarray = dataclasses.field(default_factory=lambda: np.array([]))

    psiF_mean: np.ndarray = dataclasses.field(default_factory=lambda: np.array([]))
    psiF_mae: np.ndarray = dataclasses.field(default_factory=lambda: np.array([]))
    psiF_mse: np.ndarray = dataclasses.field(default_factory=lambda: np.array([]))
    psiE_mean: np.ndarray = dataclasses.field(default_factory=lambda: np.array([]))
    psiE_mae: np.ndarray = dataclasses.field(default_factory=lambda: np.array([]))
    psiE_mse: np.ndarray = dataclasses.field(default_factory=lambda: np.array([]))
    sigma2_mean: float = float("nan")
    sigma2_mae: float = float("nan")
    sigma2_mse: float = float("nan")
    sigma2c_mean: float = float("nan")
    sigma2c_mae: float = float("nan")
    sigma2c_mse: float = float("nan")

    var_L: float = float("nan")
    """Empirical variance of √p(L̂ₘ₁ − Lₘ₁), averaged over m"""
    theory_L: float = float("nan")
    var_Lambda: float = float("nan")
    theory_Lambda: float = float("nan")
    var_sigma2: float = float("nan")
    theory_sigma2: float = float("nan")

    coverage_L: float = float("nan")
    coverage_Lambda: float = float("nan")

    @property
    def ratio_L(self) -> float:
        return _ratio(self.var_L, self.theory_L)

    @property
    def ratio_Lambda(self) -> float:
        return _ratio(self.var_Lambda, self.theory_Lambda)

    @property
    def ratio_sigma2(self) -> float:
        return _ratio(self.var_sigma2, self.theory_sigma2)


@dataclasses.dataclass(frozen=True, eq=False)
class StudyResult:
    config: StudyConfig
    cells: T.List[CellSummary]
    records: T.List[ReplicateRecord]

    def records_for(self, cell: int) -> T.List[ReplicateRecord]:
        return [rec for rec in self.records if rec.cell == cell]

    @property
    def hit_cap(self) -> bool:
        """Some replicate stopped at ``max_outer``"""
        return any(rec.reason == "max_outer" for rec in self.records)


def _ratio(a: float, b: float) -> float:
    if not np.isfinite(a):
        return float("nan")
    if b == float("inf"):
        return 0.0
    return a / b if b > 0 else float("nan")


def cells_of(config: StudyConfig) -> T.List[Cell]:
    cells = []
    for point in config.grid:
        for setting in config.psiF:
            cells.append(
                Cell(
                    index=len(cells),
                    p=point.p,
                    q=point.q,
                    psiF=tuple(float(v) for v in setting),
                    psiE=tuple(float(v) for v in config.psiE),
                    sigma2=float(config.sigma2),
                )
            )
    return cells


#
# Replicates
#


def _run_replicate(
    config: StudyConfig,
    cell: Cell,
    truth: ModelParams,
    dist: FactorDistribution,
    index: int,
) -> ReplicateRecord:
    seed = config.base_seed + index
    d = truth.dims
    try:
        bundle = sample(truth, dist=dist, seed=seed)
        result = fit(
            bundle.X,
            d,
            config.fit,
            initial=truth if config.init == "truth" else None,
        )
    except (Error, np.linalg.LinAlgError, FloatingPointError) as e:
        reason = str(e) if isinstance(e, Error) else f"{type(e).__name__}: {e}"
        logger.debug("cell %d replicate %d failed: %s", cell.index, index, reason)
        return ReplicateRecord(cell.index, index, seed, ok=False, reason=reason)

    est = align_for_comparison(result.theta_hat, truth).params
    s2c = corrected_sigma2(est.sigma2, d)
    fields = dict(
        start="oracle" if config.init == "truth" else result.labels,
        converged=result.converged,
        iterations=len(result.inner_iters),
        loglik=result.loglik,
        r2_L=loading_accuracy_r2(est.L, truth.L).per_column,
        r2_Lambda=loading_accuracy_r2(est.Lambda, truth.Lambda).per_column,
        psiF=np.array(est.psiF),
        psiE=np.array(est.psiE),
        sigma2=est.sigma2,
        sigma2_corrected=s2c,
        err_L=np.sqrt(d.p) * (est.L[:, 0] - truth.L[:, 0]),
        err_Lambda=np.sqrt(d.q) * (est.Lambda[:, 0] - truth.Lambda[:, 0]),
        err_psiF=np.sqrt(d.p) * (est.psiF - truth.psiF),
        err_psiE=np.sqrt(d.q) * (est.psiE - truth.psiE),
        err_sigma2=np.sqrt(d.pq) * (s2c - truth.sigma2),
    )
    if "coverage" in config.metrics:
        ci = loading_ci(est, level=config.ci_level)
        fields["coverage_L"] = float(
            np.mean((ci.L_lower <= truth.L) & (truth.L <= ci.L_upper))
        )
        fields["coverage_Lambda"] = float(
            np.mean((ci.Lambda_lower <= truth.Lambda) & (truth.Lambda <= ci.Lambda_upper))
        )
    logger.debug(
        "cell %d replicate %d: %d iterations, loglik %.10g",
        cell.index,
        index,
        fields["iterations"],
        fields["loglik"],
    )
    if not result.converged:
        return ReplicateRecord(cell.index, index, seed, ok=False, reason="max_outer", **fields)
    return ReplicateRecord(cell.index, index, seed, ok=True, **fields)


#
# Aggregation
#


def _column_variance(errors: T.List[np.ndarray]) -> float:
    if len(errors) < 2:
        return float("nan")
    return float(np.mean(np.var(np.vstack(errors), axis=0, ddof=1)))


def _summarize(
    config: StudyConfig,
    cell: Cell,
    truth: ModelParams,
    records: T.List[ReplicateRecord],
) -> CellSummary:
    good = [rec for rec in records if rec.ok]
    n = len(records)
    gap = float(np.min(variance_gaps(truth.psiF, truth.psiE)))
    base = dict(
        cell=cell,
        truth=truth,
        replicates=n,
        successes=len(good),
        failures=n - len(good),
        convergence_rate=sum(rec.converged for rec in records) / n if n else float("nan"),
        mean_iterations=float(np.mean([rec.iterations for rec in good])) if good else float("nan"),
        degenerate=gap < NEAR_DEGENERATE_GAP,
    )
    if not good:
        return CellSummary(**base)

    metrics = config.metrics
    if "r2" in metrics:
        colsL = np.mean([rec.r2_L for rec in good], axis=0)
        colsLam = np.mean([rec.r2_Lambda for rec in good], axis=0)
        base.update(
            r2_L=float(np.mean(colsL)),
            r2_Lambda=float(np.mean(colsLam)),
            r2_L_columns=colsL,
            r2_Lambda_columns=colsLam,
        )

    if "variances" in metrics:
        psiF = np.vstack([rec.psiF for rec in good])
        psiE = np.vstack([rec.psiE for rec in good])
        s2 = np.array([rec.sigma2 for rec in good])
        s2c = np.array([rec.sigma2_corrected for rec in good])
        errF = psiF - truth.psiF[None, :]
        errE = psiE - truth.psiE[None, :]
        base.update(
            psiF_mean=psiF.mean(axis=0),
            psiF_mae=np.abs(errF).mean(axis=0),
            psiF_mse=(errF**2).mean(axis=0),
            psiE_mean=psiE.mean(axis=0),
            psiE_mae=np.abs(errE).mean(axis=0),
            psiE_mse=(errE**2).mean(axis=0),
            sigma2_mean=float(s2.mean()),
            sigma2_mae=float(np.abs(s2 - truth.sigma2).mean()),
            sigma2_mse=float(((s2 - truth.sigma2) ** 2).mean()),
            sigma2c_mean=float(s2c.mean()),
            sigma2c_mae=float(np.abs(s2c - truth.sigma2).mean()),
            sigma2c_mse=float(((s2c - truth.sigma2) ** 2).mean()),
        )

    if "clt" in metrics:
        try:
            theory = limiting_variances(truth)
            theoryL = float(theory.sigmaL[0, 0])
            theoryLam = float(theory.sigmaLambda[0, 0])
        except DivergentVarianceError:
            theoryL = theoryLam = float("inf")
        errs2 = [rec.err_sigma2 for rec in good]
        base.update(
            var_L=_column_variance([rec.err_L for rec in good]),
            theory_L=theoryL,
            var_Lambda=_column_variance([rec.err_Lambda for rec in good]),
            theory_Lambda=theoryLam,
            var_sigma2=float(np.var(errs2, ddof=1)) if len(errs2) > 1 else float("nan"),
            theory_sigma2=2.0 * truth.sigma2**2,
        )

    if "coverage" in metrics:
        base.update(
            coverage_L=float(np.mean([rec.coverage_L for rec in good])),
            coverage_Lambda=float(np.mean([rec.coverage_Lambda for rec in good])),
        )
    return CellSummary(**base)


#
# Studies
#


def _cell_truth(config: StudyConfig, cell: Cell, strict: bool) -> ModelParams:
    try:
        return sample_params(
            cell.dims,
            cell.psiF,
            cell.psiE,
            cell.sigma2,
            seed=config.base_seed + CELL_SEED_OFFSET + cell.index,
            strict=strict,
        )
    except ModelConditionError as e:
        raise ConfigError(f"cell ({cell.p}, {cell.q}, psiF={list(cell.psiF)}): {e}") from e


def _run(config: StudyConfig, cells: T.List[Cell], strict: bool) -> StudyResult:
    big = [c for c in cells if max(c.p, c.q) > DESK_SCALE_LIMIT]
    if big:
        logger.warning(
            "running %d full-scale cell(s) up to %d x %d; this may take hours",
            len(big),
            max(c.p for c in big),
            max(c.q for c in big),
        )
    if config.init == "truth":
        logger.warning(
            "fits start at the sampled parameters (oracle start); the metrics "
            "describe estimates near the truth, not maximum likelihood estimates"
        )
    dist = FactorDistribution.from_config(config.factor_dist)
    truths = [_cell_truth(config, cell, strict) for cell in cells]
    tasks = [
        (cell, truth, i)
        for cell, truth in zip(cells, truths)
        for i in range(config.replicates)
    ]

    def run(task):
        cell, truth, i = task
        return _run_replicate(config, cell, truth, dist, i)

    if config.threads == 1:
        records = [run(task) for task in tasks]
    else:
        with concurrent.futures.ThreadPoolExecutor(max_workers=config.threads) as pool:
            records = list(pool.map(run, tasks))

    summaries = []
    for cell, truth in zip(cells, truths):
        summary = _summarize(
            config, cell, truth, [rec for rec in records if rec.cell == cell.index]
        )
        logger.info(
            "cell (p=%d, q=%d, psiF=%s): %d/%d replicates ok, R2(L) %.4f, R2(Lambda) %.4f",
            cell.p,
            cell.q,
            list(cell.psiF),
            summary.successes,
            summary.replicates,
            summary.r2_L,
            summary.r2_Lambda,
        )
        summaries.append(summary)
    return StudyResult(config=config, cells=summaries, records=records)


def run_study(config: StudyConfig) -> StudyResult:
    """
    Run every (p, q, Ψ_F) cell of ``config``.

    Failed replicates (an estimation error or stopping at ``max_outer``) are
    kept in ``records`` with their reason and left out of the aggregates.
    Cells that violate the variance conditions raise :class:`ConfigError`.
    """
    return _run(config, cells_of(config), strict=True)


#
# Large-sample checks
#


@dataclasses.dataclass(frozen=True, eq=False)
class CltReport:
    target: str
    cell: Cell
    replicates: int
    empirical_variance: float
    theoretical_variance: float
    ratio: float
    qq_correlation: float
    """Correlation of the sorted samples with standard normal quantiles"""
    samples: np.ndarray
    """Sorted scaled errors"""
    normal_quantiles: np.ndarray
    degenerate: bool


def clt_report(result: StudyResult, cell: int, target: str) -> CltReport:
    """Scaled estimation errors of one cell against their limiting variance"""
    if target not in CLT_TARGETS:
        raise ConfigError(f"unknown target {target!r}, expected one of {', '.join(CLT_TARGETS)}")
    summary = result.cells[cell]
    truth = summary.truth
    good = [rec for rec in result.records_for(cell) if rec.ok]
    if len(good) < 3:
        raise ConfigError(
            f"cell {cell} has {len(good)} successful replicates, need at least 3"
        )
    try:
        theory = limiting_variances(truth)
    except DivergentVarianceError:
        theory = None

    if target == "loadings":
        empirical = _column_variance([rec.err_L for rec in good])
        expected = float(theory.sigmaL[0, 0]) if theory else float("inf")
        samples = np.array([rec.err_L[0] for rec in good])
    elif target == "psiF":
        samples = np.array([rec.err_psiF[0] for rec in good])
        empirical = float(np.var(samples, ddof=1))
        expected = 2.0 * float(truth.psiF[0]) ** 2
    elif target == "psiE":
        samples = np.array([rec.err_psiE[0] for rec in good])
        empirical = float(np.var(samples, ddof=1))
        expected = 2.0 * float(truth.psiE[0]) ** 2
    else:
        samples = np.array([rec.err_sigma2 for rec in good])
        empirical = float(np.var(samples, ddof=1))
        expected = 2.0 * truth.sigma2**2

    (osm, osr), (_, _, r) = scipy.stats.probplot(samples, dist="norm")
    return CltReport(
        target=target,
        cell=summary.cell,
        replicates=len(good),
        empirical_variance=empirical,
        theoretical_variance=expected,
        ratio=_ratio(empirical, expected),
        qq_correlation=float(r),
        samples=np.asarray(osr),
        normal_quantiles=np.asarray(osm),
        degenerate=summary.degenerate,
    )


def clt_check(
    config: StudyConfig,
    target: str,
    result: T.Optional[StudyResult] = None,
    allow_small: bool = False,
) -> CltReport:
    """
    Compare the spread of √p-, √q- or √(pq)-scaled errors in a single-cell
    study with the large-sample prediction. ``result`` reuses finished runs.
    """
    if len(config.grid) != 1 or len(config.psiF) != 1:
        raise ConfigError("clt_check needs a study with exactly one cell")
    if config.replicates < CLT_MIN_REPLICATES and not allow_small:
        raise ConfigError(
            f"clt_check needs at least {CLT_MIN_REPLICATES} replicates, "
            f"got {config.replicates}"
        )
    if result is None:
        result = run_study(config)
    return clt_report(result, 0, target)


#
# Delta sweep
#


@dataclasses.dataclass(frozen=True, eq=False)
class DeltaPoint:
    delta: float
    p: int
    q: int
    psiF: float
    psiE: float
    r2_L: float
    r2_Lambda: float
    successes: int
    failures: int
    degenerate: bool


def delta_sweep(
    config: StudyConfig, delta_grid: T.Optional[T.Sequence[float]] = None
) -> T.List[DeltaPoint]:
    """
    Mean R² of both loadings as σ²_F = Δ σ²_E varies, for single-factor cells.

    The Ψ_F settings of ``config`` are ignored. Δ = 1 is dropped when
    ``skip_degenerate`` is set and otherwise run with a warning.
    """
    if config.r != 1 or config.c != 1:
        raise ConfigError("a delta sweep needs r = c = 1")
    if delta_grid is None:
        delta_grid = config.delta_grid
    if not delta_grid:
        raise ConfigError("delta sweep needs a non-empty delta grid")
    psiE = float(config.psiE[0])
    deltas = [float(d) for d in delta_grid]
    if config.skip_degenerate:
        deltas = [d for d in deltas if d != 1.0]

    points = []
    for delta in deltas:
        sub = dataclasses.replace(config, psiF=[[delta * psiE]], delta_grid=None)
        result = _run(sub, cells_of(sub), strict=False)
        for summary in result.cells:
            points.append(
                DeltaPoint(
                    delta=delta,
                    p=summary.cell.p,
                    q=summary.cell.q,
                    psiF=delta * psiE,
                    psiE=psiE,
                    r2_L=summary.r2_L,
                    r2_Lambda=summary.r2_Lambda,
                    successes=summary.successes,
                    failures=summary.failures,
                    degenerate=summary.degenerate,
                )
            )
    return points


#
# Output tables
#


def _join(values) -> str:
    return ";".join(_io.format_float(v) for v in values)


def table_header(config: StudyConfig) -> T.List[str]:
    r, c = config.r, config.c
    header = ["p", "q", "psiF", "psiE", "replicates", "successes", "failures",
              "convergence_rate", "mean_iterations"]
    metrics = config.metrics
    if "r2" in metrics:
        header += ["r2_L", "r2_Lambda"]
        if r > 1:
            header += [f"r2_L{j + 1}" for j in range(r)]
        if c > 1:
            header += [f"r2_Lambda{i + 1}" for i in range(c)]
    if "variances" in metrics:
        for name, k in (("psiF", r), ("psiE", c)):
            for j in range(k):
                header += [f"{name}{j + 1}_{s}" for s in ("mean", "mae", "mse")]
        header += ["sigma2_mean", "sigma2_mae", "sigma2_mse"]
        header += ["sigma2c_mean", "sigma2c_mae", "sigma2c_mse"]
    if "clt" in metrics:
        header += ["var_L", "theory_L", "ratio_L", "var_Lambda", "theory_Lambda",
                   "ratio_Lambda", "var_sigma2", "theory_sigma2", "ratio_sigma2"]
    if "coverage" in metrics:
        header += ["coverage_L", "coverage_Lambda"]
    return header


def table_row(config: StudyConfig, s: CellSummary) -> T.List[T.Any]:
    r, c = config.r, config.c
    nan = float("nan")
    row = [s.cell.p, s.cell.q, _join(s.cell.psiF), _join(s.cell.psiE), s.replicates,
           s.successes, s.failures, float(s.convergence_rate), float(s.mean_iterations)]
    metrics = config.metrics
    if "r2" in metrics:
        row += [s.r2_L, s.r2_Lambda]
        if r > 1:
            row += list(s.r2_L_columns) if s.r2_L_columns.size else [nan] * r
        if c > 1:
            row += list(s.r2_Lambda_columns) if s.r2_Lambda_columns.size else [nan] * c
    if "variances" in metrics:
        for mean, mae, mse, k in (
            (s.psiF_mean, s.psiF_mae, s.psiF_mse, r),
            (s.psiE_mean, s.psiE_mae, s.psiE_mse, c),
        ):
            for j in range(k):
                if mean.size:
                    row += [mean[j], mae[j], mse[j]]
                else:
                    row += [nan] * 3
        row += [s.sigma2_mean, s.sigma2_mae, s.sigma2_mse]
        row += [s.sigma2c_mean, s.sigma2c_mae, s.sigma2c_mse]
    if "clt" in metrics:
        row += [s.var_L, s.theory_L, s.ratio_L, s.var_Lambda, s.theory_Lambda,
                s.ratio_Lambda, s.var_sigma2, s.theory_sigma2, s.ratio_sigma2]
    if "coverage" in metrics:
        row += [s.coverage_L, s.coverage_Lambda]
    return row


REPLICATE_HEADER = [
    "cell", "replicate", "seed", "ok", "reason", "start", "converged", "iterations",
    "loglik", "r2_L", "r2_Lambda", "sigma2", "sigma2_corrected",
]


def _replicate_row(rec: ReplicateRecord) -> T.List[T.Any]:
    nan = float("nan")
    return [
        rec.cell,
        rec.replicate,
        rec.seed,
        rec.ok,
        rec.reason,
        rec.start,
        rec.converged,
        rec.iterations,
        rec.loglik,
        float(np.mean(rec.r2_L)) if rec.r2_L is not None else nan,
        float(np.mean(rec.r2_Lambda)) if rec.r2_Lambda is not None else nan,
        rec.sigma2,
        rec.sigma2_corrected,
    ]


SWEEP_HEADER = ["delta", "p", "q", "psiF", "psiE", "r2_L", "r2_Lambda",
                "successes", "failures", "degenerate"]


def write_sweep(path: _io.PathLike, points: T.Sequence[DeltaPoint]) -> None:
    _io.write_table_csv(
        path,
        SWEEP_HEADER,
        (
            [pt.delta, pt.p, pt.q, pt.psiF, pt.psiE, pt.r2_L, pt.r2_Lambda,
             pt.successes, pt.failures, pt.degenerate]
            for pt in points
        ),
    )


def write_study(
    out_dir: T.Union[str, "os.PathLike[str]"], result: StudyResult
) -> T.List[pathlib.Path]:
    """
    Write ``table.csv`` (one row per cell), ``replicates.csv`` and, when the
    ``clt`` metric is requested, one Q-Q sample file per cell and target.
    """
    out = pathlib.Path(out_dir)
    config = result.config
    written = []

    path = out / "table.csv"
    _io.write_table_csv(path, table_header(config), (table_row(config, s) for s in result.cells))
    written.append(path)

    path = out / "replicates.csv"
    _io.write_table_csv(path, REPLICATE_HEADER, (_replicate_row(rec) for rec in result.records))
    written.append(path)

    if "clt" in config.metrics:
        for summary in result.cells:
            if sum(rec.ok for rec in result.records_for(summary.cell.index)) < 3:
                continue
            for target in CLT_TARGETS:
                report = clt_report(result, summary.cell.index, target)
                path = out / f"qq_cell{summary.cell.index}_{target}.csv"
                _io.write_table_csv(
                    path,
                    ["normal_quantile", "sample"],
                    zip(report.normal_quantiles, report.samples),
                )
                written.append(path)
    return written
