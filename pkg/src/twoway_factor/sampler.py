# SPDX-License-Identifier: MIT

from __future__ import annotations

import dataclasses
import typing as T
import warnings

import numpy as np

from .config import DistributionConfig
from .errors import ConfigError, ModelConditionError, NearDegenerateWarning
from .model import (
    NEAR_DEGENERATE_GAP,
    SEP_TOL,
    DataMatrix,
    Dims,
    FactorScores,
    ModelParams,
    variance_gaps,
)


@dataclasses.dataclass(frozen=True)
class FactorDistribution:
    """Law of the latent factor scores, scaled to the target variances"""

    kind: T.Literal["gaussian", "centered_chi_square"] = "gaussian"
    df: float = 1.0

    def __post_init__(self):
        if self.kind not in ("gaussian", "centered_chi_square"):
            raise ConfigError(f"unknown factor distribution {self.kind!r}")
        if not self.df > 0:
            raise ConfigError(f"df must be positive, got {self.df}")

    @classmethod
    def from_config(cls, cfg: DistributionConfig) -> FactorDistribution:
        return cls(kind=cfg.kind, df=cfg.df)

    def draw(self, rng: np.random.Generator, n: int, variances) -> np.ndarray:
        """n×k matrix with independent columns of the given variances"""
        scale = np.sqrt(np.asarray(variances, dtype=float))
        k = scale.shape[0]
        if self.kind == "gaussian":
            base = rng.standard_normal((n, k))
        else:
            base = (rng.chisquare(self.df, (n, k)) - self.df) / np.sqrt(2.0 * self.df)
        return base * scale[None, :]


@dataclasses.dataclass(frozen=True, eq=False)
class SampleBundle:
    X: DataMatrix
    scores: FactorScores
    noise: np.ndarray
    seed: int
    params: ModelParams


def check_variances(psiF, psiE, sigma2: float, strict: bool = True) -> None:
    """
    Raise :class:`ModelConditionError` unless the variances are positive,
    strictly decreasing within each side and separated across sides. With
    ``strict=False`` coinciding row/column variances only warn.
    """
    psiF = np.atleast_1d(np.asarray(psiF, dtype=float))
    psiE = np.atleast_1d(np.asarray(psiE, dtype=float))
    if not sigma2 > 0 or np.any(psiF <= 0) or np.any(psiE <= 0):
        raise ModelConditionError("all variances must be strictly positive")
    for name, v in (("psiF", psiF), ("psiE", psiE)):
        if np.any(np.diff(v) >= 0):
            raise ModelConditionError(
                f"{name} must be strictly decreasing, got {v.tolist()}"
            )
    gap = float(np.min(variance_gaps(psiF, psiE)))
    if gap <= SEP_TOL:
        msg = (
            f"row factor variances {psiF.tolist()} and column factor variances "
            f"{psiE.tolist()} must all differ"
        )
        if strict:
            raise ModelConditionError(msg)
        warnings.warn(msg, NearDegenerateWarning, stacklevel=2)
    elif gap < NEAR_DEGENERATE_GAP:
        warnings.warn(
            f"row and column factor variances differ by only {gap:.2%}",
            NearDegenerateWarning,
            stacklevel=2,
        )


def _uniform_directions(rng: np.random.Generator, n: int, k: int) -> np.ndarray:
    # Gram-Schmidt on U[0,1] columns; for k = 1 this is the normalized draw
    U = rng.uniform(0.0, 1.0, size=(n, k))
    Q, R = np.linalg.qr(U)
    return Q * np.sign(np.diag(R))[None, :]


def sample_params(
    dims: Dims, psiF, psiE, sigma2: float, seed: int, strict: bool = True
) -> ModelParams:
    """Loadings from uniform draws made orthonormal and scaled to the identification constraints"""
    dims.check_estimable()
    psiF = np.atleast_1d(np.asarray(psiF, dtype=float))
    psiE = np.atleast_1d(np.asarray(psiE, dtype=float))
    if psiF.shape != (dims.r,) or psiE.shape != (dims.c,):
        raise ModelConditionError(
            f"need {dims.r} row and {dims.c} column variances, "
            f"got {psiF.shape[0]} and {psiE.shape[0]}"
        )
    check_variances(psiF, psiE, sigma2, strict=strict)

    rng = np.random.default_rng(seed)
    QL = _uniform_directions(rng, dims.q, dims.r)
    QLam = _uniform_directions(rng, dims.p, dims.c)
    params = ModelParams.from_directions(dims, QL, QLam, psiF, psiE, sigma2)
    return params.canonicalized()


def sample(
    params: ModelParams, dist: T.Optional[FactorDistribution] = None, seed: int = 0
) -> SampleBundle:
    """Draw X = F Lᵀ + Λ Eᵀ + ε"""
    if dist is None:
        dist = FactorDistribution()
    d = params.dims
    rng = np.random.default_rng(seed)
    F = dist.draw(rng, d.p, params.psiF)
    E = dist.draw(rng, d.q, params.psiE)
    noise = rng.normal(0.0, np.sqrt(params.sigma2), size=(d.p, d.q))
    X = F @ params.L.T + params.Lambda @ E.T + noise
    return SampleBundle(
        X=DataMatrix(X),
        scores=FactorScores(F=F, E=E),
        noise=noise,
        seed=seed,
        params=params,
    )
