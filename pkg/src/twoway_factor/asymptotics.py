# SPDX-License-Identifier: MIT
"""
Large-sample variances of the maximum likelihood estimate and the
confidence intervals built from them.

For r = c = 1 and Δ = σ²_F / σ²_E the row loading variance reduces to

    G(y, Δ) = σ² [1/σ²_F + (y + Δ)/(Δ − 1)²]

which grows without bound as Δ → 1 and falls to the classical factor model
value σ²/σ²_F as Δ → ∞.
"""

from __future__ import annotations

import dataclasses
import typing as T

import numpy as np
import scipy.stats

from .errors import ConfigError, DivergentVarianceError
from .model import NEAR_DEGENERATE_GAP, SEP_TOL, Dims, ModelParams, variance_gaps


@dataclasses.dataclass(frozen=True, eq=False)
class AsymptoticVariances:
    sigmaL: np.ndarray
    sigmaLambda: np.ndarray
    varPsiF: np.ndarray
    varPsiE: np.ndarray
    varSigma2: float
    y: float


def _loading_variances(
    sigma2: float, own: np.ndarray, other: np.ndarray, y: float
) -> np.ndarray:
    # Σ_jj = σ²/own_j + Σᵢ σ² otherᵢ (y otherᵢ + own_j) / (own_j − otherᵢ)²
    own = own[:, None]
    other = other[None, :]
    with np.errstate(divide="ignore", invalid="ignore"):
        cross = sigma2 * other * (y * other + own) / (own - other) ** 2
    return sigma2 / own[:, 0] + np.sum(cross, axis=1)


def _variances(psiF, psiE, sigma2: float, y: float) -> T.Tuple[np.ndarray, np.ndarray]:
    psiF = np.asarray(psiF, dtype=float)
    psiE = np.asarray(psiE, dtype=float)
    sigmaL = _loading_variances(sigma2, psiF, psiE, y)
    # mirror: swap the sides and replace y by 1/y
    sigmaLam = _loading_variances(sigma2, psiE, psiF, 1.0 / y)
    return sigmaL, sigmaLam


def limiting_variances(
    params: ModelParams, y: T.Optional[float] = None
) -> AsymptoticVariances:
    """
    Asymptotic variances of √p(L̂ − L), √q(Λ̂ − Λ), the factor variances and
    √(pq)(σ̂̃² − σ²). ``y`` defaults to p/q.
    """
    d = params.dims
    if y is None:
        y = d.p / d.q
    if not y > 0:
        raise ConfigError(f"aspect ratio y must be positive, got {y}")
    gap = float(np.min(variance_gaps(params.psiF, params.psiE)))
    if gap <= SEP_TOL:
        raise DivergentVarianceError(
            "a row factor variance equals a column factor variance; "
            "the loading variances are infinite"
        )
    sigmaL, sigmaLam = _variances(params.psiF, params.psiE, params.sigma2, y)
    return AsymptoticVariances(
        sigmaL=np.diag(sigmaL),
        sigmaLambda=np.diag(sigmaLam),
        varPsiF=2.0 * np.asarray(params.psiF) ** 2,
        varPsiE=2.0 * np.asarray(params.psiE) ** 2,
        varSigma2=2.0 * params.sigma2**2,
        y=float(y),
    )


def scalar_variance(sigma2: float, sigmaF2: float, y: float, delta: float) -> float:
    """G(y, Δ); infinite at Δ = 1"""
    if delta == 1:
        return float("inf")
    return sigma2 * (1.0 / sigmaF2 + (y + delta) / (delta - 1.0) ** 2)


@dataclasses.dataclass(frozen=True)
class CurvePoint:
    delta: float
    g: float
    valid: bool


def variance_curve(
    sigma2: float, sigmaF2: float, y: float, delta_grid: T.Iterable[float]
) -> T.List[CurvePoint]:
    """G over a grid of Δ; Δ = 1 and negative Δ are kept but marked invalid"""
    points = []
    for delta in delta_grid:
        delta = float(delta)
        if delta == 1 or delta < 0:
            points.append(CurvePoint(delta, float("nan"), False))
        else:
            points.append(CurvePoint(delta, scalar_variance(sigma2, sigmaF2, y, delta), True))
    return points


def corrected_sigma2(sigma2_hat: float, dims: Dims) -> float:
    """Finite sample correction (1 + c/p + r/q) σ̂²"""
    if not sigma2_hat > 0:
        raise ValueError(f"sigma2_hat must be positive, got {sigma2_hat}")
    return (1.0 + dims.c / dims.p + dims.r / dims.q) * sigma2_hat


@dataclasses.dataclass(frozen=True, eq=False)
class LoadingIntervals:
    level: float
    L_lower: np.ndarray
    L_upper: np.ndarray
    Lambda_lower: np.ndarray
    Lambda_upper: np.ndarray
    half_width_L: np.ndarray
    """per column of L"""
    half_width_Lambda: np.ndarray
    unreliable_L: np.ndarray
    """columns whose variance ratio to some column factor is within 5% of one"""
    unreliable_Lambda: np.ndarray

    @property
    def any_unreliable(self) -> bool:
        return bool(np.any(self.unreliable_L) or np.any(self.unreliable_Lambda))


def loading_ci(
    theta_hat: ModelParams, level: float = 0.95, y: T.Optional[float] = None
) -> LoadingIntervals:
    """Plug-in normal intervals L̂ₘⱼ ± z √(Σ_L,jj / p) and Λ̂ᵢₖ ± z √(Σ_Λ,kk / q)"""
    if not 0 < level < 1:
        raise ConfigError(f"level must be in (0, 1), got {level}")
    d = theta_hat.dims
    if y is None:
        y = d.p / d.q
    if not y > 0:
        raise ConfigError(f"aspect ratio y must be positive, got {y}")
    z = scipy.stats.norm.ppf(0.5 + level / 2.0)
    sigmaL, sigmaLam = _variances(theta_hat.psiF, theta_hat.psiE, theta_hat.sigma2, y)

    # |Δ − 1| < 5% with Δ = σ²_F / σ²_E, rows index column factors
    ratio = np.asarray(theta_hat.psiF)[None, :] / np.asarray(theta_hat.psiE)[:, None]
    near = np.abs(ratio - 1.0) < NEAR_DEGENERATE_GAP
    unreliableL = np.any(near, axis=0) | ~np.isfinite(sigmaL)
    unreliableLam = np.any(near, axis=1) | ~np.isfinite(sigmaLam)

    with np.errstate(invalid="ignore"):
        hwL = z * np.sqrt(sigmaL / d.p)
        hwLam = z * np.sqrt(sigmaLam / d.q)
    L = np.asarray(theta_hat.L)
    Lam = np.asarray(theta_hat.Lambda)
    return LoadingIntervals(
        level=level,
        L_lower=L - hwL[None, :],
        L_upper=L + hwL[None, :],
        Lambda_lower=Lam - hwLam[None, :],
        Lambda_upper=Lam + hwLam[None, :],
        half_width_L=hwL,
        half_width_Lambda=hwLam,
        unreliable_L=unreliableL,
        unreliable_Lambda=unreliableLam,
    )
