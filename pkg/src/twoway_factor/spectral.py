# SPDX-License-Identifier: MIT
"""
Closed-form inverse, log-determinant and log-likelihood for the Kronecker-sum
covariance of vec(X),

    Σ = I_p ⊗ A + B ⊗ I_q + σ² I,   A = L Ψ_F Lᵀ,  B = Λ Ψ_E Λᵀ,

where vec stacks the rows of X (``X.reshape(-1)``). Under the scaled
orthonormality of the loadings every quantity reduces to a handful of
r- and c-sized sums, so nothing of size pq×pq is ever formed except by the
dense oracle functions at the bottom, which exist for testing.
"""

from __future__ import annotations

import dataclasses
import typing as T
import warnings

import numpy as np
import scipy.linalg

from .errors import (
    ConstraintWarning,
    DimensionError,
    NotPositiveDefiniteError,
    OracleCapError,
)
from .model import DENSE_CAP, TOL_ESTIMATED, ModelParams, as_array


@dataclasses.dataclass(frozen=True, eq=False)
class SpectralCoefficients:
    """
    Coefficients of

        Σ⁻¹ = d1 I − Σⱼ d2ⱼ (I ⊗ Aⱼ) − Σᵢ d3ᵢ (Bᵢ ⊗ I) + Σᵢⱼ d4ᵢⱼ (Bᵢ ⊗ Aⱼ)

    with Aⱼ = LⱼLⱼᵀ and Bᵢ = ΛᵢΛᵢᵀ (unweighted rank-one projectors scaled by
    the loading norms).
    """

    d1: float
    d2: np.ndarray
    d3: np.ndarray
    d4: np.ndarray
    log_det: float


@dataclasses.dataclass(frozen=True, eq=False)
class QuadraticForms:
    q1: float
    q2: np.ndarray
    q3: np.ndarray
    q4: np.ndarray


def _signal_ratios(params: ModelParams) -> T.Tuple[np.ndarray, np.ndarray]:
    d = params.dims
    return d.q * params.psiF, d.p * params.psiE


def _check_constraint(params: ModelParams, tol: float) -> None:
    resL, resLam = params.scale_residuals()
    if max(resL, resLam) > tol:
        warnings.warn(
            f"loadings violate scaled orthonormality (residuals {resL:.3g}, "
            f"{resLam:.3g}); closed-form likelihood terms are approximate",
            ConstraintWarning,
            stacklevel=3,
        )


def log_det_sigma(params: ModelParams) -> float:
    """ln|Σ| accumulated in log space"""
    d = params.dims
    a, b = _signal_ratios(params)
    return float(
        d.pq * np.log(params.sigma2)
        + (d.p - d.c) * np.sum(np.log1p(a))
        + (d.q - d.r) * np.sum(np.log1p(b))
        + np.sum(np.log1p(a[None, :] + b[:, None]))
    )


def spectral_coeffs(
    params: ModelParams, constraint_tol: float = TOL_ESTIMATED
) -> SpectralCoefficients:
    _check_constraint(params, constraint_tol)
    s2 = params.sigma2
    a, b = _signal_ratios(params)
    A = a[None, :]
    B = b[:, None]
    # the textbook form 1 - 1/(1+a) - 1/(1+b) + 1/(1+a+b) cancels badly for
    # small variances; this grouping is exact and sign-stable
    d4 = (2.0 + A + B) / (s2**3 * (1.0 + A) * (1.0 + B) * (1.0 + A + B))
    return SpectralCoefficients(
        d1=1.0 / s2,
        d2=1.0 / (s2**2 * (1.0 + a)),
        d3=1.0 / (s2**2 * (1.0 + b)),
        d4=d4,
        log_det=log_det_sigma(params),
    )


def quadratic_forms(X, L: np.ndarray, Lambda: np.ndarray) -> QuadraticForms:
    X = as_array(X)
    L = np.asarray(L, dtype=float)
    Lambda = np.asarray(Lambda, dtype=float)
    p, q = X.shape
    if L.shape[0] != q or Lambda.shape[0] != p:
        raise DimensionError(
            f"X is {p}×{q} but L has {L.shape[0]} rows and Lambda has {Lambda.shape[0]}"
        )
    XL = X @ L
    XtLam = X.T @ Lambda
    LamXL = Lambda.T @ XL
    return QuadraticForms(
        q1=float(np.sum(X * X)),
        q2=np.sum(XL * XL, axis=0),
        q3=np.sum(XtLam * XtLam, axis=0),
        q4=LamXL * LamXL,
    )


def log_likelihood(params: ModelParams, X) -> float:
    """
    −ln|Σ| − vec(X)ᵀ Σ⁻¹ vec(X), i.e. twice the Gaussian log-density with the
    constant dropped.
    """
    X = as_array(X)
    if X.shape != (params.dims.p, params.dims.q):
        raise DimensionError(
            f"X has shape {X.shape}, expected {(params.dims.p, params.dims.q)}"
        )
    k = spectral_coeffs(params)
    f = quadratic_forms(X, params.L, params.Lambda)
    psiF = params.psiF
    psiE = params.psiE
    quad = (
        k.d1 * f.q1
        - np.sum(psiF * k.d2 * f.q2)
        - np.sum(psiE * k.d3 * f.q3)
        + np.sum(psiE[:, None] * psiF[None, :] * k.d4 * f.q4)
    )
    return float(-k.log_det - quad)


#
# Generic structured inverse
#


def miller_inverse(
    G: np.ndarray,
    E: np.ndarray,
    layout: T.Literal["left", "right"] = "left",
    rank_tol: float = 1e-12,
    cap: int = DENSE_CAP,
) -> np.ndarray:
    """
    Inverse of a positive definite Kronecker sum with a low-rank term.

    ``layout="left"`` inverts W = G ⊗ I_N + I_M ⊗ E and ``layout="right"``
    inverts W = I_N ⊗ G + E ⊗ I_M, where G is M×M positive definite and E is
    N×N positive semidefinite. With E = Σᵢ λᵢ eᵢeᵢᵀ over its numerically
    nonzero eigenvalues,

        W⁻¹ = G⁻¹ ⊗ I − Σᵢ (G + λᵢI)⁻¹ G⁻¹ ⊗ λᵢ eᵢeᵢᵀ

    (factors swapped for the right layout).
    """
    G = np.asarray(G, dtype=float)
    E = np.asarray(E, dtype=float)
    for name, M in (("G", G), ("E", E)):
        if M.ndim != 2 or M.shape[0] != M.shape[1]:
            raise DimensionError(f"{name} must be square, got shape {M.shape}")
        if not np.allclose(M, M.T, rtol=1e-12, atol=1e-12 * max(1.0, np.max(np.abs(M)))):
            raise DimensionError(f"{name} must be symmetric")
    if layout not in ("left", "right"):
        raise ValueError(f"unknown layout {layout!r}")
    M = G.shape[0]
    N = E.shape[0]
    if M * N > cap:
        raise OracleCapError(f"dense inverse of size {M * N} exceeds cap {cap}")

    try:
        Gfac = scipy.linalg.cho_factor(G)
    except np.linalg.LinAlgError as e:
        raise NotPositiveDefiniteError("G is not positive definite") from e
    Ginv = scipy.linalg.cho_solve(Gfac, np.eye(M))

    lam, vecs = scipy.linalg.eigh(E)
    lam_max = float(np.max(np.abs(lam))) if lam.size else 0.0
    if lam.size and lam[0] < -rank_tol * lam_max:
        raise NotPositiveDefiniteError(
            f"E is not positive semidefinite (smallest eigenvalue {lam[0]:.4g})"
        )
    keep = lam > rank_tol * lam_max if lam_max > 0 else np.zeros_like(lam, dtype=bool)

    def kron(g, e):
        return np.kron(g, e) if layout == "left" else np.kron(e, g)

    W = kron(Ginv, np.eye(N))
    for lam_i, e_i in zip(lam[keep], vecs[:, keep].T):
        inner = scipy.linalg.solve(G + lam_i * np.eye(M), Ginv, assume_a="sym")
        W -= kron(inner, lam_i * np.outer(e_i, e_i))
    return W


#
# Dense oracles
#


def _check_cap(params: ModelParams, cap: int) -> None:
    if params.dims.pq > cap:
        raise OracleCapError(
            f"dense covariance needs pq <= {cap}, got {params.dims.pq}"
        )


def dense_sigma(params: ModelParams, cap: int = DENSE_CAP) -> np.ndarray:
    """Σ of the row-major vec(X) as a dense (pq)×(pq) matrix"""
    _check_cap(params, cap)
    d = params.dims
    A = (params.L * params.psiF[None, :]) @ params.L.T
    B = (params.Lambda * params.psiE[None, :]) @ params.Lambda.T
    return (
        np.kron(np.eye(d.p), A)
        + np.kron(B, np.eye(d.q))
        + params.sigma2 * np.eye(d.pq)
    )


def structured_inverse(params: ModelParams, cap: int = DENSE_CAP) -> np.ndarray:
    """Dense Σ⁻¹ assembled from :func:`spectral_coeffs`"""
    _check_cap(params, cap)
    d = params.dims
    k = spectral_coeffs(params)
    Ip = np.eye(d.p)
    Iq = np.eye(d.q)
    out = k.d1 * np.eye(d.pq)
    Aj = [np.outer(params.L[:, j], params.L[:, j]) for j in range(d.r)]
    Bi = [np.outer(params.Lambda[:, i], params.Lambda[:, i]) for i in range(d.c)]
    for j in range(d.r):
        out -= params.psiF[j] * k.d2[j] * np.kron(Ip, Aj[j])
    for i in range(d.c):
        out -= params.psiE[i] * k.d3[i] * np.kron(Bi[i], Iq)
        for j in range(d.r):
            weight = params.psiE[i] * params.psiF[j] * k.d4[i, j]
            out += weight * np.kron(Bi[i], Aj[j])
    return out


def dense_log_likelihood(params: ModelParams, X, cap: int = DENSE_CAP) -> float:
    """Reference evaluation through a Cholesky factorization of Σ"""
    S = dense_sigma(params, cap=cap)
    x = as_array(X).reshape(-1)
    fac = scipy.linalg.cho_factor(S)
    log_det = 2.0 * np.sum(np.log(np.diag(fac[0])))
    return float(-log_det - x @ scipy.linalg.cho_solve(fac, x))
