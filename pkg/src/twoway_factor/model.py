# SPDX-License-Identifier: MIT
"""
Parameter and data types of the two-way factor model

    X = F Lᵀ + Λ Eᵀ + ε

with row factors F (p×r) acting through loadings L (q×r), column factors E
(q×c) acting through loadings Λ (p×c), and white noise ε of variance σ².
"""

from __future__ import annotations

import dataclasses
import typing as T
import warnings

import numpy as np
import scipy.stats

from .errors import (
    DegenerateLoadingError,
    DimensionError,
    InputError,
    NearDegenerateWarning,
    UndefinedMetricError,
)

#: Loading scale tolerance for parameters built in closed form
TOL_EXACT = 1e-8

#: Loading scale tolerance for parameters produced by iterative estimation
TOL_ESTIMATED = 1e-6

#: relative gap below which a row and a column variance count as equal
SEP_TOL = 1e-6

#: relative gap below which estimates of the variance ratio become unreliable
NEAR_DEGENERATE_GAP = 0.05

#: largest p*q for which dense (pq)×(pq) matrices are built
DENSE_CAP = 4096


@dataclasses.dataclass(frozen=True)
class Dims:
    """Matrix size (p, q) and factor counts (r, c)"""

    p: int
    q: int
    r: int
    c: int

    def __post_init__(self):
        for name in ("p", "q", "r", "c"):
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, (int, np.integer)):
                raise DimensionError(f"{name} must be an integer, got {value!r}")
            if value < 1:
                raise DimensionError(f"{name} must be positive, got {value}")

    @property
    def pq(self) -> int:
        return self.p * self.q

    @property
    def identifiable(self) -> bool:
        return min(self.p, self.q) > max(self.r, self.c)

    def check_estimable(self) -> None:
        if not self.identifiable:
            raise DimensionError(
                f"need min(p, q) > max(r, c); got p={self.p}, q={self.q}, "
                f"r={self.r}, c={self.c}"
            )

    def transposed(self) -> Dims:
        return Dims(p=self.q, q=self.p, r=self.c, c=self.r)


def _frozen(a, ndim: int, name: str) -> np.ndarray:
    arr = np.array(a, dtype=float, copy=True)
    if ndim == 1:
        arr = np.atleast_1d(arr)
    if arr.ndim != ndim:
        raise DimensionError(f"{name} must have {ndim} dimension(s), got shape {arr.shape}")
    arr.setflags(write=False)
    return arr


@dataclasses.dataclass(frozen=True, eq=False)
class ModelParams:
    """
    The parameter θ = (L, Λ, Ψ_F, Ψ_E, σ²).

    Arrays are copied and made read-only on construction. Shapes are checked
    against ``dims``; the model conditions are not, see :func:`validate`.
    """

    dims: Dims
    L: np.ndarray
    Lambda: np.ndarray
    psiF: np.ndarray
    psiE: np.ndarray
    sigma2: float

    def __post_init__(self):
        d = self.dims
        object.__setattr__(self, "L", _frozen(self.L, 2, "L"))
        object.__setattr__(self, "Lambda", _frozen(self.Lambda, 2, "Lambda"))
        object.__setattr__(self, "psiF", _frozen(self.psiF, 1, "psiF"))
        object.__setattr__(self, "psiE", _frozen(self.psiE, 1, "psiE"))
        object.__setattr__(self, "sigma2", float(self.sigma2))

        expected = {
            "L": (d.q, d.r),
            "Lambda": (d.p, d.c),
            "psiF": (d.r,),
            "psiE": (d.c,),
        }
        for name, shape in expected.items():
            actual = getattr(self, name).shape
            if actual != shape:
                raise DimensionError(f"{name} has shape {actual}, expected {shape}")

    @classmethod
    def from_directions(
        cls,
        dims: Dims,
        QL: np.ndarray,
        QLambda: np.ndarray,
        psiF,
        psiE,
        sigma2: float,
    ) -> ModelParams:
        """Scale unit orthonormal directions so that LᵀL = qσ² I and ΛᵀΛ = pσ² I hold exactly"""
        return cls(
            dims=dims,
            L=np.sqrt(dims.q * sigma2) * np.asarray(QL, dtype=float),
            Lambda=np.sqrt(dims.p * sigma2) * np.asarray(QLambda, dtype=float),
            psiF=psiF,
            psiE=psiE,
            sigma2=sigma2,
        )

    def replace(self, **changes) -> ModelParams:
        return dataclasses.replace(self, **changes)

    def transposed(self) -> ModelParams:
        """Parameters of Xᵀ: rows and columns trade places"""
        return ModelParams(
            dims=self.dims.transposed(),
            L=self.Lambda,
            Lambda=self.L,
            psiF=self.psiE,
            psiE=self.psiF,
            sigma2=self.sigma2,
        )

    def canonicalized(self) -> ModelParams:
        return self.replace(
            L=canonicalize_signs(self.L), Lambda=canonicalize_signs(self.Lambda)
        )

    def scale_residuals(self) -> T.Tuple[float, float]:
        d = self.dims
        eye_r = np.eye(d.r)
        eye_c = np.eye(d.c)
        resL = np.max(np.abs(self.L.T @ self.L / (d.q * self.sigma2) - eye_r))
        resLam = np.max(
            np.abs(self.Lambda.T @ self.Lambda / (d.p * self.sigma2) - eye_c)
        )
        return float(resL), float(resLam)

    def allclose(self, other: ModelParams, atol: float = 1e-8) -> bool:
        if self.dims != other.dims:
            return False
        return (
            np.allclose(self.L, other.L, rtol=0, atol=atol)
            and np.allclose(self.Lambda, other.Lambda, rtol=0, atol=atol)
            and np.allclose(self.psiF, other.psiF, rtol=0, atol=atol)
            and np.allclose(self.psiE, other.psiE, rtol=0, atol=atol)
            and abs(self.sigma2 - other.sigma2) <= atol
        )


@dataclasses.dataclass(frozen=True, eq=False)
class DataMatrix:
    """An observed p×q matrix, optionally column centered"""

    values: np.ndarray
    centered: bool = False

    def __post_init__(self):
        values = _frozen(self.values, 2, "X")
        if not np.all(np.isfinite(values)):
            raise InputError("X contains non-finite entries")
        object.__setattr__(self, "values", values)

    @classmethod
    def from_array(cls, values, center: bool = False) -> DataMatrix:
        values = np.asarray(values, dtype=float)
        if center:
            values = values - values.mean(axis=0, keepdims=True)
        return cls(values=values, centered=center)

    @property
    def shape(self) -> T.Tuple[int, int]:
        return self.values.shape

    def transposed(self) -> DataMatrix:
        return DataMatrix(values=self.values.T, centered=False)

    def column_means_ok(self) -> bool:
        """Column means vanish relative to the column scale"""
        means = np.abs(self.values.mean(axis=0))
        scale = np.max(np.abs(self.values), axis=0)
        return bool(np.all(means <= 1e-10 * np.maximum(scale, 1e-300)))


def as_array(X) -> np.ndarray:
    """Values of a :class:`DataMatrix` or an array-like"""
    if isinstance(X, DataMatrix):
        return X.values
    return np.asarray(X, dtype=float)


@dataclasses.dataclass(frozen=True, eq=False)
class FactorScores:
    F: np.ndarray
    E: np.ndarray

    def check(self, dims: Dims) -> None:
        if self.F.shape != (dims.p, dims.r) or self.E.shape != (dims.q, dims.c):
            raise DimensionError(
                f"scores have shapes {self.F.shape} and {self.E.shape}, "
                f"expected {(dims.p, dims.r)} and {(dims.q, dims.c)}"
            )


#
# Validation
#


@dataclasses.dataclass(frozen=True)
class Violation:
    condition: str
    residual: float
    message: str


@dataclasses.dataclass
class ValidationReport:
    violations: T.List[Violation] = dataclasses.field(default_factory=list)

    def __len__(self) -> int:
        return len(self.violations)

    def __iter__(self):
        return iter(self.violations)

    @property
    def ok(self) -> bool:
        return not self.violations

    @property
    def conditions(self) -> T.Set[str]:
        return {v.condition for v in self.violations}

    def add(self, condition: str, residual: float, message: str) -> None:
        self.violations.append(Violation(condition, float(residual), message))

    def __str__(self) -> str:
        if self.ok:
            return "no violations"
        return "; ".join(
            f"{v.condition}: {v.message} (residual {v.residual:.3g})"
            for v in self.violations
        )


def _ordering_gap(values: np.ndarray) -> float:
    # largest amount by which a later entry fails to be strictly smaller
    if len(values) < 2:
        return 0.0
    return float(np.max(values[1:] - values[:-1]))


def variance_gaps(psiF: np.ndarray, psiE: np.ndarray) -> np.ndarray:
    """Relative gaps |σ²_F,k − σ²_E,m| / max(σ²_F,k, σ²_E,m), shape (c, r)"""
    F = np.asarray(psiF, dtype=float)[None, :]
    E = np.asarray(psiE, dtype=float)[:, None]
    scale = np.maximum(np.maximum(np.abs(F), np.abs(E)), 1e-300)
    return np.abs(F - E) / scale


def validate(params: ModelParams, tol_ic: float = TOL_EXACT) -> ValidationReport:
    """
    Check the model and identification conditions of ``params``.

    Returns a report naming each violated condition with its residual; the
    report is empty when everything holds at ``tol_ic``. A row and column
    variance pair whose relative gap is above the separation tolerance but
    below 5% is legal and only produces a :class:`NearDegenerateWarning`.
    """
    report = ValidationReport()
    d = params.dims

    if not d.identifiable:
        report.add(
            "DIMS-identifiable",
            max(d.r, d.c) - min(d.p, d.q) + 1,
            "min(p, q) must exceed max(r, c)",
        )

    positive = np.concatenate([params.psiF, params.psiE, [params.sigma2]])
    if np.any(positive <= 0):
        report.add(
            "positivity",
            float(-np.min(positive)),
            "variances must be strictly positive",
        )
        # the remaining checks divide by these
        return report

    resL, resLam = params.scale_residuals()
    if resL > tol_ic:
        report.add("scale-L", resL, "LᵀL/(qσ²) differs from the identity")
    if resLam > tol_ic:
        report.add("scale-Lambda", resLam, "ΛᵀΛ/(pσ²) differs from the identity")

    gapF = _ordering_gap(params.psiF)
    gapE = _ordering_gap(params.psiE)
    if gapF >= 0 and d.r > 1:
        report.add("ordering-F", gapF, "psiF must be strictly decreasing")
    if gapE >= 0 and d.c > 1:
        report.add("ordering-E", gapE, "psiE must be strictly decreasing")

    gaps = variance_gaps(params.psiF, params.psiE)
    worst = float(np.min(gaps))
    if worst <= SEP_TOL:
        report.add(
            "separation", worst, "a row factor variance equals a column factor variance"
        )
    elif worst < NEAR_DEGENERATE_GAP:
        warnings.warn(
            f"row and column factor variances differ by only {worst:.2%}; "
            "asymptotic loading variances are large near equality",
            NearDegenerateWarning,
            stacklevel=2,
        )

    for name, M in (("L", params.L), ("Lambda", params.Lambda)):
        if np.any(~np.any(M != 0, axis=0)):
            continue
        if not np.array_equal(canonicalize_signs(M), M):
            report.add(f"sign-{name}", 1.0, f"{name} columns are not sign canonical")

    return report


#
# Identification helpers
#


def canonical_signs(M: np.ndarray) -> np.ndarray:
    """±1 per column making the first largest-magnitude entry positive"""
    M = np.asarray(M, dtype=float)
    if M.ndim != 2:
        raise DimensionError(f"loading matrix must be 2-D, got shape {M.shape}")
    zero = ~np.any(M != 0, axis=0)
    if np.any(zero):
        raise DegenerateLoadingError(
            f"loading column(s) {np.flatnonzero(zero).tolist()} are identically zero"
        )
    idx = np.argmax(np.abs(M), axis=0)
    pivots = M[idx, np.arange(M.shape[1])]
    return np.where(pivots < 0, -1.0, 1.0)


def canonicalize_signs(M: np.ndarray) -> np.ndarray:
    M = np.asarray(M, dtype=float)
    return M * canonical_signs(M)[None, :]


@dataclasses.dataclass(frozen=True, eq=False)
class Alignment:
    """An estimate with column signs matched to the truth"""

    params: ModelParams
    flipped_L: np.ndarray
    flipped_Lambda: np.ndarray
    ties_L: T.Tuple[int, ...]
    """Columns of L uncorrelated with the truth; their sign stays canonical"""
    ties_Lambda: T.Tuple[int, ...]


def _align_columns(
    est: np.ndarray, truth: np.ndarray
) -> T.Tuple[np.ndarray, np.ndarray, T.Tuple[int, ...]]:
    signs = np.ones(est.shape[1])
    ties = []
    for j in range(est.shape[1]):
        x = truth[:, j] - truth[:, j].mean()
        y = est[:, j] - est[:, j].mean()
        denom = np.linalg.norm(x) * np.linalg.norm(y)
        corr = float(x @ y / denom) if denom > 0 else 0.0
        if abs(corr) <= 1e-12:
            ties.append(j)
        elif corr < 0:
            signs[j] = -1.0
    return est * signs[None, :], signs < 0, tuple(ties)


def align_for_comparison(estimate: ModelParams, truth: ModelParams) -> Alignment:
    """Flip estimated loading columns to correlate positively with the truth"""
    if estimate.dims != truth.dims:
        raise DimensionError(f"dims differ: {estimate.dims} vs {truth.dims}")
    L, flipL, tiesL = _align_columns(estimate.L, truth.L)
    Lam, flipLam, tiesLam = _align_columns(estimate.Lambda, truth.Lambda)
    return Alignment(
        params=estimate.replace(L=L, Lambda=Lam),
        flipped_L=flipL,
        flipped_Lambda=flipLam,
        ties_L=tiesL,
        ties_Lambda=tiesLam,
    )


@dataclasses.dataclass(frozen=True, eq=False)
class R2Result:
    per_column: np.ndarray
    mean: float


def loading_accuracy_r2(estimate: np.ndarray, truth: np.ndarray) -> R2Result:
    """
    R² of the simple linear regression of each estimated loading column on the
    corresponding true column, and their average.
    """
    estimate = np.asarray(estimate, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if estimate.shape != truth.shape or estimate.ndim != 2:
        raise DimensionError(
            f"loading shapes differ: {estimate.shape} vs {truth.shape}"
        )
    r2 = np.empty(truth.shape[1])
    for j in range(truth.shape[1]):
        x = truth[:, j]
        if np.ptp(x) == 0:
            raise UndefinedMetricError(f"true loading column {j} is constant")
        r2[j] = scipy.stats.linregress(x, estimate[:, j]).rvalue ** 2
    return R2Result(per_column=r2, mean=float(r2.mean()))


def identifiability_check(
    thetaA: ModelParams, thetaB: ModelParams, cap: int = DENSE_CAP
) -> bool:
    """
    Dense check of uniqueness: True unless the two parameters produce the
    same covariance of vec(X) while differing beyond the column signs.
    """
    from .spectral import dense_sigma

    if thetaA.dims != thetaB.dims:
        # different shapes cannot share a covariance
        return True
    SA = dense_sigma(thetaA, cap=cap)
    SB = dense_sigma(thetaB, cap=cap)
    scale = max(1.0, float(np.max(np.abs(SA))))
    if np.max(np.abs(SA - SB)) > 1e-10 * scale:
        return True
    return thetaA.canonicalized().allclose(thetaB.canonicalized(), atol=1e-8)
