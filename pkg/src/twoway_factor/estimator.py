# SPDX-License-Identifier: MIT
"""
Maximum likelihood fit by block alternating maximization.

Each outer iteration

1. updates L with Λ and the variances fixed,
2. updates Λ with L and the variances fixed,
3. runs EM for (Ψ_F, Ψ_E, σ²) with both loadings fixed,
4. rotates the EM output back to diagonal, ordered variances,

and stops once the log-likelihood changes by less than ``err0``. Every step
maximizes the likelihood over its block, so the trace never decreases.
"""

from __future__ import annotations

import dataclasses
import logging
import typing as T
import warnings

import numpy as np
import scipy.linalg

from .config import FitConfig
from .errors import (
    AmbiguousRotationWarning,
    ConfigError,
    DimensionError,
    EstimationError,
    InitializationError,
    InitializationWarning,
    InputError,
    NearDegenerateWarning,
    VarianceFloorWarning,
)
from .model import (
    NEAR_DEGENERATE_GAP,
    Dims,
    FactorScores,
    ModelParams,
    as_array,
    canonicalize_signs,
    variance_gaps,
)
from .spectral import log_likelihood, spectral_coeffs

logger = logging.getLogger(__name__)


@dataclasses.dataclass(frozen=True, eq=False)
class UnrotatedParams:
    """
    Parameters whose variance blocks may be full matrices.

    The loadings have orthogonal columns of equal squared norm (not
    necessarily qσ² and pσ²); :func:`rotate_identify` turns this into
    :class:`ModelParams`.
    """

    dims: Dims
    L: np.ndarray
    Lambda: np.ndarray
    psiF: np.ndarray
    psiE: np.ndarray
    sigma2: float

    @classmethod
    def from_params(cls, params: ModelParams) -> UnrotatedParams:
        return cls(
            dims=params.dims,
            L=np.asarray(params.L),
            Lambda=np.asarray(params.Lambda),
            psiF=np.diag(params.psiF),
            psiE=np.diag(params.psiE),
            sigma2=params.sigma2,
        )

    def replace(self, **changes) -> UnrotatedParams:
        return dataclasses.replace(self, **changes)


@dataclasses.dataclass(frozen=True, eq=False)
class TraceMaximization:
    Q: np.ndarray
    """Unit orthonormal maximizer"""
    objective_trace: T.List[float]
    iterations: int
    hit_cap: bool


@dataclasses.dataclass(frozen=True, eq=False)
class LoadingUpdate:
    loadings: np.ndarray
    objective_trace: T.List[float]
    iterations: int
    hit_cap: bool


@dataclasses.dataclass(frozen=True, eq=False)
class VarianceUpdate:
    raw: UnrotatedParams
    loglik_trace: T.List[float]
    iterations: int
    floored: bool
    hit_cap: bool


@dataclasses.dataclass(frozen=True, eq=False)
class FitResult:
    theta_hat: ModelParams
    loglik_trace: T.List[float]
    inner_iters: T.List[T.Dict[str, int]]
    """Iterations of the L, Lambda and EM sub-steps in each outer iteration"""
    converged: bool
    stop_reason: T.Literal["tolerance", "max_outer"]
    scores: FactorScores
    gradient_norm: float
    scale_trace: T.List[float] = dataclasses.field(default_factory=list)
    inner_caps: int = 0
    floored: bool = False
    warnings: T.List[str] = dataclasses.field(default_factory=list)
    restart_logliks: T.List[float] = dataclasses.field(default_factory=list)
    labels: T.Literal["given", "svd", "mirrored", "random"] = "svd"
    """Start the first run came from; ``mirrored`` when the label check won"""
    label_logliks: T.List[float] = dataclasses.field(default_factory=list)
    """Final log-likelihoods of the svd and mirrored starts when both ran"""

    @property
    def loglik(self) -> float:
        return self.loglik_trace[-1]


#
# Loading updates
#


def _polar(M: np.ndarray) -> np.ndarray:
    U, _, Vt = scipy.linalg.svd(M, full_matrices=False)
    return U @ Vt


def maximize_quadratic_sum(
    Ws: T.Sequence[np.ndarray],
    Q0: np.ndarray,
    *,
    err0: float = 0.01,
    eps0: float = 0.005,
    max_inner: int = 200,
    scale: float = 1.0,
) -> TraceMaximization:
    """
    Maximize Σⱼ qⱼᵀ Wⱼ qⱼ over matrices Q with orthonormal columns.

    A single matrix is solved by its top eigenvector. Otherwise the matrices
    are shifted to be positive definite and Q is replaced by the polar factor
    of (A₁q₁ ⋯ A_kq_k) until the objective, multiplied by ``scale``, moves by
    less than ``err0``. Each polar step cannot decrease the objective.
    """
    k = len(Ws)
    n = Ws[0].shape[0]
    Q0 = np.asarray(Q0, dtype=float)

    def objective(Q):
        return scale * float(sum(Q[:, j] @ Ws[j] @ Q[:, j] for j in range(k)))

    if k == 1:
        _, v = scipy.linalg.eigh(Ws[0], subset_by_index=[n - 1, n - 1])
        return TraceMaximization(
            Q=v,
            objective_trace=[objective(Q0), objective(v)],
            iterations=1,
            hit_cap=False,
        )

    lam_min = min(
        scipy.linalg.eigh(W, eigvals_only=True, subset_by_index=[0, 0])[0] for W in Ws
    )
    shift = lam_min - eps0
    A = [W - shift * np.eye(n) for W in Ws]

    Q = Q0
    f = objective(Q)
    trace = [f]
    for it in range(1, max_inner + 1):
        M = np.column_stack([A[j] @ Q[:, j] for j in range(k)])
        Q = _polar(M)
        f_new = objective(Q)
        trace.append(f_new)
        if abs(f_new - f) < err0:
            return TraceMaximization(Q, trace, it, hit_cap=False)
        f = f_new
    return TraceMaximization(Q, trace, max_inner, hit_cap=True)


def loading_matrices(
    params: ModelParams, X, gram: T.Optional[np.ndarray] = None
) -> T.List[np.ndarray]:
    """
    The q×q matrices Wⱼ = σ²_Fⱼ Xᵀ(d2ⱼ I − Σᵢ σ²_Eᵢ d4ᵢⱼ ΛᵢΛᵢᵀ)X whose
    quadratic forms in the columns of L are the L-dependent part of the
    log-likelihood.
    """
    X = as_array(X)
    k = spectral_coeffs(params)
    XtX = X.T @ X if gram is None else gram
    XtLam = X.T @ params.Lambda
    Ws = []
    for j in range(params.dims.r):
        weights = params.psiE * k.d4[:, j]
        correction = (XtLam * weights[None, :]) @ XtLam.T
        Ws.append(params.psiF[j] * (k.d2[j] * XtX - correction))
    return Ws


def update_L(
    params: ModelParams,
    X,
    *,
    err0: float = 0.01,
    eps0: float = 0.005,
    max_inner: int = 200,
    gram: T.Optional[np.ndarray] = None,
) -> LoadingUpdate:
    """New row loadings, scaled so that LᵀL = qσ²I"""
    d = params.dims
    s = d.q * params.sigma2
    Ws = loading_matrices(params, X, gram=gram)
    res = maximize_quadratic_sum(
        Ws,
        np.asarray(params.L) / np.sqrt(s),
        err0=err0,
        eps0=eps0,
        max_inner=max_inner,
        scale=s,
    )
    return LoadingUpdate(
        loadings=canonicalize_signs(np.sqrt(s) * res.Q),
        objective_trace=res.objective_trace,
        iterations=res.iterations,
        hit_cap=res.hit_cap,
    )


def update_Lambda(
    params: ModelParams,
    X,
    *,
    err0: float = 0.01,
    eps0: float = 0.005,
    max_inner: int = 200,
    gram: T.Optional[np.ndarray] = None,
) -> LoadingUpdate:
    """New column loadings; the row update applied to Xᵀ"""
    return update_L(
        params.transposed(),
        as_array(X).T,
        err0=err0,
        eps0=eps0,
        max_inner=max_inner,
        gram=gram,
    )


#
# Variance updates
#


def _column_scale(M: np.ndarray) -> float:
    return float(np.mean(np.sum(M * M, axis=0)))


class _BlockStatistics:
    """
    Sufficient statistics of X in coordinates aligned with span(Λ) × span(L).

    With orthonormal completions, Z = [Q_Λ Q_Λ⊥]ᵀ X [Q_L Q_L⊥] splits into
    a c×r block coupling both factor types, (p−c) rows carrying only row
    factors, (q−r) columns carrying only column factors, and pure noise.
    """

    def __init__(self, X: np.ndarray, QL: np.ndarray, QLam: np.ndarray):
        p, q = X.shape
        self.r = QL.shape[1]
        self.c = QLam.shape[1]
        self.p = p
        self.q = q
        self.QL = QL
        self.QLam = QLam
        self.XQ = X @ QL
        self.QX = QLam.T @ X
        self.Z11 = self.QX @ QL
        self.S21 = self.XQ.T @ self.XQ - self.Z11.T @ self.Z11
        self.S12 = self.QX @ self.QX.T - self.Z11 @ self.Z11.T
        total = float(np.sum(X * X))
        self.z22 = max(
            total
            - float(np.sum(self.XQ**2))
            - float(np.sum(self.QX**2))
            + float(np.sum(self.Z11**2)),
            0.0,
        )
        self.y = self.Z11.reshape(-1)

        # entry (i, j) of the coupled block sees F'[i, j] and E'[j, i]
        r, c = self.r, self.c
        self.swap = np.zeros((c * r, r * c))
        for i in range(c):
            for j in range(r):
                self.swap[i * r + j, j * c + i] = 1.0


@dataclasses.dataclass
class _Posterior:
    KF: np.ndarray
    VF: np.ndarray
    KE: np.ndarray
    VE: np.ndarray
    mu: np.ndarray
    Vu: np.ndarray
    H: np.ndarray


def _single_side(s: float, Psi: np.ndarray, s2: float):
    # z = √s f + e with f ~ N(0, Ψ), e ~ N(0, σ²I)
    k = Psi.shape[0]
    C = s * Psi + s2 * np.eye(k)
    PsiCinv = scipy.linalg.solve(C, Psi, assume_a="pos").T
    K = np.sqrt(s) * PsiCinv
    V = Psi - s * PsiCinv @ Psi
    return K, 0.5 * (V + V.T)


def _posterior(
    st: _BlockStatistics,
    sL: float,
    sLam: float,
    PsiF: np.ndarray,
    PsiE: np.ndarray,
    s2: float,
) -> _Posterior:
    r, c = st.r, st.c
    KF, VF = _single_side(sL, PsiF, s2)
    KE, VE = _single_side(sLam, PsiE, s2)

    n = c * r
    H = np.hstack([np.sqrt(sL) * np.eye(n), np.sqrt(sLam) * st.swap])
    Gamma = scipy.linalg.block_diag(np.kron(np.eye(c), PsiF), np.kron(np.eye(r), PsiE))
    HG = H @ Gamma
    Cy = HG @ H.T + s2 * np.eye(n)
    Gain = scipy.linalg.solve(Cy, HG, assume_a="pos").T
    mu = Gain @ st.y
    Vu = Gamma - Gain @ HG
    return _Posterior(KF, VF, KE, VE, mu, 0.5 * (Vu + Vu.T), H)


def _clamp(Psi: np.ndarray, floor: float) -> T.Tuple[np.ndarray, bool]:
    w, U = scipy.linalg.eigh(Psi)
    if np.all(w >= floor):
        return Psi, False
    w = np.maximum(w, floor)
    return (U * w[None, :]) @ U.T, True


def _em_step(
    st: _BlockStatistics,
    sL: float,
    sLam: float,
    PsiF: np.ndarray,
    PsiE: np.ndarray,
    s2: float,
    floor: float,
) -> T.Tuple[np.ndarray, np.ndarray, float, bool]:
    r, c, p, q = st.r, st.c, st.p, st.q
    post = _posterior(st, sL, sLam, PsiF, PsiE, s2)
    n = c * r

    # second moments of the latent scores, summed over rows
    MF = np.eye(r) - np.sqrt(sL) * post.KF
    ME = np.eye(c) - np.sqrt(sLam) * post.KE
    SFF = post.KF @ st.S21 @ post.KF.T + (p - c) * post.VF
    SEE = post.KE @ st.S12 @ post.KE.T + (q - r) * post.VE
    S = post.Vu + np.outer(post.mu, post.mu)
    SFF = SFF + np.einsum("iaib->ab", S[:n, :n].reshape(c, r, c, r))
    SEE = SEE + np.einsum("jajb->ab", S[n:, n:].reshape(r, c, r, c))

    resid = (
        st.z22
        + float(np.trace(MF @ st.S21 @ MF.T))
        + (p - c) * sL * float(np.trace(post.VF))
        + float(np.trace(ME @ st.S12 @ ME.T))
        + (q - r) * sLam * float(np.trace(post.VE))
        + float(np.sum((st.y - post.H @ post.mu) ** 2))
        + float(np.trace(post.H @ post.Vu @ post.H.T))
    )

    PsiF_new, hitF = _clamp(0.5 * (SFF + SFF.T) / p, floor)
    PsiE_new, hitE = _clamp(0.5 * (SEE + SEE.T) / q, floor)
    s2_new = resid / (p * q)
    hitS = s2_new < floor
    return PsiF_new, PsiE_new, max(s2_new, floor), hitF or hitE or hitS


def em_update_variances(
    params: T.Union[ModelParams, UnrotatedParams],
    X,
    *,
    err0: float = 0.01,
    max_inner: int = 200,
    floor: float = 1e-10,
    warn: bool = True,
) -> VarianceUpdate:
    """
    EM for (Ψ_F, Ψ_E, σ²) with the loadings held fixed.

    The factor scores are the latent variables. In the coordinates of
    :class:`_BlockStatistics` the E-step only needs r×r, c×c and
    (cr)×(cr) solves. The variance blocks are estimated as full matrices;
    :func:`rotate_identify` diagonalizes them. Stops once the log-likelihood
    moves by less than ``err0``.
    """
    raw = params if isinstance(params, UnrotatedParams) else UnrotatedParams.from_params(params)
    X = as_array(X)
    sL = _column_scale(raw.L)
    sLam = _column_scale(raw.Lambda)
    st = _BlockStatistics(X, raw.L / np.sqrt(sL), raw.Lambda / np.sqrt(sLam))

    cur = raw
    h = log_likelihood(rotate_identify(cur, warn=False), X)
    trace = [h]
    floored = False
    for it in range(1, max_inner + 1):
        PsiF, PsiE, s2, hit = _em_step(
            st, sL, sLam, cur.psiF, cur.psiE, cur.sigma2, floor
        )
        floored = floored or hit
        cur = cur.replace(psiF=PsiF, psiE=PsiE, sigma2=s2)
        h_new = log_likelihood(rotate_identify(cur, warn=False), X)
        trace.append(h_new)
        if abs(h_new - h) < err0:
            capped = False
            break
        h = h_new
    else:
        capped = True

    if floored and warn:
        warnings.warn(
            f"variance update clamped to the floor {floor:g}",
            VarianceFloorWarning,
            stacklevel=2,
        )
    return VarianceUpdate(
        raw=cur, loglik_trace=trace, iterations=it, floored=floored, hit_cap=capped
    )


def rotate_identify(
    theta_tilde: T.Union[UnrotatedParams, ModelParams], warn: bool = True
) -> ModelParams:
    """
    Diagonalize the variance blocks and rescale the loadings so that LᵀL = qσ² I
    and ΛᵀΛ = pσ² I hold with the current σ², ordering the variances decreasingly and
    canonicalizing column signs. The covariance of vec(X) is unchanged.
    """
    if isinstance(theta_tilde, ModelParams):
        theta_tilde = UnrotatedParams.from_params(theta_tilde)
    d = theta_tilde.dims
    s2 = theta_tilde.sigma2
    dirs = []
    variances = []
    for M, Psi, n in (
        (theta_tilde.L, theta_tilde.psiF, d.q),
        (theta_tilde.Lambda, theta_tilde.psiE, d.p),
    ):
        s = _column_scale(M)
        w, U = scipy.linalg.eigh(0.5 * (Psi + Psi.T))
        w = w[::-1]
        U = U[:, ::-1]
        if warn and len(w) > 1:
            if np.any(np.abs(np.diff(w)) <= 1e-10 * max(float(np.max(np.abs(w))), 1e-300)):
                warnings.warn(
                    f"repeated variances {w.tolist()} make the rotation ambiguous",
                    AmbiguousRotationWarning,
                    stacklevel=2,
                )
        dirs.append((M / np.sqrt(s)) @ U)
        variances.append(w * s / (n * s2))

    params = ModelParams.from_directions(
        d, dirs[0], dirs[1], variances[0], variances[1], s2
    )
    return params.canonicalized()


#
# Starting values
#


def _random_directions(rng: np.random.Generator, n: int, k: int) -> np.ndarray:
    Q, R = np.linalg.qr(rng.standard_normal((n, k)))
    return Q * np.sign(np.diag(R))[None, :]


def _spread(psiF: np.ndarray, psiE: np.ndarray) -> T.Tuple[np.ndarray, np.ndarray]:
    # push the pooled values at least 10% apart so both orderings are strict
    # and no row variance equals a column variance
    values = np.concatenate([psiF, psiE])
    order = np.argsort(-values, kind="stable")
    for prev, cur in zip(order[:-1], order[1:]):
        values[cur] = min(values[cur], values[prev] / 1.1)
    return values[: len(psiF)], values[len(psiF) :]


def init_params(
    X, dims: Dims, config: T.Optional[FitConfig] = None, mirrored: bool = False
) -> ModelParams:
    """
    Starting point from the singular value decomposition of X.

    The r strongest components give L (right singular vectors) and the next
    c components give Λ (left singular vectors); ``mirrored`` gives the c
    strongest to Λ and the next r to L instead. A ``random:<seed>`` init
    keeps the SVD variance levels but draws random loading directions.

    σ² starts from the components beyond the first r + c. When there are
    none (min(p, q) = r + c) it starts at 1% of the mean squared singular
    value per entry and an :class:`InitializationWarning` is issued.
    """
    if config is None:
        config = FitConfig()
    X = as_array(X)
    dims.check_estimable()
    p, q = X.shape
    r, c = dims.r, dims.c
    mode = config.init_mode
    if mode == "provided":
        raise ConfigError("provided init needs explicit starting parameters")

    U, s, Vt = scipy.linalg.svd(X, full_matrices=False)
    k = r + c
    if len(s) < k or s[0] == 0 or s[k - 1] <= 1e-12 * s[0]:
        raise InitializationError(
            f"X has numerical rank below r + c = {k}; try fewer factors"
        )
    trailing = s[k:]
    if trailing.size:
        sigma2 = float(np.mean(trailing**2)) / max(p, q)
    else:
        sigma2 = 0.01 * float(np.mean(s**2)) / max(p, q)
        warnings.warn(
            f"min(p, q) = r + c = {k} leaves no noise components; "
            f"starting sigma2 at {sigma2:.4g}",
            InitializationWarning,
            stacklevel=2,
        )
    sigma2 = max(sigma2, config.variance_floor)

    if mirrored:
        psiE = s[:c] ** 2 / (p * q * sigma2)
        psiF = s[c:k] ** 2 / (p * q * sigma2)
    else:
        psiF = s[:r] ** 2 / (p * q * sigma2)
        psiE = s[r:k] ** 2 / (p * q * sigma2)
    psiF, psiE = _spread(psiF, psiE)

    if mode == "random":
        rng = np.random.default_rng(config.init_seed)
        QL = _random_directions(rng, q, r)
        QLam = _random_directions(rng, p, c)
    elif mirrored:
        QLam = U[:, :c]
        QL = Vt[c:k].T
    else:
        QL = Vt[:r].T
        QLam = U[:, r:k]

    params = ModelParams.from_directions(dims, QL, QLam, psiF, psiE, sigma2)
    return params.canonicalized()


def _restore_constraint(params: ModelParams) -> ModelParams:
    resL, resLam = params.scale_residuals()
    if max(resL, resLam) <= 1e-10:
        return params
    return ModelParams.from_directions(
        params.dims,
        _polar(np.asarray(params.L)),
        _polar(np.asarray(params.Lambda)),
        params.psiF,
        params.psiE,
        params.sigma2,
    ).canonicalized()


#
# Fitting
#


@dataclasses.dataclass
class _Run:
    params: ModelParams
    trace: T.List[float]
    inner: T.List[T.Dict[str, int]]
    scale: T.List[float]
    converged: bool
    caps: int
    floored: bool


def _fit_from(X: np.ndarray, start: ModelParams, config: FitConfig) -> _Run:
    theta = _restore_constraint(start)
    XtX = X.T @ X
    XXt = X @ X.T
    ll = log_likelihood(theta, X)
    if not np.isfinite(ll):
        raise EstimationError("log-likelihood is not finite at the starting point")
    trace = [ll]
    inner = []
    scale = []
    caps = 0
    floored = False
    converged = False
    for m in range(1, config.max_outer + 1):
        upL = update_L(
            theta,
            X,
            err0=config.err0,
            eps0=config.eps0,
            max_inner=config.max_inner,
            gram=XtX,
        )
        theta = theta.replace(L=upL.loadings)
        upLam = update_Lambda(
            theta,
            X,
            err0=config.err0,
            eps0=config.eps0,
            max_inner=config.max_inner,
            gram=XXt,
        )
        theta = theta.replace(Lambda=upLam.loadings)
        upV = em_update_variances(
            theta,
            X,
            err0=config.err0,
            max_inner=config.max_inner,
            floor=config.variance_floor,
            warn=False,
        )
        theta = rotate_identify(upV.raw)

        ll_new = log_likelihood(theta, X)
        if not np.isfinite(ll_new):
            raise EstimationError(f"log-likelihood became non-finite at iteration {m}")
        trace.append(ll_new)
        inner.append(
            {"L": upL.iterations, "Lambda": upLam.iterations, "em": upV.iterations}
        )
        scale.append(max(theta.scale_residuals()))
        caps += upL.hit_cap + upLam.hit_cap + upV.hit_cap
        floored = floored or upV.floored
        logger.debug(
            "outer %d: loglik %.10g (inner L=%d Lambda=%d em=%d)",
            m,
            ll_new,
            upL.iterations,
            upLam.iterations,
            upV.iterations,
        )
        if abs(ll_new - ll) < config.err0:
            converged = True
            break
        ll = ll_new

    return _Run(theta, trace, inner, scale, converged, caps, floored)


def fit(
    X,
    dims: Dims,
    config: T.Optional[FitConfig] = None,
    initial: T.Optional[ModelParams] = None,
) -> FitResult:
    """
    Maximum likelihood estimate of θ.

    ``initial`` supplies the first start (and is required by
    ``init="provided"``); further restarts use random directions. The restart
    with the largest final log-likelihood is returned. Hitting ``max_outer``
    is reported through ``stop_reason``, not raised.

    One matrix cannot tell which of the strongest components are row and
    which are column effects, so with the svd start and ``label_check`` the
    first run is also fitted from the mirrored assignment and the better of
    the two is kept.
    """
    if config is None:
        config = FitConfig()
    X = as_array(X)
    if X.shape != (dims.p, dims.q):
        raise DimensionError(f"X has shape {X.shape}, expected {(dims.p, dims.q)}")
    if not np.all(np.isfinite(X)):
        raise InputError("X contains non-finite entries")
    dims.check_estimable()

    if initial is not None:
        if initial.dims != dims:
            raise DimensionError(f"initial parameters have dims {initial.dims}, expected {dims}")
        first = initial
        labels = "given"
    elif config.init_mode == "provided":
        raise ConfigError("init 'provided' needs starting parameters")
    else:
        first = init_params(X, dims, config)
        labels = config.init_mode

    first_run = _fit_from(X, first, config)
    label_logliks = []
    if labels == "svd" and config.label_check:
        mirrored = _fit_from(X, init_params(X, dims, config, mirrored=True), config)
        label_logliks = [first_run.trace[-1], mirrored.trace[-1]]
        if mirrored.trace[-1] > first_run.trace[-1]:
            first_run = mirrored
            labels = "mirrored"
        logger.debug("label check: svd %.10g, mirrored %.10g", *label_logliks)

    runs = [first_run]
    for k in range(1, config.restarts):
        seeded = dataclasses.replace(config, init=f"random:{config.restart_seed + k - 1}")
        runs.append(_fit_from(X, init_params(X, dims, seeded), config))
    finals = [run.trace[-1] for run in runs]
    best = runs[int(np.argmax(finals))]
    theta = best.params

    notes = []
    if best.floored:
        msg = f"variance updates were clamped to {config.variance_floor:g}"
        warnings.warn(msg, VarianceFloorWarning, stacklevel=2)
        notes.append(msg)
    gap = float(np.min(variance_gaps(theta.psiF, theta.psiE)))
    if gap < NEAR_DEGENERATE_GAP:
        msg = (
            f"estimated row and column factor variances differ by only {gap:.2%}; "
            "loading estimates may fluctuate strongly"
        )
        warnings.warn(msg, NearDegenerateWarning, stacklevel=2)
        notes.append(msg)

    gradient = (
        estimating_equation_residual(theta, X, h=config.gradient_step)
        if config.gradient_check
        else float("nan")
    )
    result = FitResult(
        theta_hat=theta,
        loglik_trace=best.trace,
        inner_iters=best.inner,
        converged=best.converged,
        stop_reason="tolerance" if best.converged else "max_outer",
        scores=factor_scores(theta, X),
        gradient_norm=gradient,
        scale_trace=best.scale,
        inner_caps=best.caps,
        floored=best.floored,
        warnings=notes,
        restart_logliks=finals,
        labels=labels if best is first_run else "random",
        label_logliks=label_logliks,
    )
    logger.info(
        "fit %s after %d outer iterations: loglik %.10g",
        "converged" if result.converged else "stopped at max_outer",
        len(result.inner_iters),
        result.loglik,
    )
    return result


def factor_scores(params: ModelParams, X) -> FactorScores:
    """Posterior means E[F | X] and E[E | X] under ``params``"""
    X = as_array(X)
    d = params.dims
    sL = d.q * params.sigma2
    sLam = d.p * params.sigma2
    QL = np.asarray(params.L) / np.sqrt(sL)
    QLam = np.asarray(params.Lambda) / np.sqrt(sLam)
    st = _BlockStatistics(X, QL, QLam)
    post = _posterior(
        st, sL, sLam, np.diag(params.psiF), np.diag(params.psiE), params.sigma2
    )
    n = d.c * d.r
    Fa = post.mu[:n].reshape(d.c, d.r)
    Ea = post.mu[n:].reshape(d.r, d.c)
    F = QLam @ Fa + (st.XQ - QLam @ st.Z11) @ post.KF.T
    E = QL @ Ea + (st.QX.T - QL @ st.Z11.T) @ post.KE.T
    return FactorScores(F=F, E=E)


#
# Stationarity diagnostic
#


def estimating_equation_residual(theta_hat: ModelParams, X, h: float = 1e-5) -> float:
    """
    Largest central difference derivative of the log-likelihood at
    ``theta_hat``.

    Coordinates are the variances (relative step ``h``) and unit directions
    tangent to the orthonormality constraint of each loading matrix:
    perpendicular moves of single columns and rotations within the column
    span. Loadings stay scaled so that the scale constraints hold at every evaluation.
    """
    X = as_array(X)
    d = theta_hat.dims
    QL = np.asarray(theta_hat.L) / np.sqrt(d.q * theta_hat.sigma2)
    QLam = np.asarray(theta_hat.Lambda) / np.sqrt(d.p * theta_hat.sigma2)
    psiF = np.asarray(theta_hat.psiF)
    psiE = np.asarray(theta_hat.psiE)

    def value(QL_, QLam_, psiF_, psiE_, s2_):
        p_ = ModelParams.from_directions(d, QL_, QLam_, psiF_, psiE_, s2_)
        return log_likelihood(p_, X)

    def central(f, step):
        return (f(step) - f(-step)) / (2.0 * step)

    grads = []
    variances = np.concatenate([psiF, psiE, [theta_hat.sigma2]])
    for i, v in enumerate(variances):
        step = h * abs(v)

        def f(t, i=i):
            vv = variances.copy()
            vv[i] += t
            return value(QL, QLam, vv[: d.r], vv[d.r : d.r + d.c], vv[-1])

        grads.append(central(f, step))

    for side, Q in (("L", QL), ("Lambda", QLam)):
        n, k = Q.shape
        P = np.eye(n) - Q @ Q.T

        def moved(Qt, side=side):
            if side == "L":
                return value(Qt, QLam, psiF, psiE, theta_hat.sigma2)
            return value(QL, Qt, psiF, psiE, theta_hat.sigma2)

        for j in range(k):
            for a in range(n):
                D = np.zeros((n, k))
                D[:, j] = P[:, a]
                norm = np.linalg.norm(D)
                if norm < 1e-8:
                    continue
                D /= norm
                grads.append(central(lambda t, D=D, Q=Q: moved(_polar(Q + t * D)), h))
        for j in range(k):
            for l in range(j + 1, k):
                S = np.zeros((k, k))
                S[j, l] = 1.0
                S[l, j] = -1.0
                grads.append(
                    central(lambda t, S=S, Q=Q: moved(Q @ scipy.linalg.expm(t * S)), h)
                )

    return float(np.max(np.abs(grads)))
