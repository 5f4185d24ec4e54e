# SPDX-License-Identifier: MIT

import numpy as np
import pytest

from twoway_factor import errors, estimator, model, spectral
from twoway_factor.config import FitConfig
from twoway_factor.estimator import UnrotatedParams
from twoway_factor.model import Dims
from twoway_factor.sampler import sample

from .conftest import axis_params, make_params

TOY_X = np.array([[np.sqrt(8.0), 2.0], [np.sqrt(5.0), 1.0]])


def _toy_grid_optimum(step=0.05):
    # the four entries are independent with variances σ²(1 + 2a·ψF + 2b·ψE)
    # for (a, b) in {0, 1}²; observed squares are 1, 5, 4 and 8
    psiF = np.arange(0.5, 4.0 + step / 2, step)
    psiE = np.arange(0.5, 4.0 + step / 2, step)
    s2 = np.arange(0.5, 2.0 + step / 2, step)
    F, E, S = np.meshgrid(psiF, psiE, s2, indexing="ij")
    total = np.zeros_like(F)
    for a, b, z2 in ((0, 0, 1.0), (1, 0, 5.0), (0, 1, 4.0), (1, 1, 8.0)):
        lam = S * (1.0 + 2.0 * a * F + 2.0 * b * E)
        total -= np.log(lam) + z2 / lam
    i = np.unravel_index(np.argmax(total), total.shape)
    return F[i], E[i], S[i]


def test_em_matches_grid_search():
    start = axis_params(2, 2, 1.0, 0.5, 1.0)
    up = estimator.em_update_variances(start, TOY_X, err0=1e-12, max_inner=5000)
    theta = estimator.rotate_identify(up.raw)
    gF, gE, gS = _toy_grid_optimum()
    assert abs(theta.psiF[0] - gF) <= 0.05
    assert abs(theta.psiE[0] - gE) <= 0.05
    assert abs(theta.sigma2 - gS) <= 0.05
    assert theta.psiF[0] == pytest.approx(2.0, rel=1e-3)
    assert theta.psiE[0] == pytest.approx(1.5, rel=1e-3)
    assert theta.sigma2 == pytest.approx(1.0, rel=1e-3)


def test_em_trace_monotone(simulated_multi):
    truth = simulated_multi.params
    start = truth.replace(psiF=truth.psiF * 2.0, psiE=truth.psiE * 0.5, sigma2=truth.sigma2 * 3.0)
    start = model.ModelParams.from_directions(
        truth.dims,
        truth.L / np.sqrt(truth.dims.q * truth.sigma2),
        truth.Lambda / np.sqrt(truth.dims.p * truth.sigma2),
        start.psiF,
        start.psiE,
        start.sigma2,
    )
    up = estimator.em_update_variances(start, simulated_multi.X, err0=1e-8, max_inner=300)
    assert np.all(np.diff(up.loglik_trace) >= -1e-8)
    assert up.loglik_trace[-1] > up.loglik_trace[0]


def test_em_fixed_point_at_optimum():
    # (2, 1.5, 1) reproduces the four observed squares exactly
    start = axis_params(2, 2, 2.0, 1.5, 1.0)
    up = estimator.em_update_variances(start, TOY_X, err0=1e-12, max_inner=1)
    np.testing.assert_allclose(up.raw.psiF, [[2.0]], atol=1e-8)
    np.testing.assert_allclose(up.raw.psiE, [[1.5]], atol=1e-8)
    assert up.raw.sigma2 == pytest.approx(1.0, abs=1e-8)
    assert up.loglik_trace[1] == pytest.approx(up.loglik_trace[0], abs=1e-10)


def test_em_single_step_increases(rng):
    for _ in range(100):
        p, q = (int(v) for v in rng.integers(6, 11, size=2))
        r, c = (int(v) for v in rng.integers(1, 3, size=2))
        truth = make_params(p, q, [8.0, 5.0][:r], [3.0, 1.5][:c], 0.5, seed=int(rng.integers(2**31)))
        X = sample(truth, seed=int(rng.integers(2**31))).X
        low, high = rng.uniform(0.2, 0.6, size=3), rng.uniform(1.8, 4.0, size=3)
        f = np.where(rng.random(3) < 0.5, low, high)
        start = model.ModelParams.from_directions(
            truth.dims,
            truth.L / np.sqrt(q * truth.sigma2),
            truth.Lambda / np.sqrt(p * truth.sigma2),
            truth.psiF * f[0],
            truth.psiE * f[1],
            truth.sigma2 * f[2],
        )
        up = estimator.em_update_variances(start, X, err0=1e-12, max_inner=1)
        assert up.iterations == 1
        assert up.loglik_trace[1] > up.loglik_trace[0]


def test_em_floor_warns(simulated):
    start = simulated.params
    with pytest.warns(errors.VarianceFloorWarning, match="floor"):
        up = estimator.em_update_variances(start, simulated.X, floor=1.0, max_inner=5)
    assert up.floored
    assert up.raw.sigma2 >= 1.0


def test_rotate_identify_preserves_covariance(rng):
    for _ in range(100):
        p, q = rng.integers(4, 8, size=2)
        r, c = rng.integers(1, 4, size=2)
        dims = Dims(int(p), int(q), int(r), int(c))
        QL, _ = np.linalg.qr(rng.standard_normal((q, r)))
        QLam, _ = np.linalg.qr(rng.standard_normal((p, c)))
        A = rng.standard_normal((r, r))
        B = rng.standard_normal((c, c))
        raw = UnrotatedParams(
            dims=dims,
            L=2.0 * QL,
            Lambda=0.7 * QLam,
            psiF=A @ A.T + np.eye(r),
            psiE=B @ B.T + 0.5 * np.eye(c),
            sigma2=float(rng.uniform(0.2, 2.0)),
        )
        a = raw.L @ raw.psiF @ raw.L.T
        b = raw.Lambda @ raw.psiE @ raw.Lambda.T
        expected = np.kron(np.eye(p), a) + np.kron(b, np.eye(q)) + raw.sigma2 * np.eye(p * q)

        theta = estimator.rotate_identify(raw)
        np.testing.assert_allclose(spectral.dense_sigma(theta), expected, atol=1e-10)
        assert max(theta.scale_residuals()) < 1e-12
        assert np.all(np.diff(theta.psiF) < 0) and np.all(np.diff(theta.psiE) < 0)
        np.testing.assert_array_equal(theta.L, model.canonicalize_signs(theta.L))


def test_rotate_identify_repeated_variances_warns():
    raw = UnrotatedParams.from_params(make_params(6, 6, [3.0, 2.0], [1.0], 0.5))
    raw = raw.replace(psiF=np.eye(2))
    with pytest.warns(errors.AmbiguousRotationWarning):
        estimator.rotate_identify(raw)


def test_maximize_single_matrix():
    res = estimator.maximize_quadratic_sum([np.diag([3.0, 1.0, 2.0])], np.ones((3, 1)) / np.sqrt(3))
    np.testing.assert_allclose(np.abs(res.Q[:, 0]), [1.0, 0.0, 0.0], atol=1e-12)
    assert res.objective_trace[-1] == pytest.approx(3.0)


def test_maximize_two_matrices(rng):
    Ws = [np.diag([5.0, 1.0, 1.0, 0.0]), np.diag([1.0, 4.0, 1.0, 0.0])]
    Q0, _ = np.linalg.qr(rng.standard_normal((4, 2)))
    res = estimator.maximize_quadratic_sum(Ws, Q0, err0=1e-13, max_inner=5000)
    assert res.objective_trace[-1] == pytest.approx(9.0, abs=1e-6)
    assert np.all(np.diff(res.objective_trace) >= -1e-12)
    np.testing.assert_allclose(res.Q.T @ res.Q, np.eye(2), atol=1e-12)


@pytest.mark.parametrize("k", [2, 3])
def test_maximize_equal_matrices_reaches_top_eigenvalues(rng, k):
    eigs = np.array([10.0, 7.0, 4.0, 2.0, 1.0, 0.5])
    V, _ = np.linalg.qr(rng.standard_normal((6, 6)))
    W = (V * eigs[None, :]) @ V.T
    Q0, _ = np.linalg.qr(rng.standard_normal((6, k)))
    res = estimator.maximize_quadratic_sum([W] * k, Q0, err0=1e-12, max_inner=5000, scale=4.0)
    assert not res.hit_cap
    assert res.objective_trace[-1] == pytest.approx(4.0 * eigs[:k].sum(), rel=1e-9)
    top = V[:, :k]
    np.testing.assert_allclose(res.Q @ res.Q.T, top @ top.T, atol=1e-5)


@pytest.mark.parametrize("t", [0.0, 5.0, -3.0])
def test_maximize_shift_invariant(rng, t):
    Ws = [np.diag([5.0, 1.0, 1.0, 0.0]), np.diag([1.0, 4.0, 1.0, 0.0])]
    Q0, _ = np.linalg.qr(rng.standard_normal((4, 2)))
    base = estimator.maximize_quadratic_sum(Ws, Q0, err0=1e-13, max_inner=5000)
    moved = estimator.maximize_quadratic_sum(
        [W + t * np.eye(4) for W in Ws], Q0, err0=1e-13, max_inner=5000
    )
    np.testing.assert_allclose(moved.Q, base.Q, atol=1e-5)
    assert moved.objective_trace[-1] == pytest.approx(base.objective_trace[-1] + 2 * t, abs=1e-6)


def test_loading_updates_do_not_decrease(simulated_multi):
    truth = simulated_multi.params
    X = simulated_multi.X
    before = spectral.log_likelihood(truth, X)
    upL = estimator.update_L(truth, X)
    after_L = truth.replace(L=upL.loadings)
    assert spectral.log_likelihood(after_L, X) >= before - 1e-8
    upLam = estimator.update_Lambda(after_L, X)
    after = after_L.replace(Lambda=upLam.loadings)
    assert spectral.log_likelihood(after, X) >= spectral.log_likelihood(after_L, X) - 1e-8
    assert max(after.scale_residuals()) < 1e-10


def test_init_params_svd(simulated):
    init = estimator.init_params(simulated.X, Dims(40, 40, 1, 1))
    assert model.validate(init).ok
    # the strongest component belongs to the row factor
    r2 = model.loading_accuracy_r2(init.L, simulated.params.L)
    assert r2.mean > 0.8


def test_init_params_random_is_seeded(simulated):
    dims = Dims(40, 40, 1, 1)
    a = estimator.init_params(simulated.X, dims, FitConfig(init="random:3"))
    b = estimator.init_params(simulated.X, dims, FitConfig(init="random:3"))
    c = estimator.init_params(simulated.X, dims, FitConfig(init="random:4"))
    assert a.allclose(b, atol=0)
    assert not a.allclose(c)


def test_init_params_mirrored(simulated):
    X = simulated.X.values
    U, s, Vt = np.linalg.svd(X)
    init = estimator.init_params(X, Dims(40, 40, 1, 1), mirrored=True)
    assert model.validate(init).ok
    assert init.psiE[0] > init.psiF[0]
    np.testing.assert_allclose(np.abs(init.Lambda[:, 0]) / np.linalg.norm(init.Lambda), np.abs(U[:, 0]), atol=1e-10)
    np.testing.assert_allclose(np.abs(init.L[:, 0]) / np.linalg.norm(init.L), np.abs(Vt[1]), atol=1e-10)


def test_init_params_without_noise_components():
    truth = make_params(3, 5, [4.0, 2.0], [1.0], 0.1, seed=2)
    X = sample(truth, seed=3).X.values
    s = np.linalg.svd(X, compute_uv=False)
    with pytest.warns(errors.InitializationWarning, match="no noise components"):
        init = estimator.init_params(X, truth.dims)
    assert init.sigma2 == pytest.approx(0.01 * np.mean(s**2) / 5, rel=1e-12)
    assert np.all(init.psiF > 1.0)


def test_init_params_rank_deficient():
    with pytest.raises(errors.InitializationError, match="numerical rank"):
        estimator.init_params(np.zeros((6, 6)), Dims(6, 6, 1, 1))


def test_fit_recovers_parameters(simulated):
    res = estimator.fit(simulated.X, Dims(40, 40, 1, 1))
    truth = simulated.params
    theta = res.theta_hat
    assert res.converged and res.stop_reason == "tolerance"
    assert model.loading_accuracy_r2(theta.L, truth.L).mean > 0.9
    assert model.loading_accuracy_r2(theta.Lambda, truth.Lambda).mean > 0.6
    assert 3.0 < theta.psiF[0] < 14.0
    assert 0.4 < theta.psiE[0] < 1.8
    assert abs(theta.sigma2 / 0.01 - 1.0) < 0.2
    assert np.isfinite(res.gradient_norm)
    assert res.loglik >= spectral.log_likelihood(truth, simulated.X)


def test_fit_trace_and_constraints(simulated_multi):
    res = estimator.fit(simulated_multi.X, simulated_multi.params.dims)
    assert np.all(np.diff(res.loglik_trace) >= -1e-8)
    assert max(res.scale_trace) < 1e-6
    assert len(res.loglik_trace) == len(res.inner_iters) + 1
    assert res.loglik == res.loglik_trace[-1]
    res.scores.check(simulated_multi.params.dims)


def test_fit_inner_calls(simulated, mocker):
    spy = mocker.spy(estimator, "maximize_quadratic_sum")
    res = estimator.fit(simulated.X, Dims(40, 40, 1, 1), FitConfig(gradient_check=False, label_check=False))
    assert spy.call_count == 2 * len(res.inner_iters)


def test_fit_label_check(simulated, mocker):
    spy = mocker.spy(estimator, "init_params")
    res = estimator.fit(simulated.X, Dims(40, 40, 1, 1), FitConfig(gradient_check=False))
    assert [call.kwargs.get("mirrored", False) for call in spy.call_args_list] == [False, True]
    assert len(res.label_logliks) == 2
    assert res.loglik == max(res.label_logliks)
    assert res.labels in ("svd", "mirrored")


def test_fit_label_check_off(simulated, mocker):
    spy = mocker.spy(estimator, "init_params")
    config = FitConfig(gradient_check=False, label_check=False)
    res = estimator.fit(simulated.X, Dims(40, 40, 1, 1), config)
    assert spy.call_count == 1
    assert res.labels == "svd"
    assert res.label_logliks == []


def test_fit_label_check_skipped_for_given_start(simulated):
    config = FitConfig(gradient_check=False)
    res = estimator.fit(simulated.X, Dims(40, 40, 1, 1), config, initial=simulated.params)
    assert res.labels == "given"
    assert res.label_logliks == []


def test_fit_near_zero_row_variance():
    # the row factor is almost absent, so the strongest component belongs to
    # the column factor and the plain svd start assigns it to the wrong side
    truth = make_params(30, 30, [1e-6], [1.0], 0.1, seed=12)
    X = sample(truth, seed=13).X
    config = FitConfig(gradient_check=False)

    anchored = estimator.fit(X, truth.dims, config, initial=truth)
    assert anchored.labels == "given"
    assert np.all(np.diff(anchored.loglik_trace) >= -1e-8)
    assert anchored.theta_hat.psiF[0] < 1e-2 * anchored.theta_hat.psiE[0]

    res = estimator.fit(X, truth.dims, config)
    assert len(res.label_logliks) == 2
    assert res.loglik == max(res.label_logliks)
    assert np.all(np.diff(res.loglik_trace) >= -1e-8)
    assert res.loglik >= anchored.loglik - config.err0


def test_fit_restarts_keep_best(simulated):
    config = FitConfig(restarts=3, gradient_check=False)
    res = estimator.fit(simulated.X, Dims(40, 40, 1, 1), config)
    assert len(res.restart_logliks) == 3
    assert res.loglik == max(res.restart_logliks)


def test_fit_max_outer(simulated):
    res = estimator.fit(simulated.X, Dims(40, 40, 1, 1), FitConfig(max_outer=1, gradient_check=False))
    assert not res.converged
    assert res.stop_reason == "max_outer"
    assert len(res.inner_iters) == 1


def test_fit_gradient_small_at_optimum():
    truth = make_params(30, 30, [8.0], [1.0], 0.01, seed=21)
    X = sample(truth, seed=22).X
    config = FitConfig(err0=1e-10, max_outer=2000, max_inner=500)
    res = estimator.fit(X, truth.dims, config, initial=truth)
    theta = res.theta_hat
    away = estimator.estimating_equation_residual(theta.replace(psiF=theta.psiF * 1.5), X)
    assert away > 10 * res.gradient_norm


def test_fit_transpose_symmetry():
    truth = make_params(12, 9, [6.0], [2.0], 0.5, seed=8)
    X = sample(truth, seed=9).X
    config = FitConfig(err0=1e-10, max_outer=2000, max_inner=500, gradient_check=False)
    a = estimator.fit(X, truth.dims, config, initial=truth)
    b = estimator.fit(X.transposed(), truth.dims.transposed(), config, initial=truth.transposed())
    assert a.loglik == pytest.approx(b.loglik, rel=1e-8)
    back = b.theta_hat.transposed()
    np.testing.assert_allclose(back.psiF, a.theta_hat.psiF, rtol=1e-3)
    np.testing.assert_allclose(back.psiE, a.theta_hat.psiE, rtol=1e-3)
    assert back.sigma2 == pytest.approx(a.theta_hat.sigma2, rel=1e-3)


def test_fit_floor_warns(simulated):
    config = FitConfig(variance_floor=1.0, gradient_check=False, max_outer=5)
    with pytest.warns(errors.VarianceFloorWarning):
        res = estimator.fit(simulated.X, Dims(40, 40, 1, 1), config)
    assert res.floored
    assert any("clamped" in note for note in res.warnings)


@pytest.mark.parametrize(
    ("kwargs", "error", "match"),
    [
        (dict(dims=Dims(40, 30, 1, 1)), errors.DimensionError, "X has shape"),
        (dict(config=FitConfig(init="provided")), errors.ConfigError, "starting parameters"),
        (dict(initial=axis_params(8, 8, 2.0, 1.0, 1.0)), errors.DimensionError, "initial parameters"),
    ],
    ids=["shape", "provided", "initial-dims"],
)
def test_fit_errors(simulated, kwargs, error, match):
    kwargs = {"dims": Dims(40, 40, 1, 1), **kwargs}
    with pytest.raises(error, match=match):
        estimator.fit(simulated.X, **kwargs)


def test_fit_non_finite():
    X = np.ones((6, 6))
    X[2, 3] = np.inf
    with pytest.raises(errors.InputError, match="non-finite"):
        estimator.fit(X, Dims(6, 6, 1, 1))


def test_factor_scores_track_truth(simulated):
    scores = estimator.factor_scores(simulated.params, simulated.X)
    scores.check(simulated.params.dims)
    corr = np.corrcoef(scores.F[:, 0], simulated.scores.F[:, 0])[0, 1]
    assert corr > 0.95
