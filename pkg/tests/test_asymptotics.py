# SPDX-License-Identifier: MIT

import numpy as np
import pytest

from twoway_factor import asymptotics, errors
from twoway_factor.model import Dims

from .conftest import axis_params


def test_scalar_example():
    params = axis_params(4, 4, 1.0, 0.5, 1.0)
    av = asymptotics.limiting_variances(params, y=1.0)
    np.testing.assert_allclose(av.sigmaL, [[4.0]])
    np.testing.assert_allclose(av.sigmaLambda, [[8.0]])
    np.testing.assert_allclose(av.varPsiF, [2.0])
    np.testing.assert_allclose(av.varPsiE, [0.5])
    assert av.y == 1.0


def test_sigma2_variance():
    av = asymptotics.limiting_variances(axis_params(6, 6, 8.0, 1.0, 0.01))
    assert av.varSigma2 == pytest.approx(2e-4)


def test_default_aspect_ratio(params_rect):
    av = asymptotics.limiting_variances(params_rect)
    assert av.y == pytest.approx(9 / 6)


def test_large_separation_limit():
    assert asymptotics.scalar_variance(1.0, 1.0, 1.0, 1e8) == pytest.approx(1.0, rel=1e-6)


@pytest.mark.parametrize("y", [0.25, 1.0, 3.0])
@pytest.mark.parametrize(("psiF", "psiE"), [(2.0, 1.0), (5.0, 0.3), (0.4, 1.1)])
def test_matches_scalar_curve(y, psiF, psiE):
    params = axis_params(6, 6, psiF, psiE, 0.7)
    av = asymptotics.limiting_variances(params, y=y)
    expected = asymptotics.scalar_variance(0.7, psiF, y, psiF / psiE)
    assert av.sigmaL[0, 0] == pytest.approx(expected, rel=1e-12)


def test_mirror_symmetry(params_multi):
    y = 0.8
    av = asymptotics.limiting_variances(params_multi, y=y)
    mirrored = asymptotics.limiting_variances(params_multi.transposed(), y=1.0 / y)
    np.testing.assert_allclose(mirrored.sigmaL, av.sigmaLambda, rtol=1e-12)
    np.testing.assert_allclose(mirrored.sigmaLambda, av.sigmaL, rtol=1e-12)


def test_diverges_near_equal_variances():
    values = []
    for gap in [1e-1, 1e-2, 1e-3, 1e-4, 1e-5]:
        av = asymptotics.limiting_variances(axis_params(4, 4, 1.0 + gap, 1.0, 1.0), y=1.0)
        values.append(av.sigmaL[0, 0])
    assert np.all(np.diff(values) > 0)
    assert values[-1] > 1e9


def test_equal_variances_raise():
    with pytest.raises(errors.DivergentVarianceError, match="infinite"):
        asymptotics.limiting_variances(axis_params(4, 4, 1.0, 1.0, 1.0))


def test_bad_aspect_ratio(params_single):
    with pytest.raises(errors.ConfigError, match="aspect ratio"):
        asymptotics.limiting_variances(params_single, y=0.0)


def test_variance_curve():
    grid = [0.0, 0.5, 1.0, 1.5, 2.0, 4.0, 8.0, -1.0]
    points = asymptotics.variance_curve(1.0, 1.0, 1.0, grid)
    assert [p.delta for p in points] == grid
    assert points[0].g == pytest.approx(2.0)
    assert not points[2].valid and np.isnan(points[2].g)
    assert not points[-1].valid
    above = [p.g for p in points if p.valid and p.delta > 1]
    assert np.all(np.diff(above) < 0)
    assert all(np.isfinite(p.g) for p in points if p.valid)


def test_corrected_sigma2():
    assert asymptotics.corrected_sigma2(0.0099, Dims(100, 100, 1, 1)) == pytest.approx(0.010098)
    factor = asymptotics.corrected_sigma2(1.0, Dims(50, 100, 1, 1))
    assert factor == pytest.approx(1.0 + 1 / 50 + 1 / 100)


def test_loading_ci_half_width():
    params = axis_params(400, 400, 1.0, 0.5, 1.0)
    ci = asymptotics.loading_ci(params, level=0.95)
    assert ci.half_width_L[0] == pytest.approx(0.196, abs=1e-3)
    assert ci.half_width_Lambda[0] == pytest.approx(1.96 * np.sqrt(8.0 / 400), rel=1e-3)
    np.testing.assert_allclose(ci.L_upper - ci.L_lower, 2 * ci.half_width_L[0])
    assert np.all(ci.L_lower <= params.L) and np.all(params.L <= ci.L_upper)
    assert not ci.any_unreliable


def test_loading_ci_flags_near_degenerate():
    ci = asymptotics.loading_ci(axis_params(8, 8, 1.02, 1.0, 1.0))
    assert ci.unreliable_L.all()
    assert ci.unreliable_Lambda.all()
    assert ci.any_unreliable


def test_loading_ci_level_widens(params_multi):
    narrow = asymptotics.loading_ci(params_multi, level=0.8)
    wide = asymptotics.loading_ci(params_multi, level=0.99)
    assert np.all(wide.half_width_L > narrow.half_width_L)
    assert np.all(wide.half_width_Lambda > narrow.half_width_Lambda)


@pytest.mark.parametrize("level", [0.0, 1.0, 1.5])
def test_loading_ci_bad_level(params_single, level):
    with pytest.raises(errors.ConfigError, match="level"):
        asymptotics.loading_ci(params_single, level=level)
