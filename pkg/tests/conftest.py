# SPDX-License-Identifier: MIT

import os

import numpy as np
import pytest

from twoway_factor.model import Dims, ModelParams
from twoway_factor.sampler import sample, sample_params


#: Monte Carlo checks take minutes to hours; opt in with TWFM_SLOW=1
slow = pytest.mark.skipif(
    not os.environ.get("TWFM_SLOW"), reason="set TWFM_SLOW=1 to run Monte Carlo checks"
)


def make_params(p, q, psiF, psiE, sigma2, seed=0) -> ModelParams:
    dims = Dims(p, q, len(psiF), len(psiE))
    return sample_params(dims, psiF, psiE, sigma2, seed=seed)


def axis_params(p, q, psiF, psiE, sigma2) -> ModelParams:
    """Single-factor parameters with loadings along the first coordinate"""
    L = np.zeros((q, 1))
    L[0, 0] = np.sqrt(q * sigma2)
    Lam = np.zeros((p, 1))
    Lam[0, 0] = np.sqrt(p * sigma2)
    return ModelParams(Dims(p, q, 1, 1), L, Lam, [psiF], [psiE], sigma2)


PARAMS = {
    "single": dict(p=8, q=8, psiF=[2.0], psiE=[1.0], sigma2=1.0),
    "rect": dict(p=9, q=6, psiF=[3.0], psiE=[0.5], sigma2=0.4),
    "multi": dict(p=10, q=12, psiF=[10.0, 8.0], psiE=[6.0, 4.0, 2.0], sigma2=0.5),
}


def generate_params_fixture(name):
    @pytest.fixture
    def fixture():
        return make_params(**PARAMS[name])

    return fixture


# inject params_* fixtures (https://github.com/pytest-dev/pytest/issues/2424)
for name in PARAMS:
    globals()[f"params_{name}"] = generate_params_fixture(name)


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


@pytest.fixture(scope="session")
def simulated():
    """A 40×40 single-factor draw with well separated variances"""
    params = make_params(40, 40, [8.0], [1.0], 0.01, seed=3)
    return sample(params, seed=11)


@pytest.fixture(scope="session")
def simulated_multi():
    params = make_params(40, 40, [10.0, 8.0], [6.0, 4.0, 2.0], 0.5, seed=5)
    return sample(params, seed=13)
