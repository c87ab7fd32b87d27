import numpy as np
import pytest

from sidgrad.problems import RegLogistic, quadratic_bilevel


def make_logistic(n=32, d=8, seed=0, reg_mode="single", batch_size=4, **kw):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, d))
    w_true = rng.standard_normal(d)
    y = np.where(X @ w_true + 0.5 * rng.standard_normal(n) > 0, 1.0, -1.0)
    Xv = rng.standard_normal((n, d))
    yv = np.where(Xv @ w_true > 0, 1.0, -1.0)
    return RegLogistic(X, y, reg_mode, batch_size, Xv, yv, **kw)


@pytest.fixture
def canonical_quadratic():
    return quadratic_bilevel()


@pytest.fixture
def small_logistic():
    return make_logistic()
