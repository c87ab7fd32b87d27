import numpy as np
import pytest

from sidgrad.outer import HyperDomain, HypergradConfig, evaluate, exp_uniform_init, outer_sgd
from sidgrad.problems import RegLogistic, quadratic_bilevel

from conftest import make_logistic

ORACLE = HypergradConfig(estimator="oracle")


def test_domain_projection_idempotent():
    box = HyperDomain.box([0.0, -1.0], [1.0, 1.0])
    x = box.project([3.0, -5.0])
    np.testing.assert_array_equal(x, [1.0, -1.0])
    np.testing.assert_array_equal(box.project(x), x)
    pos = HyperDomain.positive_orthant(0.1)
    np.testing.assert_array_equal(pos.project([-1.0, 2.0]), [0.1, 2.0])
    assert pos.contains([0.1, 5.0]) and not pos.contains([0.0])
    assert HyperDomain.unconstrained().contains([-1e9])
    with pytest.raises(ValueError):
        HyperDomain.box([1.0], [0.0])
    with pytest.raises(ValueError):
        HyperDomain("sphere")


def test_zero_learning_rate_keeps_lambda():
    p = make_logistic(n=32, d=4, batch_size=4)
    tr = outer_sgd(p, [0.7], HyperDomain.positive_orthant(1e-3), 4, 0.0,
                   HypergradConfig(epochs=2), master_seed=1)
    assert tr.status == "ok" and len(tr.steps) == 4
    assert np.all(tr.lams == 0.7)
    assert np.all(np.diff([s.epochs for s in tr.steps]) >= 0)


def test_oracle_descent_converges_to_minimizer():
    p = quadratic_bilevel()
    # f(lam) = 0.5 |A^-1 lam - 1|^2 has Hessian A^-2 = diag(1/4, 1/16), so L_f = 1/4
    L_f = 0.25
    tr = outer_sgd(p, [0.0, 0.0], HyperDomain.unconstrained(), 250, 0.9 / L_f, ORACLE)
    np.testing.assert_allclose(tr.lams[-1], [2.0, 4.0], atol=1e-8)
    f = tr.f_values
    assert np.all(np.diff(f) <= 1e-15)


def test_sid_outer_loop_approaches_minimizer():
    p = quadratic_bilevel(noise_mode="additive", noise_std=0.05)
    tr = outer_sgd(p, [0.0, 0.0], HyperDomain.unconstrained(), 60, 2.0,
                   HypergradConfig(variant="StochDec", epochs=40), warm_start=True)
    np.testing.assert_allclose(tr.lams[-1], [2.0, 4.0], atol=0.5)


def test_exp_uniform_init_positive_and_seeded():
    lam = exp_uniform_init(50, seed=3)
    assert np.all(lam > 0) and np.all(lam >= np.exp(-2)) and np.all(lam <= np.exp(2))
    np.testing.assert_array_equal(lam, exp_uniform_init(50, seed=3))
    np.testing.assert_array_equal(HyperDomain.positive_orthant(0.0).project(lam), lam)


def test_warm_start_first_step_identical():
    p = make_logistic(n=32, d=4, batch_size=4, reg_mode="per_feature")
    lam0 = exp_uniform_init(4, seed=0)
    cfg = HypergradConfig(epochs=3)
    dom = HyperDomain.positive_orthant(1e-3)
    a = outer_sgd(p, lam0, dom, 3, 0.1, cfg, warm_start=True, master_seed=2)
    b = outer_sgd(p, lam0, dom, 3, 0.1, cfg, warm_start=False, master_seed=2)
    np.testing.assert_array_equal(a.steps[0].grad, b.steps[0].grad)
    assert not np.array_equal(a.steps[1].grad, b.steps[1].grad)


def test_projection_safety():
    p = make_logistic(n=32, d=4, batch_size=4, reg_mode="per_feature")
    dom = HyperDomain.positive_orthant(0.05)
    tr = outer_sgd(p, np.full(4, 0.06), dom, 6, 50.0, HypergradConfig(epochs=2), master_seed=5)
    assert all(dom.contains(lam) for lam in tr.lams)
    box = HyperDomain.box([0.5], [2.0])
    tr = outer_sgd(make_logistic(n=32, d=4), [1.0], box, 5, 1e3, HypergradConfig(epochs=2))
    assert all(box.contains(lam) for lam in tr.lams)


def test_log_space_steps_stay_positive():
    p = make_logistic(n=32, d=4, batch_size=4)
    tr = outer_sgd(p, [1.0], HyperDomain.unconstrained(), 5, 1.0,
                   HypergradConfig(epochs=2, log_space=True))
    assert np.all(tr.lams > 0)
    with pytest.raises(ValueError):
        outer_sgd(p, [0.0], HyperDomain.unconstrained(), 1, 1.0, HypergradConfig(log_space=True))


def test_divergent_outer_loop_aborts_with_partial_trace():
    p = quadratic_bilevel()
    tr = outer_sgd(p, [1.0, 1.0], HyperDomain.unconstrained(), 200, -1e40, ORACLE, record_f=False)
    assert tr.status.startswith("aborted")
    assert 0 < len(tr.steps) < 200
    assert np.all(np.isfinite(tr.lams))


def test_invalid_start_rejected():
    with pytest.raises(ValueError):
        outer_sgd(quadratic_bilevel(), [-1.0, 0.0], HyperDomain.positive_orthant(), 1, 0.1, ORACLE)
    with pytest.raises(ValueError):
        HypergradConfig(estimator="adam")


def test_evaluate_zero_design_majority():
    X = np.zeros((5, 3))
    y = np.array([1, 1, 1, -1, -1])
    p = RegLogistic(X, y, X_val=X, y_val=y)
    out = evaluate(p, [0.5])
    assert out["accuracy"] == pytest.approx(0.6)
    assert out["val_loss"] == pytest.approx(np.log(2.0))


def test_evaluate_separable_two_points():
    X = np.array([[1.0], [-1.0]])
    y = np.array([1, -1])
    p = RegLogistic(X, y, batch_size=1, X_val=X, y_val=y)
    tr = outer_sgd(p, [1.0], HyperDomain.positive_orthant(1e-2), 10, 1.0, HypergradConfig(epochs=4),
                   eval_set=(X, y))
    assert tr.steps[-1].accuracy == 1.0
    assert all(s.f_val >= 0 for s in tr.steps)
    assert evaluate(p, tr.lams[-1])["val_loss"] >= 0


def test_evaluate_multinomial():
    from sidgrad.problems import multinomial_problem
    rng = np.random.default_rng(0)
    centers = np.eye(3) * 4
    labels = np.repeat(np.arange(3), 10)
    X = centers[labels] + rng.standard_normal((30, 3)) * 0.3
    p = multinomial_problem(X, labels, 3, X_val=X, labels_val=labels)
    out = evaluate(p, [0.1])
    assert out["accuracy"] == 1.0 and out["val_loss"] >= 0
