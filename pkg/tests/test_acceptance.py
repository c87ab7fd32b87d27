"""Acceptance gate.

Each test checks one criterion at its stated tolerance and prints a single
``criterion N PASS|FAIL: ...`` line.  Run ``python tests/test_acceptance.py``
for just the ten summary lines.
"""
import os
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from sidgrad.bounds import (bottou_rates, km_constant_envelope, km_decreasing_c, mse_bound, sgd_rates,
                            subproblem_rate_constants)
from sidgrad.core import Stream
from sidgrad.data import binarize_odd_even, load_idx, split_train_val
from sidgrad.fixpoint import km_run, schedule_constant, schedule_decreasing
from sidgrad.harness import EstimatorConfig, bound_overlay, empirical_moments, reference_gradient, run_variant
from sidgrad.problems import RegLogistic, ToyContraction, quadratic_bilevel, quadratic_exact_hypergrad
from sidgrad.sid import aid_batch, make_linear_map, solve_lower

sys.path.insert(0, str(Path(__file__).parent))
from conftest import make_logistic  # noqa: E402

ROOT = Path(__file__).resolve().parents[1]
MNIST_DIR = Path(os.environ.get("SID_MNIST_DIR", ROOT / "data" / "mnist"))


def _report(request, number, ok, detail):
    line = f"criterion {number:2d} {'PASS' if ok else 'FAIL'}: {detail}"
    if request is None:
        print(line)
    else:
        with request.config.pluginmanager.getplugin("capturemanager").global_and_fixture_disabled():
            print("\n" + line)
    assert ok, line


def _mse(W, target):
    return np.mean(np.sum((W - target) ** 2, axis=-1), axis=0)


# 1 ---------------------------------------------------------------------------

def test_criterion_01_exact_aid_oracle(request):
    p = quadratic_bilevel()
    start = time.perf_counter()
    worst = 0.0
    for lam in ([0.0, 0.0], [0.5, -1.0], [3.0, 7.0]):
        exact = quadratic_exact_hypergrad(p, lam)
        g = aid_batch(p, lam, 200, 200).grad
        worst = max(worst, np.linalg.norm(g - exact) / np.linalg.norm(exact))
    elapsed = time.perf_counter() - start
    _report(request, 1, worst <= 1e-8 and elapsed < 1.0,
            f"max relative error {worst:.2e} (<= 1e-8), {elapsed:.3f}s (< 1s)")


# 2 ---------------------------------------------------------------------------

def _f(p, lam):
    lam = np.asarray(lam, dtype=float)
    return p.upper_value(p.fixed_point(lam, tol=1e-12), lam)


def test_criterion_02_finite_difference_oracle(request):
    worst = 0.0
    for reg_mode in ("single", "per_feature"):
        p = make_logistic(n=32, d=8, reg_mode=reg_mode)
        lam = np.linspace(0.5, 1.5, p.m)
        g = aid_batch(p, lam, 2000, 2000).grad
        h = 1e-5
        fd = np.array([(_f(p, lam + h * e) - _f(p, lam - h * e)) / (2 * h) for e in np.eye(p.m)])
        worst = max(worst, np.linalg.norm(g - fd) / np.linalg.norm(fd))
    _report(request, 2, worst <= 1e-4, f"aid vs central differences, max relative gap {worst:.2e} (<= 1e-4)")


# 3, 4 ------------------------------------------------------------------------

TOY_Q, TOY_S, TOY_D = 0.9, 0.1, 2


def _toy_run(schedule, steps, replicates=2000, seed=0):
    toy = ToyContraction(TOY_Q, np.full(TOY_D, 0.05), TOY_S)
    traj = solve_lower(toy, toy.c, steps, schedule, Stream(seed, 0), n_replicates=replicates,
                       record_every=10)
    w_star = toy.fixed_point()
    return {t: _mse(W, w_star) for t, W in traj.checkpoints}, float(w_star @ w_star)


def test_criterion_03_constant_step_envelope(request):
    start = time.perf_counter()
    eta = 0.05
    sigma1 = TOY_D * TOY_S ** 2
    mse, mse0 = _toy_run(schedule_constant(eta_override=eta), 5000)
    ratios = {t: mse[t] / km_constant_envelope(TOY_Q, sigma1, eta, mse0, t) for t in (10, 100, 1000, 5000)}
    steady = eta * sigma1 / (1 - TOY_Q ** 2)
    steady_ratio = mse[5000] / steady
    elapsed = time.perf_counter() - start
    ok = max(ratios.values()) <= 1.1 and steady_ratio <= 1.2 and elapsed < 60
    _report(request, 3, ok, f"max MSE/envelope {max(ratios.values()):.3f} (<= 1.1), "
                            f"steady MSE/floor {steady_ratio:.3f} (<= 1.2), {elapsed:.1f}s")


def test_criterion_04_decreasing_step_rate(request):
    sigma1 = TOY_D * TOY_S ** 2
    sched = schedule_decreasing(TOY_Q)
    beta = 2 / (1 - TOY_Q ** 2)
    gamma = beta
    mse, mse0 = _toy_run(sched, 10_000)
    c = km_decreasing_c(TOY_Q, sigma1, beta, gamma, mse0)
    worst = max(mse[t] * (gamma + t) / c for t in (10, 100, 1000, 5000, 10_000))
    grid = sorted({int(round(x / 10)) * 10 for x in np.geomspace(100, 10_000, 40)})
    slope = np.polyfit(np.log(grid), np.log([mse[t] for t in grid]), 1)[0]
    ok = worst <= 1.1 and -1.25 <= slope <= -0.75
    _report(request, 4, ok, f"max MSE/(c/(gamma+t)) {worst:.3f} (<= 1.1), log-log slope {slope:.3f} "
                            f"(in [-1.25, -0.75])")


# 5, 6, 7 ---------------------------------------------------------------------

MOMENTS_SEEN = []


def _moments(p, lam, cfg, n, seed=0):
    m = empirical_moments(p, lam, cfg, n, master_seed=seed)
    MOMENTS_SEEN.append(m)
    return m


def test_criterion_05_sid_mse_bound(request):
    p = quadratic_bilevel(noise_mode="additive", noise_std=0.1)
    lam = np.array([0.5, -1.0])
    c = p.constants(lam)
    sched = schedule_decreasing(c.q, c.sigma_lam2)
    pairs = [(10, 10), (100, 100), (1000, 1000)]
    parts, ok = [], True
    for row in bound_overlay(p, lam, pairs):
        m = _moments(p, lam, EstimatorConfig(row["t"], row["k"], sched, sched), 2000, seed=5)
        ok &= m.mse <= row["total"] + 3 * m.mse_std
        parts.append(f"t=k={row['t']}: {m.mse:.2e} <= {row['total']:.2e}")
    _report(request, 5, ok, "MSE vs bound + 3 MC std; " + "; ".join(parts))


def test_criterion_06_mse_floor(request):
    p = quadratic_bilevel(noise_mode="lambda_multiplicative", noise_std=0.5)
    lam = np.array([1.0, 1.0])
    c = p.constants(lam)
    floor = mse_bound(c, 0.0, 0.0).floor
    sched = schedule_decreasing(c.q, c.sigma2_lower)
    m3 = _moments(p, lam, EstimatorConfig(1000, 1000, sched, sched), 2000, seed=6)
    m4 = _moments(p, lam, EstimatorConfig(10_000, 10_000, sched, sched), 2000, seed=6)
    diff_std = np.hypot(m3.mse_std, m4.mse_std)
    ok = m4.mse <= floor + 3 * m4.mse_std and abs(m3.mse - m4.mse) <= 3 * diff_std
    _report(request, 6, ok, f"MSE(1e4) {m4.mse:.4g} <= floor {floor:.4g} + 3 std; "
                            f"|MSE(1e3) - MSE(1e4)| {abs(m3.mse - m4.mse):.2e} <= {3 * diff_std:.2e}")


def test_criterion_07_bias_variance_identity(request):
    extra = []
    for mode, std in (("none", 0.0), ("additive", 0.3), ("lambda_multiplicative", 0.5)):
        p = quadratic_bilevel(noise_mode=mode, noise_std=std)
        s = schedule_decreasing(p.q)
        extra.append(_moments(p, [0.2, 0.9], EstimatorConfig(50, 50, s, s), 300, seed=1))
    lp = make_logistic(n=32, d=8)
    c = lp.constants([1.0])
    s = schedule_decreasing(c.q)
    extra.append(_moments(lp, [1.0], EstimatorConfig(40, 40, s, s), 100, seed=2))
    worst = max(abs(m.mse - m.bias_sq - m.variance) / m.mse for m in MOMENTS_SEEN)
    _report(request, 7, worst <= 1e-10,
            f"{len(MOMENTS_SEEN)} empirical_moments calls, max |mse - bias^2 - var|/mse {worst:.1e} (<= 1e-10)")


# 8 ---------------------------------------------------------------------------

def test_criterion_08_rate_ordering(request):
    rng = np.random.default_rng(8)
    n = 10_000
    L = rng.uniform(1e-3, 1e3, n)
    tau = L * rng.uniform(1e-6, 1.0, n)
    tau[::10] = L[::10]                       # equality cases
    eta = 1.0 - rng.uniform(0.0, 1.0, n)      # (0, 1]
    bad = 0
    for Li, ti, ei in zip(L, tau, eta):
        ours = sgd_rates(Li, ti, 1.0, eta=ei, alpha_choice="1/L")["r1"]
        theirs = bottou_rates(Li, ti, ei, 1.0)["r1"]
        if ti == Li:
            bad += abs(ours - theirs) > 1e-15
        else:
            bad += not ours < theirs
    _report(request, 8, bad == 0, f"{n} tuples, {bad} violations of r1(1/L) <= r1(classical), "
                                  f"equality exactly when tau = L")


# 9 ---------------------------------------------------------------------------

def _mnist():
    img = MNIST_DIR / "mnist5k-images-idx3-ubyte.gz"
    lab = MNIST_DIR / "mnist5k-labels-idx1-ubyte.gz"
    if not img.exists():
        return None
    return load_idx(img, lab)


def test_criterion_09_mnist_stochdec_beats_batch(request):
    ds = _mnist()
    if ds is None:
        _report(request, 9, False, f"MNIST subset not found in {MNIST_DIR} (set SID_MNIST_DIR)")
    start = time.perf_counter()
    batch, dec = [], []
    for seed in range(5):
        tr, va = split_train_val(ds, 1000, 1000, seed=seed)
        p = RegLogistic(tr.X, binarize_odd_even(tr.y), "single", 50, va.X, binarize_odd_even(va.y),
                        seed=seed)
        ref = reference_gradient(p, [1.0])
        batch.append(run_variant(p, [1.0], "Batch", 60, epochs=[60.0], master_seed=seed,
                                 reference=ref).terminal_error)
        dec.append(run_variant(p, [1.0], "StochDec", 60, epochs=[60.0], master_seed=seed,
                               reference=ref).terminal_error)
    elapsed = time.perf_counter() - start
    ok = np.median(dec) < np.median(batch) and elapsed < 300
    _report(request, 9, ok, f"median terminal sq. error StochDec {np.median(dec):.4g} < Batch "
                            f"{np.median(batch):.4g}, {elapsed:.1f}s (< 300s)")


# 10 --------------------------------------------------------------------------

def test_criterion_10_linear_system_rate(request):
    p = make_logistic(n=64, d=8, batch_size=8)
    lam = np.array([10.0])
    c = p.constants(lam)
    w = p.fixed_point(lam)
    lmap = make_linear_map(p, w, lam)
    v_star = lmap.solve_dense()
    beta = 2 / (1 - c.q ** 2)
    gamma = beta * (1 + c.sigma_lam2)
    _, d_v, _, _ = subproblem_rate_constants(c, beta, gamma, np.linalg.norm(w), np.linalg.norm(lmap.grad1E))
    sched = schedule_decreasing(c.q, c.sigma_lam2)
    traj = km_run(lmap.psi_sample, np.zeros((500, p.d)), sched, 1000, Stream(10, 1), record_every=100)
    got = dict(traj.checkpoints)
    ratios = {k: _mse(got[k], v_star) / (d_v / (gamma + k)) for k in (100, 1000)}
    _report(request, 10, max(ratios.values()) <= 1.1,
            "MSE/(d_v/(gamma+k)) " + ", ".join(f"k={k}: {r:.3f}" for k, r in ratios.items()) + " (<= 1.1)")


if __name__ == "__main__":
    failed = 0
    for name, fn in sorted((n, f) for n, f in globals().items() if n.startswith("test_criterion_")):
        try:
            fn(None)
        except AssertionError:
            failed += 1
    sys.exit(1 if failed else 0)
