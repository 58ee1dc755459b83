from __future__ import annotations

import math

import numpy as np
import pytest

from conadv.theory import (
    LipschitzConstants,
    ProbeConfig,
    QuadraticMinMax,
    check_drift,
    check_grad_error,
    check_smoothness,
    compare,
    estimate_constants,
    fit_rate,
    gradient_variance,
    inner_argmax_analytic,
    inner_argmax_bruteforce,
    measure_lambda,
    run_probe,
    rate_bound,
    rate_step_size,
)


@pytest.fixture(scope="module")
def problem():
    return QuadraticMinMax.random(seed=0)


@pytest.mark.parametrize("seed", range(5))
def test_analytic_argmax_matches_grid_search(problem, seed):
    rng = np.random.default_rng(seed)
    theta = 2.0 * rng.standard_normal(problem.p)
    xi = problem.anchors[seed]
    grid_n = 201
    brute = inner_argmax_bruteforce(problem, theta, xi, grid_n)
    exact = inner_argmax_analytic(problem, theta, xi)
    spacing = 2 * problem.eps / (grid_n - 1)
    assert np.max(np.abs(brute - exact)) <= spacing / 2 + 1e-12


def test_argmax_is_within_box_and_interior_when_small(problem):
    theta = np.full(problem.p, 1e-3)
    xs = inner_argmax_analytic(problem, theta, problem.anchors)
    np.testing.assert_allclose(xs, problem.anchors + theta @ problem.B / problem.mu)
    xs = inner_argmax_analytic(problem, 1e3 * np.ones(problem.p), problem.anchors)
    assert np.all(np.abs(xs - problem.anchors) <= problem.eps + 1e-15)


def test_danskin_gradient_matches_finite_differences(problem):
    rng = np.random.default_rng(1)
    theta = rng.standard_normal(problem.p)
    h = 1e-6
    fd = np.array([(problem.loss_D(theta + h * e) - problem.loss_D(theta - h * e)) / (2 * h)
                   for e in np.eye(problem.p)])
    np.testing.assert_allclose(problem.grad_D(theta), fd, rtol=1e-6, atol=1e-8)


def test_minimizer_is_stationary(problem):
    theta, _ = problem.minimize_D()
    assert np.linalg.norm(problem.grad_D(theta)) < 1e-10


def test_problem_validation():
    with pytest.raises(ValueError):
        QuadraticMinMax.random(mu=0.0)
    with pytest.raises(ValueError):
        QuadraticMinMax(np.eye(2), np.ones((2, 1)), np.zeros(3), 1.0, np.zeros((1, 1)), 0.1)
    with pytest.raises(ValueError, match="symmetric"):
        QuadraticMinMax(np.array([[1.0, 1.0], [0.0, 1.0]]), np.ones((2, 1)), np.zeros(2), 1.0, np.zeros((1, 1)), 0.1)
    p3 = QuadraticMinMax.random(q=3)
    with pytest.raises(ValueError):
        inner_argmax_bruteforce(p3, np.zeros(p3.p), p3.anchors[0])


def test_constants_and_smoothness_formula(problem):
    c = estimate_constants(problem)
    assert c.L == pytest.approx(np.linalg.norm(problem.A, 2) + np.linalg.norm(problem.B, 2) ** 2 / (2 * problem.mu))
    lc = LipschitzConstants(mu=2.0, L_xtheta=3.0, L_thetatheta=1.0, L_thetax=4.0, L_xx=2.0)
    assert lc.L == 1.0 + 12.0 / 4.0


def test_compare_counts_violations():
    ok = compare("a", [1.0, 2.0], 2.0)
    assert ok.violations == 0 and ok.max_ratio == 1.0 and ok.checked == 2
    bad = compare("b", [3.0, 1.0], [2.0, 2.0])
    assert bad.violations == 1 and bad.max_ratio == 1.5
    assert compare("c", [], 1.0).checked == 0


def test_lambda_is_zero_for_exact_and_nonnegative_for_pgd(problem):
    rng = np.random.default_rng(2)
    theta = rng.standard_normal(problem.p)
    xi = problem.anchors
    xs = inner_argmax_analytic(problem, theta, xi)
    assert np.max(np.abs(measure_lambda(problem, theta, xs, xs, xi))) <= 1e-10
    traj = run_probe(problem, ProbeConfig(steps=200, tau=1))
    # concavity in x: <x* - x, grad_x L(x)> >= L(x*) - L(x) >= 0
    assert traj.lam.min() >= -1e-12


def test_bound_checks_pass_on_short_runs(problem):
    for tau in (1, 3):
        traj = run_probe(problem, ProbeConfig(steps=500, tau=tau))
        assert check_drift(problem, traj).passed
        assert check_grad_error(problem, traj).passed
    assert check_smoothness(problem, n_pairs=2000).passed


def test_smoothness_ratio_in_unclamped_region():
    # pairs straddling no clamping switch: grad_D is affine, ratio equals ||A + B B'/(2 mu)|| < L
    prob = QuadraticMinMax.random(seed=3, eps=1e6)
    rng = np.random.default_rng(0)
    t1, t2 = rng.standard_normal((50, prob.p)), rng.standard_normal((50, prob.p))
    rep = check_smoothness(prob, theta1=t1, theta2=t2)
    assert rep.passed
    assert rep.checks[0].max_ratio <= 1.0


def test_tau_zero_probe_has_no_staleness_term(problem):
    traj = run_probe(problem, ProbeConfig(steps=100, tau=0, attack="exact"))
    rep = check_grad_error(problem, traj)
    assert rep.checks[0].measured_max <= 1e-12


def test_variance_and_bound_formulas(problem):
    assert gradient_variance(problem, np.zeros(problem.p), 8).shape == (1,)
    assert gradient_variance(problem, np.zeros(problem.p), 16)[0] == pytest.approx(
        gradient_variance(problem, np.zeros(problem.p), 8)[0] / 2)
    c = LipschitzConstants(mu=1.0, L_xtheta=1.0, L_thetatheta=1.0, L_thetax=2.0, L_xx=1.0)
    # L = 2; 2 sigma sqrt(L delta / T) + (4/2)(tau M / 2 + sqrt(lam))^2
    assert rate_bound(c, sigma=0.5, delta=8.0, T=16, tau=1, M=2.0, lam=0.0) == pytest.approx(1.0 + 2.0)
    assert rate_step_size(c, sigma=0.0, delta=1.0, T=10) == 0.5
    assert rate_step_size(c, sigma=1.0, delta=1.0, T=100) == pytest.approx(math.sqrt(1 / 200))


def test_fit_rate_recovers_slope():
    Ts = np.array([250, 500, 1000, 2000, 4000])
    out = fit_rate(Ts, 3.0 * Ts ** -0.5)
    assert out["loglog_slope"] == pytest.approx(-0.5, abs=1e-12)
    out = fit_rate(Ts, 3.0 * Ts ** -0.5 + 0.01)
    assert out["fit_slope"] == pytest.approx(-0.5, abs=1e-3)
    assert out["fit_floor"] == pytest.approx(0.01, abs=1e-4)
