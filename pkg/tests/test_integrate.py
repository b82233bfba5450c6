import math

import numpy as np
import pytest

from nlmefit import expr as ex
from nlmefit.integrate import (SolverError, build_em_grid, default_em_dt,
                               individual_rng, simulate_em, solve_ode)
from nlmefit.program import compile_system


def _decay_prog():
    return compile_system([ex.parse_expr("-x")], ["t", "x"])


def test_exponential_decay():
    sol = solve_ode(_decay_prog(), [], [1.0], (0.0, 1.0), [1.0])
    assert sol.y_out[0, 0] == pytest.approx(0.3678794412, abs=1e-8)


def test_bateman_two_compartment():
    # A1' = -ka*A1, A2' = ka*A1 - ke*A2, A1(0)=dose
    prog = compile_system(
        [ex.parse_expr("-ka*A1"), ex.parse_expr("ka*A1 - ke*A2")],
        ["t", "A1", "A2", "ka", "ke"])
    dose, ka, ke = 100.0, 1.0, 0.15
    times = np.array([0.25, 0.5, 1, 1.5, 2, 3, 4, 6, 8, 12, 18, 24.0])
    sol = solve_ode(prog, [ka, ke], [dose, 0.0], (0.0, 24.0), times,
                    rtol=1e-10, atol=1e-12)
    ref = dose * ka / (ka - ke) * (np.exp(-ke * times) - np.exp(-ka * times))
    np.testing.assert_allclose(sol.y_out[:, 1], ref, rtol=1e-6, atol=1e-6)


def test_stiff_rate_ratio_completes():
    prog = compile_system(
        [ex.parse_expr("-ka*A1"), ex.parse_expr("ka*A1 - ke*A2")],
        ["t", "A1", "A2", "ka", "ke"])
    ka, ke = 100.0, 0.01  # rate ratio 1e4
    sol = solve_ode(prog, [ka, ke], [1.0, 0.0], (0.0, 24.0), [24.0],
                    rtol=1e-8, atol=1e-10)
    ref_sol = solve_ode(prog, [ka, ke], [1.0, 0.0], (0.0, 24.0), [24.0],
                        rtol=1e-12, atol=1e-14)
    assert sol.y_out[0, 1] == pytest.approx(ref_sol.y_out[0, 1], rel=1e-6)


def test_tolerance_convergence():
    prog = _decay_prog()
    tol = 1e-6
    a = solve_ode(prog, [], [1.0], (0.0, 1.0), [1.0], rtol=tol, atol=tol)
    b = solve_ode(prog, [], [1.0], (0.0, 1.0), [1.0], rtol=tol / 2,
                  atol=tol / 2)
    assert abs(a.y_out[0, 0] - b.y_out[0, 0]) < 10 * tol


def test_dense_output_accuracy():
    # cubic Hermite between 5th-order knots: error ~ rtol^(4/5)
    sol = solve_ode(_decay_prog(), [], [1.0], (0.0, 2.0), [2.0])
    ts = np.linspace(0.0, 2.0, 37)
    vals = sol.at(ts)[:, 0]
    np.testing.assert_allclose(vals, np.exp(-ts), atol=3e-7)
    with pytest.raises(SolverError):
        sol.at(2.5)


def test_nonfinite_rhs_reported():
    prog = compile_system([ex.parse_expr("log(x)")], ["t", "x"])
    with pytest.raises(SolverError, match="non-finite"):
        solve_ode(prog, [], [-1.0], (0.0, 1.0), [1.0])


def test_history_resume_matches_single_run():
    # long integration forces a history-buffer resume; results must be
    # identical to a run with ample initial capacity
    prog = compile_system([ex.parse_expr("v"), ex.parse_expr("-x")],
                          ["t", "x", "v"])
    out = np.linspace(1.0, 4000.0, 7)
    sol = solve_ode(prog, [], [1.0, 0.0], (0.0, 4000.0), out,
                    rtol=1e-9, atol=1e-11)
    np.testing.assert_allclose(sol.y_out[:, 0], np.cos(out), atol=2e-5)
    assert sol.nsteps > 1024  # resume path exercised


def test_em_zero_diffusion_equals_euler():
    prog = compile_system([ex.parse_expr("-x"), ex.ZERO], ["t", "x"])
    rng = individual_rng(0, 0, 0)
    path = simulate_em(prog, [], [1.0], 0.0, [1.0], 0.25, rng, 1, 1)
    y = 1.0
    for _ in range(4):
        y += -y * 0.25
    assert path.y_out[0, 0] == y


def test_em_single_step_formula():
    # dx = g dW, one step dt=1: x1 = g * xi0
    g = 2.5
    prog = compile_system([ex.ZERO, ex.const(g)], ["t", "x"])
    rng = individual_rng(42, 0, 0)
    xi = individual_rng(42, 0, 0).standard_normal((1, 1))[0, 0]
    path = simulate_em(prog, [], [0.0], 0.0, [1.0], 1.0, rng, 1, 1)
    assert path.y_out[0, 0] == pytest.approx(g * xi, rel=1e-15)


def test_em_seed_reproducible():
    prog = compile_system([ex.parse_expr("0.1*x"), ex.parse_expr("0.3*x")],
                          ["t", "x"])
    a = simulate_em(prog, [], [1.0], 0.0, np.linspace(0.1, 2, 10), 0.01,
                    individual_rng(7, 3, 11), 1, 1)
    b = simulate_em(prog, [], [1.0], 0.0, np.linspace(0.1, 2, 10), 0.01,
                    individual_rng(7, 3, 11), 1, 1)
    assert np.array_equal(a.states, b.states)


def test_em_grid_includes_out_times():
    grid = build_em_grid(0.0, [0.25, 0.5, 1.0, 1.1], 0.3)
    for t in [0.25, 0.5, 1.0, 1.1]:
        assert np.any(np.isclose(grid, t))
    assert np.all(np.diff(grid) > 0)


def test_em_increment_variance_sums_to_t():
    # refined grid keeps Var[sum of increments] = g^2 * t
    g = 1.0
    prog = compile_system([ex.ZERO, ex.const(g)], ["t", "x"])
    tot = []
    for i in range(400):
        rng = individual_rng(5, 0, i)
        path = simulate_em(prog, [], [0.0], 0.0, [0.17, 0.9, 1.0], 0.07,
                           rng, 1, 1)
        tot.append(path.y_out[-1, 0])
    var = np.var(tot)
    assert abs(var - 1.0) < 0.25


def test_default_em_dt():
    assert default_em_dt([0.25, 0.5, 1.0]) == pytest.approx(0.0125)


def test_gbm_strong_order_half():
    # strong error vs exact GBM solution on shared Brownian path ~ sqrt(dt)
    mu, sigma, x0, t_end = 0.05, 0.4, 1.0, 1.0
    prog = compile_system([ex.parse_expr("mu*x"), ex.parse_expr("sigma*x")],
                          ["t", "x", "mu", "sigma"])
    dts = [2.0 ** -k for k in range(4, 11, 2)]
    n_paths = 60
    errs = []
    for dt in dts:
        acc = 0.0
        for p in range(n_paths):
            rng = individual_rng(123, 0, p)
            grid = build_em_grid(0.0, [t_end], dt)
            noise = rng.standard_normal((len(grid) - 1, 1))
            # exact solution driven by the same increments
            w = float(np.sum(np.sqrt(np.diff(grid))[:, None] * noise))
            exact = x0 * math.exp((mu - 0.5 * sigma ** 2) * t_end + sigma * w)
            rng2 = individual_rng(123, 0, p)
            path = simulate_em(prog, [mu, sigma], [x0], 0.0, [t_end], dt,
                               rng2, 1, 1)
            acc += abs(path.y_out[0, 0] - exact)
        errs.append(acc / n_paths)
    slope = np.polyfit(np.log(dts), np.log(errs), 1)[0]
    assert 0.35 <= slope <= 0.65
