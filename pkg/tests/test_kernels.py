import math

import numpy as np
import pytest

from nlmefit import expr as ex
from nlmefit.kernels import load_backend
from nlmefit.program import compile_system, compile_expr, CompileError


def _backends():
    out = [load_backend("python")]
    try:
        out.append(load_backend("compiled"))
    except (ImportError, ValueError):
        pass
    return out


BACKENDS = _backends()


def test_compile_eval_matches_tree_walk():
    rng = np.random.default_rng(5)
    texts = [
        "x + y", "x*y - z/x", "exp(-0.5*x^2)", "sqrt(x*x + 1)",
        "log(x*x + 2)", "min(x, y) + max(y, z)", "x^3 - 2*x^2 + x - 7",
        "(x + y)^(z*z + 0.5)",
    ]
    layout = ["t", "x", "y", "z"]
    for text in texts:
        e = ex.parse_expr(text)
        ce = compile_expr(e, layout)
        for _ in range(50):
            env = rng.uniform(0.2, 2.5, size=4)
            ref = ex.eval_expr(ex.simplify(e),
                               dict(zip(layout, env)))
            got = ce(env)
            # budget: ~1 ulp of rounding per node
            assert got == pytest.approx(ref, rel=5e-15, abs=5e-15)


def test_compile_simple_values():
    ce = compile_expr(ex.parse_expr("x + y"), ["x", "y"])
    assert ce([1.0, 2.0]) == 3.0
    ce = compile_expr(ex.parse_expr("exp(0)"), ["x"])
    assert ce([123.0]) == 1.0


def test_compile_sigma_entry_example():
    # additive + proportional variance entry at sadd=0, sprop=1, c=2
    e = ex.parse_expr("sadd^2 + (sprop*c)^2")
    ce = compile_expr(e, ["sadd", "sprop", "c"])
    assert ce([0.0, 1.0, 2.0]) == 4.0


def test_compile_unbound_symbol():
    with pytest.raises(CompileError, match="unbound symbol 'q'"):
        compile_expr(ex.parse_expr("x + q"), ["x"])


def test_backends_agree_elementwise():
    rng = np.random.default_rng(17)
    e = [ex.parse_expr("exp(-a*x)*sin_ish + y/(x + 2)"),
         ex.parse_expr("a*x^2 - min(x, y)")]
    # no sin in the function set; rename symbol to avoid confusion
    e[0] = ex.parse_expr("exp(-a*x)*w + y/(x + 2)")
    layout = ["t", "x", "y", "a", "w"]
    prog = compile_system(e, layout)
    envs = rng.uniform(0.1, 2.0, size=(64, 5))
    results = []
    for be in BACKENDS:
        out = np.vstack([
            be.eval_program(prog.n_inputs, prog.consts, prog.code,
                            prog.out_regs, np.ascontiguousarray(row))
            for row in envs])
        batch = be.eval_program_batch(prog.n_inputs, prog.consts, prog.code,
                                      prog.out_regs, np.ascontiguousarray(envs))
        np.testing.assert_allclose(out, batch, rtol=1e-15)
        results.append(out)
    for r in results[1:]:
        np.testing.assert_allclose(results[0], r, rtol=5e-16)


def _solve_with(be, prog, y0, t0, t_end, out_times, rtol, atol):
    n = len(y0)
    out_times = np.asarray(out_times, dtype=np.float64)
    y_out = np.empty((len(out_times), n))
    cap = 8192
    hist_t = np.empty(cap)
    hist_y = np.empty((cap, n))
    hist_f = np.empty((cap, n))
    res = be.solve_dp5(prog.n_inputs, prog.consts, prog.code, prog.out_regs,
                       np.zeros(0), np.asarray(y0, dtype=np.float64),
                       t0, t_end, out_times, 0, y_out, rtol, atol, 0.0, 0.0,
                       100000, hist_t, hist_y, hist_f, 0)
    assert res[0] == 0
    return y_out, res


def test_solver_backends_same_step_sequence():
    prog = compile_system([ex.parse_expr("v"), ex.parse_expr("-x - 0.1*v")],
                          ["t", "x", "v"])
    outs = []
    for be in BACKENDS:
        y_out, res = _solve_with(be, prog, [1.0, 0.0], 0.0, 10.0,
                                 np.linspace(0.5, 10, 20), 1e-8, 1e-10)
        outs.append((y_out, res[5], res[6]))
    for y_out, nsteps, nrej in outs[1:]:
        assert nsteps == outs[0][1]
        assert nrej == outs[0][2]
        np.testing.assert_allclose(y_out, outs[0][0], rtol=1e-12, atol=1e-14)


def test_em_backends_agree():
    prog = compile_system([ex.parse_expr("0.05*x"), ex.parse_expr("0.2*x")],
                          ["t", "x"])
    grid = np.linspace(0.0, 1.0, 65)
    rng = np.random.default_rng(1)
    noise = np.ascontiguousarray(rng.standard_normal((64, 1)))
    paths = []
    for be in BACKENDS:
        status, fail, path = be.em_path(prog.n_inputs, prog.consts, prog.code,
                                        prog.out_regs, np.zeros(0),
                                        np.array([1.0]), grid, noise, 1, 1)
        assert status == 0
        paths.append(path)
    for p in paths[1:]:
        np.testing.assert_allclose(paths[0], p, rtol=1e-15)
