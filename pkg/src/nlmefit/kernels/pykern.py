"""Pure-Python/numpy fallback kernels.

Mirrors the compiled extension (`_ckern`) instruction-for-instruction so
both backends produce the same step sequences; used when the extension is
unavailable or when ``NLMEFIT_PURE_PYTHON=1`` forces it.
"""

from __future__ import annotations

import math

import numpy as np

NAME = "python"

STATUS_OK = 0
STATUS_HIST_FULL = 1
STATUS_UNDERFLOW = 2
STATUS_NONFINITE = 3
STATUS_MAXSTEPS = 4

# Dormand-Prince 5(4) coefficients
_A = (
    (1 / 5,),
    (3 / 40, 9 / 40),
    (44 / 45, -56 / 15, 32 / 9),
    (19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729),
    (9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656),
    (35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84),
)
_C = (0.2, 0.3, 0.8, 8 / 9, 1.0, 1.0)
_E = (71 / 57600, 0.0, -71 / 16695, 71 / 1920, -17253 / 339200, 22 / 525, -1 / 40)

_SAFETY = 0.9
_BETA = 0.04
_EXPO1 = 0.2 - 0.75 * _BETA


def _exec(code, regs, base):
    for i in range(code.shape[0]):
        op = code[i, 0]
        a = regs[code[i, 1]]
        if op == 0:
            v = a + regs[code[i, 2]]
        elif op == 1:
            v = a - regs[code[i, 2]]
        elif op == 2:
            v = a * regs[code[i, 2]]
        elif op == 3:
            b = regs[code[i, 2]]
            v = a / b if b != 0.0 else math.nan
        elif op == 4:
            v = -a
        elif op == 5:
            try:
                v = a ** regs[code[i, 2]]
                if isinstance(v, complex):
                    v = math.nan
            except (OverflowError, ValueError, ZeroDivisionError):
                v = math.nan
        elif op == 6:
            try:
                v = math.exp(a)
            except OverflowError:
                v = math.inf
        elif op == 7:
            v = math.log(a) if a > 0.0 else math.nan
        elif op == 8:
            v = math.sqrt(a) if a >= 0.0 else math.nan
        elif op == 9:
            b = regs[code[i, 2]]
            v = a if a <= b else b
        elif op == 10:
            b = regs[code[i, 2]]
            v = a if a >= b else b
        elif op == 11:
            v = regs[code[i, 3]] if a <= regs[code[i, 2]] else regs[code[i, 4]]
        else:
            raise ValueError(f"bad opcode {op}")
        regs[i + base] = v


def _make_regs(n_inputs, consts, code):
    regs = np.empty(n_inputs + consts.shape[0] + code.shape[0], dtype=np.float64)
    regs[n_inputs:n_inputs + consts.shape[0]] = consts
    return regs


def eval_program(n_inputs, consts, code, out_regs, env):
    regs = _make_regs(n_inputs, consts, code)
    regs[:n_inputs] = env
    _exec(code, regs, n_inputs + consts.shape[0])
    return regs[out_regs].copy()


def eval_program_batch(n_inputs, consts, code, out_regs, env_rows):
    batch = env_rows.shape[0]
    nreg = n_inputs + consts.shape[0] + code.shape[0]
    regs = np.empty((nreg, batch), dtype=np.float64)
    regs[:n_inputs] = env_rows.T
    regs[n_inputs:n_inputs + consts.shape[0]] = consts[:, None]
    base = n_inputs + consts.shape[0]
    with np.errstate(all="ignore"):
        for i in range(code.shape[0]):
            op = code[i, 0]
            a = regs[code[i, 1]]
            if op == 0:
                v = a + regs[code[i, 2]]
            elif op == 1:
                v = a - regs[code[i, 2]]
            elif op == 2:
                v = a * regs[code[i, 2]]
            elif op == 3:
                v = a / regs[code[i, 2]]
            elif op == 4:
                v = -a
            elif op == 5:
                v = a ** regs[code[i, 2]]
            elif op == 6:
                v = np.exp(a)
            elif op == 7:
                v = np.log(a)
            elif op == 8:
                v = np.sqrt(a)
            elif op == 9:
                v = np.minimum(a, regs[code[i, 2]])
            elif op == 10:
                v = np.maximum(a, regs[code[i, 2]])
            elif op == 11:
                v = np.where(a <= regs[code[i, 2]], regs[code[i, 3]],
                             regs[code[i, 4]])
            else:
                raise ValueError(f"bad opcode {op}")
            regs[base + i] = v
    return regs[out_regs].T.copy()


class _Rhs:
    """Scalar-environment ODE right-hand side y' = outputs(program)."""

    def __init__(self, n_inputs, consts, code, out_regs, env_extra, n_state):
        self.code = code
        self.out_regs = out_regs
        self.n_state = n_state
        self.n_inputs = n_inputs
        self.base = n_inputs + consts.shape[0]
        self.regs = _make_regs(n_inputs, consts, code)
        self.regs[1 + n_state:n_inputs] = env_extra

    def __call__(self, t, y, out):
        regs = self.regs
        regs[0] = t
        regs[1:1 + self.n_state] = y
        _exec(self.code, regs, self.base)
        ok = True
        for j in range(self.n_state):
            v = regs[self.out_regs[j]]
            if not math.isfinite(v):
                ok = False
            out[j] = v
        return ok


def _hermite(t0, h, y0, f0, y1, f1, t, out):
    s = (t - t0) / h
    s2, s3 = s * s, s * s * s
    h00 = 2 * s3 - 3 * s2 + 1
    h10 = s3 - 2 * s2 + s
    h01 = -2 * s3 + 3 * s2
    h11 = s3 - s2
    for i in range(len(y0)):
        out[i] = h00 * y0[i] + h * h10 * f0[i] + h01 * y1[i] + h * h11 * f1[i]


def solve_dp5(n_inputs, consts, code, out_regs, env_extra, y0, t0, t_end,
              out_times, out_start, y_out, rtol, atol, h_init, errold_init,
              max_steps, hist_t, hist_y, hist_f, hist_start):
    """Adaptive DP5(4) with PI control, max-norm errors, Hermite dense output.

    Fills ``y_out`` rows for out_times in (t0, t_reached]; appends accepted
    knots (t, y, f) to the history buffers.  Returns
    (status, t, y, h, errold, nsteps, nrej, nhist, nout).
    """
    n = len(y0)
    rhs = _Rhs(n_inputs, consts, code, out_regs, env_extra, n)
    y = np.array(y0, dtype=np.float64)
    k = np.empty((7, n))
    ytmp = np.empty(n)
    ynew = np.empty(n)
    t = t0
    nsteps = 0
    nrej = 0
    ih = hist_start
    iout = out_start
    nout = len(out_times)

    if not rhs(t, y, k[0]):
        return STATUS_NONFINITE, t, y, 0.0, errold_init, 0, 0, ih, iout

    if ih == 0 and hist_t.shape[0] > 0:
        hist_t[0] = t
        hist_y[0] = y
        hist_f[0] = k[0]
        ih = 1

    h = h_init
    if h <= 0.0:
        # standard two-stage initial step-size guess
        d0 = d1 = 0.0
        for i in range(n):
            sk = atol + rtol * abs(y[i])
            d0 = max(d0, abs(y[i]) / sk)
            d1 = max(d1, abs(k[0, i]) / sk)
        h0 = 1e-6 if (d0 < 1e-5 or d1 < 1e-5) else 0.01 * d0 / d1
        h0 = min(h0, t_end - t0) if t_end > t0 else h0
        ytmp[:] = y + h0 * k[0]
        if rhs(t + h0, ytmp, k[1]):
            d2 = 0.0
            for i in range(n):
                sk = atol + rtol * abs(y[i])
                d2 = max(d2, abs(k[1, i] - k[0, i]) / sk / h0)
            dm = max(d1, d2)
            h1 = max(1e-6, h0 * 1e-3) if dm <= 1e-15 else (0.01 / dm) ** 0.2
            h = min(100 * h0, h1)
        else:
            h = h0 * 1e-2
    errold = errold_init if errold_init > 0.0 else 1e-4

    if t_end <= t0:
        return STATUS_OK, t, y, h, errold, 0, 0, ih, iout

    while t < t_end:
        if nsteps >= max_steps:
            return STATUS_MAXSTEPS, t, y, h, errold, nsteps, nrej, ih, iout
        h = min(h, t_end - t)
        if h < 1e-14 * max(1.0, abs(t)):
            return STATUS_UNDERFLOW, t, y, h, errold, nsteps, nrej, ih, iout
        # fused stage sums mirror the compiled kernel's association order
        bad = False
        for s in range(1, 6):
            arow = _A[s - 1]
            acc = arow[0] * k[0]
            for j in range(1, s):
                acc = acc + arow[j] * k[j]
            ytmp[:] = y + h * acc
            if not rhs(t + _C[s - 1] * h, ytmp, k[s]):
                bad = True
                break
        if not bad:
            arow = _A[5]
            acc = arow[0] * k[0]
            for j in range(1, 6):
                acc = acc + arow[j] * k[j]
            ynew[:] = y + h * acc
            if not rhs(t + h, ynew, k[6]):
                bad = True
        nsteps += 1
        if bad:
            nrej += 1
            h *= 0.25
            continue
        err = 0.0
        evec = (_E[0] * k[0] + _E[2] * k[2] + _E[3] * k[3] + _E[4] * k[4]
                + _E[5] * k[5] + _E[6] * k[6]) * h
        for i in range(n):
            sk = atol + rtol * max(abs(y[i]), abs(ynew[i]))
            err = max(err, abs(evec[i]) / sk)
        if err <= 1.0:
            tnew = t + h
            while iout < nout and out_times[iout] <= tnew + 1e-15 * max(1.0, abs(tnew)):
                _hermite(t, h, y, k[0], ynew, k[6], min(out_times[iout], tnew),
                         y_out[iout])
                iout += 1
            if ih >= hist_t.shape[0]:
                return (STATUS_HIST_FULL, tnew, ynew, _next_h(h, err, errold),
                        max(err, 1e-4), nsteps, nrej, ih, iout)
            hist_t[ih] = tnew
            hist_y[ih] = ynew
            hist_f[ih] = k[6]
            ih += 1
            t = tnew
            y[:] = ynew
            k[0][:] = k[6]
            h = _next_h(h, err, errold)
            errold = max(err, 1e-4)
        else:
            nrej += 1
            fac11 = err ** _EXPO1
            h = h / min(5.0, fac11 / _SAFETY)
    return STATUS_OK, t, y, h, errold, nsteps, nrej, ih, iout


def _next_h(h, err, errold):
    if err <= 0.0:
        return h * 10.0
    fac11 = err ** _EXPO1
    fac = fac11 / errold ** _BETA
    fac = max(0.1, min(5.0, fac / _SAFETY))
    return h / fac


def em_path(n_inputs, consts, code, out_regs, env_extra, y0, grid, noise,
            n_state, n_noise):
    """Euler-Maruyama on a fixed grid.

    Program outputs are [f_0..f_{n-1}, G_00, G_01, ..] (G row-major,
    n_state x n_noise).  ``noise`` holds standard normals per interval.
    Returns (status, fail_step, path) with path of shape (len(grid), n).
    """
    nk = len(grid) - 1
    path = np.empty((nk + 1, n_state))
    regs = _make_regs(n_inputs, consts, code)
    regs[1 + n_state:n_inputs] = env_extra
    base = n_inputs + consts.shape[0]
    y = np.array(y0, dtype=np.float64)
    path[0] = y
    for step in range(nk):
        regs[0] = grid[step]
        regs[1:1 + n_state] = y
        _exec(code, regs, base)
        dt = grid[step + 1] - grid[step]
        sq = math.sqrt(dt)
        ok = True
        for i in range(n_state):
            fi = regs[out_regs[i]]
            gi = 0.0
            for w in range(n_noise):
                gi += regs[out_regs[n_state + i * n_noise + w]] * noise[step, w]
            v = y[i] + fi * dt + gi * sq
            if not math.isfinite(v):
                ok = False
            y[i] = v
        path[step + 1] = y
        if not ok:
            return STATUS_NONFINITE, step, path
    return STATUS_OK, -1, path
