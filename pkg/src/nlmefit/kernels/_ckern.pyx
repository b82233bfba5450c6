# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled kernels: program evaluation, DP5(4) stepping, Euler-Maruyama.

Mirrors kernels/pykern.py instruction-for-instruction; keep the two in
sync when touching either.
"""

import numpy as np

from libc.math cimport exp as c_exp, log as c_log, sqrt as c_sqrt, \
    pow as c_pow, fabs, isfinite, NAN

NAME = "compiled"

cdef int _OK = 0, _HIST_FULL = 1, _UNDERFLOW = 2, _NONFINITE = 3, _MAXSTEPS = 4

STATUS_OK = _OK
STATUS_HIST_FULL = _HIST_FULL
STATUS_UNDERFLOW = _UNDERFLOW
STATUS_NONFINITE = _NONFINITE
STATUS_MAXSTEPS = _MAXSTEPS

cdef double SAFETY = 0.9
cdef double BETA = 0.04
cdef double EXPO1 = 0.2 - 0.75 * 0.04

# Dormand-Prince 5(4) tableau
cdef double C2 = 0.2, C3 = 0.3, C4 = 0.8, C5 = 8.0 / 9.0
cdef double A21 = 1.0 / 5.0
cdef double A31 = 3.0 / 40.0, A32 = 9.0 / 40.0
cdef double A41 = 44.0 / 45.0, A42 = -56.0 / 15.0, A43 = 32.0 / 9.0
cdef double A51 = 19372.0 / 6561.0, A52 = -25360.0 / 2187.0
cdef double A53 = 64448.0 / 6561.0, A54 = -212.0 / 729.0
cdef double A61 = 9017.0 / 3168.0, A62 = -355.0 / 33.0
cdef double A63 = 46732.0 / 5247.0, A64 = 49.0 / 176.0, A65 = -5103.0 / 18656.0
cdef double B1 = 35.0 / 384.0, B3 = 500.0 / 1113.0, B4 = 125.0 / 192.0
cdef double B5 = -2187.0 / 6784.0, B6 = 11.0 / 84.0
cdef double E1 = 71.0 / 57600.0, E3 = -71.0 / 16695.0, E4 = 71.0 / 1920.0
cdef double E5 = -17253.0 / 339200.0, E6 = 22.0 / 525.0, E7 = -1.0 / 40.0


cdef inline void _exec(const int[:, ::1] code, double* regs, int base) noexcept nogil:
    cdef Py_ssize_t i
    cdef int op
    cdef double a, b, v
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
            v = c_pow(a, regs[code[i, 2]])
        elif op == 6:
            v = c_exp(a)
        elif op == 7:
            v = c_log(a)
        elif op == 8:
            v = c_sqrt(a)
        elif op == 9:
            b = regs[code[i, 2]]
            v = a if a <= b else b
        elif op == 10:
            b = regs[code[i, 2]]
            v = a if a >= b else b
        elif op == 11:
            v = regs[code[i, 3]] if a <= regs[code[i, 2]] else regs[code[i, 4]]
        else:
            v = NAN
        regs[base + i] = v


def eval_program(int n_inputs, const double[::1] consts, const int[:, ::1] code,
                 const int[::1] out_regs, const double[::1] env):
    cdef Py_ssize_t nc = consts.shape[0], ni = code.shape[0], i
    regs_arr = np.empty(n_inputs + nc + ni, dtype=np.float64)
    cdef double[::1] regs = regs_arr
    out_arr = np.empty(out_regs.shape[0], dtype=np.float64)
    cdef double[::1] out = out_arr
    cdef int base = n_inputs + <int>nc
    with nogil:
        for i in range(n_inputs):
            regs[i] = env[i]
        for i in range(nc):
            regs[n_inputs + i] = consts[i]
        _exec(code, &regs[0], base)
        for i in range(out_regs.shape[0]):
            out[i] = regs[out_regs[i]]
    return out_arr


def eval_program_batch(int n_inputs, const double[::1] consts,
                       const int[:, ::1] code, const int[::1] out_regs,
                       const double[:, ::1] env_rows):
    cdef Py_ssize_t nb = env_rows.shape[0], nc = consts.shape[0]
    cdef Py_ssize_t ni = code.shape[0], r, i
    out_arr = np.empty((nb, out_regs.shape[0]), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    regs_arr = np.empty(n_inputs + nc + ni, dtype=np.float64)
    cdef double[::1] regs = regs_arr
    cdef int base = n_inputs + <int>nc
    with nogil:
        for i in range(nc):
            regs[n_inputs + i] = consts[i]
        for r in range(nb):
            for i in range(n_inputs):
                regs[i] = env_rows[r, i]
            _exec(code, &regs[0], base)
            for i in range(out_regs.shape[0]):
                out[r, i] = regs[out_regs[i]]
    return out_arr


cdef inline bint _rhs(const int[:, ::1] code, const int[::1] out_regs,
                      double* regs, int base, int n, double t,
                      const double* y, double* out) noexcept nogil:
    cdef Py_ssize_t j
    cdef double v
    cdef bint ok = True
    regs[0] = t
    for j in range(n):
        regs[1 + j] = y[j]
    _exec(code, regs, base)
    for j in range(n):
        v = regs[out_regs[j]]
        if not isfinite(v):
            ok = False
        out[j] = v
    return ok


cdef inline double _next_h(double h, double err, double errold) noexcept nogil:
    cdef double fac11, fac
    if err <= 0.0:
        return h * 10.0
    fac11 = c_pow(err, EXPO1)
    fac = fac11 / c_pow(errold, BETA)
    fac = fac / SAFETY
    if fac < 0.1:
        fac = 0.1
    elif fac > 5.0:
        fac = 5.0
    return h / fac


def solve_dp5(int n_inputs, const double[::1] consts, const int[:, ::1] code,
              const int[::1] out_regs, const double[::1] env_extra,
              const double[::1] y0, double t0, double t_end,
              const double[::1] out_times, int out_start,
              double[:, ::1] y_out, double rtol, double atol, double h_init,
              double errold_init, long max_steps, double[::1] hist_t,
              double[:, ::1] hist_y, double[:, ::1] hist_f, int hist_start):
    cdef int n = <int>y0.shape[0]
    cdef Py_ssize_t nc = consts.shape[0]
    cdef int base = n_inputs + <int>nc
    cdef Py_ssize_t j, i, s
    regs_arr = np.empty(n_inputs + nc + code.shape[0], dtype=np.float64)
    cdef double[::1] regs = regs_arr
    k_arr = np.empty((7, n), dtype=np.float64)
    cdef double[:, ::1] k = k_arr
    y_arr = np.array(y0, dtype=np.float64)
    cdef double[::1] y = y_arr
    ytmp_arr = np.empty(n, dtype=np.float64)
    cdef double[::1] ytmp = ytmp_arr
    ynew_arr = np.empty(n, dtype=np.float64)
    cdef double[::1] ynew = ynew_arr

    cdef double t = t0, h = h_init
    cdef double errold = errold_init if errold_init > 0.0 else 1e-4
    cdef long nsteps = 0, nrej = 0
    cdef int ih = hist_start, iout = out_start
    cdef int nout = <int>out_times.shape[0]
    cdef int hist_cap = <int>hist_t.shape[0]
    cdef int status = _OK
    cdef bint bad
    cdef double err, ei, sk, tnew, d0, d1, d2, h0, h1, dm, tq
    cdef double ss, s2, s3, h00, h10, h01, h11

    with nogil:
        for i in range(nc):
            regs[n_inputs + i] = consts[i]
        for i in range(n_inputs - 1 - n):
            regs[1 + n + i] = env_extra[i]

        if not _rhs(code, out_regs, &regs[0], base, n, t, &y[0], &k[0, 0]):
            status = _NONFINITE
        else:
            if ih == 0 and hist_cap > 0:
                hist_t[0] = t
                for j in range(n):
                    hist_y[0, j] = y[j]
                    hist_f[0, j] = k[0, j]
                ih = 1
            if h <= 0.0:
                d0 = 0.0
                d1 = 0.0
                for i in range(n):
                    sk = atol + rtol * fabs(y[i])
                    if fabs(y[i]) / sk > d0:
                        d0 = fabs(y[i]) / sk
                    if fabs(k[0, i]) / sk > d1:
                        d1 = fabs(k[0, i]) / sk
                h0 = 1e-6 if (d0 < 1e-5 or d1 < 1e-5) else 0.01 * d0 / d1
                if t_end > t0 and h0 > t_end - t0:
                    h0 = t_end - t0
                for i in range(n):
                    ytmp[i] = y[i] + h0 * k[0, i]
                if _rhs(code, out_regs, &regs[0], base, n, t + h0, &ytmp[0],
                        &k[1, 0]):
                    d2 = 0.0
                    for i in range(n):
                        sk = atol + rtol * fabs(y[i])
                        if fabs(k[1, i] - k[0, i]) / sk / h0 > d2:
                            d2 = fabs(k[1, i] - k[0, i]) / sk / h0
                    dm = d1 if d1 > d2 else d2
                    if dm <= 1e-15:
                        h1 = 1e-6 if 1e-6 > h0 * 1e-3 else h0 * 1e-3
                    else:
                        h1 = c_pow(0.01 / dm, 0.2)
                    h = 100 * h0 if 100 * h0 < h1 else h1
                else:
                    h = h0 * 1e-2

            while status == _OK and t < t_end:
                if nsteps >= max_steps:
                    status = _MAXSTEPS
                    break
                if h > t_end - t:
                    h = t_end - t
                if h < 1e-14 * (1.0 if fabs(t) < 1.0 else fabs(t)):
                    status = _UNDERFLOW
                    break
                bad = False
                # stage 2
                for i in range(n):
                    ytmp[i] = y[i] + h * (A21 * k[0, i])
                if not _rhs(code, out_regs, &regs[0], base, n, t + C2 * h,
                            &ytmp[0], &k[1, 0]):
                    bad = True
                if not bad:
                    for i in range(n):
                        ytmp[i] = y[i] + h * (A31 * k[0, i] + A32 * k[1, i])
                    if not _rhs(code, out_regs, &regs[0], base, n, t + C3 * h,
                                &ytmp[0], &k[2, 0]):
                        bad = True
                if not bad:
                    for i in range(n):
                        ytmp[i] = y[i] + h * (A41 * k[0, i] + A42 * k[1, i]
                                              + A43 * k[2, i])
                    if not _rhs(code, out_regs, &regs[0], base, n, t + C4 * h,
                                &ytmp[0], &k[3, 0]):
                        bad = True
                if not bad:
                    for i in range(n):
                        ytmp[i] = y[i] + h * (A51 * k[0, i] + A52 * k[1, i]
                                              + A53 * k[2, i] + A54 * k[3, i])
                    if not _rhs(code, out_regs, &regs[0], base, n, t + C5 * h,
                                &ytmp[0], &k[4, 0]):
                        bad = True
                if not bad:
                    for i in range(n):
                        ytmp[i] = y[i] + h * (A61 * k[0, i] + A62 * k[1, i]
                                              + A63 * k[2, i] + A64 * k[3, i]
                                              + A65 * k[4, i])
                    if not _rhs(code, out_regs, &regs[0], base, n, t + h,
                                &ytmp[0], &k[5, 0]):
                        bad = True
                if not bad:
                    for i in range(n):
                        ynew[i] = y[i] + h * (B1 * k[0, i] + B3 * k[2, i]
                                              + B4 * k[3, i] + B5 * k[4, i]
                                              + B6 * k[5, i])
                    if not _rhs(code, out_regs, &regs[0], base, n, t + h,
                                &ynew[0], &k[6, 0]):
                        bad = True
                nsteps += 1
                if bad:
                    nrej += 1
                    h *= 0.25
                    continue
                err = 0.0
                for i in range(n):
                    ei = (E1 * k[0, i] + E3 * k[2, i] + E4 * k[3, i]
                          + E5 * k[4, i] + E6 * k[5, i] + E7 * k[6, i]) * h
                    sk = atol + rtol * (fabs(y[i]) if fabs(y[i]) > fabs(ynew[i])
                                        else fabs(ynew[i]))
                    if fabs(ei) / sk > err:
                        err = fabs(ei) / sk
                if err <= 1.0:
                    tnew = t + h
                    while iout < nout and out_times[iout] <= tnew \
                            + 1e-15 * (1.0 if fabs(tnew) < 1.0 else fabs(tnew)):
                        tq = out_times[iout]
                        if tq > tnew:
                            tq = tnew
                        ss = (tq - t) / h
                        s2 = ss * ss
                        s3 = s2 * ss
                        h00 = 2 * s3 - 3 * s2 + 1
                        h10 = s3 - 2 * s2 + ss
                        h01 = -2 * s3 + 3 * s2
                        h11 = s3 - s2
                        for i in range(n):
                            y_out[iout, i] = (h00 * y[i] + h * h10 * k[0, i]
                                              + h01 * ynew[i] + h * h11 * k[6, i])
                        iout += 1
                    if ih >= hist_cap:
                        h = _next_h(h, err, errold)
                        errold = err if err > 1e-4 else 1e-4
                        t = tnew
                        for i in range(n):
                            y[i] = ynew[i]
                        status = _HIST_FULL
                        break
                    hist_t[ih] = tnew
                    for j in range(n):
                        hist_y[ih, j] = ynew[j]
                        hist_f[ih, j] = k[6, j]
                    ih += 1
                    t = tnew
                    for i in range(n):
                        y[i] = ynew[i]
                        k[0, i] = k[6, i]
                    h = _next_h(h, err, errold)
                    errold = err if err > 1e-4 else 1e-4
                else:
                    nrej += 1
                    dm = c_pow(err, EXPO1) / SAFETY
                    if dm > 5.0:
                        dm = 5.0
                    h = h / dm
    return status, t, y_arr, h, errold, nsteps, nrej, ih, iout


def em_path(int n_inputs, const double[::1] consts, const int[:, ::1] code,
            const int[::1] out_regs, const double[::1] env_extra,
            const double[::1] y0, const double[::1] grid,
            const double[:, ::1] noise, int n_state, int n_noise):
    cdef Py_ssize_t nk = grid.shape[0] - 1, nc = consts.shape[0]
    cdef int base = n_inputs + <int>nc
    cdef Py_ssize_t step, i, w
    path_arr = np.empty((nk + 1, n_state), dtype=np.float64)
    cdef double[:, ::1] path = path_arr
    regs_arr = np.empty(n_inputs + nc + code.shape[0], dtype=np.float64)
    cdef double[::1] regs = regs_arr
    y_arr = np.array(y0, dtype=np.float64)
    cdef double[::1] y = y_arr
    cdef double dt, sq, fi, gi, v
    cdef int status = _OK
    cdef long fail_step = -1
    with nogil:
        for i in range(nc):
            regs[n_inputs + i] = consts[i]
        for i in range(n_inputs - 1 - n_state):
            regs[1 + n_state + i] = env_extra[i]
        for i in range(n_state):
            path[0, i] = y[i]
        for step in range(nk):
            regs[0] = grid[step]
            for i in range(n_state):
                regs[1 + i] = y[i]
            _exec(code, &regs[0], base)
            dt = grid[step + 1] - grid[step]
            sq = c_sqrt(dt)
            for i in range(n_state):
                fi = regs[out_regs[i]]
                gi = 0.0
                for w in range(n_noise):
                    gi += regs[out_regs[n_state + i * n_noise + w]] * noise[step, w]
                v = y[i] + fi * dt + gi * sq
                if not isfinite(v):
                    status = _NONFINITE
                y[i] = v
                path[step + 1, i] = v
            if status != _OK:
                fail_step = step
                break
    return status, fail_step, path_arr
