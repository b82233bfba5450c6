"""Numerical integration front-end.

Adaptive Dormand-Prince 5(4) with PI step control and cubic Hermite dense
output for ODE/sensitivity systems, and fixed-grid Euler-Maruyama for SDE
simulation.  The stepping loops live in the kernel backend; this module
owns buffer management, resume-on-full-history, and solution objects.
"""

from __future__ import annotations

import math

import numpy as np

from . import kernels

__all__ = ["SolverError", "OdeSolution", "SdePath", "solve_ode",
           "simulate_em", "individual_rng", "default_em_dt"]

DEFAULT_RTOL = 1e-8
DEFAULT_ATOL = 1e-10
MAX_STEPS = 1_000_000


class SolverError(RuntimeError):
    """Integration failure; carries the time and state where it occurred."""

    def __init__(self, msg, t=None, state=None):
        super().__init__(msg)
        self.t = t
        self.state = state


class OdeSolution:
    """Trajectory with dense cubic-Hermite evaluation between step knots."""

    def __init__(self, ts, ys, fs, out_times, y_out, nsteps, nrejected):
        self.knot_t = ts
        self.knot_y = ys
        self.knot_f = fs
        self.out_times = out_times
        self.y_out = y_out
        self.nsteps = int(nsteps)
        self.nrejected = int(nrejected)

    @property
    def t_span(self):
        return float(self.knot_t[0]), float(self.knot_t[-1])

    def at(self, t):
        """Evaluate the interpolant at scalar or array ``t`` (within span)."""
        t_arr = np.atleast_1d(np.asarray(t, dtype=np.float64))
        lo, hi = self.t_span
        eps = 1e-12 * max(1.0, abs(lo), abs(hi))
        if np.any(t_arr < lo - eps) or np.any(t_arr > hi + eps):
            raise SolverError(f"evaluation time outside solved interval [{lo}, {hi}]")
        idx = np.searchsorted(self.knot_t, t_arr, side="right") - 1
        idx = np.clip(idx, 0, len(self.knot_t) - 2)
        t0 = self.knot_t[idx]
        h = self.knot_t[idx + 1] - t0
        s = np.clip((t_arr - t0) / h, 0.0, 1.0)[:, None]
        y0, y1 = self.knot_y[idx], self.knot_y[idx + 1]
        f0, f1 = self.knot_f[idx], self.knot_f[idx + 1]
        s2, s3 = s * s, s * s * s
        out = ((2 * s3 - 3 * s2 + 1) * y0 + (s3 - 2 * s2 + s) * h[:, None] * f0
               + (-2 * s3 + 3 * s2) * y1 + (s3 - s2) * h[:, None] * f1)
        if np.isscalar(t) or np.asarray(t).ndim == 0:
            return out[0]
        return out


class SdePath:
    """Fixed-grid Euler-Maruyama trajectory, reproducible from its seed."""

    def __init__(self, grid, states, out_times, y_out, dt, seed_key):
        self.grid = grid
        self.states = states
        self.out_times = out_times
        self.y_out = y_out
        self.dt = dt
        self.seed_key = seed_key


def _validate_out_times(out_times, t0, t_end):
    out_times = np.ascontiguousarray(out_times, dtype=np.float64)
    if out_times.size and (np.any(np.diff(out_times) < 0)):
        raise SolverError("output times must be sorted ascending")
    eps = 1e-12 * max(1.0, abs(t0), abs(t_end))
    if out_times.size and (out_times[0] < t0 - eps or out_times[-1] > t_end + eps):
        raise SolverError(
            f"output times must lie within [{t0}, {t_end}]")
    return out_times


def solve_ode(program, env_extra, y0, t_span, out_times, rtol=DEFAULT_RTOL,
              atol=DEFAULT_ATOL, max_steps=MAX_STEPS) -> OdeSolution:
    """Solve ``y' = program(t, y, env_extra)`` over ``t_span``.

    ``program`` follows the ODE convention: inputs ``[t, y..., extra...]``,
    outputs ``dy``.  Local error is controlled to rtol/atol per step
    (max-norm); dense output is evaluated at ``out_times``.
    """
    y0 = np.ascontiguousarray(y0, dtype=np.float64)
    n = y0.shape[0]
    t0, t_end = float(t_span[0]), float(t_span[1])
    if t_end < t0:
        raise SolverError("t_span must be increasing")
    out_times = _validate_out_times(out_times, t0, t_end)
    env_extra = np.ascontiguousarray(env_extra, dtype=np.float64)
    if 1 + n + env_extra.shape[0] != program.n_inputs:
        raise SolverError(
            f"program expects {program.n_inputs} inputs, got t + {n} states "
            f"+ {env_extra.shape[0]} extras")

    y_out = np.empty((len(out_times), n))
    # t0 rows are filled directly; kernel handles times in (t0, t_end]
    iout = 0
    eps0 = 1e-15 * max(1.0, abs(t0))
    while iout < len(out_times) and out_times[iout] <= t0 + eps0:
        y_out[iout] = y0
        iout += 1

    cap = max(1024, 4 * len(out_times))
    hist_t = np.empty(cap)
    hist_y = np.empty((cap, n))
    hist_f = np.empty((cap, n))

    t, y, h, errold = t0, y0, 0.0, 0.0
    ih = 0
    nsteps_total = nrej_total = 0
    while True:
        (status, t, y, h, errold, nsteps, nrej, ih, iout) = kernels.solve_dp5(
            program.n_inputs, program.consts, program.code, program.out_regs,
            env_extra, y, t, t_end, out_times, iout, y_out, rtol, atol, h,
            errold, max_steps - nsteps_total, hist_t, hist_y, hist_f, ih)
        nsteps_total += nsteps
        nrej_total += nrej
        if status == kernels.STATUS_HIST_FULL:
            cap *= 2
            hist_t = np.resize(hist_t, cap)
            hist_y = np.resize(hist_y, (cap, n))
            hist_f = np.resize(hist_f, (cap, n))
            # the resumed call re-evaluates f at (t, y) and continues with
            # the same h/errold, reproducing the uninterrupted sequence
            continue
        break

    if status == kernels.STATUS_NONFINITE:
        raise SolverError(f"non-finite right-hand side at t={t:.6g}", t, y)
    if status == kernels.STATUS_UNDERFLOW:
        raise SolverError(
            f"step size underflow at t={t:.6g} (state={np.array2string(y, precision=6)})",
            t, y)
    if status == kernels.STATUS_MAXSTEPS:
        raise SolverError(f"exceeded {max_steps} steps at t={t:.6g}", t, y)

    if ih == 0:
        # degenerate span (t_end == t0): single knot
        hist_t[0], hist_y[0], hist_f[0] = t0, y0, 0.0
        ih = 1
    ts = hist_t[:ih].copy()
    ys = hist_y[:ih].copy()
    fs = hist_f[:ih].copy()
    if ih == 1:
        ts = np.array([t0, t0])
        ys = np.vstack([ys, ys])
        fs = np.vstack([fs, fs])
    return OdeSolution(ts, ys, fs, out_times, y_out, nsteps_total, nrej_total)


def default_em_dt(times) -> float:
    """Default Euler-Maruyama step: smallest observation gap / 20."""
    times = np.asarray(times, dtype=np.float64)
    if times.size < 2:
        return 0.05
    gaps = np.diff(np.unique(times))
    gaps = gaps[gaps > 0]
    if gaps.size == 0:
        return 0.05
    return float(gaps.min() / 20.0)


def build_em_grid(t0, out_times, dt):
    """Uniform dt grid from t0, refined to hit every output time exactly."""
    out_times = np.asarray(out_times, dtype=np.float64)
    t_end = out_times[-1] if out_times.size else t0
    if t_end <= t0:
        return np.array([t0])
    n = int(math.ceil((t_end - t0) / dt - 1e-9))
    base = t0 + dt * np.arange(n + 1)
    base[-1] = t_end
    grid = np.union1d(np.round(base, 12), np.round(out_times, 12))
    grid = grid[(grid >= t0) & (grid <= t_end + 1e-12)]
    if grid[0] > t0:
        grid = np.concatenate([[t0], grid])
    return np.ascontiguousarray(grid)


def simulate_em(program, env_extra, y0, t0, out_times, dt, rng, n_state,
                n_noise) -> SdePath:
    """Euler-Maruyama path on a dt grid refined to include ``out_times``.

    ``program`` outputs ``[f..., G row-major...]``.  Increments use
    independent N(0, dt_k) noise per grid interval, so refining the grid
    preserves the law.  Deterministic given the generator state.
    """
    out_times = np.ascontiguousarray(out_times, dtype=np.float64)
    grid = build_em_grid(t0, out_times, dt)
    noise = rng.standard_normal((max(len(grid) - 1, 0), n_noise)) \
        if n_noise else np.zeros((max(len(grid) - 1, 0), 0))
    noise = np.ascontiguousarray(noise)
    env_extra = np.ascontiguousarray(env_extra, dtype=np.float64)
    y0 = np.ascontiguousarray(y0, dtype=np.float64)
    status, fail_step, path = kernels.em_path(
        program.n_inputs, program.consts, program.code, program.out_regs,
        env_extra, y0, grid, noise, n_state, n_noise)
    if status == kernels.STATUS_NONFINITE:
        raise SolverError(
            f"non-finite state at Euler-Maruyama step {fail_step} "
            f"(t={grid[fail_step]:.6g})", grid[fail_step])
    idx = np.searchsorted(grid, np.round(out_times, 12))
    idx = np.clip(idx, 0, len(grid) - 1)
    y_out = path[idx]
    return SdePath(grid, path, out_times, y_out, dt, None)


def individual_rng(seed: int, replicate: int, index: int) -> np.random.Generator:
    """Independent counter-based stream per (seed, replicate, individual).

    Philox keying makes streams independent and reproducible regardless of
    evaluation order, so parallel simulation stays deterministic.
    """
    key = np.array([np.uint64(seed) & np.uint64(0xFFFFFFFFFFFFFFFF),
                    (np.uint64(replicate) << np.uint64(32))
                    | (np.uint64(index) & np.uint64(0xFFFFFFFF))],
                   dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))
