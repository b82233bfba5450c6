"""Symbolic generation of sensitivity ODE systems.

The inner system augments the states with first-order sensitivities with
respect to p1 (the composite phi-parameters followed by inline etas); the
outer system adds dx/dp2 (plain fixed effects), the lower triangle of the
symmetric d2x/dp1^2 block, and the mixed d2x/dp1 dp2 block.  Trivial
equations with constant solutions are removed by connectivity-matrix
pruning, and numeric sensitivities are mapped back to derivatives with
respect to theta/eta through the phi jacobians.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import expr as ex
from . import integrate
from .model import ValidatedModel
from .program import Program, compile_system

__all__ = ["SensitivitySystem", "PhiJacobians", "ConnectivityMatrix",
           "build_inner_system", "build_outer_system", "build_phi_jacobians",
           "prune_trivial", "equation_counts", "solve_sensitivities",
           "chain_rule_backmap", "SensBlocks"]


def _pair_index(np1):
    """Lower-triangular (b <= c) pair ordering for the d2x/dp1^2 block."""
    pairs = []
    for b in range(np1):
        for c in range(b, np1):
            pairs.append((b, c))
    return pairs


@dataclass(frozen=True)
class ConnectivityMatrix:
    """0/1 structural coupling matrix with its fixed-point activity vector."""

    matrix: np.ndarray
    z: np.ndarray


@dataclass(frozen=True)
class SensitivitySystem:
    """Augmented sensitivity ODE system (possibly pruned)."""

    order: int
    n_states: int
    np1: int
    np2: int
    names: tuple               # full augmented-state symbol names
    labels: tuple              # readable labels per augmented state
    rhs: tuple                 # full rhs Exprs (post-substitution if pruned)
    init: tuple                # full init Exprs
    kept: tuple                # indices of solved equations
    pruned: tuple              # indices with constant solutions
    connectivity: object       # ConnectivityMatrix or None
    program: Program           # rhs program over [t, kept..., p1, p2, cov]
    init_program: Program      # init program over [p1, p2, cov] -> full inits
    env_tail: tuple            # (p1 names..., p2 names..., covariate names...)

    @property
    def n_equations(self):
        return len(self.kept)

    @property
    def n_full(self):
        return len(self.names)

    def describe_pruned(self):
        return [self.labels[i] for i in self.pruned]


def _aug_name(tag, *idx):
    return "_" + tag + "_" + "_".join(str(i) for i in idx)


def _nonzero_sum(terms):
    terms = [t for t in terms if not ex.is_zero(t)]
    if not terms:
        return ex.ZERO
    return ex.simplify(ex.add(*terms))


class _Partials:
    """Lazy cache of simplified symbolic partial derivatives."""

    def __init__(self):
        self.cache = {}

    def get(self, exprs, key, *chain):
        k = (key, chain)
        got = self.cache.get(k)
        if got is None:
            if len(chain) == 1:
                got = ex.diff(exprs[key], chain[0])
            else:
                got = ex.diff(self.get(exprs, key, *chain[:-1]), chain[-1])
            self.cache[k] = got
        return got


def _build(model: ValidatedModel, order: int) -> SensitivitySystem:
    n = model.n_states
    state_names = list(model.states)
    p1_names = list(model.p1)
    p2_names = list(model.p2)
    np1, np2 = len(p1_names), len(p2_names)

    f = {i: model.drift[i] for i in range(n)}
    x0 = {i: model.x0[i] for i in range(n)}
    P = _Partials()

    def dfdx(i, m):
        return P.get(f, i, state_names[m])

    def dfdp1(i, b):
        return P.get(f, i, p1_names[b])

    def dfdp2(i, c):
        return P.get(f, i, p2_names[c])

    names = []
    labels = []
    rhs = []
    init = []

    # base states
    for i in range(n):
        names.append(state_names[i])
        labels.append(state_names[i])
        rhs.append(ex.simplify(f[i]))
        init.append(ex.simplify(x0[i]))

    s1 = [[ex.sym(_aug_name("s1", i, b)) for b in range(np1)] for i in range(n)]
    for b in range(np1):
        for i in range(n):
            names.append(_aug_name("s1", i, b))
            labels.append(f"d({state_names[i]})/d({p1_names[b]})")
            terms = [dfdp1(i, b)]
            terms += [ex.mul(dfdx(i, m), s1[m][b]) for m in range(n)]
            rhs.append(_nonzero_sum(terms))
            init.append(P.get(x0, i, p1_names[b]))

    if order >= 2:
        s2 = [[ex.sym(_aug_name("s2", i, c)) for c in range(np2)]
              for i in range(n)]
        pairs = _pair_index(np1)
        t1 = {}
        for pi, (b, c) in enumerate(pairs):
            for i in range(n):
                t1[(i, b, c)] = ex.sym(_aug_name("t1", i, b, c))
                t1[(i, c, b)] = t1[(i, b, c)]
        t12 = [[[ex.sym(_aug_name("t12", i, b, c)) for c in range(np2)]
                for b in range(np1)] for i in range(n)]

        for c in range(np2):
            for i in range(n):
                names.append(_aug_name("s2", i, c))
                labels.append(f"d({state_names[i]})/d({p2_names[c]})")
                terms = [dfdp2(i, c)]
                terms += [ex.mul(dfdx(i, m), s2[m][c]) for m in range(n)]
                rhs.append(_nonzero_sum(terms))
                init.append(P.get(x0, i, p2_names[c]))

        # d2x/dp1^2 (lower triangle): the symmetric chain-rule form
        for b, c in pairs:
            for i in range(n):
                names.append(_aug_name("t1", i, b, c))
                labels.append(
                    f"d2({state_names[i]})/d({p1_names[b]})d({p1_names[c]})")
                terms = [P.get(f, i, p1_names[b], p1_names[c])]
                for m in range(n):
                    terms.append(ex.mul(
                        P.get(f, i, state_names[m], p1_names[c]), s1[m][b]))
                    terms.append(ex.mul(
                        P.get(f, i, state_names[m], p1_names[b]), s1[m][c]))
                    for m2 in range(n):
                        terms.append(ex.mul(
                            P.get(f, i, state_names[m], state_names[m2]),
                            s1[m][b], s1[m2][c]))
                    terms.append(ex.mul(dfdx(i, m), t1[(m, b, c)]))
                rhs.append(_nonzero_sum(terms))
                init.append(P.get(x0, i, p1_names[b], p1_names[c]))

        for b in range(np1):
            for c in range(np2):
                for i in range(n):
                    names.append(_aug_name("t12", i, b, c))
                    labels.append(
                        f"d2({state_names[i]})/d({p1_names[b]})d({p2_names[c]})")
                    terms = [P.get(f, i, p1_names[b], p2_names[c])]
                    for m in range(n):
                        terms.append(ex.mul(
                            P.get(f, i, state_names[m], p2_names[c]), s1[m][b]))
                        terms.append(ex.mul(
                            P.get(f, i, state_names[m], p1_names[b]), s2[m][c]))
                        for m2 in range(n):
                            terms.append(ex.mul(
                                P.get(f, i, state_names[m], state_names[m2]),
                                s1[m][b], s2[m2][c]))
                        terms.append(ex.mul(dfdx(i, m), t12[m][b][c]))
                    rhs.append(_nonzero_sum(terms))
                    init.append(P.get(x0, i, p1_names[b], p2_names[c]))

    for nm in names[n:]:
        if nm in model.roles:
            raise ValueError(
                f"internal sensitivity symbol {nm!r} collides with a model symbol")

    env_tail = tuple(p1_names + p2_names + list(model.covariates))
    kept = tuple(range(len(names)))
    program = compile_system(rhs, ("t",) + tuple(names) + env_tail)
    init_program = compile_system(init, env_tail)
    return SensitivitySystem(
        order=order, n_states=n, np1=np1, np2=np2, names=tuple(names),
        labels=tuple(labels), rhs=tuple(rhs), init=tuple(init), kept=kept,
        pruned=(), connectivity=None, program=program,
        init_program=init_program, env_tail=env_tail)


def build_inner_system(model: ValidatedModel) -> SensitivitySystem:
    """States plus first-order p1 sensitivities (for eta optimization)."""
    return _build(model, order=1)


def build_outer_system(model: ValidatedModel) -> SensitivitySystem:
    """Full second-order system (for exact outer gradients)."""
    return _build(model, order=2)


def prune_trivial(sys: SensitivitySystem) -> SensitivitySystem:
    """Remove equations whose solution is constant in time.

    An equation starts active when its rhs, with all augmented variables
    replaced by their initial conditions, is not structurally zero; the
    connectivity matrix then propagates activity until a fixed point.
    Inactive variables are replaced in the remaining equations by their
    constant (initial-value) solutions.
    """
    dim = sys.n_full
    name_to_idx = {nm: i for i, nm in enumerate(sys.names)}
    init_subs = {sys.names[j]: sys.init[j] for j in range(dim)}

    M = np.zeros((dim, dim), dtype=np.int64)
    z = np.zeros(dim, dtype=np.int64)
    for i in range(dim):
        M[i, i] = 1
        for nm in ex.free_symbols(sys.rhs[i]):
            j = name_to_idx.get(nm)
            if j is not None:
                M[i, j] = 1
        g0 = ex.simplify(ex.substitute(sys.rhs[i], init_subs))
        # structural test only; an rhs with explicit time dependence never
        # counts as zero, which keeps the criterion sound
        z[i] = 0 if ex.is_zero(g0) else 1

    for _ in range(dim):
        z_new = np.sign(M @ z)
        if np.array_equal(z_new, z):
            break
        z = z_new

    kept = tuple(int(i) for i in range(dim) if z[i] == 1)
    pruned = tuple(int(i) for i in range(dim) if z[i] == 0)
    if not pruned:
        return replace(sys, connectivity=ConnectivityMatrix(M, z))

    const_subs = {sys.names[j]: sys.init[j] for j in pruned}
    new_rhs = list(sys.rhs)
    for i in kept:
        new_rhs[i] = ex.simplify(ex.substitute(sys.rhs[i], const_subs))

    kept_names = tuple(sys.names[i] for i in kept)
    program = compile_system([new_rhs[i] for i in kept],
                             ("t",) + kept_names + sys.env_tail)
    return replace(sys, rhs=tuple(new_rhs), kept=kept, pruned=pruned,
                   connectivity=ConnectivityMatrix(M, z), program=program)


@dataclass(frozen=True)
class PhiJacobians:
    """Derivatives of (p1, p2) w.r.t. (theta, eta), p-jacobians compiled.

    dp2/dtheta is the constant 0/1 selector of theta_c.
    """

    model: ValidatedModel
    dp2_dtheta: np.ndarray
    _program: Program
    _shapes: tuple

    def eval(self, theta_values, eta_values):
        """Numeric (dp1_deta, dp1_dtheta, d2p1_deta2, d2p1_detadtheta)."""
        env = np.concatenate([np.asarray(theta_values, dtype=np.float64),
                              np.asarray(eta_values, dtype=np.float64)])
        flat = self._program(env)
        out = []
        pos = 0
        for shape in self._shapes:
            size = int(np.prod(shape))
            out.append(flat[pos:pos + size].reshape(shape))
            pos += size
        return tuple(out)


def build_phi_jacobians(model: ValidatedModel) -> PhiJacobians:
    p1 = list(model.p1)
    np1 = len(p1)
    q = model.n_etas
    nth = len(model.thetas)
    phi_map = dict(model.phis)

    def entry(name):
        return phi_map.get(name, ex.sym(name))

    dp1_deta = [[ex.diff(entry(b), k) for k in model.etas] for b in p1]
    dp1_dtheta = [[ex.diff(entry(b), a) for a in model.thetas] for b in p1]
    d2p1_deta2 = [[[ex.diff(dp1_deta[bi][ki], k2)
                    for k2 in model.etas] for ki, _ in enumerate(model.etas)]
                  for bi, b in enumerate(p1)]
    d2p1_detadtheta = [[[ex.diff(dp1_deta[bi][ki], a)
                         for a in model.thetas]
                        for ki, _ in enumerate(model.etas)]
                       for bi, b in enumerate(p1)]

    dp2_dtheta = np.zeros((len(model.p2), nth))
    for ci, name in enumerate(model.p2):
        dp2_dtheta[ci, model.thetas.index(name)] = 1.0

    flat = []
    shapes = ((np1, q), (np1, nth), (np1, q, q), (np1, q, nth))
    for mat in (dp1_deta, dp1_dtheta):
        for row in mat:
            flat.extend(row)
    for ten in (d2p1_deta2, d2p1_detadtheta):
        for mat in ten:
            for row in mat:
                flat.extend(row)
    program = compile_system(flat, tuple(model.thetas) + tuple(model.etas))
    return PhiJacobians(model=model, dp2_dtheta=dp2_dtheta, _program=program,
                        _shapes=shapes)


def equation_counts(model: ValidatedModel) -> dict:
    """ODE counts for the inner/outer problems in both parameterizations."""
    x = model.n_states
    eta = model.n_etas
    theta = len(model.thetas)
    phi = len(model.phis)
    eta_c = len(model.eta_c)
    theta_c = len(model.theta_c)
    r = phi + eta_c
    counts = {
        "N_in_old": (1 + eta) * x,
        "N_out_old": (1 + eta + theta + (eta + eta ** 2) / 2 + eta * theta) * x,
        "N_in_new": (1 + r) * x,
        "N_out_new": (1 + r + theta_c + (r + r ** 2) / 2 + r * theta_c) * x,
    }
    counts["ratio"] = counts["N_out_new"] / counts["N_out_old"] \
        if counts["N_out_old"] else 1.0
    return counts


@dataclass
class SensBlocks:
    """Numeric sensitivity blocks along a trajectory."""

    times: np.ndarray
    x: np.ndarray            # (nt, n)
    s1: np.ndarray           # (nt, n, np1)
    s2: np.ndarray = None    # (nt, n, np2)
    t1: np.ndarray = None    # (nt, n, np1, np1) symmetric
    t12: np.ndarray = None   # (nt, n, np1, np2)
    solution: object = None


def solve_sensitivities(sys: SensitivitySystem, p1_values, p2_values,
                        cov_values, out_times, t0=0.0,
                        rtol=integrate.DEFAULT_RTOL,
                        atol=integrate.DEFAULT_ATOL) -> SensBlocks:
    """Integrate the (pruned) system and unpack full blocks at out_times."""
    env_tail = np.concatenate([np.asarray(p1_values, dtype=np.float64),
                               np.asarray(p2_values, dtype=np.float64),
                               np.asarray(cov_values, dtype=np.float64)])
    full_init = sys.init_program(env_tail)
    out_times = np.asarray(out_times, dtype=np.float64)
    nt = len(out_times)
    dim = sys.n_full

    full = np.empty((nt, dim))
    solution = None
    if sys.kept:
        y0 = full_init[list(sys.kept)]
        t_end = float(out_times[-1]) if nt else t0
        solution = integrate.solve_ode(sys.program, env_tail, y0,
                                       (t0, max(t0, t_end)), out_times,
                                       rtol=rtol, atol=atol)
        full[:, list(sys.kept)] = solution.y_out
    for j in sys.pruned:
        full[:, j] = full_init[j]

    n, np1, np2 = sys.n_states, sys.np1, sys.np2
    x = full[:, :n]
    s1 = np.empty((nt, n, np1))
    for b in range(np1):
        s1[:, :, b] = full[:, n + b * n:n + (b + 1) * n]
    blocks = SensBlocks(times=out_times, x=x, s1=s1, solution=solution)
    if sys.order >= 2:
        base2 = n + n * np1
        s2 = np.empty((nt, n, np2))
        for c in range(np2):
            s2[:, :, c] = full[:, base2 + c * n:base2 + (c + 1) * n]
        base3 = base2 + n * np2
        t1 = np.empty((nt, n, np1, np1))
        for pi, (b, c) in enumerate(_pair_index(np1)):
            chunk = full[:, base3 + pi * n:base3 + (pi + 1) * n]
            t1[:, :, b, c] = chunk
            t1[:, :, c, b] = chunk
        base4 = base3 + n * (np1 * (np1 + 1) // 2)
        t12 = np.empty((nt, n, np1, np2))
        for b in range(np1):
            for c in range(np2):
                pos = base4 + (b * np2 + c) * n
                t12[:, :, b, c] = full[:, pos:pos + n]
        blocks.s2, blocks.t1, blocks.t12 = s2, t1, t12
    return blocks


def chain_rule_backmap(phij_numeric, dp2_dtheta, blocks: SensBlocks,
                       order=None):
    """Map p1/p2 sensitivities back to theta/eta derivatives.

    Returns (dx_deta, dx_dtheta[, d2x_deta2, d2x_detadtheta]) stacked over
    time; d2x_deta2 is symmetric by construction.
    """
    J, K, H1, H2 = phij_numeric
    S = dp2_dtheta
    dx_deta = np.einsum("tab,bk->tak", blocks.s1, J)
    if blocks.s2 is None:
        dx_dtheta = np.einsum("tab,bk->tak", blocks.s1, K)
        return dx_deta, dx_dtheta
    dx_dtheta = (np.einsum("tab,bk->tak", blocks.s1, K)
                 + np.einsum("tac,ck->tak", blocks.s2, S))
    if order == 1:
        return dx_deta, dx_dtheta
    d2x_deta2 = (np.einsum("tabc,bk,cl->takl", blocks.t1, J, J)
                 + np.einsum("tab,bkl->takl", blocks.s1, H1))
    d2x_detadtheta = (np.einsum("tabc,bk,cu->taku", blocks.t1, J, K)
                      + np.einsum("tabc,bk,cu->taku", blocks.t12, J, S)
                      + np.einsum("tab,bku->taku", blocks.s1, H2))
    return dx_deta, dx_dtheta, d2x_deta2, d2x_detadtheta
