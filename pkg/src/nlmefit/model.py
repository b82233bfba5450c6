"""Model declaration, file format parsing and validation.

A model couples dynamics (ODE or SDE rows), initial conditions, an
observation map, an observation-error covariance (Sigma), a random-effect
covariance (Omega) and parameter declarations.  ``validate`` resolves
symbol roles, checks the structural invariants and computes the
phi-partition used by the sensitivity generator.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import expr as ex

__all__ = ["ModelError", "ModelSpec", "SigmaSpec", "OmegaSpec",
           "ValidatedModel", "parse_model", "validate", "is_sde"]

ROLE_STATE = "state"
ROLE_THETA = "theta"
ROLE_ETA = "eta"
ROLE_PHI = "phi"
ROLE_NOISE = "noise"
ROLE_COVARIATE = "covariate"
ROLE_TIME = "time"
ROLE_SIGMA = "sigma"


class ModelError(ValueError):
    pass


@dataclass
class SigmaSpec:
    """Observation-error covariance structure (diagonal in all kinds)."""

    kind: str = "additive"  # additive | proportional | user
    params: tuple = ()      # parameter names
    starts: dict = field(default_factory=dict)
    entries: tuple = ()     # user kind: one variance Expr per observation


@dataclass
class OmegaSpec:
    """Random-effect covariance structure.

    Parameterized by a lower-triangular factor L with strictly positive
    diagonal, Omega = L L^T, so any finite parameter vector yields a
    symmetric positive definite matrix.
    """

    kind: str = "diagonal"  # diagonal | full
    dim: int = 0

    def param_names(self, etas):
        if self.kind == "diagonal":
            return tuple(f"omega_{name}" for name in etas)
        names = []
        for i in range(self.dim):
            for j in range(i + 1):
                names.append(f"omega_L_{i + 1}_{j + 1}")
        return tuple(names)

    def default_starts(self, etas):
        if self.kind == "diagonal":
            return {n: 0.3 for n in self.param_names(etas)}
        out = {}
        for i in range(self.dim):
            for j in range(i + 1):
                out[f"omega_L_{i + 1}_{j + 1}"] = 0.3 if i == j else 0.0
        return out

    def positive_names(self, etas):
        if self.kind == "diagonal":
            return self.param_names(etas)
        return tuple(f"omega_L_{i + 1}_{i + 1}" for i in range(self.dim))

    def factor(self, values):
        """Lower-triangular factor L from the parameter vector."""
        q = self.dim
        L = np.zeros((q, q))
        if self.kind == "diagonal":
            np.fill_diagonal(L, values)
        else:
            idx = 0
            for i in range(q):
                for j in range(i + 1):
                    L[i, j] = values[idx]
                    idx += 1
        return L

    def omega(self, values):
        L = self.factor(values)
        return L @ L.T

    def domega(self, values):
        """List of d(Omega)/d(param) matrices at the given values."""
        q = self.dim
        L = self.factor(values)
        out = []
        if self.kind == "diagonal":
            for k in range(q):
                D = np.zeros((q, q))
                D[k, k] = 2.0 * values[k]
                out.append(D)
            return out
        idx = 0
        for i in range(q):
            for j in range(i + 1):
                E = np.zeros((q, q))
                E[i, j] = 1.0
                out.append(E @ L.T + L @ E.T)
                idx += 1
        return out


@dataclass
class ModelSpec:
    """Raw (unvalidated) model declaration as produced by the parser."""

    states: list = field(default_factory=list)
    odes: dict = field(default_factory=dict)        # state -> raw rhs Expr
    inits: dict = field(default_factory=dict)       # state -> Expr
    obs: list = field(default_factory=list)         # (name, Expr)
    thetas: list = field(default_factory=list)      # names
    theta_starts: dict = field(default_factory=dict)
    etas: list = field(default_factory=list)
    phis: list = field(default_factory=list)        # (name, Expr)
    noises: list = field(default_factory=list)
    covariates: list = field(default_factory=list)
    sigma: SigmaSpec = field(default_factory=SigmaSpec)
    sigma_given: bool = False
    omega: OmegaSpec = field(default_factory=OmegaSpec)
    positive: list = field(default_factory=list)


def _names(rest, lineno, what):
    names = [n for chunk in rest.split(",") for n in chunk.split()]
    if not names:
        raise ModelError(f"line {lineno}: empty {what} declaration")
    for n in names:
        if not n[0].isalpha() and n[0] != "_":
            raise ModelError(f"line {lineno}: bad identifier {n!r}")
    return names


def _name_value_pairs(rest, lineno, require_value=False):
    out = {}
    order = []
    for chunk in rest.replace(",", " ").split():
        if "=" in chunk:
            name, _, val = chunk.partition("=")
            try:
                out[name] = float(val)
            except ValueError:
                raise ModelError(f"line {lineno}: bad value for {name!r}: {val!r}")
        else:
            name = chunk
            if require_value:
                raise ModelError(f"line {lineno}: {name!r} needs '=start-value'")
            out[name] = None
        if not name:
            raise ModelError(f"line {lineno}: empty name")
        order.append(name)
    return order, out


def _split_top_level(body):
    """Split on commas outside parentheses."""
    items, depth, cur = [], 0, []
    for ch in body:
        if ch == "(":
            depth += 1
        elif ch == ")":
            depth -= 1
        if ch == "," and depth == 0:
            items.append("".join(cur))
            cur = []
        else:
            cur.append(ch)
    items.append("".join(cur))
    return [p.strip() for p in items if p.strip()]


def _parse_sigma(rest, lineno):
    rest = rest.strip()
    kinds = {"add": "additive", "additive": "additive",
             "prop": "proportional", "proportional": "proportional",
             "user": "user"}
    head, _, body = rest.partition("(")
    kind = kinds.get(head.strip())
    if kind is None or not rest.endswith(")"):
        raise ModelError(
            f"line {lineno}: expected sigma add(...)/prop(...)/user(...)")
    body = body[:-1]
    items = _split_top_level(body)
    names, starts, entries = [], {}, []
    for item in items:
        obs_name, sep, payload = item.partition(":")
        if not sep:
            raise ModelError(
                f"line {lineno}: sigma entries are 'obsname: ...' ({item!r})")
        obs_name = obs_name.strip()
        payload = payload.strip()
        if kind == "user":
            entries.append((obs_name, ex.parse_expr(payload, lineno)))
        else:
            order, vals = _name_value_pairs(payload, lineno)
            if len(order) != 1:
                raise ModelError(
                    f"line {lineno}: one parameter per observation in sigma {head}")
            names.append(order[0])
            if vals[order[0]] is not None:
                starts[order[0]] = vals[order[0]]
            entries.append((obs_name, None))
    return SigmaSpec(kind=kind, params=tuple(names), starts=starts,
                     entries=tuple(entries))


def parse_model(text: str) -> ModelSpec:
    """Parse the line-oriented model file format (``#`` comments)."""
    spec = ModelSpec()
    seen_sigma_params = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        word, _, rest = line.partition(" ")
        rest = rest.strip()
        try:
            if word == "state":
                spec.states.extend(_names(rest, lineno, "state"))
            elif word == "theta":
                order, vals = _name_value_pairs(rest, lineno)
                spec.thetas.extend(order)
                spec.theta_starts.update({k: v for k, v in vals.items()})
            elif word == "eta":
                spec.etas.extend(_names(rest, lineno, "eta"))
            elif word == "noise":
                spec.noises.extend(_names(rest, lineno, "noise"))
            elif word == "covariate":
                spec.covariates.extend(_names(rest, lineno, "covariate"))
            elif word == "positive":
                spec.positive.extend(_names(rest, lineno, "positive"))
            elif word == "phi":
                name, sep, body = rest.partition("=")
                if not sep:
                    raise ModelError(f"line {lineno}: phi needs 'name = expr'")
                spec.phis.append((name.strip(), ex.parse_expr(body, lineno)))
            elif word in ("ode", "sde"):
                lhs, sep, body = rest.partition("=")
                lhs = lhs.strip()
                if not sep or not lhs.endswith("'"):
                    raise ModelError(
                        f"line {lineno}: expected \"{word} X' = expr\"")
                state = lhs[:-1].strip()
                if state in spec.odes:
                    raise ModelError(
                        f"line {lineno}: duplicate equation for state {state!r}")
                spec.odes[state] = ex.parse_expr(body, lineno)
            elif word == "init":
                name, sep, body = rest.partition("=")
                if not sep:
                    raise ModelError(f"line {lineno}: init needs 'state = expr'")
                spec.inits[name.strip()] = ex.parse_expr(body, lineno)
            elif word == "obs":
                name, sep, body = rest.partition("=")
                if not sep:
                    raise ModelError(f"line {lineno}: obs needs 'name = expr'")
                spec.obs.append((name.strip(), ex.parse_expr(body, lineno)))
            elif word == "sigma":
                if spec.sigma_given:
                    raise ModelError(f"line {lineno}: duplicate sigma statement")
                spec.sigma = _parse_sigma(rest, lineno)
                spec.sigma_given = True
            elif word == "sigmaparam":
                order, vals = _name_value_pairs(rest, lineno)
                seen_sigma_params.extend(order)
                for k, v in vals.items():
                    if v is not None:
                        spec.sigma.starts[k] = v
            elif word == "omega":
                if rest not in ("diagonal", "full"):
                    raise ModelError(
                        f"line {lineno}: omega must be 'diagonal' or 'full'")
                spec.omega = OmegaSpec(kind=rest)
            else:
                raise ModelError(f"line {lineno}: unknown statement {word!r}")
        except ex.ParseError as err:
            raise ModelError(f"line {lineno}: {err}") from None
    if seen_sigma_params:
        spec.sigma.params = tuple(list(spec.sigma.params) + seen_sigma_params)
    return spec


@dataclass(frozen=True)
class ValidatedModel:
    """Validated, role-tagged model ready for sensitivity generation.

    Immutable and shareable across threads.
    """

    states: tuple
    drift: tuple                 # noise-free rhs Expr per state
    diffusion: tuple             # n_state x n_noise Expr matrix (rows)
    noises: tuple
    x0: tuple                    # initial-condition Expr per state
    obs_names: tuple
    h: tuple                     # raw observation Exprs (may use phi)
    h_sub: tuple                 # phi-substituted observation Exprs
    sigma: SigmaSpec
    sigma_entries_sub: tuple     # phi-substituted variance Expr per obs
    omega: OmegaSpec
    thetas: tuple
    theta_starts: dict
    etas: tuple
    phis: tuple                  # (name, Expr) pairs
    covariates: tuple
    positive: frozenset
    roles: dict
    theta_phi: tuple
    theta_c: tuple
    eta_phi: tuple
    eta_c: tuple
    p1: tuple                    # phi names followed by inline etas
    p2: tuple                    # theta_c

    @property
    def n_states(self):
        return len(self.states)

    @property
    def n_obs(self):
        return len(self.obs_names)

    @property
    def n_etas(self):
        return len(self.etas)

    @property
    def sde(self):
        return is_sde(self)

    def omega_param_names(self):
        return self.omega.param_names(self.etas)

    def phi_exprs(self):
        return tuple(e for _, e in self.phis)


def _check_symbols(e, allowed, roles, where):
    for name in ex.free_symbols(e):
        if name == "t":
            continue
        role = roles.get(name)
        if role is None:
            raise ModelError(f"unbound symbol {name!r} in {where}")
        if role not in allowed:
            raise ModelError(
                f"{role} symbol {name!r} is not allowed in {where}")


def validate(spec: ModelSpec) -> ValidatedModel:
    """Check all model invariants and compute the phi-partition."""
    if not spec.states:
        raise ModelError("model declares no states")
    if not spec.obs:
        raise ModelError("model declares no observations")

    roles = {"t": ROLE_TIME}

    def declare(name, role):
        if name == "t":
            raise ModelError("'t' is reserved for time")
        if name in roles:
            raise ModelError(
                f"symbol {name!r} declared as both {roles[name]} and {role}")
        roles[name] = role

    for n in spec.states:
        declare(n, ROLE_STATE)
    for n in spec.thetas:
        declare(n, ROLE_THETA)
    for n in spec.etas:
        declare(n, ROLE_ETA)
    for n, _ in spec.phis:
        declare(n, ROLE_PHI)
    for n in spec.noises:
        declare(n, ROLE_NOISE)
    for n in spec.covariates:
        declare(n, ROLE_COVARIATE)

    # sigma params
    sigma = spec.sigma
    if not spec.sigma_given:
        params = tuple(f"sigma_add_{name}" for name, _ in spec.obs)
        sigma = SigmaSpec(kind="additive", params=params,
                          entries=tuple((name, None) for name, _ in spec.obs))
    for n in sigma.params:
        declare(n, ROLE_SIGMA)

    # phi definitions reference only theta and eta
    phi_map = {}
    for name, body in spec.phis:
        _check_symbols(body, {ROLE_THETA, ROLE_ETA}, roles, f"phi {name!r}")
        if ex.contains_symbol(body, "t"):
            raise ModelError(f"phi {name!r} must not depend on time")
        phi_map[name] = ex.simplify(body)

    # dynamics rows: every state needs an equation; extract noise columns
    drift_rows = []
    diffusion_rows = []
    zero_noise = {w: ex.ZERO for w in spec.noises}
    for s in spec.states:
        if s not in spec.odes:
            raise ModelError(f"state {s!r} has no ode/sde equation")
        rhs = spec.odes[s]
        row = []
        for w in spec.noises:
            coeff = ex.diff(rhs, w)
            for w2 in spec.noises:
                if ex.contains_symbol(coeff, w2):
                    raise ModelError(
                        f"noise symbol {w!r} enters the equation for {s!r} "
                        f"nonlinearly (coefficient involves {w2!r})")
            row.append(coeff)
        drift_rows.append(ex.simplify(ex.substitute(rhs, zero_noise)))
        diffusion_rows.append(tuple(row))
    for s, e in spec.odes.items():
        if s not in spec.states:
            raise ModelError(f"equation given for undeclared state {s!r}")

    x0 = []
    for s in spec.states:
        e = spec.inits.get(s, ex.ZERO)
        x0.append(ex.simplify(e))
    for s in spec.inits:
        if s not in spec.states:
            raise ModelError(f"init given for undeclared state {s!r}")

    model_roles = {ROLE_STATE, ROLE_THETA, ROLE_ETA, ROLE_PHI, ROLE_COVARIATE}
    for s, e in zip(spec.states, drift_rows):
        _check_symbols(e, model_roles, roles, f"equation for {s!r}")
    for s, row in zip(spec.states, diffusion_rows):
        for w, e in zip(spec.noises, row):
            _check_symbols(e, model_roles, roles,
                           f"diffusion coefficient of {w!r} in {s!r}")
    for s, e in zip(spec.states, x0):
        _check_symbols(e, model_roles - {ROLE_STATE}, roles,
                       f"initial condition of {s!r}")
        if ex.contains_symbol(e, "t"):
            raise ModelError(f"initial condition of {s!r} must not depend on time")
    h = []
    for name, e in spec.obs:
        _check_symbols(e, model_roles, roles, f"observation {name!r}")
        h.append(ex.simplify(e))

    # sigma entries
    obs_names = tuple(name for name, _ in spec.obs)
    subst_phi = {n: e for n, e in phi_map.items()}
    h_sub = tuple(ex.simplify(ex.substitute(e, subst_phi)) for e in h)
    entries = []
    if sigma.kind == "user":
        by_obs = dict((name, e) for name, e in sigma.entries)
        unknown = set(by_obs) - set(obs_names)
        if unknown:
            raise ModelError(f"sigma user(): unknown observation(s) {sorted(unknown)}")
        for name in obs_names:
            if name not in by_obs:
                raise ModelError(f"sigma user(): missing entry for {name!r}")
            e = by_obs[name]
            _check_symbols(e, model_roles | {ROLE_SIGMA}, roles,
                           f"sigma entry for {name!r}")
            entries.append(ex.simplify(ex.substitute(e, subst_phi)))
        if not sigma.params:
            raise ModelError("sigma user() needs sigmaparam declarations")
    else:
        declared = [name for name, _ in sigma.entries] if spec.sigma_given else list(obs_names)
        if set(declared) != set(obs_names) or len(declared) != len(obs_names):
            raise ModelError(
                f"sigma {sigma.kind}: need exactly one entry per observation "
                f"{list(obs_names)}, got {declared}")
        params_by_obs = dict(zip(declared, sigma.params))
        for m, name in enumerate(obs_names):
            p = ex.sym(params_by_obs[name])
            if sigma.kind == "additive":
                entries.append(ex.simplify(ex.pow_(p, ex.const(2))))
            else:
                entries.append(ex.simplify(
                    ex.pow_(ex.mul(p, h_sub[m]), ex.const(2))))

    # every eta must be used somewhere
    used = set()
    for e in (list(drift_rows) + x0 + h + [b for _, b in spec.phis]
              + [e for e in entries] + [e for row in diffusion_rows for e in row]):
        used |= ex.free_symbols(e)
    for n in spec.etas:
        if n not in used:
            raise ModelError(f"random effect {n!r} is not used anywhere in the model")
    for n in spec.thetas:
        if n not in used:
            warnings.warn(f"fixed effect {n!r} is not used anywhere in the model")

    # phi partition
    theta_phi = []
    eta_phi = []
    for _, body in spec.phis:
        for n in ex.free_symbols(body):
            if roles.get(n) == ROLE_THETA and n not in theta_phi:
                theta_phi.append(n)
            if roles.get(n) == ROLE_ETA and n not in eta_phi:
                eta_phi.append(n)
    theta_phi = tuple(n for n in spec.thetas if n in theta_phi)
    eta_phi = tuple(n for n in spec.etas if n in eta_phi)
    theta_c = tuple(n for n in spec.thetas if n not in theta_phi)
    eta_c = tuple(n for n in spec.etas if n not in eta_phi)

    # symbols routed through phi must not also appear directly in the
    # dynamics (sensitivities w.r.t. them flow through p1 only)
    for where, exprs in (("equation", drift_rows), ("initial condition", x0)):
        for s, e in zip(spec.states, exprs):
            for n in ex.free_symbols(e):
                if n in theta_phi or n in eta_phi:
                    raise ModelError(
                        f"{n!r} is used inside a phi definition and must not "
                        f"also appear directly in the {where} of {s!r}")

    p1 = tuple(n for n, _ in spec.phis) + eta_c
    p2 = theta_c

    omega = OmegaSpec(kind=spec.omega.kind, dim=len(spec.etas))

    positive = set(spec.positive)
    for n in positive:
        if roles.get(n) not in (ROLE_THETA, ROLE_SIGMA):
            raise ModelError(
                f"positive declaration for {n!r}: not a theta or sigma parameter")
    if sigma.kind in ("additive", "proportional"):
        positive |= set(sigma.params)  # built-in kinds: standard deviations
    positive |= set(omega.positive_names(spec.etas))

    return ValidatedModel(
        states=tuple(spec.states), drift=tuple(drift_rows),
        diffusion=tuple(diffusion_rows), noises=tuple(spec.noises),
        x0=tuple(x0), obs_names=obs_names, h=tuple(h), h_sub=h_sub,
        sigma=sigma, sigma_entries_sub=tuple(entries), omega=omega,
        thetas=tuple(spec.thetas), theta_starts=dict(spec.theta_starts),
        etas=tuple(spec.etas), phis=tuple((n, phi_map[n]) for n, _ in spec.phis),
        covariates=tuple(spec.covariates), positive=frozenset(positive),
        roles=roles, theta_phi=theta_phi, theta_c=theta_c, eta_phi=eta_phi,
        eta_c=eta_c, p1=p1, p2=p2)


def is_sde(model: ValidatedModel) -> bool:
    """Structurally nonzero diffusion anywhere makes the model an SDE."""
    for row in model.diffusion:
        for e in row:
            if not ex.is_zero(e):
                return True
    return False
