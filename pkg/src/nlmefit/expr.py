"""Expression trees: parsing, differentiation, simplification and printing.

Expressions are immutable trees built from constants, symbols, n-ary sums
and products, powers, quotients, negation, a small set of function calls
and the reserved time symbol ``t``.  They form the symbolic substrate for
model right-hand sides, observation maps, covariance entries and the
generated sensitivity systems.
"""

from __future__ import annotations

import math
import warnings

__all__ = [
    "Expr", "ExprError", "ParseError", "KinkWarning",
    "const", "sym", "add", "sub", "mul", "div", "neg", "pow_", "call",
    "TIME_EXPR", "ZERO", "ONE",
    "parse_expr", "to_string", "diff", "simplify", "is_zero", "is_const",
    "eval_expr", "substitute", "free_symbols", "contains_symbol",
]

# node kinds
CONST = "const"
SYM = "sym"
SUM = "sum"
PROD = "prod"
POW = "pow"
DIV = "div"
NEG = "neg"
CALL = "call"
TIME =_TIME_KIND = "time"


class ExprError(ValueError):
    pass


class ParseError(ExprError):
    def __init__(self, msg, line, col):
        super().__init__(f"{msg} (line {line}, column {col})")
        self.line = line
        self.col = col


class KinkWarning(UserWarning):
    """Issued when min/max is differentiated (one-sided at kinks)."""


# name -> arity for supported calls; ifle(a,b,x,y) = x if a<=b else y is an
# internal selector used by one-sided min/max derivatives.
FUNCTIONS = {"exp": 1, "log": 1, "sqrt": 1, "min": 2, "max": 2, "ifle": 4}


class Expr:
    """Immutable expression node.

    Do not mutate after construction; nodes are shared freely between
    trees and across threads.
    """

    __slots__ = ("kind", "value", "name", "children", "_hash")

    def __init__(self, kind, value=0.0, name="", children=()):
        self.kind = kind
        self.value = value
        self.name = name
        self.children = tuple(children)
        self._hash = hash((kind, value, name, self.children))

    def __hash__(self):
        return self._hash

    def __eq__(self, other):
        if self is other:
            return True
        if not isinstance(other, Expr):
            return NotImplemented
        if self._hash != other._hash:
            return False
        return (self.kind == other.kind and self.value == other.value
                and self.name == other.name and self.children == other.children)

    def __repr__(self):
        return f"Expr({to_string(self)!r})"


def const(c) -> Expr:
    c = float(c)
    if not math.isfinite(c):
        raise ExprError(f"non-finite constant {c!r}")
    return Expr(CONST, value=c)


def sym(name: str) -> Expr:
    if name == "t":
        return TIME_EXPR
    return Expr(SYM, name=name)


def add(*terms) -> Expr:
    terms = tuple(terms)
    if not terms:
        return ZERO
    if len(terms) == 1:
        return terms[0]
    return Expr(SUM, children=terms)


def sub(a, b) -> Expr:
    return add(a, neg(b))


def mul(*factors) -> Expr:
    factors = tuple(factors)
    if not factors:
        return ONE
    if len(factors) == 1:
        return factors[0]
    return Expr(PROD, children=factors)


def div(a, b) -> Expr:
    return Expr(DIV, children=(a, b))


def neg(a) -> Expr:
    return Expr(NEG, children=(a,))


def pow_(a, b) -> Expr:
    return Expr(POW, children=(a, b))


def call(fn, *args) -> Expr:
    if fn not in FUNCTIONS:
        raise ExprError(f"unknown function {fn!r}")
    if len(args) != FUNCTIONS[fn]:
        raise ExprError(f"{fn} expects {FUNCTIONS[fn]} argument(s), got {len(args)}")
    return Expr(CALL, name=fn, children=args)


TIME_EXPR = Expr(_TIME_KIND)
ZERO = Expr(CONST, value=0.0)
ONE = Expr(CONST, value=1.0)


def is_const(e: Expr, value=None) -> bool:
    if e.kind != CONST:
        return False
    return value is None or e.value == value


def is_zero(e: Expr) -> bool:
    """Structural zero test (sound, incomplete): zero after simplification."""
    return is_const(simplify(e), 0.0)


def free_symbols(e: Expr) -> set:
    """Names of all symbols in ``e``; the time symbol appears as ``'t'``."""
    out = set()
    stack = [e]
    while stack:
        n = stack.pop()
        if n.kind == SYM:
            out.add(n.name)
        elif n.kind == _TIME_KIND:
            out.add("t")
        else:
            stack.extend(n.children)
    return out


def contains_symbol(e: Expr, name: str) -> bool:
    stack = [e]
    while stack:
        n = stack.pop()
        if n.kind == SYM and n.name == name:
            return True
        if n.kind == _TIME_KIND and name == "t":
            return True
        stack.extend(n.children)
    return False


# ---------------------------------------------------------------------------
# evaluation


def _eval_call(fn, args):
    if fn == "exp":
        return math.exp(args[0])
    if fn == "log":
        return math.log(args[0])
    if fn == "sqrt":
        return math.sqrt(args[0])
    if fn == "min":
        return args[0] if args[0] <= args[1] else args[1]
    if fn == "max":
        return args[0] if args[0] >= args[1] else args[1]
    if fn == "ifle":
        return args[2] if args[0] <= args[1] else args[3]
    raise ExprError(f"unknown function {fn!r}")


def eval_expr(e: Expr, env) -> float:
    """Recursive tree evaluation over ``env`` mapping symbol name -> value."""
    k = e.kind
    if k == CONST:
        return e.value
    if k == SYM:
        try:
            return float(env[e.name])
        except KeyError:
            raise ExprError(f"unbound symbol {e.name!r}") from None
    if k == _TIME_KIND:
        try:
            return float(env["t"])
        except KeyError:
            raise ExprError("unbound time symbol 't'") from None
    if k == SUM:
        return sum(eval_expr(c, env) for c in e.children)
    if k == PROD:
        out = 1.0
        for c in e.children:
            out *= eval_expr(c, env)
        return out
    if k == DIV:
        return eval_expr(e.children[0], env) / eval_expr(e.children[1], env)
    if k == NEG:
        return -eval_expr(e.children[0], env)
    if k == POW:
        return eval_expr(e.children[0], env) ** eval_expr(e.children[1], env)
    if k == CALL:
        return _eval_call(e.name, [eval_expr(c, env) for c in e.children])
    raise ExprError(f"unknown node kind {k!r}")


def substitute(e: Expr, mapping) -> Expr:
    """Replace symbols by expressions; keys are symbol names ('t' for time)."""
    memo = {}

    def rec(n):
        got = memo.get(n)
        if got is not None:
            return got
        if n.kind == SYM:
            out = mapping.get(n.name, n)
        elif n.kind == _TIME_KIND:
            out = mapping.get("t", n)
        elif not n.children:
            out = n
        else:
            kids = tuple(rec(c) for c in n.children)
            out = n if kids == n.children else Expr(n.kind, n.value, n.name, kids)
        memo[n] = out
        return out

    return rec(e)


# ---------------------------------------------------------------------------
# simplification

_SIMPLIFY_CACHE = {}
_SIMPLIFY_CACHE_MAX = 200_000


def simplify(e: Expr) -> Expr:
    """Apply a terminating rewrite set bottom-up.

    Rules: constant folding, 0+x -> x, 0*x -> 0, 1*x -> x, x^0 -> 1,
    x^1 -> x, flattening of nested sums/products, and collection of
    structurally identical sum terms (so x - x -> 0).
    """
    got = _SIMPLIFY_CACHE.get(e)
    if got is not None:
        return got
    out = _simplify(e)
    if len(_SIMPLIFY_CACHE) > _SIMPLIFY_CACHE_MAX:
        _SIMPLIFY_CACHE.clear()
    _SIMPLIFY_CACHE[e] = out
    _SIMPLIFY_CACHE[out] = out
    return out


def _split_coeff(term):
    """Split a term into (float coefficient, structural core or None)."""
    coeff = 1.0
    while term.kind == NEG:
        coeff = -coeff
        term = term.children[0]
    if term.kind == CONST:
        return coeff * term.value, None
    if term.kind == PROD:
        rest = []
        for f in term.children:
            if f.kind == CONST:
                coeff *= f.value
            elif f.kind == NEG and f.children[0].kind == CONST:
                coeff *= -f.children[0].value
            else:
                rest.append(f)
        if not rest:
            return coeff, None
        core = rest[0] if len(rest) == 1 else Expr(PROD, children=tuple(rest))
        return coeff, core
    return coeff, term


def _with_coeff(coeff, core):
    if coeff == 0.0:
        return ZERO
    if core is None:
        return const(coeff)
    if coeff == 1.0:
        return core
    if coeff == -1.0:
        return neg(core)
    if core.kind == PROD:
        return Expr(PROD, children=(const(coeff),) + core.children)
    return Expr(PROD, children=(const(coeff), core))


def _simplify(e: Expr) -> Expr:
    k = e.kind
    if k in (CONST, SYM, _TIME_KIND):
        return e
    kids = tuple(simplify(c) for c in e.children)

    if k == SUM:
        # flatten, fold constants, collect identical cores
        const_part = 0.0
        order = []
        coeffs = {}
        stack = list(reversed(kids))
        while stack:
            term = stack.pop()
            if term.kind == SUM:
                stack.extend(reversed(term.children))
                continue
            c, core = _split_coeff(term)
            if core is None:
                const_part += c
                continue
            if core not in coeffs:
                coeffs[core] = 0.0
                order.append(core)
            coeffs[core] += c
        terms = [_with_coeff(coeffs[core], core) for core in order
                 if coeffs[core] != 0.0]
        if const_part != 0.0:
            terms.append(const(const_part))
        if not terms:
            return ZERO
        if len(terms) == 1:
            return terms[0]
        return Expr(SUM, children=tuple(terms))

    if k == PROD:
        coeff = 1.0
        factors = []
        stack = list(reversed(kids))
        while stack:
            f = stack.pop()
            if f.kind == PROD:
                stack.extend(reversed(f.children))
                continue
            if f.kind == CONST:
                coeff *= f.value
                continue
            if f.kind == NEG:
                coeff = -coeff
                f = f.children[0]
                if f.kind == CONST:
                    coeff *= f.value
                    continue
                if f.kind == PROD:
                    stack.extend(reversed(f.children))
                    continue
            factors.append(f)
        if coeff == 0.0:
            return ZERO
        return _with_coeff(coeff, None if not factors else
                           (factors[0] if len(factors) == 1
                            else Expr(PROD, children=tuple(factors))))

    if k == DIV:
        num, den = kids
        if is_const(num, 0.0):
            return ZERO
        if is_const(den, 1.0):
            return num
        if is_const(den, -1.0):
            return simplify(neg(num))
        if num.kind == CONST and den.kind == CONST and den.value != 0.0:
            return const(num.value / den.value)
        return Expr(DIV, children=(num, den))

    if k == NEG:
        (a,) = kids
        if a.kind == CONST:
            return const(-a.value)
        if a.kind == NEG:
            return a.children[0]
        return Expr(NEG, children=(a,))

    if k == POW:
        base, expo = kids
        if is_const(expo, 1.0):
            return base
        if is_const(expo, 0.0):
            return ONE
        if is_const(base, 1.0):
            return ONE
        if is_const(base, 0.0) and expo.kind == CONST and expo.value > 0:
            return ZERO
        if base.kind == CONST and expo.kind == CONST:
            try:
                v = base.value ** expo.value
            except (OverflowError, ValueError):
                v = None
            if v is not None and isinstance(v, float) and math.isfinite(v):
                return const(v)
        return Expr(POW, children=(base, expo))

    if k == CALL:
        if all(c.kind == CONST for c in kids):
            vals = [c.value for c in kids]
            try:
                v = _eval_call(e.name, vals)
            except (ValueError, OverflowError):
                v = None
            if v is not None and math.isfinite(v):
                return const(v)
        if e.name == "exp" and is_const(kids[0], 0.0):
            return ONE
        if e.name == "log" and is_const(kids[0], 1.0):
            return ZERO
        return Expr(CALL, name=e.name, children=kids)

    raise ExprError(f"unknown node kind {k!r}")


# ---------------------------------------------------------------------------
# differentiation


def diff(e: Expr, s) -> Expr:
    """Exact partial derivative of ``e`` w.r.t. symbol ``s`` (name or Expr).

    min/max are differentiated one-sidedly (left branch at ties) and a
    :class:`KinkWarning` is emitted.  The result is simplified.
    """
    if isinstance(s, Expr):
        if s.kind == SYM:
            s = s.name
        elif s.kind == _TIME_KIND:
            s = "t"
        else:
            raise ExprError("diff target must be a symbol")
    return simplify(_diff(e, s))


def _diff(e: Expr, s: str) -> Expr:
    k = e.kind
    if k == CONST:
        return ZERO
    if k == SYM:
        return ONE if e.name == s else ZERO
    if k == _TIME_KIND:
        return ONE if s == "t" else ZERO
    if k == SUM:
        return add(*[_diff(c, s) for c in e.children])
    if k == PROD:
        terms = []
        kids = e.children
        for i in range(len(kids)):
            di = _diff(kids[i], s)
            if is_const(di, 0.0):
                continue
            terms.append(mul(*(kids[:i] + (di,) + kids[i + 1:])))
        return add(*terms) if terms else ZERO
    if k == DIV:
        a, b = e.children
        da, db = _diff(a, s), _diff(b, s)
        return div(sub(mul(da, b), mul(a, db)), pow_(b, const(2.0)))
    if k == NEG:
        return neg(_diff(e.children[0], s))
    if k == POW:
        u, v = e.children
        du, dv = _diff(u, s), _diff(v, s)
        if is_const(dv, 0.0):
            if v.kind == CONST:
                return mul(const(v.value), pow_(u, const(v.value - 1.0)), du)
            return mul(v, pow_(u, sub(v, ONE)), du)
        # general u^v: u^v * (dv*log u + v*du/u)
        return mul(e, add(mul(dv, call("log", u)), div(mul(v, du), u)))
    if k == CALL:
        fn = e.name
        args = e.children
        if fn == "exp":
            return mul(e, _diff(args[0], s))
        if fn == "log":
            return div(_diff(args[0], s), args[0])
        if fn == "sqrt":
            return div(_diff(args[0], s), mul(const(2.0), e))
        if fn == "min":
            warnings.warn("min differentiated one-sidedly (left branch at ties)",
                          KinkWarning, stacklevel=3)
            a, b = args
            return call("ifle", a, b, _diff(a, s), _diff(b, s))
        if fn == "max":
            warnings.warn("max differentiated one-sidedly (left branch at ties)",
                          KinkWarning, stacklevel=3)
            a, b = args
            return call("ifle", b, a, _diff(a, s), _diff(b, s))
        if fn == "ifle":
            a, b, x, y = args
            return call("ifle", a, b, _diff(x, s), _diff(y, s))
    raise ExprError(f"cannot differentiate node kind {k!r}")


# ---------------------------------------------------------------------------
# parsing

_IDENT_START = set("abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ_")
_IDENT_CONT = _IDENT_START | set("0123456789")
_DIGITS = set("0123456789")


class _Lexer:
    def __init__(self, text, line_offset=1):
        self.text = text
        self.pos = 0
        self.line = line_offset
        self.col = 1
        self.tok = None
        self.tok_pos = (self.line, self.col)
        self.advance()

    def error(self, msg):
        raise ParseError(msg, *self.tok_pos)

    def _step(self, n=1):
        for _ in range(n):
            if self.pos < len(self.text) and self.text[self.pos] == "\n":
                self.line += 1
                self.col = 1
            else:
                self.col += 1
            self.pos += 1

    def advance(self):
        text, n = self.text, len(self.text)
        while self.pos < n and text[self.pos] in " \t\r\n":
            self._step()
        self.tok_pos = (self.line, self.col)
        if self.pos >= n:
            self.tok = ("end", "")
            return
        ch = text[self.pos]
        if ch in _IDENT_START:
            j = self.pos
            while j < n and text[j] in _IDENT_CONT:
                j += 1
            self.tok = ("ident", text[self.pos:j])
            self._step(j - self.pos)
            return
        if ch in _DIGITS or (ch == "." and self.pos + 1 < n
                             and text[self.pos + 1] in _DIGITS):
            j = self.pos
            while j < n and text[j] in _DIGITS:
                j += 1
            if j < n and text[j] == ".":
                j += 1
                while j < n and text[j] in _DIGITS:
                    j += 1
            if j < n and text[j] in "eE":
                k = j + 1
                if k < n and text[k] in "+-":
                    k += 1
                if k < n and text[k] in _DIGITS:
                    j = k
                    while j < n and text[j] in _DIGITS:
                        j += 1
            lit = text[self.pos:j]
            try:
                val = float(lit)
            except ValueError:
                raise ParseError(f"bad number literal {lit!r}", *self.tok_pos)
            self.tok = ("number", val)
            self._step(j - self.pos)
            return
        if ch in "+-*/^(),":
            self.tok = (ch, ch)
            self._step()
            return
        raise ParseError(f"unexpected character {ch!r}", *self.tok_pos)


def parse_expr(text: str, line_offset: int = 1) -> Expr:
    """Parse the expression grammar.

    Precedence ``^`` > unary ``-`` > ``*``,``/`` > ``+``,``-``; all binary
    operators left-associative except ``^`` (right-associative).
    """
    lx = _Lexer(text, line_offset)
    e = _parse_sum(lx)
    if lx.tok[0] != "end":
        lx.error(f"unexpected token {lx.tok[1]!r}")
    return e


def _parse_sum(lx):
    e = _parse_term(lx)
    while lx.tok[0] in ("+", "-"):
        op = lx.tok[0]
        lx.advance()
        rhs = _parse_term(lx)
        e = add(e, rhs) if op == "+" else sub(e, rhs)
    return e


def _parse_term(lx):
    e = _parse_factor(lx)
    while lx.tok[0] in ("*", "/"):
        op = lx.tok[0]
        lx.advance()
        rhs = _parse_factor(lx)
        e = mul(e, rhs) if op == "*" else div(e, rhs)
    return e


def _parse_factor(lx):
    if lx.tok[0] == "-":
        lx.advance()
        return neg(_parse_factor(lx))
    base = _parse_base(lx)
    if lx.tok[0] == "^":
        lx.advance()
        return pow_(base, _parse_factor(lx))
    return base


def _parse_base(lx):
    kind, val = lx.tok
    if kind == "number":
        lx.advance()
        return const(val)
    if kind == "ident":
        name = val
        pos = lx.tok_pos
        lx.advance()
        if lx.tok[0] == "(":
            if name not in FUNCTIONS:
                raise ParseError(f"unknown function {name!r}", *pos)
            lx.advance()
            args = [_parse_sum(lx)]
            while lx.tok[0] == ",":
                lx.advance()
                args.append(_parse_sum(lx))
            if lx.tok[0] != ")":
                lx.error("expected ')'")
            lx.advance()
            if len(args) != FUNCTIONS[name]:
                raise ParseError(
                    f"{name} expects {FUNCTIONS[name]} argument(s), got {len(args)}",
                    *pos)
            return call(name, *args)
        return sym(name)
    if kind == "(":
        lx.advance()
        e = _parse_sum(lx)
        if lx.tok[0] != ")":
            lx.error("expected ')'")
        lx.advance()
        return e
    lx.error(f"unexpected token {val!r}" if val else "unexpected end of input")


# ---------------------------------------------------------------------------
# printing

_PREC_SUM, _PREC_PROD, _PREC_NEG, _PREC_POW, _PREC_ATOM = 1, 2, 3, 4, 5


def _fmt_const(v):
    if v == int(v) and abs(v) < 1e16:
        return str(int(v))
    return repr(v)


def to_string(e: Expr) -> str:
    """Render with minimal parentheses; ``parse_expr`` round-trips it."""
    s, _ = _print(e)
    return s


def _paren(s, prec, minprec):
    return f"({s})" if prec < minprec else s


def _print(e):
    k = e.kind
    if k == CONST:
        if e.value < 0:
            return f"-{_fmt_const(-e.value)}", _PREC_NEG
        return _fmt_const(e.value), _PREC_ATOM
    if k == SYM:
        return e.name, _PREC_ATOM
    if k == _TIME_KIND:
        return "t", _PREC_ATOM
    if k == SUM:
        parts = []
        for i, c in enumerate(e.children):
            if c.kind == NEG and i > 0:
                s, p = _print(c.children[0])
                parts.append(" - " + _paren(s, p, _PREC_PROD + 1))
            elif c.kind == CONST and c.value < 0 and i > 0:
                parts.append(" - " + _fmt_const(-c.value))
            else:
                s, p = _print(c)
                parts.append((" + " if i > 0 else "") + _paren(s, p, _PREC_SUM))
        return "".join(parts), _PREC_SUM
    if k == PROD:
        parts = []
        for i, c in enumerate(e.children):
            s, p = _print(c)
            parts.append(("*" if i > 0 else "") + _paren(s, p, _PREC_PROD + (1 if i > 0 else 0)))
        return "".join(parts), _PREC_PROD
    if k == DIV:
        a, b = e.children
        sa, pa = _print(a)
        sb, pb = _print(b)
        return _paren(sa, pa, _PREC_PROD) + "/" + _paren(sb, pb, _PREC_PROD + 1), _PREC_PROD
    if k == NEG:
        s, p = _print(e.children[0])
        return "-" + _paren(s, p, _PREC_NEG), _PREC_NEG
    if k == POW:
        a, b = e.children
        sa, pa = _print(a)
        sb, pb = _print(b)
        return _paren(sa, pa, _PREC_POW + 1) + "^" + _paren(sb, pb, _PREC_POW), _PREC_POW
    if k == CALL:
        args = ", ".join(_print(c)[0] for c in e.children)
        return f"{e.name}({args})", _PREC_ATOM
    raise ExprError(f"unknown node kind {k!r}")
