"""Flattening compiler from expression trees to register programs.

A :class:`Program` is a straight-line register machine: the first
``n_inputs`` registers are loaded from the caller-supplied environment
vector, the next block holds constants, and every instruction writes one
new register.  Programs are executed by the selected kernel backend
(compiled extension or pure Python), see :mod:`nlmefit.kernels`.
"""

from __future__ import annotations

import numpy as np

from . import expr as ex

__all__ = ["Program", "CompiledExpr", "CompileError",
           "compile_system", "compile_expr"]

OP_ADD = 0
OP_SUB = 1
OP_MUL = 2
OP_DIV = 3
OP_NEG = 4
OP_POW = 5
OP_EXP = 6
OP_LOG = 7
OP_SQRT = 8
OP_MIN = 9
OP_MAX = 10
OP_SELLE = 11  # regs[a] <= regs[b] ? regs[c] : regs[d]

_CALL_OPS = {"exp": OP_EXP, "log": OP_LOG, "sqrt": OP_SQRT,
             "min": OP_MIN, "max": OP_MAX}


class CompileError(ValueError):
    pass


class Program:
    """Compiled evaluation program over a fixed input symbol layout."""

    __slots__ = ("input_names", "n_inputs", "consts", "code", "out_regs",
                 "n_outputs")

    def __init__(self, input_names, consts, code, out_regs):
        self.input_names = tuple(input_names)
        self.n_inputs = len(self.input_names)
        self.consts = np.ascontiguousarray(consts, dtype=np.float64)
        self.code = np.ascontiguousarray(code, dtype=np.int32).reshape(-1, 5)
        self.out_regs = np.ascontiguousarray(out_regs, dtype=np.int32)
        self.n_outputs = len(self.out_regs)

    @property
    def n_instructions(self):
        return self.code.shape[0]

    def __call__(self, env):
        """Evaluate at a 1-D environment vector (length ``n_inputs``)."""
        from . import kernels
        env = np.ascontiguousarray(env, dtype=np.float64)
        if env.shape != (self.n_inputs,):
            raise CompileError(
                f"environment has shape {env.shape}, expected ({self.n_inputs},)")
        return kernels.eval_program(self.n_inputs, self.consts, self.code,
                                    self.out_regs, env)

    def eval_batch(self, env_rows):
        """Evaluate at each row of a (batch, n_inputs) environment matrix."""
        from . import kernels
        env_rows = np.ascontiguousarray(env_rows, dtype=np.float64)
        if env_rows.ndim != 2 or env_rows.shape[1] != self.n_inputs:
            raise CompileError(
                f"environment has shape {env_rows.shape}, expected (*, {self.n_inputs})")
        return kernels.eval_program_batch(self.n_inputs, self.consts,
                                          self.code, self.out_regs, env_rows)


class _Builder:
    def __init__(self, input_names):
        self.layout = {}
        for i, name in enumerate(input_names):
            if name in self.layout:
                raise CompileError(f"duplicate symbol {name!r} in layout")
            self.layout[name] = i
        self.n_inputs = len(self.layout)
        self.consts = []
        self.const_reg = {}
        self.code = []
        self.memo = {}

    def const_slot(self, v):
        v = float(v)
        reg = self.const_reg.get(v)
        if reg is None:
            reg = self.n_inputs + len(self.consts)
            self.consts.append(v)
            self.const_reg[v] = reg
        return reg

    def emit(self, op, a, b=0, c=0, d=0):
        self.code.append((op, a, b, c, d))
        return self.n_inputs + self._n_const_final + len(self.code) - 1

    def visit(self, e):
        got = self.memo.get(e)
        if got is not None:
            return got
        reg = self._visit(e)
        self.memo[e] = reg
        return reg

    def _visit(self, e):
        k = e.kind
        if k == "const":
            return self.const_slot(e.value)
        if k == "sym":
            try:
                return self.layout[e.name]
            except KeyError:
                raise CompileError(f"unbound symbol {e.name!r}") from None
        if k == "time":
            try:
                return self.layout["t"]
            except KeyError:
                raise CompileError("layout does not bind the time symbol 't'") from None
        if k == "sum":
            acc = None
            for c in e.children:
                if c.kind == "neg" and acc is not None:
                    acc = self.emit(OP_SUB, acc, self.visit(c.children[0]))
                else:
                    r = self.visit(c)
                    acc = r if acc is None else self.emit(OP_ADD, acc, r)
            return acc
        if k == "prod":
            acc = None
            for c in e.children:
                r = self.visit(c)
                acc = r if acc is None else self.emit(OP_MUL, acc, r)
            return acc
        if k == "div":
            return self.emit(OP_DIV, self.visit(e.children[0]),
                             self.visit(e.children[1]))
        if k == "neg":
            return self.emit(OP_NEG, self.visit(e.children[0]))
        if k == "pow":
            base, expo = e.children
            if expo.kind == "const":
                v = expo.value
                if v == 2.0:
                    r = self.visit(base)
                    return self.emit(OP_MUL, r, r)
                if v == 3.0:
                    r = self.visit(base)
                    r2 = self.emit(OP_MUL, r, r)
                    return self.emit(OP_MUL, r2, r)
                if v == 4.0:
                    r = self.visit(base)
                    r2 = self.emit(OP_MUL, r, r)
                    return self.emit(OP_MUL, r2, r2)
                if v == 0.5:
                    return self.emit(OP_SQRT, self.visit(base))
                if v == -1.0:
                    return self.emit(OP_DIV, self.const_slot(1.0),
                                     self.visit(base))
            return self.emit(OP_POW, self.visit(base), self.visit(expo))
        if k == "call":
            if e.name == "ifle":
                a, b, c, d = (self.visit(x) for x in e.children)
                return self.emit(OP_SELLE, a, b, c, d)
            op = _CALL_OPS.get(e.name)
            if op is None:
                raise CompileError(f"unknown function {e.name!r}")
            if len(e.children) == 1:
                return self.emit(op, self.visit(e.children[0]))
            return self.emit(op, self.visit(e.children[0]),
                             self.visit(e.children[1]))
        raise CompileError(f"unknown node kind {k!r}")


def compile_system(exprs, input_names) -> Program:
    """Compile a sequence of expressions into one program.

    Every symbol of every expression must appear in ``input_names``
    (include ``'t'`` when time occurs).  Output ordering follows ``exprs``.
    """
    exprs = [ex.simplify(e) for e in exprs]
    builder = _Builder(input_names)

    # two-phase: collect constants first so register numbering is final
    def collect(e):
        if e.kind == "const":
            builder.const_slot(e.value)
        for c in e.children:
            collect(c)
        if e.kind == "pow" and e.children[1].kind == "const" \
                and e.children[1].value == -1.0:
            builder.const_slot(1.0)

    for e in exprs:
        collect(e)
    builder._n_const_final = len(builder.consts)

    out_regs = [builder.visit(e) for e in exprs]
    return Program(input_names, np.asarray(builder.consts, dtype=np.float64),
                   np.asarray(builder.code, dtype=np.int32).reshape(-1, 5)
                   if builder.code else np.zeros((0, 5), dtype=np.int32),
                   np.asarray(out_regs, dtype=np.int32))


class CompiledExpr:
    """Single compiled expression; evaluation matches tree-walk evaluation."""

    __slots__ = ("program", "source")

    def __init__(self, e, input_names):
        self.source = e
        self.program = compile_system([e], input_names)

    def __call__(self, env):
        return float(self.program(np.asarray(env, dtype=np.float64))[0])

    def eval_batch(self, env_rows):
        return self.program.eval_batch(env_rows)[:, 0]


def compile_expr(e, input_names) -> CompiledExpr:
    return CompiledExpr(e, input_names)
