"""Arithmetic formula parsing and evaluation for configuration text.

Hamiltonians, potentials and initial data are declared as small formula
strings.  The language is deliberately tiny: IEEE doubles, the variables
x, y, p, u, v, eps, the constant pi, operators + - * / ^ with the usual
precedence (^ binds tighter than unary minus, which binds tighter than
* /, which binds tighter than + -), and a fixed whitelist of functions:
sin, cos, exp, log, abs, sqrt and the two-argument min, max.

Expression trees are immutable and evaluation is pure, so expressions are
safe to evaluate concurrently.  Bindings may be floats or numpy arrays;
array bindings broadcast elementwise.  Domain violations (log of a
nonpositive number, division by zero, nonfinite intermediates) raise
EvalError instead of silently producing NaN.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Mapping, Union

import numpy as np

__all__ = [
    "Expr",
    "parse",
    "ExprError",
    "ParseError",
    "EvalError",
    "ALLOWED_VARIABLES",
]

ALLOWED_VARIABLES = ("x", "y", "p", "u", "v", "eps")

_ARITY = {"sin": 1, "cos": 1, "exp": 1, "log": 1, "abs": 1, "sqrt": 1,
          "min": 2, "max": 2}

_PREC_ADD = 10
_PREC_MUL = 20
_PREC_NEG = 30
_PREC_POW = 40
_PREC_ATOM = 100

Value = Union[float, np.ndarray]


class ExprError(ValueError):
    """Base class for formula errors."""


class ParseError(ExprError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at offset {offset})")
        self.offset = offset


class EvalError(ExprError):
    """Missing binding or numeric domain violation."""


def _finite_or_raise(val, what: str):
    if not np.all(np.isfinite(val)):
        raise EvalError(f"nonfinite result in '{what}'")
    return val


class Expr:
    """Immutable expression tree node."""

    def variables(self) -> frozenset:
        raise NotImplementedError

    def _eval(self, env):
        raise NotImplementedError

    def _source(self, parent_prec: int) -> str:
        raise NotImplementedError

    def evaluate(self, bindings: Mapping[str, Value] | None = None) -> Value:
        """Evaluate with the given variable bindings (floats or arrays)."""
        bindings = bindings or {}
        missing = self.variables() - set(bindings)
        if missing:
            raise EvalError(f"missing binding for {sorted(missing)}")
        env = {}
        for name, val in bindings.items():
            env[name] = np.asarray(val, dtype=float) if isinstance(val, np.ndarray) else float(val)
        with np.errstate(all="ignore"):
            out = self._eval(env)
        arr = np.asarray(out)
        if arr.ndim == 0:
            return float(arr)
        return arr

    def __str__(self) -> str:
        return self._source(0)


@dataclass(frozen=True)
class Num(Expr):
    value: float

    def variables(self):
        return frozenset()

    def _eval(self, env):
        return self.value

    def _source(self, parent_prec):
        return repr(self.value)


@dataclass(frozen=True)
class Const(Expr):
    name: str
    value: float

    def variables(self):
        return frozenset()

    def _eval(self, env):
        return self.value

    def _source(self, parent_prec):
        return self.name


@dataclass(frozen=True)
class Var(Expr):
    name: str

    def variables(self):
        return frozenset((self.name,))

    def _eval(self, env):
        return env[self.name]

    def _source(self, parent_prec):
        return self.name


@dataclass(frozen=True)
class Neg(Expr):
    arg: Expr

    def variables(self):
        return self.arg.variables()

    def _eval(self, env):
        return -self.arg._eval(env)

    def _source(self, parent_prec):
        inner = self.arg._source(_PREC_NEG)
        text = f"-{inner}"
        return f"({text})" if parent_prec > _PREC_NEG else text


@dataclass(frozen=True)
class BinOp(Expr):
    op: str
    left: Expr
    right: Expr

    def variables(self):
        return self.left.variables() | self.right.variables()

    def _eval(self, env):
        a = self.left._eval(env)
        b = self.right._eval(env)
        op = self.op
        if op == "+":
            return _finite_or_raise(a + b, "+")
        if op == "-":
            return _finite_or_raise(a - b, "-")
        if op == "*":
            return _finite_or_raise(a * b, "*")
        if op == "/":
            if np.any(b == 0):
                raise EvalError("division by zero")
            return _finite_or_raise(a / b, "/")
        if op == "^":
            return _finite_or_raise(np.power(a, b), "^")
        raise AssertionError(op)

    def _source(self, parent_prec):
        prec = _PREC_ADD if self.op in "+-" else (_PREC_MUL if self.op in "*/" else _PREC_POW)
        if self.op == "^":
            # right associative
            lhs = self.left._source(prec + 1)
            rhs = self.right._source(prec)
        else:
            lhs = self.left._source(prec)
            rhs = self.right._source(prec + 1)
        text = f"{lhs}{self.op}{rhs}"
        return f"({text})" if parent_prec > prec else text


@dataclass(frozen=True)
class Call(Expr):
    name: str
    args: tuple

    def variables(self):
        out = frozenset()
        for a in self.args:
            out |= a.variables()
        return out

    def _eval(self, env):
        vals = [a._eval(env) for a in self.args]
        name = self.name
        if name == "log":
            if np.any(vals[0] <= 0):
                raise EvalError("log of a nonpositive number")
            return np.log(vals[0])
        if name == "sqrt":
            if np.any(vals[0] < 0):
                raise EvalError("sqrt of a negative number")
            return np.sqrt(vals[0])
        if name == "sin":
            return np.sin(vals[0])
        if name == "cos":
            return np.cos(vals[0])
        if name == "exp":
            return _finite_or_raise(np.exp(vals[0]), "exp")
        if name == "abs":
            return np.abs(vals[0])
        if name == "min":
            return np.minimum(vals[0], vals[1])
        if name == "max":
            return np.maximum(vals[0], vals[1])
        raise AssertionError(name)

    def _source(self, parent_prec):
        inner = ",".join(a._source(0) for a in self.args)
        return f"{self.name}({inner})"


_TOKEN = re.compile(
    r"(?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)"
    r"|(?P<name>[A-Za-z_][A-Za-z_0-9]*)"
    r"|(?P<op>[-+*/^(),])"
)


def _tokenize(source: str):
    tokens = []
    pos = 0
    n = len(source)
    while pos < n:
        if source[pos].isspace():
            pos += 1
            continue
        m = _TOKEN.match(source, pos)
        if m is None:
            raise ParseError(f"unexpected character {source[pos]!r}", pos)
        if m.lastgroup == "num":
            tokens.append(("num", m.group(), pos))
        elif m.lastgroup == "name":
            tokens.append(("name", m.group(), pos))
        else:
            tokens.append((m.group(), m.group(), pos))
        pos = m.end()
    tokens.append(("end", "", n))
    return tokens


_LBP = {"+": _PREC_ADD, "-": _PREC_ADD, "*": _PREC_MUL, "/": _PREC_MUL, "^": _PREC_POW}


class _Parser:
    def __init__(self, source: str):
        self.source = source
        self.tokens = _tokenize(source)
        self.i = 0

    def peek(self):
        return self.tokens[self.i]

    def advance(self):
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def expect(self, kind: str):
        tok = self.advance()
        if tok[0] != kind:
            raise ParseError(f"expected {kind!r}, found {tok[1]!r}", tok[2])
        return tok

    def expression(self, rbp: int) -> Expr:
        left = self.nud(self.advance())
        while rbp < _LBP.get(self.peek()[0], 0):
            left = self.led(self.advance(), left)
        return left

    def nud(self, tok) -> Expr:
        kind, text, off = tok
        if kind == "num":
            return Num(float(text))
        if kind == "name":
            if text == "pi":
                return Const("pi", math.pi)
            if text in _ARITY:
                self.expect("(")
                args = [self.expression(0)]
                while self.peek()[0] == ",":
                    self.advance()
                    args.append(self.expression(0))
                self.expect(")")
                if len(args) != _ARITY[text]:
                    raise ParseError(
                        f"{text} expects {_ARITY[text]} argument(s), got {len(args)}", off)
                return Call(text, tuple(args))
            if text in ALLOWED_VARIABLES:
                return Var(text)
            raise ParseError(f"unknown identifier {text!r}", off)
        if kind == "(":
            inner = self.expression(0)
            self.expect(")")
            return inner
        if kind == "-":
            return Neg(self.expression(_PREC_NEG))
        raise ParseError(f"unexpected token {text!r}", off)

    def led(self, tok, left: Expr) -> Expr:
        kind, _, _ = tok
        if kind == "^":
            return BinOp("^", left, self.expression(_PREC_POW - 1))
        return BinOp(kind, left, self.expression(_LBP[kind]))


def parse(source: str) -> Expr:
    """Parse a formula string into an immutable expression tree."""
    parser = _Parser(source)
    tree = parser.expression(0)
    tok = parser.peek()
    if tok[0] != "end":
        raise ParseError(f"unexpected token {tok[1]!r}", tok[2])
    return tree
