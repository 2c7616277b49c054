"""Scalar expression trees over chart coordinates.

Every metric entry, map component and operator coefficient in the package is
an :class:`Expr`.  Expressions are immutable; they can be parsed from text,
evaluated on scalars or numpy arrays, and differentiated exactly.

Grammar (whitespace ignored)::

    expr   := term (('+' | '-') term)*
    term   := factor (('*' | '/') factor)*
    factor := '-' factor | power
    power  := atom ('^' factor)?
    atom   := number | ident | ident '(' expr ')' | '(' expr ')'

so ``-x^2`` is ``-(x^2)`` and ``2^3^2`` is ``2^(3^2)``.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Mapping, Union

import numpy as np

__all__ = [
    "Expr", "Const", "Var", "Unary", "Binary",
    "ParseError", "DomainError", "UnboundVariableError",
    "parse", "evaluate", "diff", "substitute", "free_variables",
    "as_expr", "FUNCTIONS", "ZERO", "ONE",
]

FUNCTIONS = ("exp", "log", "sin", "cos", "sqrt", "abs", "sign")

Number = Union[int, float]


class ParseError(ValueError):
    """Malformed expression text; ``offset`` is the byte offset of the problem."""

    def __init__(self, message: str, offset: int, source: str = ""):
        self.offset = offset
        self.source = source
        super().__init__(f"{message} at offset {offset}")


class DomainError(ArithmeticError):
    """Evaluation left the real domain of an operation (log(0), x/0, ...)."""


class UnboundVariableError(KeyError):
    pass


# --------------------------------------------------------------------------
# nodes
# --------------------------------------------------------------------------

class Expr:
    """Base class of expression nodes.

    Arithmetic operators build new trees (with constant folding), so
    ``Var("x") * 2 + 1`` is an expression.
    """

    __slots__ = ()

    def __add__(self, other):
        return add(self, as_expr(other))

    def __radd__(self, other):
        return add(as_expr(other), self)

    def __sub__(self, other):
        return sub(self, as_expr(other))

    def __rsub__(self, other):
        return sub(as_expr(other), self)

    def __mul__(self, other):
        return mul(self, as_expr(other))

    def __rmul__(self, other):
        return mul(as_expr(other), self)

    def __truediv__(self, other):
        return div(self, as_expr(other))

    def __rtruediv__(self, other):
        return div(as_expr(other), self)

    def __pow__(self, other):
        return power(self, as_expr(other))

    def __rpow__(self, other):
        return power(as_expr(other), self)

    def __neg__(self):
        return neg(self)

    def __str__(self):
        return to_string(self)

    def evaluate(self, bindings: Mapping[str, object], strict: bool = True):
        return evaluate(self, bindings, strict=strict)

    def diff(self, var: str) -> "Expr":
        return diff(self, var)

    @property
    def free_variables(self) -> frozenset:
        return free_variables(self)

    def is_constant(self) -> bool:
        return isinstance(self, Const)


@dataclass(frozen=True, eq=True, repr=False)
class Const(Expr):
    value: float

    def __repr__(self):
        return f"Const({self.value!r})"


@dataclass(frozen=True, eq=True, repr=False)
class Var(Expr):
    name: str

    def __repr__(self):
        return f"Var({self.name!r})"


@dataclass(frozen=True, eq=True, repr=False)
class Unary(Expr):
    op: str  # "neg" or a name in FUNCTIONS
    arg: Expr

    def __repr__(self):
        return f"{self.op.capitalize()}({self.arg!r})"


@dataclass(frozen=True, eq=True, repr=False)
class Binary(Expr):
    op: str  # one of + - * / ^
    left: Expr
    right: Expr

    def __repr__(self):
        name = {"+": "Add", "-": "Sub", "*": "Mul", "/": "Div", "^": "Pow"}[self.op]
        return f"{name}({self.left!r}, {self.right!r})"


ZERO = Const(0.0)
ONE = Const(1.0)


def as_expr(value) -> Expr:
    if isinstance(value, Expr):
        return value
    if isinstance(value, str):
        return parse(value)
    if isinstance(value, (int, float, np.floating, np.integer)):
        return Const(float(value))
    raise TypeError(f"cannot convert {type(value).__name__} to Expr")


# --------------------------------------------------------------------------
# smart constructors (constant folding only)
# --------------------------------------------------------------------------

def _is(e: Expr, v: float) -> bool:
    return isinstance(e, Const) and e.value == v


def add(a: Expr, b: Expr) -> Expr:
    if isinstance(a, Const) and isinstance(b, Const):
        return Const(a.value + b.value)
    if _is(a, 0.0):
        return b
    if _is(b, 0.0):
        return a
    return Binary("+", a, b)


def sub(a: Expr, b: Expr) -> Expr:
    if isinstance(a, Const) and isinstance(b, Const):
        return Const(a.value - b.value)
    if _is(b, 0.0):
        return a
    if _is(a, 0.0):
        return neg(b)
    return Binary("-", a, b)


def mul(a: Expr, b: Expr) -> Expr:
    if isinstance(a, Const) and isinstance(b, Const):
        return Const(a.value * b.value)
    if _is(a, 0.0) or _is(b, 0.0):
        return ZERO
    if _is(a, 1.0):
        return b
    if _is(b, 1.0):
        return a
    if _is(a, -1.0):
        return neg(b)
    if _is(b, -1.0):
        return neg(a)
    return Binary("*", a, b)


def div(a: Expr, b: Expr) -> Expr:
    if isinstance(a, Const) and isinstance(b, Const) and b.value != 0.0:
        return Const(a.value / b.value)
    if _is(b, 1.0):
        return a
    if _is(a, 0.0) and not _is(b, 0.0):
        return ZERO
    return Binary("/", a, b)


def power(a: Expr, b: Expr) -> Expr:
    if _is(b, 0.0):
        return ONE
    if _is(b, 1.0):
        return a
    if isinstance(a, Const) and isinstance(b, Const):
        try:
            return Const(_pow_scalar(a.value, b.value))
        except DomainError:
            pass
    return Binary("^", a, b)


def neg(a: Expr) -> Expr:
    if isinstance(a, Const):
        return Const(-a.value)
    if isinstance(a, Unary) and a.op == "neg":
        return a.arg
    return Unary("neg", a)


def func(name: str, a: Expr) -> Expr:
    if name not in FUNCTIONS:
        raise ValueError(f"unknown function {name!r}")
    if isinstance(a, Const):
        try:
            return Const(float(_apply_unary(name, np.float64(a.value), strict=True)))
        except DomainError:
            pass
    return Unary(name, a)


def _pow_scalar(a: float, b: float) -> float:
    if a < 0 and b != math.floor(b):
        raise DomainError(f"negative base {a} to non-integer power {b}")
    if a == 0 and b < 0:
        raise DomainError("zero to a negative power")
    return float(a ** b)


# --------------------------------------------------------------------------
# parsing
# --------------------------------------------------------------------------

_TOKEN = re.compile(
    r"\s*(?:(?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)"
    r"|(?P<ident>[A-Za-z_][A-Za-z0-9_]*)"
    r"|(?P<op>[-+*/^()]))"
)


def _tokenize(src: str):
    pos = 0
    tokens = []
    while pos < len(src):
        if src[pos].isspace():
            pos += 1
            continue
        m = _TOKEN.match(src, pos)
        if m is None or m.end() == pos:
            raise ParseError(f"unexpected character {src[pos]!r}", pos, src)
        kind = m.lastgroup
        start = m.start(kind)
        tokens.append((kind, m.group(kind), start))
        pos = m.end()
    tokens.append(("end", "", len(src)))
    return tokens


class _Parser:
    def __init__(self, src: str):
        self.src = src
        self.tokens = _tokenize(src)
        self.i = 0

    def peek(self):
        return self.tokens[self.i]

    def take(self):
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def expect(self, value):
        kind, text, pos = self.take()
        if text != value or kind == "end":
            found = "end of input" if kind == "end" else repr(text)
            raise ParseError(f"expected {value!r}, found {found}", pos, self.src)

    def parse(self) -> Expr:
        if self.peek()[0] == "end":
            raise ParseError("empty expression", 0, self.src)
        e = self.expr()
        kind, text, pos = self.peek()
        if kind != "end":
            raise ParseError(f"unexpected token {text!r}", pos, self.src)
        return e

    def expr(self) -> Expr:
        e = self.term()
        while self.peek()[1] in ("+", "-") and self.peek()[0] == "op":
            op = self.take()[1]
            rhs = self.term()
            e = add(e, rhs) if op == "+" else sub(e, rhs)
        return e

    def term(self) -> Expr:
        e = self.factor()
        while self.peek()[1] in ("*", "/") and self.peek()[0] == "op":
            op = self.take()[1]
            rhs = self.factor()
            e = mul(e, rhs) if op == "*" else div(e, rhs)
        return e

    def factor(self) -> Expr:
        if self.peek()[0] == "op" and self.peek()[1] == "-":
            self.take()
            return neg(self.factor())
        return self.power()

    def power(self) -> Expr:
        base = self.atom()
        if self.peek()[0] == "op" and self.peek()[1] == "^":
            self.take()
            return power(base, self.factor())
        return base

    def atom(self) -> Expr:
        kind, text, pos = self.take()
        if kind == "num":
            return Const(float(text))
        if kind == "ident":
            if self.peek()[1] == "(" and self.peek()[0] == "op":
                if text not in FUNCTIONS:
                    raise ParseError(f"unknown function {text!r}", pos, self.src)
                self.take()
                arg = self.expr()
                self.expect(")")
                return func(text, arg)
            if text in FUNCTIONS:
                raise ParseError(f"function {text!r} needs a parenthesized argument", pos, self.src)
            return Var(text)
        if kind == "op" and text == "(":
            e = self.expr()
            self.expect(")")
            return e
        found = "end of input" if kind == "end" else repr(text)
        raise ParseError(f"unexpected {found}", pos, self.src)


def parse(src: str) -> Expr:
    """Parse ``src`` into an expression tree.

    Raises
    ------
    ParseError
        On any syntax error or unknown function name; ``offset`` points at
        the offending token.
    """
    if not isinstance(src, str):
        raise TypeError("parse expects a string")
    return _Parser(src).parse()


# --------------------------------------------------------------------------
# printing
# --------------------------------------------------------------------------

_PREC = {"+": 1, "-": 1, "*": 2, "/": 2, "neg": 3, "^": 4}


def _prec(e: Expr) -> int:
    if isinstance(e, Binary):
        return _PREC[e.op]
    if isinstance(e, Unary) and e.op == "neg":
        return _PREC["neg"]
    if isinstance(e, Const) and e.value < 0:
        return _PREC["neg"]
    return 10


def _fmt_const(v: float) -> str:
    if v == int(v) and abs(v) < 1e15:
        s = str(int(v))
    else:
        s = repr(v)
    return s


def to_string(e: Expr) -> str:
    if isinstance(e, Const):
        return _fmt_const(e.value)
    if isinstance(e, Var):
        return e.name
    if isinstance(e, Unary):
        if e.op == "neg":
            inner = to_string(e.arg)
            return f"-({inner})" if _prec(e.arg) < _PREC["neg"] else f"-{inner}"
        return f"{e.op}({to_string(e.arg)})"
    p = _PREC[e.op]
    left, right = to_string(e.left), to_string(e.right)
    if e.op == "^":
        # the base must bind tighter than ^; the exponent may be another power
        if _prec(e.left) <= p:
            left = f"({left})"
        if _prec(e.right) < p:
            right = f"({right})"
        return f"{left}^{right}"
    if _prec(e.left) < p:
        left = f"({left})"
    if _prec(e.right) < p or (_prec(e.right) == p and e.op in ("-", "/")):
        right = f"({right})"
    return f"{left} {e.op} {right}"


# --------------------------------------------------------------------------
# evaluation
# --------------------------------------------------------------------------

def _fail(strict: bool, bad, message: str):
    if strict and np.any(bad):
        raise DomainError(message)


def _apply_unary(op: str, x, strict: bool):
    if op == "neg":
        return -x
    if op == "exp":
        return np.exp(x)
    if op == "log":
        _fail(strict, x <= 0, "log of a non-positive value")
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.log(x)
    if op == "sin":
        return np.sin(x)
    if op == "cos":
        return np.cos(x)
    if op == "sqrt":
        _fail(strict, x < 0, "sqrt of a negative value")
        with np.errstate(invalid="ignore"):
            return np.sqrt(x)
    if op == "abs":
        return np.abs(x)
    if op == "sign":
        return np.sign(x)
    raise ValueError(f"unknown unary op {op!r}")


def _apply_binary(op: str, a, b, strict: bool):
    if op == "+":
        return a + b
    if op == "-":
        return a - b
    if op == "*":
        return a * b
    if op == "/":
        _fail(strict, b == 0, "division by zero")
        with np.errstate(divide="ignore", invalid="ignore"):
            return a / b
    if op == "^":
        b_int = np.floor(b) == b
        _fail(strict, (a < 0) & ~b_int, "negative base raised to a non-integer power")
        _fail(strict, (a == 0) & (b < 0), "zero raised to a negative power")
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            return np.power(a, b)
    raise ValueError(f"unknown binary op {op!r}")


def _eval(e: Expr, b: Mapping[str, object], strict: bool):
    if isinstance(e, Const):
        return np.float64(e.value)
    if isinstance(e, Var):
        try:
            return np.asarray(b[e.name], dtype=float)
        except KeyError:
            raise UnboundVariableError(e.name) from None
    if isinstance(e, Unary):
        return _apply_unary(e.op, _eval(e.arg, b, strict), strict)
    if isinstance(e, Binary):
        return _apply_binary(e.op, _eval(e.left, b, strict), _eval(e.right, b, strict), strict)
    raise TypeError(f"not an expression node: {e!r}")


def evaluate(e: Expr, bindings: Mapping[str, object], strict: bool = True):
    """Evaluate ``e`` with variables taken from ``bindings``.

    Bindings may hold floats or numpy arrays (broadcast together).  With
    ``strict`` a domain violation anywhere raises :class:`DomainError`;
    otherwise the offending entries come back as nan/inf.
    """
    out = _eval(e, bindings, strict)
    if np.ndim(out) == 0:
        return float(out)
    return out


# --------------------------------------------------------------------------
# symbolic differentiation
# --------------------------------------------------------------------------

def free_variables(e: Expr) -> frozenset:
    if isinstance(e, Var):
        return frozenset((e.name,))
    if isinstance(e, Const):
        return frozenset()
    if isinstance(e, Unary):
        return free_variables(e.arg)
    return free_variables(e.left) | free_variables(e.right)


def diff(e: Expr, var: str) -> Expr:
    """Exact partial derivative of ``e`` with respect to ``var``.

    ``abs`` differentiates to ``sign`` (so abs'(0) = 0).
    """
    if isinstance(e, Const):
        return ZERO
    if isinstance(e, Var):
        return ONE if e.name == var else ZERO
    if var not in free_variables(e):
        return ZERO
    if isinstance(e, Unary):
        a = e.arg
        da = diff(a, var)
        if e.op == "neg":
            return neg(da)
        if e.op == "exp":
            return mul(e, da)
        if e.op == "log":
            return div(da, a)
        if e.op == "sin":
            return mul(func("cos", a), da)
        if e.op == "cos":
            return neg(mul(func("sin", a), da))
        if e.op == "sqrt":
            return div(da, mul(Const(2.0), e))
        if e.op == "abs":
            return mul(func("sign", a), da)
        if e.op == "sign":
            return ZERO
        raise ValueError(e.op)
    f, g = e.left, e.right
    df, dg = diff(f, var), diff(g, var)
    if e.op == "+":
        return add(df, dg)
    if e.op == "-":
        return sub(df, dg)
    if e.op == "*":
        return add(mul(df, g), mul(f, dg))
    if e.op == "/":
        return div(sub(mul(df, g), mul(f, dg)), power(g, Const(2.0)))
    # power
    if var not in free_variables(g):
        return mul(mul(g, power(f, sub(g, ONE))), df)
    if var not in free_variables(f):
        return mul(mul(e, func("log", f)), dg)
    return mul(e, add(mul(dg, func("log", f)), div(mul(g, df), f)))


def substitute(e: Expr, mapping: Mapping[str, object]) -> Expr:
    """Replace variables by expressions (simultaneously)."""
    repl = {k: as_expr(v) for k, v in mapping.items()}
    return _subst(e, repl)


def _subst(e: Expr, repl: Mapping[str, Expr]) -> Expr:
    if isinstance(e, Var):
        return repl.get(e.name, e)
    if isinstance(e, Const):
        return e
    if isinstance(e, Unary):
        a = _subst(e.arg, repl)
        return neg(a) if e.op == "neg" else func(e.op, a)
    left, right = _subst(e.left, repl), _subst(e.right, repl)
    return {"+": add, "-": sub, "*": mul, "/": div, "^": power}[e.op](left, right)
