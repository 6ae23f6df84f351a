"""Expression mini-language for drifts, diffusions, and test functions.

Grammar (whitespace-insensitive)::

    expr    := term (('+' | '-') term)*
    term    := factor (('*' | '/') factor)*
    factor  := unary ('^' integer)?
    unary   := '-'? primary
    primary := number | 't' | 'x' | func '(' expr ')' | '(' expr ')'
    func    := sin | cos | exp | log | sqrt | bump | bump_d<k>

``bump(u)`` is exp(-1/(1-u^2)) for |u| < 1 and exactly 0 elsewhere, the
smooth compactly supported mollifier.  ``bump_d<k>`` names its k-th
derivative; these appear when printing differentiated expressions and are
accepted back by the parser so printing round-trips.  Exponents must be
literal non-negative integers, which keeps symbolic differentiation closed
over the language.

Differentiation is symbolic rather than numeric because the residual checks
downstream measure O(1/n) signals and need derivative error far below that.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from functools import cached_property, lru_cache
from typing import Callable

import numpy as np

__all__ = [
    "ExprError",
    "ExprSyntaxError",
    "ExprDomainError",
    "Expr",
    "Const",
    "Var",
    "Neg",
    "Add",
    "Sub",
    "Mul",
    "Div",
    "Pow",
    "Call",
    "Bump",
    "parse",
    "as_expr",
    "derivative",
    "TestFunction",
]


class ExprError(ValueError):
    """Base error for the expression language."""


class ExprSyntaxError(ExprError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (offset {offset})")
        self.offset = offset


class ExprDomainError(ExprError):
    def __init__(self, message: str, source: str):
        super().__init__(f"{message} in '{source}'")
        self.source = source


# Printer precedence levels; unary minus binds tighter than '^' in this
# grammar ("-x^2" parses as (-x)^2), so Neg sits above Pow.
_P_ADD, _P_MUL, _P_POW, _P_NEG, _P_ATOM = 1, 2, 3, 4, 5

_VectorFn = Callable[[object, object], object]


class Expr:
    """Immutable expression tree over the variables t and x."""

    def __call__(self, t: float, x: float) -> float:
        return self._eval(float(t), float(x))

    def diff(self, var: str) -> "Expr":
        if var not in ("t", "x"):
            raise ExprError(f"unknown variable {var!r}")
        return self._diff(var)

    def vectorized(self) -> _VectorFn:
        """Compile to a numpy closure; domain faults surface as nan/inf."""
        return self._vector()

    def variables(self) -> frozenset[str]:
        return self._vars()

    def __str__(self) -> str:
        return self._src()[0]

    def __repr__(self) -> str:
        return f"{type(self).__name__}({self})"

    # subclass hooks
    def _eval(self, t: float, x: float) -> float:
        raise NotImplementedError

    def _diff(self, var: str) -> "Expr":
        raise NotImplementedError

    def _vector(self) -> _VectorFn:
        raise NotImplementedError

    def _vars(self) -> frozenset[str]:
        raise NotImplementedError

    def _src(self) -> tuple[str, int]:
        raise NotImplementedError

    def _child(self, node: "Expr", min_prec: int) -> str:
        text, prec = node._src()
        return f"({text})" if prec < min_prec else text


@dataclass(frozen=True, repr=False)
class Const(Expr):
    value: float

    def _eval(self, t, x):
        return self.value

    def _diff(self, var):
        return Const(0.0)

    def _vector(self):
        v = self.value
        return lambda t, x: v

    def _vars(self):
        return frozenset()

    def _src(self):
        if self.value < 0:
            return f"-{(-self.value)!r}", _P_NEG
        return repr(self.value), _P_ATOM


@dataclass(frozen=True, repr=False)
class Var(Expr):
    name: str

    def __post_init__(self):
        if self.name not in ("t", "x"):
            raise ExprError(f"unknown variable {self.name!r}")

    def _eval(self, t, x):
        return t if self.name == "t" else x

    def _diff(self, var):
        return Const(1.0 if var == self.name else 0.0)

    def _vector(self):
        if self.name == "t":
            return lambda t, x: t
        return lambda t, x: x

    def _vars(self):
        return frozenset((self.name,))

    def _src(self):
        return self.name, _P_ATOM


@dataclass(frozen=True, repr=False)
class Neg(Expr):
    arg: Expr

    def _eval(self, t, x):
        return -self.arg._eval(t, x)

    def _diff(self, var):
        return _neg(self.arg._diff(var))

    def _vector(self):
        f = self.arg._vector()
        return lambda t, x: -f(t, x)

    def _vars(self):
        return self.arg._vars()

    def _src(self):
        return f"-{self._child(self.arg, _P_ATOM)}", _P_NEG


@dataclass(frozen=True, repr=False)
class Add(Expr):
    left: Expr
    right: Expr

    def _eval(self, t, x):
        return self.left._eval(t, x) + self.right._eval(t, x)

    def _diff(self, var):
        return _add(self.left._diff(var), self.right._diff(var))

    def _vector(self):
        f, g = self.left._vector(), self.right._vector()
        return lambda t, x: f(t, x) + g(t, x)

    def _vars(self):
        return self.left._vars() | self.right._vars()

    def _src(self):
        return f"{self._child(self.left, _P_ADD)} + {self._child(self.right, _P_MUL)}", _P_ADD


@dataclass(frozen=True, repr=False)
class Sub(Expr):
    left: Expr
    right: Expr

    def _eval(self, t, x):
        return self.left._eval(t, x) - self.right._eval(t, x)

    def _diff(self, var):
        return _sub(self.left._diff(var), self.right._diff(var))

    def _vector(self):
        f, g = self.left._vector(), self.right._vector()
        return lambda t, x: f(t, x) - g(t, x)

    def _vars(self):
        return self.left._vars() | self.right._vars()

    def _src(self):
        return f"{self._child(self.left, _P_ADD)} - {self._child(self.right, _P_MUL)}", _P_ADD


@dataclass(frozen=True, repr=False)
class Mul(Expr):
    left: Expr
    right: Expr

    def _eval(self, t, x):
        return self.left._eval(t, x) * self.right._eval(t, x)

    def _diff(self, var):
        da, db = self.left._diff(var), self.right._diff(var)
        return _add(_mul(da, self.right), _mul(self.left, db))

    def _vector(self):
        f, g = self.left._vector(), self.right._vector()
        return lambda t, x: f(t, x) * g(t, x)

    def _vars(self):
        return self.left._vars() | self.right._vars()

    def _src(self):
        return f"{self._child(self.left, _P_MUL)}*{self._child(self.right, _P_POW)}", _P_MUL


@dataclass(frozen=True, repr=False)
class Div(Expr):
    left: Expr
    right: Expr

    def _eval(self, t, x):
        denom = self.right._eval(t, x)
        if denom == 0.0:
            raise ExprDomainError("division by zero", str(self))
        return self.left._eval(t, x) / denom

    def _diff(self, var):
        da, db = self.left._diff(var), self.right._diff(var)
        num = _sub(_mul(da, self.right), _mul(self.left, db))
        return _div(num, _pow(self.right, 2))

    def _vector(self):
        f, g = self.left._vector(), self.right._vector()
        return lambda t, x: f(t, x) / g(t, x)

    def _vars(self):
        return self.left._vars() | self.right._vars()

    def _src(self):
        return f"{self._child(self.left, _P_MUL)}/{self._child(self.right, _P_POW)}", _P_MUL


@dataclass(frozen=True, repr=False)
class Pow(Expr):
    base: Expr
    exponent: int

    def __post_init__(self):
        if not isinstance(self.exponent, int) or self.exponent < 0:
            raise ExprError("exponent must be a non-negative integer")

    def _eval(self, t, x):
        try:
            return self.base._eval(t, x) ** self.exponent
        except OverflowError:
            raise ExprDomainError("overflow", str(self)) from None

    def _diff(self, var):
        if self.exponent == 0:
            return Const(0.0)
        db = self.base._diff(var)
        return _mul(Const(float(self.exponent)), _mul(_pow(self.base, self.exponent - 1), db))

    def _vector(self):
        f, k = self.base._vector(), self.exponent
        return lambda t, x: f(t, x) ** k

    def _vars(self):
        return self.base._vars()

    def _src(self):
        return f"{self._child(self.base, _P_NEG)}^{self.exponent}", _P_POW


_FUNCTIONS = {
    "sin": (math.sin, np.sin),
    "cos": (math.cos, np.cos),
    "exp": (math.exp, np.exp),
    "log": (math.log, np.log),
    "sqrt": (math.sqrt, np.sqrt),
}


@dataclass(frozen=True, repr=False)
class Call(Expr):
    name: str
    arg: Expr

    def __post_init__(self):
        if self.name not in _FUNCTIONS:
            raise ExprError(f"unknown function {self.name!r}")

    def _eval(self, t, x):
        u = self.arg._eval(t, x)
        if self.name == "log" and u <= 0.0:
            raise ExprDomainError("log of a non-positive value", str(self))
        if self.name == "sqrt" and u < 0.0:
            raise ExprDomainError("sqrt of a negative value", str(self))
        try:
            return _FUNCTIONS[self.name][0](u)
        except OverflowError:
            raise ExprDomainError("overflow", str(self)) from None

    def _diff(self, var):
        u, du = self.arg, self.arg._diff(var)
        if self.name == "sin":
            outer = Call("cos", u)
        elif self.name == "cos":
            outer = _neg(Call("sin", u))
        elif self.name == "exp":
            outer = Call("exp", u)
        elif self.name == "log":
            return _div(du, u)
        else:  # sqrt
            return _div(du, _mul(Const(2.0), Call("sqrt", u)))
        return _mul(outer, du)

    def _vector(self):
        f, ufunc = self.arg._vector(), _FUNCTIONS[self.name][1]
        return lambda t, x: ufunc(f(t, x))

    def _vars(self):
        return self.arg._vars()

    def _src(self):
        return f"{self.name}({self.arg._src()[0]})", _P_ATOM


@lru_cache(maxsize=None)
def _bump_poly(order: int) -> tuple[int, ...]:
    """Integer coefficients P_k with bump^(k)(u) = bump(u) * P_k(u) / (1-u^2)^(2k).

    The recurrence follows from differentiating the quotient form:
    P_{k+1} = (1-u^2)^2 P_k' + 4k u (1-u^2) P_k - 2u P_k, with P_0 = 1.
    """
    if order == 0:
        return (1,)
    p = _bump_poly(order - 1)
    k = order - 1
    dp = tuple(c * i for i, c in enumerate(p))[1:] or (0,)
    # (1 - u^2)^2 = 1 - 2u^2 + u^4
    term1 = _poly_add(_poly_add(dp, _poly_shift(dp, 2, -2)), _poly_shift(dp, 4, 1))
    # 4k u (1 - u^2) = 4k u - 4k u^3
    term2 = _poly_add(_poly_shift(p, 1, 4 * k), _poly_shift(p, 3, -4 * k))
    term3 = _poly_shift(p, 1, -2)
    return _poly_add(_poly_add(term1, term2), term3)


def _poly_shift(p: tuple[int, ...], degree: int, scale: int) -> tuple[int, ...]:
    return (0,) * degree + tuple(c * scale for c in p)


def _poly_add(a: tuple[int, ...], b: tuple[int, ...]) -> tuple[int, ...]:
    size = max(len(a), len(b))
    return tuple(
        (a[i] if i < len(a) else 0) + (b[i] if i < len(b) else 0) for i in range(size)
    )


def _poly_eval(p: tuple[int, ...], u):
    acc = 0.0
    for c in reversed(p):
        acc = acc * u + c
    return acc


@dataclass(frozen=True, repr=False)
class Bump(Expr):
    """k-th derivative of the mollifier, exactly 0 for |arg| >= 1.

    Every derivative keeps the form bump(u) * rational(u); the rational
    blowup at u = +-1 is dominated by the exponential decay, so the guarded
    zero outside the open support is the correct continuous extension.
    """

    order: int
    arg: Expr

    def __post_init__(self):
        if not isinstance(self.order, int) or self.order < 0:
            raise ExprError("bump derivative order must be a non-negative integer")

    def _eval(self, t, x):
        u = self.arg._eval(t, x)
        if abs(u) >= 1.0:
            return 0.0
        w = 1.0 - u * u
        value = math.exp(-1.0 / w)
        if self.order:
            value *= _poly_eval(_bump_poly(self.order), u) / w ** (2 * self.order)
        return value

    def _diff(self, var):
        return _mul(Bump(self.order + 1, self.arg), self.arg._diff(var))

    def _vector(self):
        f, order = self.arg._vector(), self.order
        poly = _bump_poly(order)

        def run(t, x):
            u = np.asarray(f(t, x), dtype=np.float64)
            inside = np.abs(u) < 1.0
            w = np.where(inside, 1.0 - u * u, 1.0)
            value = np.exp(-1.0 / w)
            if order:
                value = value * _poly_eval(poly, u) / w ** (2 * order)
            return np.where(inside, value, 0.0)

        return run

    def _vars(self):
        return self.arg._vars()

    def _src(self):
        name = "bump" if self.order == 0 else f"bump_d{self.order}"
        return f"{name}({self.arg._src()[0]})", _P_ATOM


# ----------------------------------------------------------------------
# smart constructors: fold additive/multiplicative identities so that
# differentiated expressions stay compact


def _is_const(e: Expr, value: float) -> bool:
    return isinstance(e, Const) and e.value == value


def _add(a: Expr, b: Expr) -> Expr:
    if _is_const(a, 0.0):
        return b
    if _is_const(b, 0.0):
        return a
    if isinstance(a, Const) and isinstance(b, Const):
        return Const(a.value + b.value)
    return Add(a, b)


def _sub(a: Expr, b: Expr) -> Expr:
    if _is_const(b, 0.0):
        return a
    if _is_const(a, 0.0):
        return _neg(b)
    if isinstance(a, Const) and isinstance(b, Const):
        return Const(a.value - b.value)
    return Sub(a, b)


def _mul(a: Expr, b: Expr) -> Expr:
    if _is_const(a, 0.0) or _is_const(b, 0.0):
        return Const(0.0)
    if _is_const(a, 1.0):
        return b
    if _is_const(b, 1.0):
        return a
    if isinstance(a, Const) and isinstance(b, Const):
        return Const(a.value * b.value)
    return Mul(a, b)


def _div(a: Expr, b: Expr) -> Expr:
    if _is_const(a, 0.0):
        return Const(0.0)
    if _is_const(b, 1.0):
        return a
    return Div(a, b)


def _neg(a: Expr) -> Expr:
    if isinstance(a, Const):
        return Const(-a.value)
    if isinstance(a, Neg):
        return a.arg
    return Neg(a)


def _pow(base: Expr, exponent: int) -> Expr:
    if exponent == 0:
        return Const(1.0)
    if exponent == 1:
        return base
    return Pow(base, exponent)


def derivative(e: Expr, var: str) -> Expr:
    """Symbolic partial derivative of e with respect to 't' or 'x'."""
    return e.diff(var)


# ----------------------------------------------------------------------
# parser

_NUM_RE = re.compile(r"(\d+\.\d*|\.\d+|\d+)([eE][+-]?\d+)?")
_NAME_RE = re.compile(r"[A-Za-z_][A-Za-z_0-9]*")
_BUMP_D_RE = re.compile(r"bump_d(\d+)$")


def _tokenize(source: str) -> list[tuple[str, str, int]]:
    tokens = []
    pos = 0
    while pos < len(source):
        ch = source[pos]
        if ch.isspace():
            pos += 1
            continue
        m = _NUM_RE.match(source, pos)
        if m:
            tokens.append(("num", m.group(0), pos))
            pos = m.end()
            continue
        m = _NAME_RE.match(source, pos)
        if m:
            tokens.append(("name", m.group(0), pos))
            pos = m.end()
            continue
        if ch in "+-*/^()":
            tokens.append(("op", ch, pos))
            pos += 1
            continue
        raise ExprSyntaxError(f"unexpected character {ch!r}", pos)
    tokens.append(("end", "", len(source)))
    return tokens


class _Parser:
    def __init__(self, source: str):
        self.source = source
        self.tokens = _tokenize(source)
        self.pos = 0

    def peek(self) -> tuple[str, str, int]:
        return self.tokens[self.pos]

    def advance(self) -> tuple[str, str, int]:
        tok = self.tokens[self.pos]
        self.pos += 1
        return tok

    def accept_op(self, *ops: str) -> str | None:
        kind, text, _ = self.peek()
        if kind == "op" and text in ops:
            self.advance()
            return text
        return None

    def expect_op(self, op: str) -> None:
        kind, text, offset = self.peek()
        if kind != "op" or text != op:
            raise ExprSyntaxError(f"expected {op!r}", offset)
        self.advance()

    def parse(self) -> Expr:
        e = self.expr()
        kind, text, offset = self.peek()
        if kind != "end":
            raise ExprSyntaxError(f"unexpected token {text!r}", offset)
        return e

    def expr(self) -> Expr:
        node = self.term()
        while True:
            op = self.accept_op("+", "-")
            if op is None:
                return node
            rhs = self.term()
            node = Add(node, rhs) if op == "+" else Sub(node, rhs)

    def term(self) -> Expr:
        node = self.factor()
        while True:
            op = self.accept_op("*", "/")
            if op is None:
                return node
            rhs = self.factor()
            node = Mul(node, rhs) if op == "*" else Div(node, rhs)

    def factor(self) -> Expr:
        node = self.unary()
        if self.accept_op("^"):
            kind, text, offset = self.peek()
            if kind != "num" or "." in text or "e" in text or "E" in text:
                raise ExprSyntaxError("exponent must be a constant non-negative integer", offset)
            self.advance()
            node = Pow(node, int(text))
        return node

    def unary(self) -> Expr:
        if self.accept_op("-"):
            return Neg(self.primary())
        return self.primary()

    def primary(self) -> Expr:
        kind, text, offset = self.advance()
        if kind == "num":
            return Const(float(text))
        if kind == "op" and text == "(":
            node = self.expr()
            self.expect_op(")")
            return node
        if kind == "name":
            if text in ("t", "x"):
                return Var(text)
            if text in _FUNCTIONS or text == "bump" or _BUMP_D_RE.match(text):
                self.expect_op("(")
                arg = self.expr()
                self.expect_op(")")
                if text in _FUNCTIONS:
                    return Call(text, arg)
                m = _BUMP_D_RE.match(text)
                return Bump(int(m.group(1)) if m else 0, arg)
            raise ExprSyntaxError(f"unknown identifier {text!r}", offset)
        raise ExprSyntaxError(f"unexpected token {text!r}" if text else "unexpected end of input", offset)


def parse(source: str) -> Expr:
    """Parse an expression in the variables t and x."""
    return _Parser(source).parse()


def as_expr(value) -> Expr:
    """Coerce a string, number, or Expr to an Expr."""
    if isinstance(value, Expr):
        return value
    if isinstance(value, (int, float)):
        return Const(float(value))
    if isinstance(value, str):
        return parse(value)
    raise ExprError(f"cannot interpret {value!r} as an expression")


# ----------------------------------------------------------------------
# test functions

_UNBOUNDED = (-math.inf, math.inf)


def _affine(e: Expr, var: str):
    """(a, b) with e = a*var + b if e is affine in var alone, else None."""
    if isinstance(e, Const):
        return 0.0, e.value
    if isinstance(e, Var):
        return (1.0, 0.0) if e.name == var else None
    if isinstance(e, Neg):
        inner = _affine(e.arg, var)
        return None if inner is None else (-inner[0], -inner[1])
    if isinstance(e, (Add, Sub)):
        lhs, rhs = _affine(e.left, var), _affine(e.right, var)
        if lhs is None or rhs is None:
            return None
        sign = 1.0 if isinstance(e, Add) else -1.0
        return lhs[0] + sign * rhs[0], lhs[1] + sign * rhs[1]
    if isinstance(e, Mul):
        for const_side, other in ((e.left, e.right), (e.right, e.left)):
            if not const_side._vars():
                inner = _affine(other, var)
                if inner is None:
                    return None
                c = const_side._eval(0.0, 0.0)
                return c * inner[0], c * inner[1]
        return None
    if isinstance(e, Div):
        if e.right._vars():
            return None
        inner = _affine(e.left, var)
        if inner is None:
            return None
        c = e.right._eval(0.0, 0.0)
        if c == 0.0:
            return None
        return inner[0] / c, inner[1] / c
    return None


def _product_factors(e: Expr) -> list[Expr]:
    if isinstance(e, Mul):
        return _product_factors(e.left) + _product_factors(e.right)
    if isinstance(e, Neg):
        return [Const(-1.0)] + _product_factors(e.arg)
    return [e]


def _intersect(lo_hi, other):
    return max(lo_hi[0], other[0]), min(lo_hi[1], other[1])


@dataclass(frozen=True)
class TestFunction:
    """A smooth compactly supported function of (t, x) with stored derivatives.

    Built as a product of bump factors with affine arguments (optionally
    times extra smooth factors), so the function and the stored partial
    derivatives all evaluate to exactly 0 outside the declared support
    rectangle, including on its boundary.
    """

    __test__ = False  # not a pytest class despite the name

    expr: Expr
    d_t: Expr
    d_x: Expr
    d_xx: Expr
    t_support: tuple[float, float]
    x_support: tuple[float, float]
    label: str = ""

    @classmethod
    def from_bumps(
        cls,
        x_center: float = 0.0,
        x_width: float = 1.0,
        t_center: float | None = None,
        t_width: float | None = None,
        extra=None,
        label: str = "",
    ) -> "TestFunction":
        """Product of axis bumps bump((v - center) / width), one per given axis."""
        factors: list[Expr] = []
        t_support = _UNBOUNDED
        if t_center is not None:
            if t_width is None or t_width <= 0:
                raise ExprError("t_width must be positive when t_center is given")
            factors.append(Bump(0, _div(_sub(Var("t"), Const(float(t_center))), Const(float(t_width)))))
            t_support = (t_center - t_width, t_center + t_width)
        if x_width <= 0:
            raise ExprError("x_width must be positive")
        factors.append(Bump(0, _div(_sub(Var("x"), Const(float(x_center))), Const(float(x_width)))))
        x_support = (x_center - x_width, x_center + x_width)
        if extra is not None:
            factors.append(as_expr(extra))
        e = factors[0]
        for factor in factors[1:]:
            e = Mul(e, factor)
        return cls._build(e, t_support, x_support, label)

    @classmethod
    def from_expression(cls, source, label: str = "") -> "TestFunction":
        """Infer the support rectangle from top-level bump factors.

        Each bump factor must have an argument affine in a single variable;
        the declared support is the intersection of |affine| < 1 regions per
        axis (unbounded on an axis with no bump factor, which is sound: the
        true support can only be smaller).
        """
        e = as_expr(source)
        t_support, x_support = _UNBOUNDED, _UNBOUNDED
        for factor in _product_factors(e):
            if not isinstance(factor, Bump):
                continue
            used = factor.arg._vars()
            if not used:
                continue
            if len(used) > 1:
                raise ExprError(
                    f"bump argument '{factor.arg}' mixes t and x; support inference needs one variable per factor"
                )
            var = next(iter(used))
            aff = _affine(factor.arg, var)
            if aff is None or aff[0] == 0.0:
                raise ExprError(
                    f"bump argument '{factor.arg}' must be affine in {var} to infer support"
                )
            a, b = aff
            lo, hi = sorted(((-1.0 - b) / a, (1.0 - b) / a))
            if var == "t":
                t_support = _intersect(t_support, (lo, hi))
            else:
                x_support = _intersect(x_support, (lo, hi))
        return cls._build(e, t_support, x_support, label or str(e))

    @classmethod
    def _build(cls, e: Expr, t_support, x_support, label: str) -> "TestFunction":
        return cls(
            expr=e,
            d_t=e.diff("t"),
            d_x=e.diff("x"),
            d_xx=e.diff("x").diff("x"),
            t_support=t_support,
            x_support=x_support,
            label=label,
        )

    def __call__(self, t: float, x: float) -> float:
        return self.expr(t, x)

    def dt(self, t: float, x: float) -> float:
        return self.d_t(t, x)

    def dx(self, t: float, x: float) -> float:
        return self.d_x(t, x)

    def dxx(self, t: float, x: float) -> float:
        return self.d_xx(t, x)

    @cached_property
    def value_fn(self) -> _VectorFn:
        return self.expr.vectorized()

    @cached_property
    def dt_fn(self) -> _VectorFn:
        return self.d_t.vectorized()

    @cached_property
    def dx_fn(self) -> _VectorFn:
        return self.d_x.vectorized()

    @cached_property
    def dxx_fn(self) -> _VectorFn:
        return self.d_xx.vectorized()
