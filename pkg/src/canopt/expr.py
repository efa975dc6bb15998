"""Symbolic expression trees for integrands and endpoint functions.

The language is deliberately small: arithmetic (``+ - * / ^``), a fixed set
of function calls (``sin cos exp log tanh abs min max pow h``) and named
scalar variables.  ``h`` is the unit step with ``h(0) = 1``; it appears in
constraint rewrites and in impulse-response kernels.  Trees are immutable
and hashable, evaluation is pure, and printing produces text that reparses
to the identical tree.

Differentiation is exact.  Results are cleaned up only by constant folding
and 0/1 elimination, so generated terms stay close to their textbook shape;
there is no general simplifier.  Derivatives through ``abs``/``min``/``max``
(and ``h``) are refused because the downstream stationarity conditions need
classical derivatives.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Iterator, Mapping, Union

__all__ = [
    "Expr", "Const", "Var", "Neg", "BinOp", "Call",
    "ExprError", "ParseError", "NonsmoothError", "EvalError",
    "parse", "to_text", "evaluate", "diff", "free_vars", "substitute",
    "check_bound", "add", "sub", "mul", "div", "pow_", "neg", "call",
    "ZERO", "ONE", "FUNCTIONS",
]


class ExprError(Exception):
    """Base class for expression failures."""


class ParseError(ExprError):
    def __init__(self, message: str, line: int, column: int):
        super().__init__(f"line {line}, column {column}: {message}")
        self.line = line
        self.column = column


class NonsmoothError(ExprError):
    """Raised when a derivative would pass through a kinked function."""


class EvalError(ExprError):
    """Raised for unbound variables and floating domain errors."""


@dataclass(frozen=True)
class Const:
    value: float


@dataclass(frozen=True)
class Var:
    name: str


@dataclass(frozen=True)
class Neg:
    arg: "Expr"


@dataclass(frozen=True)
class BinOp:
    op: str  # one of + - * / ^
    left: "Expr"
    right: "Expr"


@dataclass(frozen=True)
class Call:
    fn: str
    args: tuple["Expr", ...]


Expr = Union[Const, Var, Neg, BinOp, Call]

FUNCTIONS: dict[str, int] = {
    "sin": 1, "cos": 1, "exp": 1, "log": 1, "tanh": 1, "abs": 1, "h": 1,
    "min": 2, "max": 2, "pow": 2,
}

ZERO = Const(0.0)
ONE = Const(1.0)


# --- construction helpers -------------------------------------------------
#
# Smart constructors used by diff() and by term assembly.  They fold
# constants and drop additive/multiplicative identities but never reorder
# operands, so printed output follows the construction order.

def _is_const(e: Expr, v: float | None = None) -> bool:
    return isinstance(e, Const) and (v is None or e.value == v)


def _const(v: float) -> Expr:
    # Negative literals are normalised to Neg(Const) so that every tree the
    # system produces is also producible by the parser (round-trip safety).
    if v < 0.0:
        return Neg(Const(-v))
    return Const(float(v))


def add(a: Expr, b: Expr) -> Expr:
    if _is_const(a, 0.0):
        return b
    if _is_const(b, 0.0):
        return a
    if isinstance(a, Const) and isinstance(b, Const):
        return _const(a.value + b.value)
    return BinOp("+", a, b)


def sub(a: Expr, b: Expr) -> Expr:
    if _is_const(b, 0.0):
        return a
    if _is_const(a, 0.0):
        return neg(b)
    if isinstance(a, Const) and isinstance(b, Const):
        return _const(a.value - b.value)
    return BinOp("-", a, b)


def mul(a: Expr, b: Expr) -> Expr:
    if _is_const(a, 0.0) or _is_const(b, 0.0):
        return ZERO
    if _is_const(a, 1.0):
        return b
    if _is_const(b, 1.0):
        return a
    if isinstance(a, Const) and isinstance(b, Const):
        return _const(a.value * b.value)
    return BinOp("*", a, b)


def div(a: Expr, b: Expr) -> Expr:
    if _is_const(a, 0.0) and not _is_const(b, 0.0):
        return ZERO
    if _is_const(b, 1.0):
        return a
    if isinstance(a, Const) and isinstance(b, Const) and b.value != 0.0:
        return _const(a.value / b.value)
    return BinOp("/", a, b)


def pow_(a: Expr, b: Expr) -> Expr:
    if _is_const(b, 1.0):
        return a
    if _is_const(b, 0.0):
        return ONE
    if isinstance(a, Const) and isinstance(b, Const):
        try:
            return _const(a.value ** b.value)
        except (OverflowError, ValueError, ZeroDivisionError):
            return BinOp("^", a, b)
    return BinOp("^", a, b)


def neg(a: Expr) -> Expr:
    if isinstance(a, Const):
        return _const(-a.value)
    if isinstance(a, Neg):
        return a.arg
    return Neg(a)


def call(fn: str, *args: Expr) -> Expr:
    if fn not in FUNCTIONS:
        raise ExprError(f"unknown function '{fn}'")
    if len(args) != FUNCTIONS[fn]:
        raise ExprError(f"{fn} expects {FUNCTIONS[fn]} argument(s)")
    if all(isinstance(a, Const) for a in args):
        try:
            return _const(_apply(fn, [a.value for a in args]))  # type: ignore[union-attr]
        except EvalError:
            pass
    return Call(fn, tuple(args))


# --- parsing --------------------------------------------------------------

_TOKEN_RE = re.compile(
    r"\s*(?:(?P<num>\d+(?:\.\d*)?(?:[eE][+-]?\d+)?|\.\d+(?:[eE][+-]?\d+)?)"
    r"|(?P<name>[A-Za-z_][A-Za-z0-9_]*)"
    r"|(?P<op>[-+*/^(),]))"
)


@dataclass(frozen=True)
class _Token:
    kind: str  # num | name | op | end
    text: str
    line: int
    column: int


def _tokenize(text: str) -> list[_Token]:
    tokens: list[_Token] = []
    for lineno, line in enumerate(text.splitlines() or [""], start=1):
        pos = 0
        while pos < len(line):
            m = _TOKEN_RE.match(line, pos)
            if m is None:
                stripped = line[pos:].lstrip()
                if not stripped:
                    break
                col = pos + (len(line[pos:]) - len(stripped)) + 1
                raise ParseError(f"unexpected character {stripped[0]!r}", lineno, col)
            col = m.start(m.lastgroup) + 1  # type: ignore[arg-type]
            tokens.append(_Token(m.lastgroup, m.group(m.lastgroup), lineno, col))  # type: ignore[arg-type]
            pos = m.end()
    last_line = text.count("\n") + 1
    tokens.append(_Token("end", "", last_line, len(text.splitlines()[-1]) + 1 if text.splitlines() else 1))
    return tokens


class _Parser:
    """Recursive descent over: expr > term > factor > power > atom.

    Precedence (tightest first): ^, unary -, * /, + -.  ^ associates to the
    right; everything else to the left.
    """

    def __init__(self, tokens: list[_Token]):
        self.tokens = tokens
        self.pos = 0

    def peek(self) -> _Token:
        return self.tokens[self.pos]

    def next(self) -> _Token:
        tok = self.tokens[self.pos]
        self.pos += 1
        return tok

    def expect_op(self, text: str) -> None:
        tok = self.next()
        if tok.kind != "op" or tok.text != text:
            found = repr(tok.text) if tok.text else "end of input"
            raise ParseError(f"expected '{text}', found {found}", tok.line, tok.column)

    def parse_expr(self) -> Expr:
        node = self.parse_term()
        while self.peek().kind == "op" and self.peek().text in "+-":
            op = self.next().text
            node = BinOp(op, node, self.parse_term())
        return node

    def parse_term(self) -> Expr:
        node = self.parse_factor()
        while self.peek().kind == "op" and self.peek().text in "*/":
            op = self.next().text
            node = BinOp(op, node, self.parse_factor())
        return node

    def parse_factor(self) -> Expr:
        if self.peek().kind == "op" and self.peek().text == "-":
            self.next()
            return Neg(self.parse_factor())
        return self.parse_power()

    def parse_power(self) -> Expr:
        base = self.parse_atom()
        if self.peek().kind == "op" and self.peek().text == "^":
            self.next()
            return BinOp("^", base, self.parse_factor())
        return base

    def parse_atom(self) -> Expr:
        tok = self.next()
        if tok.kind == "num":
            return Const(float(tok.text))
        if tok.kind == "name":
            if self.peek().kind == "op" and self.peek().text == "(":
                if tok.text not in FUNCTIONS:
                    raise ParseError(f"unknown function '{tok.text}'", tok.line, tok.column)
                self.next()
                args = [self.parse_expr()]
                while self.peek().kind == "op" and self.peek().text == ",":
                    self.next()
                    args.append(self.parse_expr())
                self.expect_op(")")
                if len(args) != FUNCTIONS[tok.text]:
                    raise ParseError(
                        f"{tok.text} expects {FUNCTIONS[tok.text]} argument(s), got {len(args)}",
                        tok.line, tok.column)
                return Call(tok.text, tuple(args))
            return Var(tok.text)
        if tok.kind == "op" and tok.text == "(":
            node = self.parse_expr()
            self.expect_op(")")
            return node
        found = tok.text if tok.text else "end of input"
        raise ParseError(f"expected a value, found {found!r}", tok.line, tok.column)


def parse(text: str) -> Expr:
    """Parse ``text`` into the unique expression tree it denotes."""
    parser = _Parser(_tokenize(text))
    node = parser.parse_expr()
    tail = parser.peek()
    if tail.kind != "end":
        raise ParseError(f"trailing input {tail.text!r}", tail.line, tail.column)
    return node


# --- printing -------------------------------------------------------------

_LEVEL = {"+": 1, "-": 1, "*": 2, "/": 2, "^": 4}
_NEG_LEVEL = 3  # binds tighter than * / but looser than ^


def _fmt_number(v: float) -> str:
    if v == int(v) and abs(v) < 1e16:
        return str(int(v))
    return repr(v)


def _print(e: Expr, parent_level: int, side: str) -> str:
    if isinstance(e, Const):
        return _fmt_number(e.value)
    if isinstance(e, Var):
        return e.name
    if isinstance(e, Call):
        return f"{e.fn}(" + ", ".join(_print(a, 0, "l") for a in e.args) + ")"
    if isinstance(e, Neg):
        inner = _print(e.arg, _NEG_LEVEL, "r")
        text = "-" + inner
        # Unary minus may stand alone as a factor; it needs parentheses only
        # under ^, under another infix as a right operand, or mid-product.
        if parent_level > _NEG_LEVEL or (parent_level > 0 and side == "r"):
            return "(" + text + ")"
        return text
    assert isinstance(e, BinOp)
    level = _LEVEL[e.op]
    if e.op == "^":
        left = _print(e.left, level + 1, "l")      # base must be atomic
        right = _print(e.right, level - 1, "r")    # right-assoc: allow ^ and unary -
        text = left + "^" + right
    else:
        left = _print(e.left, level, "l")
        right = _print(e.right, level, "r")    # left-assoc: same level on the right reparses wrong
        glue = e.op if e.op in "*/" else f" {e.op} "
        text = f"{left}{glue}{right}"
    if level < parent_level or (level == parent_level and side == "r"):
        return "(" + text + ")"
    return text


def to_text(e: Expr) -> str:
    """Render with minimal parentheses; parse(to_text(e)) == e."""
    return _print(e, 0, "l")


# --- evaluation -----------------------------------------------------------

def _apply(fn: str, args: list[float]) -> float:
    try:
        if fn == "sin":
            return math.sin(args[0])
        if fn == "cos":
            return math.cos(args[0])
        if fn == "exp":
            return math.exp(args[0])
        if fn == "tanh":
            return math.tanh(args[0])
        if fn == "abs":
            return abs(args[0])
        if fn == "h":
            return 1.0 if args[0] >= 0.0 else 0.0
        if fn == "log":
            if args[0] <= 0.0:
                raise EvalError(f"log of nonpositive value {args[0]!r}")
            return math.log(args[0])
        if fn == "min":
            return min(args)
        if fn == "max":
            return max(args)
        if fn == "pow":
            return args[0] ** args[1]
    except OverflowError as exc:
        raise EvalError(f"overflow in {fn}") from exc
    except ValueError as exc:
        raise EvalError(f"domain error in {fn}{tuple(args)}") from exc
    raise ExprError(f"unknown function '{fn}'")


def evaluate(e: Expr, env: Mapping[str, float]) -> float:
    """Evaluate at a point; raises EvalError for unbound names and domain errors."""
    if isinstance(e, Const):
        return e.value
    if isinstance(e, Var):
        try:
            return float(env[e.name])
        except KeyError:
            raise EvalError(f"unbound variable '{e.name}'") from None
    if isinstance(e, Neg):
        return -evaluate(e.arg, env)
    if isinstance(e, Call):
        return _apply(e.fn, [evaluate(a, env) for a in e.args])
    assert isinstance(e, BinOp)
    a = evaluate(e.left, env)
    b = evaluate(e.right, env)
    try:
        if e.op == "+":
            return a + b
        if e.op == "-":
            return a - b
        if e.op == "*":
            return a * b
        if e.op == "/":
            return a / b
        return a ** b
    except ZeroDivisionError as exc:
        raise EvalError(f"division by zero in '{to_text(e)}'") from exc
    except OverflowError as exc:
        raise EvalError(f"overflow in '{to_text(e)}'") from exc
    except ValueError as exc:
        raise EvalError(f"domain error in '{to_text(e)}'") from exc


# --- structure queries ----------------------------------------------------

def _walk(e: Expr) -> Iterator[Expr]:
    yield e
    if isinstance(e, Neg):
        yield from _walk(e.arg)
    elif isinstance(e, BinOp):
        yield from _walk(e.left)
        yield from _walk(e.right)
    elif isinstance(e, Call):
        for a in e.args:
            yield from _walk(a)


def free_vars(e: Expr) -> frozenset[str]:
    return frozenset(n.name for n in _walk(e) if isinstance(n, Var))


def check_bound(e: Expr, declared: frozenset[str] | set[str]) -> None:
    """Reject references to names outside ``declared``."""
    unknown = sorted(free_vars(e) - set(declared))
    if unknown:
        raise ExprError(f"undeclared name(s) {', '.join(unknown)} in '{to_text(e)}'")


def substitute(e: Expr, name: str, replacement: Expr) -> Expr:
    if isinstance(e, Var):
        return replacement if e.name == name else e
    if isinstance(e, (Const,)):
        return e
    if isinstance(e, Neg):
        return Neg(substitute(e.arg, name, replacement))
    if isinstance(e, BinOp):
        return BinOp(e.op, substitute(e.left, name, replacement),
                     substitute(e.right, name, replacement))
    assert isinstance(e, Call)
    return Call(e.fn, tuple(substitute(a, name, replacement) for a in e.args))


# --- differentiation ------------------------------------------------------

_SMOOTH_RULES = {"sin", "cos", "exp", "log", "tanh", "pow"}


def diff(e: Expr, var: str) -> Expr:
    """Exact derivative with respect to ``var``; refuses kinked functions."""
    if isinstance(e, Const):
        return ZERO
    if isinstance(e, Var):
        return ONE if e.name == var else ZERO
    if isinstance(e, Neg):
        return neg(diff(e.arg, var))
    if isinstance(e, Call):
        if e.fn in ("abs", "min", "max", "h"):
            if any(var in free_vars(a) for a in e.args):
                raise NonsmoothError(
                    f"cannot differentiate through {e.fn} in '{to_text(e)}' "
                    f"with respect to '{var}'")
            return ZERO
        a = e.args[0]
        da = diff(a, var)
        if e.fn == "sin":
            return mul(da, call("cos", a))
        if e.fn == "cos":
            return neg(mul(da, call("sin", a)))
        if e.fn == "exp":
            return mul(da, call("exp", a))
        if e.fn == "log":
            return div(da, a)
        if e.fn == "tanh":
            return mul(da, sub(ONE, pow_(call("tanh", a), Const(2.0))))
        if e.fn == "pow":
            return _diff_power(e.args[0], e.args[1], var)
        raise ExprError(f"unknown function '{e.fn}'")
    assert isinstance(e, BinOp)
    if e.op == "+":
        return add(diff(e.left, var), diff(e.right, var))
    if e.op == "-":
        return sub(diff(e.left, var), diff(e.right, var))
    if e.op == "*":
        return add(mul(diff(e.left, var), e.right), mul(e.left, diff(e.right, var)))
    if e.op == "/":
        return div(sub(mul(diff(e.left, var), e.right),
                       mul(e.left, diff(e.right, var))),
                   pow_(e.right, Const(2.0)))
    return _diff_power(e.left, e.right, var)


def _diff_power(base: Expr, expo: Expr, var: str) -> Expr:
    dbase = diff(base, var)
    dexpo = diff(expo, var)
    if _is_const(dexpo, 0.0):
        if isinstance(expo, Const):
            return mul(mul(expo, pow_(base, _const(expo.value - 1.0))), dbase)
        return mul(mul(expo, pow_(base, sub(expo, ONE))), dbase)
    if _is_const(dbase, 0.0):
        return mul(pow_(base, expo), mul(call("log", base), dexpo))
    # General u^v: u^v * (v' log u + v u'/u).
    return mul(pow_(base, expo),
               add(mul(dexpo, call("log", base)), div(mul(expo, dbase), base)))
