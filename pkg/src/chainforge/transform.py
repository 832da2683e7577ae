"""Derived variables: a small arithmetic expression language over columns.

Expressions support ``+ - * / ^`` (power), unary minus, parentheses, the
functions ``log10 ln exp sqrt abs``, numeric literals, and column references.
A reference is either a bare identifier (``oh2``) or an arbitrary name in
backticks (``` `log(m_{\\chi})` ```), which is needed for column names that
collide with expression syntax. Precedence, tightest first: power, unary
minus, ``* /``, ``+ -``; power is right-associative, the rest bind left.

Evaluation is pure and element-wise. A result that is not finite (log of a
non-positive value, division by zero, overflow) aborts with the row offset
and the offending subexpression instead of writing NaN/Inf into a store.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Mapping, Union

import numpy as np

from .errors import EvaluationError, ExpressionError

FUNCTIONS = ("log10", "ln", "exp", "sqrt", "abs")

_BARE_NAME = re.compile(r"[A-Za-z_][A-Za-z0-9_]*\Z")


@dataclass(frozen=True)
class Num:
    value: float


@dataclass(frozen=True)
class Col:
    name: str


@dataclass(frozen=True)
class Neg:
    arg: "Expression"


@dataclass(frozen=True)
class BinOp:
    op: str  # one of + - * / ^
    left: "Expression"
    right: "Expression"


@dataclass(frozen=True)
class Call:
    func: str
    arg: "Expression"


Expression = Union[Num, Col, Neg, BinOp, Call]


def column_names(expr: Expression) -> set[str]:
    """All column names referenced anywhere in the expression."""
    if isinstance(expr, Col):
        return {expr.name}
    if isinstance(expr, Neg):
        return column_names(expr.arg)
    if isinstance(expr, Call):
        return column_names(expr.arg)
    if isinstance(expr, BinOp):
        return column_names(expr.left) | column_names(expr.right)
    return set()


def unparse(expr: Expression) -> str:
    """Expression back to source text (fully parenthesized)."""
    if isinstance(expr, Num):
        return format(expr.value, "g")
    if isinstance(expr, Col):
        if _BARE_NAME.match(expr.name) and expr.name not in FUNCTIONS:
            return expr.name
        return f"`{expr.name}`"
    if isinstance(expr, Neg):
        return f"-{unparse(expr.arg)}"
    if isinstance(expr, Call):
        return f"{expr.func}({unparse(expr.arg)})"
    return f"({unparse(expr.left)} {expr.op} {unparse(expr.right)})"


# -- tokenizer ----------------------------------------------------------------

_TOKEN = re.compile(r"""
    (?P<ws>\s+)
  | (?P<number>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)
  | (?P<name>[A-Za-z_][A-Za-z0-9_]*)
  | (?P<quoted>`[^`]*`)
  | (?P<op>[-+*/^()])
""", re.VERBOSE)


def _tokenize(source: str) -> list[tuple[str, str, int]]:
    tokens = []
    pos = 0
    while pos < len(source):
        m = _TOKEN.match(source, pos)
        if m is None:
            raise ExpressionError(
                f"unexpected character {source[pos]!r} at position {pos + 1}")
        kind = m.lastgroup
        if kind != "ws":
            tokens.append((kind, m.group(), pos + 1))
        pos = m.end()
    tokens.append(("end", "", len(source) + 1))
    return tokens


class _Parser:
    """Recursive descent over the token list."""

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

    def expect_op(self, op: str):
        kind, text, pos = self.peek()
        if kind != "op" or text != op:
            raise ExpressionError(
                f"expected {op!r} at position {pos}, got {text!r}"
                if kind != "end" else f"expected {op!r} at end of input")
        return self.advance()

    def parse(self) -> Expression:
        expr = self.sum()
        kind, text, pos = self.peek()
        if kind != "end":
            raise ExpressionError(f"unexpected {text!r} at position {pos}")
        return expr

    def sum(self) -> Expression:
        node = self.product()
        while self.peek()[:2] in (("op", "+"), ("op", "-")):
            op = self.advance()[1]
            node = BinOp(op, node, self.product())
        return node

    def product(self) -> Expression:
        node = self.unary()
        while self.peek()[:2] in (("op", "*"), ("op", "/")):
            op = self.advance()[1]
            node = BinOp(op, node, self.unary())
        return node

    def unary(self) -> Expression:
        if self.peek()[:2] == ("op", "-"):
            self.advance()
            return Neg(self.unary())
        return self.power()

    def power(self) -> Expression:
        base = self.atom()
        if self.peek()[:2] == ("op", "^"):
            self.advance()
            # right-associative; exponent may carry a unary minus (2^-3)
            return BinOp("^", base, self.unary())
        return base

    def atom(self) -> Expression:
        kind, text, pos = self.advance()
        if kind == "number":
            value = float(text)
            if not np.isfinite(value):
                raise ExpressionError(
                    f"literal {text!r} at position {pos} overflows a float")
            return Num(value)
        if kind == "quoted":
            return Col(text[1:-1])
        if kind == "name":
            if self.peek()[:2] == ("op", "("):
                if text not in FUNCTIONS:
                    raise ExpressionError(
                        f"unknown function {text!r} at position {pos}")
                self.advance()
                arg = self.sum()
                self.expect_op(")")
                return Call(text, arg)
            return Col(text)
        if kind == "op" and text == "(":
            expr = self.sum()
            self.expect_op(")")
            return expr
        if kind == "end":
            raise ExpressionError("unexpected end of input")
        raise ExpressionError(f"unexpected {text!r} at position {pos}")


def parse_expression(source: str) -> Expression:
    """Parse expression source; raises ExpressionError with the position."""
    return _Parser(source).parse()


# -- evaluation ---------------------------------------------------------------


def _fail(node: Expression, values: np.ndarray, what: str) -> None:
    bad = ~np.isfinite(np.atleast_1d(values))
    row = int(np.argmax(bad))
    raise EvaluationError(f"{what} at row {row} in {unparse(node)}")


def _check_finite(node: Expression, values: np.ndarray) -> np.ndarray:
    if not np.isfinite(values).all():
        _fail(node, values, "non-finite result")
    return values


def _eval(node: Expression, bindings: Mapping[str, np.ndarray]):
    if isinstance(node, Num):
        return node.value
    if isinstance(node, Col):
        try:
            return bindings[node.name]
        except KeyError:
            raise EvaluationError(f"unbound column {node.name!r}") from None
    if isinstance(node, Neg):
        return -_eval(node.arg, bindings)
    if isinstance(node, Call):
        arg = np.asarray(_eval(node.arg, bindings), dtype=np.float64)
        with np.errstate(all="ignore"):
            if node.func == "log10":
                if np.any(arg <= 0.0):
                    _fail(node, np.where(arg <= 0.0, np.nan, 0.0),
                          "log of non-positive value")
                return np.log10(arg)
            if node.func == "ln":
                if np.any(arg <= 0.0):
                    _fail(node, np.where(arg <= 0.0, np.nan, 0.0),
                          "log of non-positive value")
                return np.log(arg)
            if node.func == "exp":
                return _check_finite(node, np.exp(arg))
            if node.func == "sqrt":
                if np.any(arg < 0.0):
                    _fail(node, np.where(arg < 0.0, np.nan, 0.0),
                          "sqrt of negative value")
                return np.sqrt(arg)
            if node.func == "abs":
                return np.abs(arg)
        raise EvaluationError(f"unknown function {node.func!r}")
    # BinOp
    left = _eval(node.left, bindings)
    right = _eval(node.right, bindings)
    with np.errstate(all="ignore"):
        if node.op == "+":
            return _check_finite(node, np.add(left, right))
        if node.op == "-":
            return _check_finite(node, np.subtract(left, right))
        if node.op == "*":
            return _check_finite(node, np.multiply(left, right))
        if node.op == "/":
            denom = np.asarray(right, dtype=np.float64)
            if np.any(denom == 0.0):
                _fail(node, np.where(denom == 0.0, np.nan, 0.0),
                      "division by zero")
            return _check_finite(node, np.divide(left, right))
        if node.op == "^":
            return _check_finite(node, np.power(left, right))
    raise EvaluationError(f"unknown operator {node.op!r}")


def evaluate_expression(expr: Expression, bindings: Mapping[str, np.ndarray],
                        length: int | None = None) -> np.ndarray:
    """Evaluate element-wise over equal-length bound vectors.

    `length` is only needed for constant expressions that reference no
    columns. Raises EvaluationError naming the row offset and subexpression
    on any domain error.
    """
    sizes = {np.asarray(v).size for v in bindings.values()}
    if len(sizes) > 1:
        raise EvaluationError(f"bound vectors differ in length: {sorted(sizes)}")
    if sizes:
        n = sizes.pop()
    elif length is not None:
        n = length
    else:
        refs = column_names(expr)
        if refs:
            raise EvaluationError(f"no bindings supplied for columns {sorted(refs)}")
        raise EvaluationError("constant expression needs an explicit length")
    arrays = {k: np.asarray(v, dtype=np.float64) for k, v in bindings.items()}
    out = _eval(expr, arrays)
    out = np.asarray(out, dtype=np.float64)
    if out.ndim == 0:
        out = np.full(n, float(out))
    return out


def derive_column(store, name: str, expr: Union[Expression, str]):
    """Compute a derived column chunk by chunk and append it to the store.

    `expr` may be source text or a parsed expression. Memory use is
    O(chunk_rows x referenced columns). On any error (unknown column, domain
    error, duplicate name) the store is untouched; domain errors carry the
    global row index. Returns the extended store handle.
    """
    if isinstance(expr, str):
        source = expr
        expr = parse_expression(expr)
    else:
        source = unparse(expr)
    refs = sorted(column_names(expr))
    for ref in refs:
        if not store.has_column(ref):
            raise EvaluationError(f"expression references unknown column {ref!r}")

    def chunks():
        chunk_rows = store.chunk_rows
        for ci in range(store.n_chunks):
            bound = {ref: store.read_column_chunk(ref, ci) for ref in refs}
            n = min(chunk_rows, store.n_rows - ci * chunk_rows)
            try:
                yield evaluate_expression(expr, bound, length=n)
            except EvaluationError as exc:
                raise EvaluationError(
                    _globalize_row(str(exc), ci * chunk_rows)) from None

    return store.append_derived_column(name, chunks(), source_expr=source)


_ROW_RE = re.compile(r"at row (\d+)")


def _globalize_row(message: str, base: int) -> str:
    return _ROW_RE.sub(lambda m: f"at row {base + int(m.group(1))}", message, count=1)
