"""Arithmetic expressions over ``x1..xd`` and ``t`` for command-line field input.

Grammar (lowest to highest precedence)::

    expr   := term (('+' | '-') term)*
    term   := unary (('*' | '/') unary)*
    unary  := '-' unary | power
    power  := atom ('^' unary)?          # right associative
    atom   := NUMBER | NAME | FUNC '(' expr ')' | '(' expr ')'

Evaluation works on scalars and on numpy arrays of points alike.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass

import numpy as np

FUNCTIONS = {
    "sin": np.sin,
    "cos": np.cos,
    "exp": np.exp,
    "sqrt": np.sqrt,
    "abs": np.abs,
}
CONSTANTS = {"pi": math.pi, "e": math.e}

_VAR = re.compile(r"x([1-9][0-9]*)\Z")
_TOKEN = re.compile(
    r"\s*(?:(?P<num>(?:[0-9]+\.?[0-9]*|\.[0-9]+)(?:[eE][+-]?[0-9]+)?)"
    r"|(?P<name>[A-Za-z_][A-Za-z_0-9]*)"
    r"|(?P<op>[-+*/^()]))"
)


class ParseError(ValueError):
    def __init__(self, message: str, offset: int, expected: frozenset[str] = frozenset()):
        self.offset = offset
        self.expected = expected
        detail = f" (expected one of: {', '.join(sorted(expected))})" if expected else ""
        super().__init__(f"{message} at offset {offset}{detail}")


class EvalError(ArithmeticError):
    pass


# --- tree ---------------------------------------------------------------


@dataclass(frozen=True)
class Num:
    value: float


@dataclass(frozen=True)
class Var:
    name: str  # "t" or "x<k>"


@dataclass(frozen=True)
class Neg:
    arg: "Node"


@dataclass(frozen=True)
class BinOp:
    op: str
    left: "Node"
    right: "Node"


@dataclass(frozen=True)
class Call:
    func: str
    arg: "Node"


Node = Num | Var | Neg | BinOp | Call


@dataclass(frozen=True)
class FieldExpr:
    """A parsed expression. Immutable; safe to share and evaluate concurrently."""

    root: Node
    text: str = ""

    @property
    def max_dim(self) -> int:
        """Largest spatial variable index referenced (0 if none)."""
        return _max_dim(self.root)

    def __call__(self, x, t=0.0):
        return evaluate(self, x, t)

    def __str__(self) -> str:
        return to_string(self.root)


def _max_dim(node: Node) -> int:
    if isinstance(node, Var):
        m = _VAR.match(node.name)
        return int(m.group(1)) if m else 0
    if isinstance(node, Neg):
        return _max_dim(node.arg)
    if isinstance(node, Call):
        return _max_dim(node.arg)
    if isinstance(node, BinOp):
        return max(_max_dim(node.left), _max_dim(node.right))
    return 0


# --- parser -------------------------------------------------------------


class _Parser:
    def __init__(self, text: str):
        self.text = text
        self.tokens: list[tuple[str, str, int]] = []
        pos = 0
        while pos < len(text):
            m = _TOKEN.match(text, pos)
            if m is None or m.end() == pos:
                if text[pos:].strip() == "":
                    break
                off = pos + (len(text[pos:]) - len(text[pos:].lstrip()))
                raise ParseError(f"unexpected character {text[off]!r}", off)
            kind = m.lastgroup
            start = m.start(kind)
            self.tokens.append((kind, m.group(kind), start))
            pos = m.end()
        self.tokens.append(("end", "", len(text)))
        self.i = 0

    def peek(self):
        return self.tokens[self.i]

    def advance(self):
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def expect(self, value: str):
        kind, val, off = self.peek()
        if val != value or kind != "op":
            raise ParseError(f"unexpected {_describe(kind, val)}", off, frozenset({value}))
        self.advance()

    def parse(self) -> Node:
        node = self.expr()
        kind, val, off = self.peek()
        if kind != "end":
            raise ParseError(
                f"unexpected {_describe(kind, val)}", off, frozenset({"+", "-", "*", "/", "^", "end"})
            )
        return node

    def expr(self) -> Node:
        node = self.term()
        while self.peek()[1] in ("+", "-") and self.peek()[0] == "op":
            op = self.advance()[1]
            node = BinOp(op, node, self.term())
        return node

    def term(self) -> Node:
        node = self.unary()
        while self.peek()[1] in ("*", "/") and self.peek()[0] == "op":
            op = self.advance()[1]
            node = BinOp(op, node, self.unary())
        return node

    def unary(self) -> Node:
        kind, val, _ = self.peek()
        if kind == "op" and val == "-":
            self.advance()
            return Neg(self.unary())
        return self.power()

    def power(self) -> Node:
        base = self.atom()
        kind, val, _ = self.peek()
        if kind == "op" and val == "^":
            self.advance()
            return BinOp("^", base, self.unary())
        return base

    def atom(self) -> Node:
        kind, val, off = self.advance()
        if kind == "num":
            return Num(float(val))
        if kind == "name":
            if val in FUNCTIONS:
                self.expect("(")
                arg = self.expr()
                self.expect(")")
                return Call(val, arg)
            if val in CONSTANTS:
                return Num(CONSTANTS[val])
            if val == "t" or _VAR.match(val):
                return Var(val)
            raise ParseError(f"unknown name {val!r}", off)
        if kind == "op" and val == "(":
            node = self.expr()
            self.expect(")")
            return node
        raise ParseError(
            f"unexpected {_describe(kind, val)}",
            off,
            frozenset({"number", "variable", "function", "(", "-"}),
        )


def _describe(kind: str, val: str) -> str:
    return "end of input" if kind == "end" else repr(val)


def parse(text: str) -> FieldExpr:
    """Parse ``text``; raises :class:`ParseError` with the byte offset on failure."""
    return FieldExpr(_Parser(text).parse(), text)


# --- printing -----------------------------------------------------------


def to_string(node: Node) -> str:
    """Fully parenthesised form; ``parse(to_string(e))`` rebuilds the same tree."""
    if isinstance(node, Num):
        return repr(node.value) if node.value >= 0 else f"({node.value!r})"
    if isinstance(node, Var):
        return node.name
    if isinstance(node, Neg):
        return f"(-{to_string(node.arg)})"
    if isinstance(node, Call):
        return f"{node.func}({to_string(node.arg)})"
    return f"({to_string(node.left)} {node.op} {to_string(node.right)})"


# --- evaluation ---------------------------------------------------------


def evaluate(e: FieldExpr | Node, x, t=0.0):
    """Evaluate at point(s) ``x`` (shape ``(d,)`` or ``(m, d)``) and time ``t``.

    Raises :class:`EvalError` on division by zero, square roots of negative
    numbers, non-real powers, or a variable beyond the point dimension.
    """
    root = e.root if isinstance(e, FieldExpr) else e
    x = np.asarray(x, dtype=float)
    with np.errstate(all="ignore"):
        out = _eval(root, x, t)
    if np.ndim(out) == 0 and x.ndim == 2:
        out = np.full(x.shape[0], float(out))
    return out


def _eval(node: Node, x: np.ndarray, t):
    if isinstance(node, Num):
        return node.value
    if isinstance(node, Var):
        if node.name == "t":
            return t
        k = int(node.name[1:])
        dim = x.shape[-1] if x.ndim else 1
        if k > dim:
            raise EvalError(f"variable {node.name} used with {dim}-dimensional point")
        return x[..., k - 1] if x.ndim else float(x)
    if isinstance(node, Neg):
        return -_eval(node.arg, x, t)
    if isinstance(node, Call):
        arg = _eval(node.arg, x, t)
        if node.func == "sqrt" and np.any(np.asarray(arg) < 0):
            raise EvalError("sqrt of a negative number")
        return FUNCTIONS[node.func](arg)
    a = _eval(node.left, x, t)
    b = _eval(node.right, x, t)
    if node.op == "+":
        return a + b
    if node.op == "-":
        return a - b
    if node.op == "*":
        return a * b
    if node.op == "/":
        if np.any(np.asarray(b) == 0):
            raise EvalError("division by zero")
        return a / b
    # '^'
    a_arr, b_arr = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    bad = (a_arr < 0) & (b_arr != np.round(b_arr))
    if np.any(bad):
        raise EvalError("negative base with non-integer exponent")
    if np.any((a_arr == 0) & (b_arr < 0)):
        raise EvalError("division by zero")
    return np.power(a_arr, b_arr) if (a_arr.ndim or b_arr.ndim) else float(a_arr**b_arr)
