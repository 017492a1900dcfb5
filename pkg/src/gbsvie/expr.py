"""Small arithmetic expression language for generators and terminal families.

Grammar (standard precedence, ``^`` binds tightest and is right-associative)::

    expr    := term (('+' | '-') term)*
    term    := unary (('*' | '/') unary)*
    unary   := '-' unary | '+' unary | power
    power   := atom ('^' unary)?
    atom    := NUMBER | NAME | NAME '(' expr (',' expr)* ')' | '(' expr ')'

Evaluation is vectorised over numpy arrays with broadcasting, so a single
parsed expression can be evaluated on a whole grid at once.
"""
from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Mapping, Union

import numpy as np

VARIABLES = ("t", "s", "x", "y", "z")

_FUNCTIONS = {
    "exp": 1,
    "log": 1,
    "abs": 1,
    "sin": 1,
    "cos": 1,
    "sqrt": 1,
    "step": 1,
    "pos": 1,
    "neg": 1,
    "max": None,  # variadic, >= 2 args
    "min": None,
}

_PREC = {"+": 1, "-": 1, "*": 2, "/": 2, "^": 4}


class ExpressionError(ValueError):
    """Syntax or domain error. ``offset`` is the byte offset for syntax errors."""

    def __init__(self, message: str, offset: int | None = None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at offset {offset})"
        super().__init__(message)


@dataclass(frozen=True)
class Num:
    value: float


@dataclass(frozen=True)
class Var:
    name: str


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
    name: str
    args: tuple


Node = Union[Num, Var, Neg, BinOp, Call]


_TOKEN_RE = re.compile(
    r"\s*(?:(?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)|(?P<name>[A-Za-z_][A-Za-z0-9_]*)|(?P<op>[-+*/^(),]))"
)


def _tokenize(text: str):
    pos = 0
    tokens = []
    n = len(text)
    while pos < n:
        if text[pos].isspace():
            pos += 1
            continue
        m = _TOKEN_RE.match(text, pos)
        if m is None or m.end() == pos:
            raise ExpressionError(f"unexpected character {text[pos]!r}", _byte_offset(text, pos))
        kind = m.lastgroup
        start = m.start(kind)
        tokens.append((kind, m.group(kind), start))
        pos = m.end()
    tokens.append(("eof", "", n))
    return tokens


def _byte_offset(text: str, char_pos: int) -> int:
    return len(text[:char_pos].encode("utf-8"))


class _Parser:
    def __init__(self, text: str):
        self.text = text
        self.tokens = _tokenize(text)
        self.i = 0

    def peek(self):
        return self.tokens[self.i]

    def take(self):
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def error(self, msg, tok=None):
        tok = tok or self.peek()
        return ExpressionError(msg, _byte_offset(self.text, tok[2]))

    def expect(self, value):
        tok = self.take()
        if tok[1] != value or tok[0] == "eof":
            raise self.error(f"expected {value!r}", tok)
        return tok

    def parse(self) -> Node:
        node = self.expr()
        if self.peek()[0] != "eof":
            raise self.error(f"unexpected token {self.peek()[1]!r}")
        return node

    def expr(self):
        node = self.term()
        while self.peek()[0] == "op" and self.peek()[1] in "+-":
            op = self.take()[1]
            node = BinOp(op, node, self.term())
        return node

    def term(self):
        node = self.unary()
        while self.peek()[0] == "op" and self.peek()[1] in "*/":
            op = self.take()[1]
            node = BinOp(op, node, self.unary())
        return node

    def unary(self):
        tok = self.peek()
        if tok[0] == "op" and tok[1] == "-":
            self.take()
            return Neg(self.unary())
        if tok[0] == "op" and tok[1] == "+":
            self.take()
            return self.unary()
        return self.power()

    def power(self):
        base = self.atom()
        if self.peek()[0] == "op" and self.peek()[1] == "^":
            self.take()
            return BinOp("^", base, self.unary())
        return base

    def atom(self):
        tok = self.take()
        kind, text, _ = tok
        if kind == "num":
            return Num(float(text))
        if kind == "name":
            if self.peek()[1] == "(" and self.peek()[0] == "op":
                if text not in _FUNCTIONS:
                    raise self.error(f"unknown function {text!r}", tok)
                self.take()
                args = [self.expr()]
                while self.peek()[1] == "," and self.peek()[0] == "op":
                    self.take()
                    args.append(self.expr())
                self.expect(")")
                arity = _FUNCTIONS[text]
                if arity is None and len(args) < 2:
                    raise self.error(f"{text} needs at least 2 arguments", tok)
                if arity is not None and len(args) != arity:
                    raise self.error(f"{text} takes {arity} argument(s), got {len(args)}", tok)
                return Call(text, tuple(args))
            if text not in VARIABLES:
                raise self.error(f"unknown identifier {text!r}", tok)
            return Var(text)
        if kind == "op" and text == "(":
            node = self.expr()
            self.expect(")")
            return node
        if kind == "eof":
            raise self.error("unexpected end of input", tok)
        raise self.error(f"unexpected token {text!r}", tok)


def _fmt_num(v: float) -> str:
    r = repr(float(v))
    return r


def _to_text(node: Node, parent_prec: int = 0, right_of_pow: bool = False) -> str:
    if isinstance(node, Num):
        return _fmt_num(node.value)
    if isinstance(node, Var):
        return node.name
    if isinstance(node, Call):
        return f"{node.name}({', '.join(_to_text(a) for a in node.args)})"
    if isinstance(node, Neg):
        inner = "-" + _to_text(node.arg, 3)
        return f"({inner})" if parent_prec >= 3 else inner
    prec = _PREC[node.op]
    if node.op == "^":
        # left operand must be an atom; right side is a unary
        text = f"{_to_text(node.left, 5)}^{_to_text(node.right, 3)}"
    else:
        text = f"{_to_text(node.left, prec)} {node.op} {_to_text(node.right, prec + 1)}"
    return f"({text})" if prec < parent_prec else text


class Expression:
    """A parsed expression over the variables ``t, s, x, y, z``."""

    def __init__(self, text: str):
        self.source = text
        self.ast = _Parser(text).parse()
        self.variables = frozenset(_collect_vars(self.ast))

    @classmethod
    def from_ast(cls, ast: Node) -> "Expression":
        obj = cls.__new__(cls)
        obj.ast = ast
        obj.source = _to_text(ast)
        obj.variables = frozenset(_collect_vars(ast))
        return obj

    def __str__(self):
        return _to_text(self.ast)

    def __repr__(self):
        return f"Expression({str(self)!r})"

    def __eq__(self, other):
        return isinstance(other, Expression) and self.ast == other.ast

    def __hash__(self):
        return hash(self.ast)

    def depends_on(self, name: str) -> bool:
        return name in self.variables

    def __call__(self, **env) -> np.ndarray | float:
        return self.evaluate(env)

    def evaluate(self, env: Mapping[str, object]):
        """Evaluate with numpy broadcasting; unset variables evaluate to 0."""
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            out = _eval(self.ast, env)
        return out


def _collect_vars(node: Node):
    if isinstance(node, Var):
        yield node.name
    elif isinstance(node, Neg):
        yield from _collect_vars(node.arg)
    elif isinstance(node, BinOp):
        yield from _collect_vars(node.left)
        yield from _collect_vars(node.right)
    elif isinstance(node, Call):
        for a in node.args:
            yield from _collect_vars(a)


def _eval(node: Node, env):
    if isinstance(node, Num):
        return node.value
    if isinstance(node, Var):
        v = env.get(node.name, 0.0)
        return np.asarray(v, dtype=float) if not np.isscalar(v) else float(v)
    if isinstance(node, Neg):
        return -_eval(node.arg, env)
    if isinstance(node, BinOp):
        a = _eval(node.left, env)
        b = _eval(node.right, env)
        if node.op == "+":
            return a + b
        if node.op == "-":
            return a - b
        if node.op == "*":
            return a * b
        if node.op == "/":
            return np.true_divide(a, b)
        return np.power(a, b)
    args = [_eval(a, env) for a in node.args]
    name = node.name
    if name == "max":
        return _reduce(np.maximum, args)
    if name == "min":
        return _reduce(np.minimum, args)
    (u,) = args
    if name == "log":
        if np.any(np.asarray(u) <= 0):
            raise ExpressionError("log domain error: argument must be > 0")
        return np.log(u)
    if name == "sqrt":
        if np.any(np.asarray(u) < 0):
            raise ExpressionError("sqrt domain error: argument must be >= 0")
        return np.sqrt(u)
    if name == "exp":
        return np.exp(u)
    if name == "abs":
        return np.abs(u)
    if name == "sin":
        return np.sin(u)
    if name == "cos":
        return np.cos(u)
    if name == "step":
        return np.where(np.asarray(u) >= 0, 1.0, 0.0)
    if name == "pos":
        return np.maximum(u, 0.0)
    if name == "neg":
        return np.maximum(np.negative(u), 0.0)
    raise ExpressionError(f"unknown function {name!r}")  # pragma: no cover


def _reduce(fn, args):
    out = args[0]
    for a in args[1:]:
        out = fn(out, a)
    return out


def parse_expression(text: str) -> Expression:
    return Expression(text)
