"""A minimal arithmetic expression language for custom family specs.

Grammar::

    expr   := term (('+' | '-') term)*
    term   := unary (('*' | '/') unary)*
    unary  := ('-' | '+') unary | atom
    atom   := NUMBER | NAME | NAME '(' expr (',' expr)* ')' | '(' expr ')'

Functions: ``exp``, ``log``, ``pow``, ``sqrt``, ``sin``, ``cos``, ``lgamma``.  Constants:
``pi``.  Any other name must be one of the declared variables (``x`` by
default).  Expressions compile to closures that broadcast over numpy arrays.
"""

from __future__ import annotations

import math
import re
from typing import Callable, Mapping

import numpy as np
from scipy.special import gammaln

from .errors import FamilyConstructionError

_TOKEN = re.compile(
    r"\s*(?:(?P<num>\d+\.?\d*(?:[eE][-+]?\d+)?|\.\d+(?:[eE][-+]?\d+)?)"
    r"|(?P<name>[A-Za-z_][A-Za-z_0-9]*)|(?P<op>[-+*/(),]))"
)

_FUNCTIONS: dict[str, tuple[int, Callable]] = {
    "exp": (1, np.exp),
    "log": (1, np.log),
    "sqrt": (1, np.sqrt),
    "sin": (1, np.sin),
    "cos": (1, np.cos),
    "lgamma": (1, gammaln),
    "pow": (2, np.power),
}
_CONSTANTS = {"pi": math.pi}


def _tokenize(text: str) -> list[tuple[str, str]]:
    tokens = []
    pos = 0
    text = text.rstrip()
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if m is None or m.end() == pos:
            raise FamilyConstructionError(
                f"unexpected character {text[pos]!r} at offset {pos} in {text!r}")
        kind = m.lastgroup
        tokens.append((kind, m.group(kind)))
        pos = m.end()
    return tokens


class _Parser:
    def __init__(self, text: str, variables: tuple[str, ...]):
        self.text = text
        self.tokens = _tokenize(text)
        self.pos = 0
        self.variables = variables

    def peek(self):
        return self.tokens[self.pos] if self.pos < len(self.tokens) else (None, None)

    def take(self, value=None):
        tok = self.peek()
        if tok[0] is None or (value is not None and tok[1] != value):
            want = value if value is not None else "a token"
            raise FamilyConstructionError(f"expected {want} in {self.text!r}")
        self.pos += 1
        return tok

    def parse(self):
        node = self.expr()
        if self.pos != len(self.tokens):
            raise FamilyConstructionError(
                f"trailing input {self.tokens[self.pos][1]!r} in {self.text!r}")
        return node

    def expr(self):
        node = self.term()
        while self.peek()[1] in ("+", "-"):
            op = self.take()[1]
            rhs = self.term()
            node = (op, node, rhs)
        return node

    def term(self):
        node = self.unary()
        while self.peek()[1] in ("*", "/"):
            op = self.take()[1]
            rhs = self.unary()
            node = (op, node, rhs)
        return node

    def unary(self):
        if self.peek()[1] == "-":
            self.take()
            return ("neg", self.unary())
        if self.peek()[1] == "+":
            self.take()
            return self.unary()
        return self.atom()

    def atom(self):
        kind, value = self.take()
        if kind == "num":
            return ("const", float(value))
        if kind == "name":
            if self.peek()[1] == "(":
                if value not in _FUNCTIONS:
                    raise FamilyConstructionError(f"unknown function {value!r} in {self.text!r}")
                self.take("(")
                args = [self.expr()]
                while self.peek()[1] == ",":
                    self.take(",")
                    args.append(self.expr())
                self.take(")")
                arity = _FUNCTIONS[value][0]
                if len(args) != arity:
                    raise FamilyConstructionError(
                        f"{value} takes {arity} argument(s), got {len(args)} in {self.text!r}")
                return ("call", value, args)
            if value in _CONSTANTS:
                return ("const", _CONSTANTS[value])
            if value in self.variables:
                return ("var", value)
            raise FamilyConstructionError(f"unknown name {value!r} in {self.text!r}")
        if value == "(":
            node = self.expr()
            self.take(")")
            return node
        raise FamilyConstructionError(f"unexpected {value!r} in {self.text!r}")


def _build(node) -> Callable[[Mapping[str, np.ndarray]], np.ndarray]:
    tag = node[0]
    if tag == "const":
        c = node[1]
        return lambda env: c
    if tag == "var":
        name = node[1]
        return lambda env: env[name]
    if tag == "neg":
        inner = _build(node[1])
        return lambda env: -inner(env)
    if tag == "call":
        fn = _FUNCTIONS[node[1]][1]
        args = [_build(a) for a in node[2]]
        if len(args) == 1:
            a0 = args[0]
            return lambda env: fn(a0(env))
        a0, a1 = args
        return lambda env: fn(a0(env), a1(env))
    lhs, rhs = _build(node[1]), _build(node[2])
    if tag == "+":
        return lambda env: lhs(env) + rhs(env)
    if tag == "-":
        return lambda env: lhs(env) - rhs(env)
    if tag == "*":
        return lambda env: lhs(env) * rhs(env)
    return lambda env: lhs(env) / rhs(env)


class Expression:
    """A compiled expression; call with keyword variables or one positional."""

    def __init__(self, source: str, variables: tuple[str, ...] = ("x",)):
        if not isinstance(source, str):
            raise FamilyConstructionError(f"expression must be a string, got {source!r}")
        self.source = source
        self.variables = tuple(variables)
        self._fn = _build(_Parser(source, self.variables).parse())

    def __call__(self, *args, **kwargs) -> np.ndarray:
        if args:
            if len(args) != len(self.variables):
                raise TypeError(f"expected {len(self.variables)} positional value(s)")
            kwargs = dict(zip(self.variables, args))
        env = {k: np.asarray(v, dtype=float) for k, v in kwargs.items()}
        shape = np.broadcast_shapes(*(np.shape(v) for v in env.values())) if env else ()
        with np.errstate(all="ignore"):
            out = self._fn(env)
        return np.broadcast_to(np.asarray(out, dtype=float), shape).copy() if shape else np.asarray(out, dtype=float)

    def __repr__(self) -> str:
        return f"Expression({self.source!r})"


def compile_expression(source: str, variables=("x",)) -> Expression:
    return Expression(source, tuple(variables))
