import math
import re
from dataclasses import dataclass, field
from enum import Enum, auto
from typing import Callable, Dict, FrozenSet, Iterable, List, Mapping, Optional, Union

import numpy as np

from errors import ExpressionEvalError, ExpressionParseError, Span


Value = Union[float, np.ndarray]

FUNCTIONS: Dict[str, Callable[[Value], Value]] = {
    'sin': np.sin,
    'cos': np.cos,
    'exp': np.exp,
    'sqrt': np.sqrt,
}

CONSTANTS: Dict[str, float] = {
    'pi': math.pi,
}

_PREC_SUM = 1
_PREC_PRODUCT = 2
_PREC_NEGATE = 3
_PREC_ATOM = 4

_NO_SPAN: Span = (0, 0)


class Expression:
    """Node of a parsed scalar expression"""

    precedence = _PREC_ATOM

    def evaluate(self, env: Mapping[str, Value]) -> Value:
        raise NotImplementedError

    def derivative(self, var: str) -> 'Expression':
        raise NotImplementedError

    def variables(self) -> FrozenSet[str]:
        raise NotImplementedError

    def is_constant(self) -> bool:
        return not self.variables()

    def __call__(self, **env: Value) -> Value:
        return self.evaluate(env)


@dataclass(frozen=True)
class Number(Expression):
    value: float
    span: Span = field(default=_NO_SPAN, compare=False, repr=False)

    def evaluate(self, env: Mapping[str, Value]) -> Value:
        return self.value

    def derivative(self, var: str) -> Expression:
        return Number(0.0)

    def variables(self) -> FrozenSet[str]:
        return frozenset()

    def __str__(self) -> str:
        text = repr(float(self.value))
        return f'({text})' if self.value < 0 else text


@dataclass(frozen=True)
class Name(Expression):
    ident: str
    span: Span = field(default=_NO_SPAN, compare=False, repr=False)

    def evaluate(self, env: Mapping[str, Value]) -> Value:
        if self.ident in CONSTANTS:
            return CONSTANTS[self.ident]
        try:
            return env[self.ident]
        except KeyError:
            raise ExpressionEvalError(f'Unbound variable {self.ident}',
                                      self.span) from None

    def derivative(self, var: str) -> Expression:
        return Number(1.0 if self.ident == var else 0.0)

    def variables(self) -> FrozenSet[str]:
        if self.ident in CONSTANTS:
            return frozenset()
        return frozenset([self.ident])

    def __str__(self) -> str:
        return self.ident


@dataclass(frozen=True)
class Negate(Expression):
    operand: Expression
    span: Span = field(default=_NO_SPAN, compare=False, repr=False)

    precedence = _PREC_NEGATE

    def evaluate(self, env: Mapping[str, Value]) -> Value:
        return -self.operand.evaluate(env)

    def derivative(self, var: str) -> Expression:
        return _neg(self.operand.derivative(var))

    def variables(self) -> FrozenSet[str]:
        return self.operand.variables()

    def __str__(self) -> str:
        return '-' + _wrap(self.operand, self.operand.precedence < _PREC_NEGATE)


@dataclass(frozen=True)
class BinaryOp(Expression):
    op: str
    left: Expression
    right: Expression
    span: Span = field(default=_NO_SPAN, compare=False, repr=False)

    @property
    def precedence(self) -> int:  # type: ignore[override]
        return _PREC_SUM if self.op in '+-' else _PREC_PRODUCT

    def evaluate(self, env: Mapping[str, Value]) -> Value:
        lhs = self.left.evaluate(env)
        rhs = self.right.evaluate(env)

        if self.op == '+':
            return lhs + rhs
        if self.op == '-':
            return lhs - rhs
        if self.op == '*':
            return lhs * rhs

        if np.any(np.asarray(rhs) == 0.0):
            raise ExpressionEvalError('Division by zero', self.span)
        return lhs / rhs

    def derivative(self, var: str) -> Expression:
        da = self.left.derivative(var)
        db = self.right.derivative(var)

        if self.op == '+':
            return _add(da, db)
        if self.op == '-':
            return _sub(da, db)
        if self.op == '*':
            return _add(_mul(da, self.right), _mul(self.left, db))

        numerator = _sub(_mul(da, self.right), _mul(self.left, db))
        return _div(numerator, _mul(self.right, self.right))

    def variables(self) -> FrozenSet[str]:
        return self.left.variables() | self.right.variables()

    def __str__(self) -> str:
        # parsing is left associative, so an equal-precedence right operand
        # keeps its parentheses
        left = _wrap(self.left, self.left.precedence < self.precedence)
        right = _wrap(self.right, self.right.precedence <= self.precedence)
        return f'{left} {self.op} {right}'


@dataclass(frozen=True)
class Call(Expression):
    func: str
    arg: Expression
    span: Span = field(default=_NO_SPAN, compare=False, repr=False)

    def evaluate(self, env: Mapping[str, Value]) -> Value:
        value = self.arg.evaluate(env)

        if self.func == 'sqrt' and np.any(np.asarray(value) < 0.0):
            raise ExpressionEvalError('Square root of a negative value',
                                      self.span)

        with np.errstate(over='raise'):
            try:
                return FUNCTIONS[self.func](value)
            except FloatingPointError as err:
                raise ExpressionEvalError(f'Overflow in {self.func}',
                                          self.span) from err

    def derivative(self, var: str) -> Expression:
        inner = self.arg.derivative(var)

        if self.func == 'sin':
            outer: Expression = Call('cos', self.arg)
        elif self.func == 'cos':
            outer = _neg(Call('sin', self.arg))
        elif self.func == 'exp':
            outer = self
        elif self.func == 'sqrt':
            return _div(inner, _mul(Number(2.0), self))
        else:
            assert False, self.func

        return _mul(outer, inner)

    def variables(self) -> FrozenSet[str]:
        return self.arg.variables()

    def __str__(self) -> str:
        return f'{self.func}({self.arg})'


def _wrap(node: Expression, parenthesize: bool) -> str:
    return f'({node})' if parenthesize else str(node)


def _is_number(node: Expression, value: Optional[float] = None) -> bool:
    if not isinstance(node, Number):
        return False
    return value is None or node.value == value


def _neg(a: Expression) -> Expression:
    if isinstance(a, Number):
        return Number(-a.value)
    if isinstance(a, Negate):
        return a.operand
    return Negate(a)


def _add(a: Expression, b: Expression) -> Expression:
    if _is_number(a, 0.0):
        return b
    if _is_number(b, 0.0):
        return a
    if isinstance(a, Number) and isinstance(b, Number):
        return Number(a.value + b.value)
    return BinaryOp('+', a, b)


def _sub(a: Expression, b: Expression) -> Expression:
    if _is_number(b, 0.0):
        return a
    if _is_number(a, 0.0):
        return _neg(b)
    if isinstance(a, Number) and isinstance(b, Number):
        return Number(a.value - b.value)
    return BinaryOp('-', a, b)


def _mul(a: Expression, b: Expression) -> Expression:
    if _is_number(a, 0.0) or _is_number(b, 0.0):
        return Number(0.0)
    if _is_number(a, 1.0):
        return b
    if _is_number(b, 1.0):
        return a
    if isinstance(a, Number) and isinstance(b, Number):
        return Number(a.value * b.value)
    return BinaryOp('*', a, b)


def _div(a: Expression, b: Expression) -> Expression:
    if _is_number(a, 0.0):
        return Number(0.0)
    if _is_number(b, 1.0):
        return a
    return BinaryOp('/', a, b)


class TokenType(Enum):
    """Lexical token type"""

    NUMBER = auto()
    IDENT = auto()
    OPERATOR = auto()
    END = auto()


@dataclass(frozen=True)
class Token:
    """Lexical token with its source columns"""

    kind: TokenType
    text: str
    span: Span


_TOKEN_RE = re.compile(r"""
    (?P<space>\s+)
  | (?P<number>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)
  | (?P<ident>[A-Za-z_][A-Za-z0-9_]*)
  | (?P<operator>[-+*/()−])
""", re.VERBOSE)


def tokenize(text: str) -> List[Token]:
    tokens = []
    pos = 0

    while pos < len(text):
        match = _TOKEN_RE.match(text, pos)
        if match is None:
            raise ExpressionParseError(f'Unexpected character {text[pos]!r}',
                                       (pos, pos + 1))

        kind = match.lastgroup
        span = match.span()
        lexeme = match.group()
        pos = match.end()

        if kind == 'number':
            tokens.append(Token(TokenType.NUMBER, lexeme, span))
        elif kind == 'ident':
            tokens.append(Token(TokenType.IDENT, lexeme, span))
        elif kind == 'operator':
            lexeme = '-' if lexeme == '−' else lexeme
            tokens.append(Token(TokenType.OPERATOR, lexeme, span))

    tokens.append(Token(TokenType.END, '', (len(text), len(text))))
    return tokens


class _Parser:
    """
    Recursive descent over the token list::

        expr   := term (('+' | '-') term)*
        term   := factor (('*' | '/') factor)*
        factor := number | ident | '(' expr ')' | func '(' expr ')' | '-' factor
    """

    def __init__(self,
                 text: str,
                 variables: Optional[FrozenSet[str]]) -> None:
        self._tokens = tokenize(text)
        self._pos = 0
        self._variables = variables

    def _peek(self) -> Token:
        return self._tokens[self._pos]

    def _advance(self) -> Token:
        token = self._tokens[self._pos]
        self._pos += 1
        return token

    def _at_operator(self, *ops: str) -> bool:
        token = self._peek()
        return token.kind == TokenType.OPERATOR and token.text in ops

    def _expect(self, op: str) -> Token:
        if not self._at_operator(op):
            token = self._peek()
            found = token.text or 'end of input'
            raise ExpressionParseError(f'Expected {op!r}, found {found!r}',
                                       token.span)
        return self._advance()

    def parse(self) -> Expression:
        node = self._expr()

        token = self._peek()
        if token.kind != TokenType.END:
            raise ExpressionParseError(f'Unexpected {token.text!r}',
                                       token.span)
        return node

    def _expr(self) -> Expression:
        node = self._term()
        while self._at_operator('+', '-'):
            op = self._advance().text
            right = self._term()
            node = BinaryOp(op, node, right, (node.span[0], right.span[1]))
        return node

    def _term(self) -> Expression:
        node = self._factor()
        while self._at_operator('*', '/'):
            op = self._advance().text
            right = self._factor()
            node = BinaryOp(op, node, right, (node.span[0], right.span[1]))
        return node

    def _factor(self) -> Expression:
        token = self._peek()

        if token.kind == TokenType.NUMBER:
            self._advance()
            return Number(float(token.text), token.span)

        if token.kind == TokenType.IDENT:
            return self._ident()

        if self._at_operator('-'):
            self._advance()
            operand = self._factor()
            return Negate(operand, (token.span[0], operand.span[1]))

        if self._at_operator('('):
            self._advance()
            node = self._expr()
            self._expect(')')
            return node

        found = token.text or 'end of input'
        raise ExpressionParseError(f'Unexpected {found!r}', token.span)

    def _ident(self) -> Expression:
        token = self._advance()
        name = token.text

        if name in FUNCTIONS:
            self._expect('(')
            arg = self._expr()
            closing = self._expect(')')
            return Call(name, arg, (token.span[0], closing.span[1]))

        if name in CONSTANTS:
            return Name(name, token.span)

        if self._variables is not None and name not in self._variables:
            allowed = ', '.join(sorted(self._variables))
            raise ExpressionParseError(
                f'Unknown identifier {name!r} (allowed: {allowed}, pi)',
                token.span)

        return Name(name, token.span)


def parse_expression(text: str,
                     variables: Optional[Iterable[str]] = None) -> Expression:
    allowed = None if variables is None else frozenset(variables)
    return _Parser(text, allowed).parse()


def coordinate_names(dim: int) -> List[str]:
    return [f'x{i + 1}' for i in range(dim)]


def coordinate_env(points: np.ndarray) -> Dict[str, np.ndarray]:
    """Variable bindings x1..xn for an array of points of shape (..., n)"""

    points = np.asarray(points, dtype=float)
    return {name: points[..., i]
            for i, name in enumerate(coordinate_names(points.shape[-1]))}


def evaluate_at(expr: Expression, points: np.ndarray) -> np.ndarray:
    """Evaluate on points of shape (..., n), broadcasting constants"""

    points = np.asarray(points, dtype=float)
    value = expr.evaluate(coordinate_env(points))
    return np.broadcast_to(np.asarray(value, dtype=float),
                           points.shape[:-1]).copy()
