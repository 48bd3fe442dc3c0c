"""Signal temporal logic over uniformly sampled signals.

The module provides an abstract syntax tree for temporal formulas, a text
parser, a printer whose output parses back to a structurally equal tree,
Boolean satisfaction and quantitative robustness.

Concrete grammar (UTF-8 text), loosest to tightest binding::

    formula  := or_expr ( '=>' formula )?            right associative
    or_expr  := and_expr ( '|' and_expr )*
    and_expr := temporal ( '&' temporal )*
    temporal := unary ( 'U' interval temporal )?      right associative
    unary    := '!' unary
              | 'F' interval unary
              | 'G' interval unary
              | 'G' '(' formula ')'                   untimed always
              | atom
    atom     := 'true' | 'false' | identifier | '(' formula ')'
    interval := '[' number ',' ( number | 'inf' ) ']'

Interval bounds are nonnegative with the lower bound finite and not above
the upper one.  ``U``, ``F`` and ``G`` act as operators only when directly
followed by ``[`` (or ``(`` for the untimed always); elsewhere they are
ordinary predicate identifiers.

Predicates are named real-valued functions of the state vector, registered
in a :class:`PredicateTable`; a predicate holds at a state exactly when its
function is >= 0 there, and its robustness is the function value itself.

Timing is discrete: a window ``[a, b]`` anchored at step ``k`` covers the
steps ``k'`` with ``a <= (k' - k) * dt <= b``, clipped to the end of the
signal.  Windows that reach past the final sample are evaluated over the
available prefix only, so missing future steps contribute nothing; a window
with no samples at all makes an Until false (robustness ``-inf``) and an
Always vacuously true (``+inf``).
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np

__all__ = [
    "Formula",
    "Literal",
    "Predicate",
    "Not",
    "Or",
    "And",
    "Implies",
    "Until",
    "Eventually",
    "Always",
    "PredicateTable",
    "Signal",
    "StlError",
    "StlSyntaxError",
    "UnknownPredicateError",
    "parse_formula",
    "format_formula",
    "desugar",
    "satisfies",
    "robustness",
]


class StlError(Exception):
    """Base class for errors raised by this module."""


class StlSyntaxError(StlError):
    """Parse failure, annotated with the 1-based line and column."""

    def __init__(self, message: str, line: int, col: int):
        super().__init__(f"{message} (line {line}, column {col})")
        self.line = line
        self.col = col


class UnknownPredicateError(StlError):
    """A formula references a predicate name the table does not resolve."""


# ---------------------------------------------------------------------------
# Abstract syntax
# ---------------------------------------------------------------------------


def _check_interval(a: float, b: float) -> None:
    if math.isnan(a) or math.isnan(b):
        raise ValueError("interval bounds must not be NaN")
    if math.isinf(a):
        raise ValueError("lower interval bound must be finite")
    if a < 0 or b < 0:
        raise ValueError(f"interval bounds must be nonnegative, got [{a}, {b}]")
    if a > b:
        raise ValueError(f"empty interval: [{a}, {b}]")


@dataclass(frozen=True)
class Literal:
    value: bool


@dataclass(frozen=True)
class Predicate:
    name: str


@dataclass(frozen=True)
class Not:
    child: "Formula"


@dataclass(frozen=True)
class Or:
    left: "Formula"
    right: "Formula"


@dataclass(frozen=True)
class And:
    left: "Formula"
    right: "Formula"


@dataclass(frozen=True)
class Implies:
    left: "Formula"
    right: "Formula"


@dataclass(frozen=True)
class Until:
    left: "Formula"
    right: "Formula"
    a: float
    b: float

    def __post_init__(self):
        _check_interval(self.a, self.b)


@dataclass(frozen=True)
class Eventually:
    child: "Formula"
    a: float
    b: float

    def __post_init__(self):
        _check_interval(self.a, self.b)


@dataclass(frozen=True)
class Always:
    child: "Formula"
    a: float
    b: float

    def __post_init__(self):
        _check_interval(self.a, self.b)


Formula = (
    Literal | Predicate | Not | Or | And | Implies | Until | Eventually | Always
)

_ATOMS = (Literal, Predicate)


def desugar(formula: Formula) -> Formula:
    """Rewrite derived operators into the core fragment.

    ``p & q   -> !(!p | !q)``
    ``p => q  -> !p | q``
    ``F[a,b] p -> true U[a,b] p``
    ``G[a,b] p -> !(true U[a,b] !p)``
    """
    f = formula
    if isinstance(f, _ATOMS):
        return f
    if isinstance(f, Not):
        return Not(desugar(f.child))
    if isinstance(f, Or):
        return Or(desugar(f.left), desugar(f.right))
    if isinstance(f, And):
        return Not(Or(Not(desugar(f.left)), Not(desugar(f.right))))
    if isinstance(f, Implies):
        return Or(Not(desugar(f.left)), desugar(f.right))
    if isinstance(f, Until):
        return Until(desugar(f.left), desugar(f.right), f.a, f.b)
    if isinstance(f, Eventually):
        return Until(Literal(True), desugar(f.child), f.a, f.b)
    if isinstance(f, Always):
        return Not(Until(Literal(True), Not(desugar(f.child)), f.a, f.b))
    raise TypeError(f"not a formula: {f!r}")


# ---------------------------------------------------------------------------
# Predicate table and signals
# ---------------------------------------------------------------------------


class PredicateTable:
    """Mapping from predicate names to functions ``state -> float``."""

    def __init__(self, functions: Mapping[str, Callable] | None = None):
        self._functions: dict[str, Callable] = dict(functions or {})

    def register(self, name: str, fn: Callable) -> None:
        self._functions[name] = fn

    def __contains__(self, name: str) -> bool:
        return name in self._functions

    def names(self) -> tuple[str, ...]:
        return tuple(self._functions)

    def evaluate(self, name: str, state) -> float:
        try:
            fn = self._functions[name]
        except KeyError:
            raise UnknownPredicateError(f"unresolved predicate {name!r}") from None
        return float(fn(state))


@dataclass(frozen=True)
class Signal:
    """Uniformly sampled trajectory: row ``k`` is the state at ``start_time + k*dt``."""

    states: np.ndarray
    dt: float
    start_time: float = 0.0

    def __post_init__(self):
        states = np.asarray(self.states, dtype=float)
        if states.ndim == 1:
            states = states[:, None]
        if states.ndim != 2 or states.shape[0] == 0:
            raise ValueError("states must be a nonempty (K+1, n) array")
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.start_time < 0:
            raise ValueError("start_time must be nonnegative")
        states = states.copy()
        states.flags.writeable = False
        object.__setattr__(self, "states", states)
        object.__setattr__(self, "dt", float(self.dt))
        object.__setattr__(self, "start_time", float(self.start_time))

    def __len__(self) -> int:
        return self.states.shape[0]

    @property
    def last_index(self) -> int:
        return self.states.shape[0] - 1


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

_TOKEN_RE = re.compile(
    r"""
    (?P<ws>\s+)
  | (?P<number>\d+(?:\.\d*)?(?:[eE][+-]?\d+)?)
  | (?P<ident>[A-Za-z_][A-Za-z0-9_]*)
  | (?P<arrow>=>)
  | (?P<punct>[!&|()\[\],])
  | (?P<minus>-)
    """,
    re.VERBOSE,
)


@dataclass(frozen=True)
class _Token:
    kind: str  # number | ident | arrow | punct | minus | eof
    text: str
    line: int
    col: int


def _tokenize(text: str) -> list[_Token]:
    tokens = []
    line, col = 1, 1
    pos = 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if m is None:
            raise StlSyntaxError(f"unknown operator or character {text[pos]!r}", line, col)
        kind = m.lastgroup
        lexeme = m.group()
        if kind != "ws":
            tokens.append(_Token(kind, lexeme, line, col))
        newlines = lexeme.count("\n")
        if newlines:
            line += newlines
            col = len(lexeme) - lexeme.rfind("\n")
        else:
            col += len(lexeme)
        pos = m.end()
    tokens.append(_Token("eof", "", line, col))
    return tokens


class _Parser:
    def __init__(self, text: str):
        self.tokens = _tokenize(text)
        self.pos = 0

    def peek(self, offset: int = 0) -> _Token:
        return self.tokens[min(self.pos + offset, len(self.tokens) - 1)]

    def advance(self) -> _Token:
        tok = self.tokens[self.pos]
        if tok.kind != "eof":
            self.pos += 1
        return tok

    def expect(self, text: str) -> _Token:
        tok = self.peek()
        if tok.text != text:
            shown = tok.text if tok.kind != "eof" else "end of input"
            raise StlSyntaxError(f"expected {text!r}, found {shown!r}", tok.line, tok.col)
        return self.advance()

    def fail(self, message: str) -> StlSyntaxError:
        tok = self.peek()
        return StlSyntaxError(message, tok.line, tok.col)

    # grammar rules, loosest binding first

    def formula(self) -> Formula:
        left = self.or_expr()
        if self.peek().kind == "arrow":
            self.advance()
            return Implies(left, self.formula())
        return left

    def or_expr(self) -> Formula:
        node = self.and_expr()
        while self.peek().text == "|":
            self.advance()
            node = Or(node, self.and_expr())
        return node

    def and_expr(self) -> Formula:
        node = self.temporal()
        while self.peek().text == "&":
            self.advance()
            node = And(node, self.temporal())
        return node

    def temporal(self) -> Formula:
        node = self.unary()
        tok = self.peek()
        if tok.kind == "ident" and tok.text == "U" and self.peek(1).text == "[":
            self.advance()
            a, b = self.interval()
            return Until(node, self.temporal(), a, b)
        return node

    def unary(self) -> Formula:
        tok = self.peek()
        if tok.text == "!":
            self.advance()
            return Not(self.unary())
        if tok.kind == "ident" and tok.text == "F" and self.peek(1).text == "[":
            self.advance()
            a, b = self.interval()
            return Eventually(self.unary(), a, b)
        if tok.kind == "ident" and tok.text == "G":
            if self.peek(1).text == "[":
                self.advance()
                a, b = self.interval()
                return Always(self.unary(), a, b)
            if self.peek(1).text == "(":
                self.advance()
                self.expect("(")
                child = self.formula()
                self.expect(")")
                return Always(child, 0.0, math.inf)
        return self.atom()

    def atom(self) -> Formula:
        tok = self.peek()
        if tok.text == "(":
            self.advance()
            node = self.formula()
            self.expect(")")
            return node
        if tok.kind == "ident":
            self.advance()
            if tok.text == "true":
                return Literal(True)
            if tok.text == "false":
                return Literal(False)
            return Predicate(tok.text)
        shown = tok.text if tok.kind != "eof" else "end of input"
        raise self.fail(f"expected a formula, found {shown!r}")

    def interval(self) -> tuple[float, float]:
        open_tok = self.expect("[")
        a = self.bound(allow_inf=False)
        self.expect(",")
        b = self.bound(allow_inf=True)
        self.expect("]")
        if a > b:
            raise StlSyntaxError(
                f"malformed interval: [{a:g}, {b:g}] is empty", open_tok.line, open_tok.col
            )
        return a, b

    def bound(self, allow_inf: bool) -> float:
        tok = self.peek()
        if tok.kind == "minus":
            raise StlSyntaxError("malformed interval: negative bound", tok.line, tok.col)
        if tok.kind == "ident" and tok.text == "inf":
            if not allow_inf:
                raise StlSyntaxError(
                    "malformed interval: lower bound must be finite", tok.line, tok.col
                )
            self.advance()
            return math.inf
        if tok.kind == "number":
            self.advance()
            return float(tok.text)
        shown = tok.text if tok.kind != "eof" else "end of input"
        raise StlSyntaxError(f"expected interval bound, found {shown!r}", tok.line, tok.col)


def parse_formula(text: str) -> Formula:
    """Parse concrete syntax into a formula tree.

    Raises :class:`StlSyntaxError` with position information on malformed
    input, including empty or negative intervals.
    """
    parser = _Parser(text)
    node = parser.formula()
    tok = parser.peek()
    if tok.kind != "eof":
        raise StlSyntaxError(f"unexpected trailing input {tok.text!r}", tok.line, tok.col)
    return node


# ---------------------------------------------------------------------------
# Printer
# ---------------------------------------------------------------------------


def _fmt_bound(x: float) -> str:
    if math.isinf(x):
        return "inf"
    if x == int(x) and abs(x) < 1e15:
        return str(int(x))
    return repr(x)


def _wrap(f: Formula) -> str:
    s = format_formula(f)
    return s if isinstance(f, _ATOMS) else f"({s})"


def format_formula(f: Formula) -> str:
    """Render a formula so that ``parse_formula(format_formula(f)) == f``."""
    if isinstance(f, Literal):
        return "true" if f.value else "false"
    if isinstance(f, Predicate):
        return f.name
    if isinstance(f, Not):
        return f"!{_wrap(f.child)}"
    if isinstance(f, Or):
        return f"{_wrap(f.left)} | {_wrap(f.right)}"
    if isinstance(f, And):
        return f"{_wrap(f.left)} & {_wrap(f.right)}"
    if isinstance(f, Implies):
        return f"{_wrap(f.left)} => {_wrap(f.right)}"
    if isinstance(f, Until):
        return f"{_wrap(f.left)} U[{_fmt_bound(f.a)},{_fmt_bound(f.b)}] {_wrap(f.right)}"
    if isinstance(f, Eventually):
        return f"F[{_fmt_bound(f.a)},{_fmt_bound(f.b)}] {_wrap(f.child)}"
    if isinstance(f, Always):
        if f.a == 0.0 and math.isinf(f.b):
            return f"G( {format_formula(f.child)} )"
        return f"G[{_fmt_bound(f.a)},{_fmt_bound(f.b)}] {_wrap(f.child)}"
    raise TypeError(f"not a formula: {f!r}")


# ---------------------------------------------------------------------------
# Semantics
# ---------------------------------------------------------------------------

_WINDOW_EPS = 1e-9


def _window(signal: Signal, k: int, a: float, b: float) -> range:
    """Inclusive index window {k' : a <= (k'-k)*dt <= b}, clipped to the signal."""
    last = signal.last_index
    lo = k + math.ceil(a / signal.dt - _WINDOW_EPS)
    lo = max(lo, k)
    if math.isinf(b):
        hi = last
    else:
        hi = min(last, k + math.floor(b / signal.dt + _WINDOW_EPS))
    return range(lo, hi + 1)


def _check_eval_args(signal: Signal, k: int) -> None:
    if not 0 <= k <= signal.last_index:
        raise IndexError(f"step index {k} outside signal of length {len(signal)}")


def satisfies(formula: Formula, signal: Signal, k: int, table: PredicateTable) -> bool:
    """Boolean satisfaction of ``formula`` at step ``k``.

    A predicate holds exactly when its function evaluates >= 0; robustness
    ties at zero therefore count as satisfaction.
    """
    _check_eval_args(signal, k)
    core = desugar(formula)
    memo: dict[tuple[int, int], bool] = {}

    def ev(f: Formula, i: int) -> bool:
        key = (id(f), i)
        cached = memo.get(key)
        if cached is not None:
            return cached
        if isinstance(f, Literal):
            value = f.value
        elif isinstance(f, Predicate):
            value = table.evaluate(f.name, signal.states[i]) >= 0.0
        elif isinstance(f, Not):
            value = not ev(f.child, i)
        elif isinstance(f, Or):
            value = ev(f.left, i) or ev(f.right, i)
        else:  # Until
            value = False
            win = _window(signal, i, f.a, f.b)
            if len(win) > 0:  # empty windows contribute nothing
                prefix_ok = True
                for j in range(i, win.start):
                    if not ev(f.left, j):
                        prefix_ok = False
                        break
                if prefix_ok:
                    for j in win:
                        if ev(f.right, j):
                            value = True
                            break
                        if not ev(f.left, j):
                            break
        memo[key] = value
        return value

    return ev(core, k)


def robustness(formula: Formula, signal: Signal, k: int, table: PredicateTable) -> float:
    """Quantitative robustness of ``formula`` at step ``k``.

    Max/min semantics: the value of a predicate is its function value, a
    negation flips the sign, a disjunction takes the max, and
    ``p U[a,b] q`` at ``k`` is the max over window steps ``k'`` of
    ``min(rho(q, k'), min_{k <= k'' < k'} rho(p, k''))``.  The sign agrees
    with :func:`satisfies` (value 0 counts as satisfied).
    """
    _check_eval_args(signal, k)
    core = desugar(formula)
    memo: dict[tuple[int, int], float] = {}

    def ev(f: Formula, i: int) -> float:
        key = (id(f), i)
        cached = memo.get(key)
        if cached is not None:
            return cached
        if isinstance(f, Literal):
            value = math.inf if f.value else -math.inf
        elif isinstance(f, Predicate):
            value = table.evaluate(f.name, signal.states[i])
        elif isinstance(f, Not):
            value = -ev(f.child, i)
        elif isinstance(f, Or):
            value = max(ev(f.left, i), ev(f.right, i))
        else:  # Until
            value = -math.inf
            win = _window(signal, i, f.a, f.b)
            if len(win) > 0:  # empty windows contribute nothing
                prefix = math.inf
                for j in range(i, win.start):
                    prefix = min(prefix, ev(f.left, j))
                for j in win:
                    value = max(value, min(ev(f.right, j), prefix))
                    prefix = min(prefix, ev(f.left, j))
        memo[key] = value
        return value

    return ev(core, k)
