"""STL formula AST, concrete text grammar, and token encoding.

Grammar (lowest to highest precedence: or < and < until < not/temporal):

    expr     := and_expr ('or' and_expr)*
    and_expr := until_expr ('and' until_expr)*
    until_expr := unary ('until' interval unary)?
    unary    := 'not' unary
              | 'eventually' interval unary
              | 'always' interval unary
              | primary
    primary  := '(' expr ')' | 'true' | 'x_<i>' cmp number
    interval := '[' number ',' number ']'
    cmp      := '<=' | '>=' | '<' | '>'

The canonical printer always parenthesizes binary nodes, so printed text
round-trips through ``parse`` without relying on precedence.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Iterator, Union

from .errors import IntervalError, ParseError, TokenOverflowError

__all__ = [
    "Formula",
    "Top",
    "Predicate",
    "Not",
    "And",
    "Or",
    "Until",
    "Eventually",
    "Always",
    "Interval",
    "TokenSequence",
    "parse",
    "print_formula",
    "format_number",
    "tokenize",
    "depth",
    "size",
    "children",
    "iter_nodes",
    "vocabulary_size",
    "agg_token_for_pooling",
    "PAD",
    "CLS",
    "BOS",
    "EOS",
]

COMPARISONS = ("<=", ">=", "<", ">")


@dataclass(frozen=True)
class Interval:
    """Closed time interval [start, end] in the units of the trajectory horizon."""

    start: float
    end: float

    def __post_init__(self):
        if not (math.isfinite(self.start) and math.isfinite(self.end)):
            raise IntervalError(f"non-finite interval [{self.start},{self.end}]")
        if self.start < 0:
            raise IntervalError(f"interval start {self.start} < 0")
        if self.end <= self.start and not (self.start == 0.0 and self.end == 0.0):
            raise IntervalError(
                f"interval end {self.end} must exceed start {self.start} "
                "(only [0,0] may be degenerate)"
            )

    @property
    def width(self) -> float:
        return self.end - self.start

    @property
    def is_degenerate(self) -> bool:
        return self.start == 0.0 and self.end == 0.0


@dataclass(frozen=True)
class Top:
    """The constant true."""


@dataclass(frozen=True)
class Predicate:
    """Atomic comparison of one signal variable against a threshold."""

    var: int
    cmp: str
    threshold: float

    def __post_init__(self):
        if self.var < 0:
            raise ValueError(f"variable index {self.var} < 0")
        if self.cmp not in COMPARISONS:
            raise ValueError(f"unknown comparison {self.cmp!r}")
        if not math.isfinite(self.threshold):
            raise ValueError(f"non-finite threshold {self.threshold}")


@dataclass(frozen=True)
class Not:
    child: "Formula"


@dataclass(frozen=True)
class And:
    left: "Formula"
    right: "Formula"


@dataclass(frozen=True)
class Or:
    left: "Formula"
    right: "Formula"


@dataclass(frozen=True)
class Until:
    interval: Interval
    left: "Formula"
    right: "Formula"


@dataclass(frozen=True)
class Eventually:
    interval: Interval
    child: "Formula"


@dataclass(frozen=True)
class Always:
    interval: Interval
    child: "Formula"


Formula = Union[Top, Predicate, Not, And, Or, Until, Eventually, Always]


def children(f: Formula) -> tuple[Formula, ...]:
    if isinstance(f, (Top, Predicate)):
        return ()
    if isinstance(f, (Not, Eventually, Always)):
        return (f.child,)
    return (f.left, f.right)


def iter_nodes(f: Formula) -> Iterator[Formula]:
    """Pre-order traversal."""
    stack = [f]
    while stack:
        node = stack.pop()
        yield node
        stack.extend(reversed(children(node)))


def depth(f: Formula) -> int:
    kids = children(f)
    if not kids:
        return 1
    return 1 + max(depth(c) for c in kids)


def size(f: Formula) -> int:
    return 1 + sum(size(c) for c in children(f))


# ---------------------------------------------------------------------------
# Printing

def format_number(x: float) -> str:
    """Fixed 5-decimal rendering used by the canonical printer."""
    return f"{x:.5f}"


def _trimmed_number(x: float) -> str:
    """5-decimal rendering with trailing zeros stripped (at least one decimal kept)."""
    s = format_number(x).rstrip("0")
    if s.endswith("."):
        s += "0"
    return s


def print_formula(f: Formula) -> str:
    """Canonical text form; round-trips through ``parse``.

    Binary nodes always print parenthesized, so unary operands never need
    extra grouping.
    """
    if isinstance(f, Top):
        return "true"
    if isinstance(f, Predicate):
        return f"x_{f.var} {f.cmp} {format_number(f.threshold)}"
    if isinstance(f, Not):
        return f"not {print_formula(f.child)}"
    if isinstance(f, And):
        return f"( {print_formula(f.left)} and {print_formula(f.right)} )"
    if isinstance(f, Or):
        return f"( {print_formula(f.left)} or {print_formula(f.right)} )"
    if isinstance(f, Until):
        iv = f.interval
        return (
            f"( {print_formula(f.left)} until"
            f"[{format_number(iv.start)},{format_number(iv.end)}] "
            f"{print_formula(f.right)} )"
        )
    if isinstance(f, Eventually):
        iv = f.interval
        return (
            f"eventually[{format_number(iv.start)},{format_number(iv.end)}] "
            f"{print_formula(f.child)}"
        )
    if isinstance(f, Always):
        iv = f.interval
        return (
            f"always[{format_number(iv.start)},{format_number(iv.end)}] "
            f"{print_formula(f.child)}"
        )
    raise TypeError(f"not a formula: {f!r}")


# ---------------------------------------------------------------------------
# Parsing

_TOKEN_RE = re.compile(
    r"""
    (?P<ws>\s+)
  | (?P<keyword>true|not|and|or|until|eventually|always)\b
  | (?P<var>x_\d+)
  | (?P<number>-?\d+(?:\.\d+)?)
  | (?P<cmp><=|>=|<|>)
  | (?P<punct>[()\[\],])
    """,
    re.VERBOSE,
)


@dataclass(frozen=True)
class _Tok:
    kind: str
    text: str
    offset: int


def _lex(text: str) -> list[_Tok]:
    toks = []
    pos = 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if m is None:
            raise ParseError(f"unexpected character {text[pos]!r}", pos)
        kind = m.lastgroup
        if kind != "ws":
            toks.append(_Tok(kind, m.group(), pos))
        pos = m.end()
    toks.append(_Tok("eof", "", len(text)))
    return toks


class _Parser:
    def __init__(self, text: str, num_vars: int | None):
        self.toks = _lex(text)
        self.pos = 0
        self.num_vars = num_vars

    def peek(self) -> _Tok:
        return self.toks[self.pos]

    def advance(self) -> _Tok:
        tok = self.toks[self.pos]
        self.pos += 1
        return tok

    def expect(self, text: str) -> _Tok:
        tok = self.peek()
        if tok.text != text:
            raise ParseError(f"expected {text!r}, found {tok.text or 'end of input'!r}", tok.offset)
        return self.advance()

    def parse(self) -> Formula:
        f = self.expr()
        tok = self.peek()
        if tok.kind != "eof":
            raise ParseError(f"unexpected trailing input {tok.text!r}", tok.offset)
        return f

    def expr(self) -> Formula:
        left = self.and_expr()
        while self.peek().text == "or":
            self.advance()
            left = Or(left, self.and_expr())
        return left

    def and_expr(self) -> Formula:
        left = self.until_expr()
        while self.peek().text == "and":
            self.advance()
            left = And(left, self.until_expr())
        return left

    def until_expr(self) -> Formula:
        left = self.unary()
        if self.peek().text == "until":
            self.advance()
            iv = self.interval()
            right = self.unary()
            return Until(iv, left, right)
        return left

    def unary(self) -> Formula:
        tok = self.peek()
        if tok.text == "not":
            self.advance()
            return Not(self.unary())
        if tok.text == "eventually":
            self.advance()
            return Eventually(self.interval(), self.unary())
        if tok.text == "always":
            self.advance()
            return Always(self.interval(), self.unary())
        return self.primary()

    def primary(self) -> Formula:
        tok = self.peek()
        if tok.text == "(":
            self.advance()
            f = self.expr()
            self.expect(")")
            return f
        if tok.text == "true":
            self.advance()
            return Top()
        if tok.kind == "var":
            return self.predicate()
        raise ParseError(f"expected a formula, found {tok.text or 'end of input'!r}", tok.offset)

    def predicate(self) -> Predicate:
        var_tok = self.advance()
        var = int(var_tok.text[2:])
        if self.num_vars is not None and var >= self.num_vars:
            raise ParseError(
                f"variable index {var} out of range for {self.num_vars} signal variables",
                var_tok.offset,
            )
        cmp_tok = self.peek()
        if cmp_tok.kind != "cmp":
            raise ParseError(f"expected a comparison, found {cmp_tok.text!r}", cmp_tok.offset)
        self.advance()
        value = self.number()
        return Predicate(var, cmp_tok.text, value)

    def number(self) -> float:
        tok = self.peek()
        if tok.kind != "number":
            raise ParseError(f"expected a number, found {tok.text or 'end of input'!r}", tok.offset)
        self.advance()
        return float(tok.text)

    def interval(self) -> Interval:
        open_tok = self.expect("[")
        start = self.number()
        self.expect(",")
        end = self.number()
        self.expect("]")
        try:
            return Interval(start, end)
        except IntervalError as exc:
            raise ParseError(str(exc), open_tok.offset) from exc


def parse(text: str, num_vars: int | None = None) -> Formula:
    """Parse formula text; ``num_vars`` bounds variable indices when given."""
    return _Parser(text, num_vars).parse()


# ---------------------------------------------------------------------------
# Token encoding
#
# Fixed vocabulary: specials, operators, punctuation, comparisons, numeral
# characters, then one token per variable index below ``max_vars``. Numerals
# are emitted character by character from the trimmed 5-decimal rendering so
# unseen constants stay in-vocabulary.

PAD = 0
CLS = 1
BOS = 2
EOS = 3

_FIXED_TOKENS = [
    "true", "not", "and", "or", "until", "eventually", "always",
    "(", ")", "[", "]", ",",
    "<=", ">=", "<", ">",
    "0", "1", "2", "3", "4", "5", "6", "7", "8", "9", ".", "-",
]
_FIXED_IDS = {tok: 4 + i for i, tok in enumerate(_FIXED_TOKENS)}
_VAR_BASE = 4 + len(_FIXED_TOKENS)

DEFAULT_MAX_VARS = 16


def vocabulary_size(max_vars: int = DEFAULT_MAX_VARS) -> int:
    return _VAR_BASE + max_vars


def agg_token_for_pooling(pooling: str) -> int:
    """Aggregation token id placed at position 1 of every sequence."""
    if pooling == "cls":
        return CLS
    if pooling in ("bos", "mean"):
        return BOS
    raise ValueError(f"unknown pooling {pooling!r}")


@dataclass(frozen=True)
class TokenSequence:
    """Padded token ids with a prefix-of-ones attention mask."""

    ids: tuple[int, ...]
    mask: tuple[int, ...]
    length: int

    def __post_init__(self):
        if len(self.ids) != len(self.mask):
            raise ValueError("ids and mask length mismatch")
        if list(self.mask) != [1] * self.length + [0] * (len(self.ids) - self.length):
            raise ValueError("mask must be a prefix of ones")


def _numeral_tokens(x: float) -> list[int]:
    return [_FIXED_IDS[ch] for ch in _trimmed_number(x)]


def _emit(f: Formula, out: list[int], max_vars: int) -> None:
    if isinstance(f, Top):
        out.append(_FIXED_IDS["true"])
    elif isinstance(f, Predicate):
        if f.var >= max_vars:
            raise ValueError(f"variable index {f.var} exceeds vocabulary limit {max_vars}")
        out.append(_VAR_BASE + f.var)
        out.append(_FIXED_IDS[f.cmp])
        out.extend(_numeral_tokens(f.threshold))
    elif isinstance(f, Not):
        out.append(_FIXED_IDS["not"])
        _emit(f.child, out, max_vars)
    elif isinstance(f, (And, Or)):
        out.append(_FIXED_IDS["("])
        _emit(f.left, out, max_vars)
        out.append(_FIXED_IDS["and" if isinstance(f, And) else "or"])
        _emit(f.right, out, max_vars)
        out.append(_FIXED_IDS[")"])
    elif isinstance(f, Until):
        out.append(_FIXED_IDS["("])
        _emit(f.left, out, max_vars)
        out.append(_FIXED_IDS["until"])
        _emit_interval(f.interval, out)
        _emit(f.right, out, max_vars)
        out.append(_FIXED_IDS[")"])
    elif isinstance(f, (Eventually, Always)):
        out.append(_FIXED_IDS["eventually" if isinstance(f, Eventually) else "always"])
        _emit_interval(f.interval, out)
        _emit(f.child, out, max_vars)
    else:
        raise TypeError(f"not a formula: {f!r}")


def _emit_interval(iv: Interval, out: list[int]) -> None:
    out.append(_FIXED_IDS["["])
    out.extend(_numeral_tokens(iv.start))
    out.append(_FIXED_IDS[","])
    out.extend(_numeral_tokens(iv.end))
    out.append(_FIXED_IDS["]"])


def tokenize(
    f: Formula,
    max_len: int,
    agg_token: int = CLS,
    max_vars: int = DEFAULT_MAX_VARS,
) -> TokenSequence:
    """Encode ``f`` as [AGG] body [EOS] padded with [PAD] to ``max_len``."""
    if agg_token not in (CLS, BOS):
        raise ValueError(f"aggregation token must be CLS or BOS, got {agg_token}")
    body: list[int] = []
    _emit(f, body, max_vars)
    length = len(body) + 2
    if length > max_len:
        raise TokenOverflowError(
            f"formula needs {length} tokens but max_len is {max_len}"
        )
    ids = [agg_token] + body + [EOS] + [PAD] * (max_len - length)
    mask = [1] * length + [0] * (max_len - length)
    return TokenSequence(tuple(ids), tuple(mask), length)
