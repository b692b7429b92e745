"""ASCII formula grammar: parse and render.

    G[lo,hi](...)   always          F[lo,hi](...)  eventually
    (p) U[lo,hi] (q)  until
    &  |  !  ->      boolean connectives (-> is right-associative, lowest)
    atoms:           var >= c | var > c | var <= c | var < c
    linear atoms:    a1*v1 + a2*v2 ... >= c
    'true', parentheses; whitespace-insensitive.

render(parse(s)) re-parses to a structurally identical tree.
"""

from __future__ import annotations

import re

from .formula import (
    Always,
    And,
    Atom,
    Eventually,
    Formula,
    Implies,
    LinAtom,
    Not,
    Or,
    TrueF,
    Until,
)


class ParseError(ValueError):
    """Syntax error; `offset` is the byte offset into the input."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at offset {offset})")
        self.offset = offset


_TOKEN_RE = re.compile(
    r"""
    (?P<ws>\s+)
  | (?P<number>(\d+\.\d*|\.\d+|\d+)([eE][+-]?\d+)?)
  | (?P<ident>[A-Za-z_][A-Za-z0-9_]*)
  | (?P<implies>->)
  | (?P<cmp>>=|<=|>|<)
  | (?P<punct>[()\[\],&|!*+-])
    """,
    re.VERBOSE,
)

_TEMPORAL = {"G": Always, "F": Eventually}


class _Token:
    __slots__ = ("kind", "text", "pos")

    def __init__(self, kind, text, pos):
        self.kind = kind
        self.text = text
        self.pos = pos

    def __repr__(self):
        return f"{self.kind}({self.text!r}@{self.pos})"


def _tokenize(text: str):
    tokens = []
    i = 0
    while i < len(text):
        m = _TOKEN_RE.match(text, i)
        if m is None:
            raise ParseError(f"unexpected character {text[i]!r}", i)
        if m.lastgroup != "ws":
            kind = m.lastgroup
            tok_text = m.group()
            if kind == "punct":
                kind = tok_text
            tokens.append(_Token(kind, tok_text, i))
        i = m.end()
    tokens.append(_Token("eof", "", len(text)))
    return tokens


class _Parser:
    def __init__(self, text: str):
        self.text = text
        self.tokens = _tokenize(text)
        self.pos = 0

    def peek(self, ahead: int = 0) -> _Token:
        return self.tokens[min(self.pos + ahead, len(self.tokens) - 1)]

    def advance(self) -> _Token:
        tok = self.tokens[self.pos]
        self.pos += 1
        return tok

    def expect(self, kind: str) -> _Token:
        tok = self.peek()
        if tok.kind != kind:
            raise ParseError(f"expected {kind!r}, found {tok.text or 'end of input'!r}", tok.pos)
        return self.advance()

    def parse(self) -> Formula:
        f = self.parse_implies()
        tok = self.peek()
        if tok.kind != "eof":
            raise ParseError(f"unexpected trailing input {tok.text!r}", tok.pos)
        return f

    def parse_implies(self) -> Formula:
        left = self.parse_or()
        if self.peek().kind == "implies":
            self.advance()
            return Implies(left, self.parse_implies())
        return left

    def parse_or(self) -> Formula:
        f = self.parse_and()
        while self.peek().kind == "|":
            self.advance()
            f = Or(f, self.parse_and())
        return f

    def parse_and(self) -> Formula:
        f = self.parse_until()
        while self.peek().kind == "&":
            self.advance()
            f = And(f, self.parse_until())
        return f

    def parse_until(self) -> Formula:
        left = self.parse_unary()
        tok = self.peek()
        if tok.kind == "ident" and tok.text == "U" and self.peek(1).kind == "[":
            self.advance()
            lo, hi = self.parse_window()
            right = self.parse_unary()
            return Until(lo, hi, left, right)
        return left

    def parse_window(self):
        self.expect("[")
        lo = self.parse_int()
        self.expect(",")
        hi = self.parse_int()
        self.expect("]")
        return lo, hi

    def parse_int(self) -> int:
        tok = self.expect("number")
        try:
            return int(tok.text)
        except ValueError:
            raise ParseError(f"window bound must be an integer, got {tok.text!r}", tok.pos) from None

    def parse_unary(self) -> Formula:
        tok = self.peek()
        if tok.kind == "!":
            self.advance()
            return Not(self.parse_unary())
        if tok.kind == "ident" and self.peek(1).kind == "[":
            if tok.text in _TEMPORAL:
                self.advance()
                lo, hi = self.parse_window()
                self.expect("(")
                child = self.parse_implies()
                self.expect(")")
                return _TEMPORAL[tok.text](lo, hi, child)
            if tok.text != "U":
                raise ParseError(f"unknown operator name {tok.text!r}", tok.pos)
        return self.parse_primary()

    def parse_primary(self) -> Formula:
        tok = self.peek()
        if tok.kind == "(":
            self.advance()
            f = self.parse_implies()
            self.expect(")")
            return f
        if tok.kind == "ident" and tok.text == "true":
            self.advance()
            return TrueF()
        if tok.kind in ("ident", "number", "-", "+"):
            return self.parse_atom()
        raise ParseError(f"expected a formula, found {tok.text or 'end of input'!r}", tok.pos)

    def parse_atom(self) -> Formula:
        coeffs: dict[str, float] = {}
        joiner = 1.0
        while True:
            sign = joiner
            tok = self.peek()
            while tok.kind in ("+", "-"):
                if tok.kind == "-":
                    sign = -sign
                self.advance()
                tok = self.peek()
            coeff = sign
            if tok.kind == "number":
                self.advance()
                coeff = sign * float(tok.text)
                self.expect("*")
                tok = self.peek()
            if tok.kind != "ident":
                raise ParseError("expected a variable name in predicate", tok.pos)
            if tok.text in ("true",):
                raise ParseError("'true' cannot be used as a variable name", tok.pos)
            self.advance()
            coeffs[tok.text] = coeffs.get(tok.text, 0.0) + coeff
            nxt = self.peek()
            if nxt.kind in ("+", "-"):
                joiner = -1.0 if nxt.kind == "-" else 1.0
                self.advance()
                continue
            break
        op_tok = self.expect("cmp")
        threshold = self.parse_number()
        if len(coeffs) == 1:
            (var, coeff), = coeffs.items()
            if coeff == 1.0:
                return Atom(var, op_tok.text, threshold)
        return LinAtom(coeffs, op_tok.text, threshold)

    def parse_number(self) -> float:
        sign = 1.0
        tok = self.peek()
        if tok.kind in ("+", "-"):
            sign = -1.0 if tok.kind == "-" else 1.0
            self.advance()
        tok = self.expect("number")
        return sign * float(tok.text)


def parse(text: str) -> Formula:
    """Parse a formula string; raises ParseError with a byte offset on bad input."""
    return _Parser(text).parse()


def _fmt_num(v: float) -> str:
    if v == int(v) and abs(v) < 1e15:
        return str(int(v))
    return repr(float(v))


def _fmt_coeff_term(var: str, coeff: float, first: bool) -> str:
    mag = abs(coeff)
    body = var if mag == 1.0 else f"{_fmt_num(mag)}*{var}"
    if first:
        return body if coeff >= 0 else f"-{body}"
    return f" + {body}" if coeff >= 0 else f" - {body}"


_PRec = {Implies: 1, Or: 2, And: 3, Until: 4}


def _prec(f) -> int:
    return _PRec.get(type(f), 5)


def _wrap(child: Formula, min_prec: int) -> str:
    # parenthesize unless the child binds at least as tightly as the slot requires
    text = render(child)
    if _prec(child) < min_prec:
        return f"({text})"
    return text


def render(f: Formula) -> str:
    """Render a formula in the ASCII grammar; round-trips through parse()."""
    if isinstance(f, TrueF):
        return "true"
    if isinstance(f, Atom):
        return f"{f.var} {f.cmp} {_fmt_num(f.threshold)}"
    if isinstance(f, LinAtom):
        parts = []
        for i, (var, coeff) in enumerate(f.coeffs.items()):
            parts.append(_fmt_coeff_term(var, coeff, i == 0))
        return f"{''.join(parts)} {f.cmp} {_fmt_num(f.threshold)}"
    if isinstance(f, Not):
        return f"!{_wrap(f.child, 5)}"
    if isinstance(f, And):
        # left-associative: an And on the left re-folds identically
        return f"{_wrap(f.left, 3)} & {_wrap(f.right, 4)}"
    if isinstance(f, Or):
        return f"{_wrap(f.left, 2)} | {_wrap(f.right, 3)}"
    if isinstance(f, Implies):
        # right-associative: only another Implies on the left needs parens
        return f"{_wrap(f.left, 2)} -> {_wrap(f.right, 1)}"
    if isinstance(f, Always):
        return f"G[{f.lo},{f.hi}]({render(f.child)})"
    if isinstance(f, Eventually):
        return f"F[{f.lo},{f.hi}]({render(f.child)})"
    if isinstance(f, Until):
        return f"({render(f.left)}) U[{f.lo},{f.hi}] ({render(f.right)})"
    raise TypeError(f"cannot render {f!r}")
