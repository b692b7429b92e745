"""Formula AST over named signal variables, with discrete inclusive time windows."""

from __future__ import annotations

from dataclasses import dataclass
from types import MappingProxyType
from typing import Mapping, Union

CMP_OPS = (">=", ">", "<=", "<")

# cmp -> negated cmp (strictness flips so that !(x >= c) == (x < c))
NEGATED_CMP = {">=": "<", ">": "<=", "<=": ">", "<": ">="}


class FormulaError(ValueError):
    """Malformed formula construction."""


@dataclass(frozen=True)
class TrueF:
    """The constant 'true'."""


@dataclass(frozen=True)
class Atom:
    """Single-variable threshold predicate: var CMP threshold."""

    var: str
    cmp: str
    threshold: float

    def __post_init__(self):
        if self.cmp not in CMP_OPS:
            raise FormulaError(f"unknown comparison {self.cmp!r}")


@dataclass(frozen=True)
class LinAtom:
    """Linear predicate over several variables at one step: sum(coeffs*vars) CMP threshold."""

    coeffs: Mapping[str, float]
    cmp: str
    threshold: float

    def __post_init__(self):
        if self.cmp not in CMP_OPS:
            raise FormulaError(f"unknown comparison {self.cmp!r}")
        if not self.coeffs:
            raise FormulaError("linear predicate needs at least one variable")
        object.__setattr__(self, "coeffs", MappingProxyType(dict(self.coeffs)))

    def __eq__(self, other):
        if not isinstance(other, LinAtom):
            return NotImplemented
        return (
            dict(self.coeffs) == dict(other.coeffs)
            and self.cmp == other.cmp
            and self.threshold == other.threshold
        )


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
class Implies:
    left: "Formula"
    right: "Formula"


def _check_window(lo: int, hi: int):
    if not (isinstance(lo, int) and isinstance(hi, int)):
        raise FormulaError(f"window bounds must be integers, got [{lo!r},{hi!r}]")
    if not 0 <= lo <= hi:
        raise FormulaError(f"invalid window [{lo},{hi}]: need 0 <= lo <= hi")


@dataclass(frozen=True)
class Always:
    lo: int
    hi: int
    child: "Formula"

    def __post_init__(self):
        _check_window(self.lo, self.hi)


@dataclass(frozen=True)
class Eventually:
    lo: int
    hi: int
    child: "Formula"

    def __post_init__(self):
        _check_window(self.lo, self.hi)


@dataclass(frozen=True)
class Until:
    lo: int
    hi: int
    left: "Formula"
    right: "Formula"

    def __post_init__(self):
        _check_window(self.lo, self.hi)


Formula = Union[TrueF, Atom, LinAtom, Not, And, Or, Implies, Always, Eventually, Until]

BINARY_NODES = (And, Or, Implies)
TEMPORAL_NODES = (Always, Eventually, Until)


def conjoin(parts) -> Formula:
    """Fold a nonempty list of formulas into a left-associated conjunction."""
    parts = list(parts)
    if not parts:
        raise FormulaError("cannot conjoin an empty list")
    out = parts[0]
    for p in parts[1:]:
        out = And(out, p)
    return out


def conjuncts(f: Formula) -> list:
    """Flatten a top-level conjunction into its conjunct list."""
    if isinstance(f, And):
        return conjuncts(f.left) + conjuncts(f.right)
    return [f]


def variables(f: Formula) -> set:
    """All variable names referenced by the formula."""
    if isinstance(f, Atom):
        return {f.var}
    if isinstance(f, LinAtom):
        return set(f.coeffs)
    if isinstance(f, TrueF):
        return set()
    if isinstance(f, Not):
        return variables(f.child)
    if isinstance(f, BINARY_NODES):
        return variables(f.left) | variables(f.right)
    if isinstance(f, (Always, Eventually)):
        return variables(f.child)
    if isinstance(f, Until):
        return variables(f.left) | variables(f.right)
    raise FormulaError(f"unknown node {f!r}")


def horizon_of(f: Formula) -> int:
    """Largest step offset (relative to the evaluation time) the formula can touch."""
    if isinstance(f, (TrueF, Atom, LinAtom)):
        return 0
    if isinstance(f, Not):
        return horizon_of(f.child)
    if isinstance(f, BINARY_NODES):
        return max(horizon_of(f.left), horizon_of(f.right))
    if isinstance(f, (Always, Eventually)):
        return f.hi + horizon_of(f.child)
    if isinstance(f, Until):
        return f.hi + max(horizon_of(f.left), horizon_of(f.right))
    raise FormulaError(f"unknown node {f!r}")
