"""STL engine: formula AST, parsing, boolean and robustness monitoring."""

from .formula import (
    Always,
    And,
    Atom,
    Eventually,
    Formula,
    FormulaError,
    Implies,
    LinAtom,
    Not,
    Or,
    TrueF,
    Until,
    conjoin,
    conjuncts,
    horizon_of,
    variables,
)
from .parser import ParseError, parse, render
from .semantics import (
    eval_bool,
    eval_bool_many,
    robustness,
    robustness_many,
)
from .trace import Trace, TraceError, single_var_trace

__all__ = [
    "Always",
    "And",
    "Atom",
    "Eventually",
    "Formula",
    "FormulaError",
    "Implies",
    "LinAtom",
    "Not",
    "Or",
    "TrueF",
    "Until",
    "conjoin",
    "conjuncts",
    "horizon_of",
    "variables",
    "ParseError",
    "parse",
    "render",
    "eval_bool",
    "eval_bool_many",
    "robustness",
    "robustness_many",
    "Trace",
    "TraceError",
    "single_var_trace",
]
