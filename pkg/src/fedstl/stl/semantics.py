"""Boolean and quantitative (robustness) evaluation of formulas on traces.

Temporal windows are inclusive step ranges relative to the evaluation time.
An Until witness time t' requires the left operand on all of [t, t'],
inclusive of t' itself.  Out-of-range windows raise instead of truncating.
"""

from __future__ import annotations

import math

import numpy as np

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
)
from .trace import Trace, TraceError


def _check_time(tr_length: int, t: int):
    if not 0 <= t < tr_length:
        raise TraceError(f"evaluation time {t} out of range [0, {tr_length - 1}]")


def _window(f, t: int, length: int):
    lo, hi = t + f.lo, t + f.hi
    if hi >= length:
        raise TraceError(
            f"window [{lo},{hi}] exceeds trace of length {length} (no truncation)"
        )
    return lo, hi


def _atom_value(f, tr: Trace, t: int) -> float:
    if isinstance(f, Atom):
        return float(tr.values[t, tr.var_index(f.var)])
    total = 0.0
    for var, coeff in f.coeffs.items():
        total += coeff * float(tr.values[t, tr.var_index(var)])
    return total


def _cmp_holds(value: float, cmp: str, threshold: float) -> bool:
    if cmp == ">=":
        return value >= threshold
    if cmp == ">":
        return value > threshold
    if cmp == "<=":
        return value <= threshold
    return value < threshold


def _slack(value: float, cmp: str, threshold: float) -> float:
    # Strict and non-strict share the same margin.
    if cmp in (">=", ">"):
        return value - threshold
    return threshold - value


def eval_bool(f: Formula, tr: Trace, t: int = 0) -> bool:
    """Definitional boolean satisfaction of f on tr at step t."""
    _check_time(tr.length, t)
    return _eval(f, tr, t)


def _eval(f, tr, t) -> bool:
    if isinstance(f, TrueF):
        return True
    if isinstance(f, (Atom, LinAtom)):
        _check_time(tr.length, t)
        return _cmp_holds(_atom_value(f, tr, t), f.cmp, f.threshold)
    if isinstance(f, Not):
        return not _eval(f.child, tr, t)
    if isinstance(f, And):
        return _eval(f.left, tr, t) and _eval(f.right, tr, t)
    if isinstance(f, Or):
        return _eval(f.left, tr, t) or _eval(f.right, tr, t)
    if isinstance(f, Implies):
        return (not _eval(f.left, tr, t)) or _eval(f.right, tr, t)
    if isinstance(f, Always):
        lo, hi = _window(f, t, tr.length)
        return all(_eval(f.child, tr, u) for u in range(lo, hi + 1))
    if isinstance(f, Eventually):
        lo, hi = _window(f, t, tr.length)
        return any(_eval(f.child, tr, u) for u in range(lo, hi + 1))
    if isinstance(f, Until):
        lo, hi = _window(f, t, tr.length)
        for u in range(lo, hi + 1):
            if _eval(f.right, tr, u) and all(_eval(f.left, tr, v) for v in range(t, u + 1)):
                return True
        return False
    raise FormulaError(f"unknown node {f!r}")


def robustness(f: Formula, tr: Trace, t: int = 0) -> float:
    """Quantitative satisfaction margin; positive implies satisfied, negative violated."""
    _check_time(tr.length, t)
    return _rho(f, tr, t)


def _rho(f, tr, t) -> float:
    if isinstance(f, TrueF):
        return math.inf
    if isinstance(f, (Atom, LinAtom)):
        _check_time(tr.length, t)
        return _slack(_atom_value(f, tr, t), f.cmp, f.threshold)
    if isinstance(f, Not):
        return -_rho(f.child, tr, t)
    if isinstance(f, And):
        return min(_rho(f.left, tr, t), _rho(f.right, tr, t))
    if isinstance(f, Or):
        return max(_rho(f.left, tr, t), _rho(f.right, tr, t))
    if isinstance(f, Implies):
        return max(-_rho(f.left, tr, t), _rho(f.right, tr, t))
    if isinstance(f, Always):
        lo, hi = _window(f, t, tr.length)
        return min(_rho(f.child, tr, u) for u in range(lo, hi + 1))
    if isinstance(f, Eventually):
        lo, hi = _window(f, t, tr.length)
        return max(_rho(f.child, tr, u) for u in range(lo, hi + 1))
    if isinstance(f, Until):
        lo, hi = _window(f, t, tr.length)
        # prefix = min of the left operand over [t, u], inclusive of the witness u
        prefix = min(_rho(f.left, tr, v) for v in range(t, lo + 1))
        best = -math.inf
        for u in range(lo, hi + 1):
            if u > lo:
                prefix = min(prefix, _rho(f.left, tr, u))
            best = max(best, min(_rho(f.right, tr, u), prefix))
        return best
    raise FormulaError(f"unknown node {f!r}")


# ---------------------------------------------------------------------------
# Batched evaluation over a stack of equal-length traces.  Same semantics as
# the scalar walkers above; used on hot paths (mining, metrics, projections).
# ---------------------------------------------------------------------------


class _Stack:
    __slots__ = ("schema", "values", "index")

    def __init__(self, schema, values):
        self.schema = tuple(schema)
        self.values = values  # (N, L, V)
        self.index = {v: i for i, v in enumerate(self.schema)}

    @property
    def length(self):
        return self.values.shape[1]


def _as_stack(schema, stacked) -> _Stack:
    arr = np.asarray(stacked, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3:
        raise TraceError(f"stacked traces must be (N, L, V), got {arr.shape}")
    if arr.shape[2] != len(tuple(schema)):
        raise TraceError("stacked trace width does not match schema")
    return _Stack(schema, arr)


def _atom_value_many(f, st: _Stack, t: int) -> np.ndarray:
    if isinstance(f, Atom):
        return st.values[:, t, st.index[f.var]]
    total = np.zeros(st.values.shape[0])
    for var, coeff in f.coeffs.items():
        total = total + coeff * st.values[:, t, st.index[var]]
    return total


def robustness_many(f: Formula, schema, stacked, t: int = 0) -> np.ndarray:
    """Vectorized robustness over N traces stacked as (N, L, V); returns (N,)."""
    st = _as_stack(schema, stacked)
    _check_time(st.length, t)
    return _rho_many(f, st, t, {})


def _rho_many(f, st: _Stack, t: int, memo) -> np.ndarray:
    key = (id(f), t)
    got = memo.get(key)
    if got is not None:
        return got
    if isinstance(f, TrueF):
        out = np.full(st.values.shape[0], np.inf)
    elif isinstance(f, (Atom, LinAtom)):
        _check_time(st.length, t)
        if isinstance(f, Atom):
            if f.var not in st.index:
                raise TraceError(f"variable {f.var!r} not in schema {st.schema}")
        else:
            for var in f.coeffs:
                if var not in st.index:
                    raise TraceError(f"variable {var!r} not in schema {st.schema}")
        val = _atom_value_many(f, st, t)
        out = val - f.threshold if f.cmp in (">=", ">") else f.threshold - val
    elif isinstance(f, Not):
        out = -_rho_many(f.child, st, t, memo)
    elif isinstance(f, And):
        out = np.minimum(_rho_many(f.left, st, t, memo), _rho_many(f.right, st, t, memo))
    elif isinstance(f, Or):
        out = np.maximum(_rho_many(f.left, st, t, memo), _rho_many(f.right, st, t, memo))
    elif isinstance(f, Implies):
        out = np.maximum(-_rho_many(f.left, st, t, memo), _rho_many(f.right, st, t, memo))
    elif isinstance(f, (Always, Eventually)):
        lo, hi = _window(f, t, st.length)
        rows = np.stack([_rho_many(f.child, st, u, memo) for u in range(lo, hi + 1)])
        out = rows.min(axis=0) if isinstance(f, Always) else rows.max(axis=0)
    elif isinstance(f, Until):
        lo, hi = _window(f, t, st.length)
        prefix = _rho_many(f.left, st, t, memo).copy()
        for v in range(t + 1, lo + 1):
            prefix = np.minimum(prefix, _rho_many(f.left, st, v, memo))
        best = np.full(st.values.shape[0], -np.inf)
        for u in range(lo, hi + 1):
            if u > lo:
                prefix = np.minimum(prefix, _rho_many(f.left, st, u, memo))
            best = np.maximum(best, np.minimum(_rho_many(f.right, st, u, memo), prefix))
        out = best
    else:
        raise FormulaError(f"unknown node {f!r}")
    memo[key] = out
    return out


def eval_bool_many(f: Formula, schema, stacked, t: int = 0) -> np.ndarray:
    """Vectorized boolean satisfaction over N stacked traces; returns (N,) bool."""
    st = _as_stack(schema, stacked)
    _check_time(st.length, t)
    return _eval_many(f, st, t, {})


def _eval_many(f, st: _Stack, t: int, memo) -> np.ndarray:
    key = (id(f), t)
    got = memo.get(key)
    if got is not None:
        return got
    n = st.values.shape[0]
    if isinstance(f, TrueF):
        out = np.ones(n, dtype=bool)
    elif isinstance(f, (Atom, LinAtom)):
        _check_time(st.length, t)
        val = _atom_value_many(f, st, t)
        if f.cmp == ">=":
            out = val >= f.threshold
        elif f.cmp == ">":
            out = val > f.threshold
        elif f.cmp == "<=":
            out = val <= f.threshold
        else:
            out = val < f.threshold
    elif isinstance(f, Not):
        out = ~_eval_many(f.child, st, t, memo)
    elif isinstance(f, And):
        out = _eval_many(f.left, st, t, memo) & _eval_many(f.right, st, t, memo)
    elif isinstance(f, Or):
        out = _eval_many(f.left, st, t, memo) | _eval_many(f.right, st, t, memo)
    elif isinstance(f, Implies):
        out = (~_eval_many(f.left, st, t, memo)) | _eval_many(f.right, st, t, memo)
    elif isinstance(f, (Always, Eventually)):
        lo, hi = _window(f, t, st.length)
        rows = np.stack([_eval_many(f.child, st, u, memo) for u in range(lo, hi + 1)])
        out = rows.all(axis=0) if isinstance(f, Always) else rows.any(axis=0)
    elif isinstance(f, Until):
        lo, hi = _window(f, t, st.length)
        prefix = _eval_many(f.left, st, t, memo).copy()
        for v in range(t + 1, lo + 1):
            prefix = prefix & _eval_many(f.left, st, v, memo)
        best = np.zeros(n, dtype=bool)
        for u in range(lo, hi + 1):
            if u > lo:
                prefix = prefix & _eval_many(f.left, st, u, memo)
            best = best | (_eval_many(f.right, st, u, memo) & prefix)
        out = best
    else:
        raise FormulaError(f"unknown node {f!r}")
    memo[key] = out
    return out
