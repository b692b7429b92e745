"""DNF expansion over a finite horizon, L1-closest satisfying traces, and the
property loss.

A clause is a conjunction of per-step constraints on the flattened trace:
merged interval bounds per (step, variable) coordinate plus linear halfspaces.
The satisfaction region of a formula is the union of its clause polyhedra;
the property loss is the L1 distance to the nearest clause, and the teacher
correction returns that nearest point.

Losses and corrections are evaluated per coordinate-disjoint component of the
top-level conjunction.  Components cannot interact through L1 distance, so
this equals the min over the full product DNF while keeping clause counts
small for window-structured properties.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .stl.formula import (
    Always,
    And,
    Atom,
    Eventually,
    Formula,
    Implies,
    LinAtom,
    NEGATED_CMP,
    Not,
    Or,
    TrueF,
    Until,
    conjuncts,
    horizon_of,
)
from .stl.semantics import eval_bool, eval_bool_many
from .stl.trace import Trace

DEFAULT_CLAUSE_CAP = 4096
_MAX_LINEAR_PASSES = 8


class DnfError(ValueError):
    """Problems expanding or projecting onto a DNF."""


class UnsupportedNodeError(DnfError):
    """Formula outside the DNF fragment (negated temporal operators, etc.)."""


class ClauseCapError(DnfError):
    """Expansion would exceed the clause cap; signals a mis-specified formula."""


class InfeasibleClauseError(DnfError):
    """No clause of the formula can be satisfied by any trace edit."""


# ---------------------------------------------------------------------------
# negation normal form
# ---------------------------------------------------------------------------


def to_nnf(f: Formula) -> Formula:
    """Push negations to atoms and eliminate Implies."""
    if isinstance(f, (TrueF, Atom, LinAtom)):
        return f
    if isinstance(f, And):
        return And(to_nnf(f.left), to_nnf(f.right))
    if isinstance(f, Or):
        return Or(to_nnf(f.left), to_nnf(f.right))
    if isinstance(f, Implies):
        return Or(to_nnf(Not(f.left)), to_nnf(f.right))
    if isinstance(f, Always):
        return Always(f.lo, f.hi, to_nnf(f.child))
    if isinstance(f, Eventually):
        return Eventually(f.lo, f.hi, to_nnf(f.child))
    if isinstance(f, Until):
        return Until(f.lo, f.hi, to_nnf(f.left), to_nnf(f.right))
    if isinstance(f, Not):
        g = f.child
        if isinstance(g, Atom):
            return Atom(g.var, NEGATED_CMP[g.cmp], g.threshold)
        if isinstance(g, LinAtom):
            return LinAtom(g.coeffs, NEGATED_CMP[g.cmp], g.threshold)
        if isinstance(g, Not):
            return to_nnf(g.child)
        if isinstance(g, And):
            return Or(to_nnf(Not(g.left)), to_nnf(Not(g.right)))
        if isinstance(g, Or):
            return And(to_nnf(Not(g.left)), to_nnf(Not(g.right)))
        if isinstance(g, Implies):
            return And(to_nnf(g.left), to_nnf(Not(g.right)))
        if isinstance(g, Always):
            return Eventually(g.lo, g.hi, to_nnf(Not(g.child)))
        if isinstance(g, Eventually):
            return Always(g.lo, g.hi, to_nnf(Not(g.child)))
        raise UnsupportedNodeError(f"cannot negate {type(g).__name__} in the DNF fragment")
    raise UnsupportedNodeError(f"unknown node {f!r}")


# ---------------------------------------------------------------------------
# clauses
# ---------------------------------------------------------------------------


@dataclass
class Box:
    """Merged interval bounds for one (step, variable) coordinate."""

    lo: float = -math.inf
    lo_strict: bool = False
    hi: float = math.inf
    hi_strict: bool = False

    def tighten_lo(self, value: float, strict: bool):
        if value > self.lo or (value == self.lo and strict):
            self.lo, self.lo_strict = value, strict

    def tighten_hi(self, value: float, strict: bool):
        if value < self.hi or (value == self.hi and strict):
            self.hi, self.hi_strict = value, strict

    def closed_bounds(self, margin: float):
        lo = self.lo + margin if self.lo_strict else self.lo
        hi = self.hi - margin if self.hi_strict else self.hi
        return lo, hi


@dataclass(frozen=True)
class LinConstraint:
    """Halfspace sum(coeffs * vars@step) >= threshold (cmp normalized)."""

    step: int
    coeffs: tuple  # ((var, coeff), ...) in declaration order
    threshold: float
    strict: bool


@dataclass
class Clause:
    """Conjunction of halfspace constraints on the flattened trace."""

    boxes: dict = field(default_factory=dict)  # (step, var) -> Box
    linears: list = field(default_factory=list)

    def add_atom(self, atom, t: int):
        if isinstance(atom, Atom):
            box = self.boxes.setdefault((t, atom.var), Box())
            if atom.cmp in (">=", ">"):
                box.tighten_lo(atom.threshold, atom.cmp == ">")
            else:
                box.tighten_hi(atom.threshold, atom.cmp == "<")
            return
        # normalize linear constraints to the >= form
        coeffs = tuple(atom.coeffs.items())
        thr = atom.threshold
        if atom.cmp in ("<=", "<"):
            coeffs = tuple((v, -c) for v, c in coeffs)
            thr = -thr
        self.linears.append(LinConstraint(t, coeffs, thr, atom.cmp in (">", "<")))

    def merged_with(self, other: "Clause") -> "Clause":
        out = Clause({k: Box(b.lo, b.lo_strict, b.hi, b.hi_strict) for k, b in self.boxes.items()},
                     list(self.linears))
        for key, box in other.boxes.items():
            mine = out.boxes.setdefault(key, Box())
            mine.tighten_lo(box.lo, box.lo_strict)
            mine.tighten_hi(box.hi, box.hi_strict)
        for lin in other.linears:
            if lin not in out.linears:
                out.linears.append(lin)
        return out

    @property
    def constraints(self):
        """Flat (step, text) view used by dumps; boxes first in coordinate order."""
        items = []
        for (t, var), box in sorted(self.boxes.items()):
            if box.lo > -math.inf:
                items.append((t, f"{var} {'>' if box.lo_strict else '>='} {_num(box.lo)}"))
            if box.hi < math.inf:
                items.append((t, f"{var} {'<' if box.hi_strict else '<='} {_num(box.hi)}"))
        for lin in self.linears:
            terms = []
            for i, (var, coeff) in enumerate(lin.coeffs):
                mag = abs(coeff)
                body = var if mag == 1.0 else f"{_num(mag)}*{var}"
                if i == 0:
                    terms.append(body if coeff >= 0 else f"-{body}")
                else:
                    terms.append(f" + {body}" if coeff >= 0 else f" - {body}")
            op = ">" if lin.strict else ">="
            items.append((lin.step, f"{''.join(terms)} {op} {_num(lin.threshold)}"))
        return items

    def box_feasible(self, margin: float) -> bool:
        for box in self.boxes.values():
            lo, hi = box.closed_bounds(margin)
            if lo > hi:
                return False
        return True

    def satisfied_by(self, tr: Trace) -> bool:
        """Exact satisfaction (strictness honoured, no margin)."""
        for (t, var), box in self.boxes.items():
            v = tr.values[t, tr.var_index(var)]
            if v < box.lo or (box.lo_strict and v == box.lo):
                return False
            if v > box.hi or (box.hi_strict and v == box.hi):
                return False
        for lin in self.linears:
            dot = sum(c * tr.values[lin.step, tr.var_index(v)] for v, c in lin.coeffs)
            if dot < lin.threshold or (lin.strict and dot == lin.threshold):
                return False
        return True

    def slack(self, tr: Trace) -> float:
        """Signed satisfaction margin (strictness ignored, as in robustness)."""
        worst = math.inf
        for (t, var), box in self.boxes.items():
            v = tr.values[t, tr.var_index(var)]
            if box.lo > -math.inf:
                worst = min(worst, v - box.lo)
            if box.hi < math.inf:
                worst = min(worst, box.hi - v)
        for lin in self.linears:
            dot = sum(c * tr.values[lin.step, tr.var_index(v)] for v, c in lin.coeffs)
            worst = min(worst, dot - lin.threshold)
        return worst


def _num(v: float) -> str:
    if v == int(v) and abs(v) < 1e15:
        return str(int(v))
    return repr(float(v))


@dataclass
class DnfFormula:
    clauses: list
    source: Formula
    horizon: int

    def dump(self) -> str:
        """Debug text: one constraint per line as `t=K  var CMP value`."""
        blocks = []
        for i, clause in enumerate(self.clauses):
            lines = [f"clause {i}:"]
            lines += [f"t={t}  {text}" for t, text in clause.constraints]
            blocks.append("\n".join(lines))
        return "\n".join(blocks)

    def robustness(self, tr: Trace) -> float:
        return max(c.slack(tr) for c in self.clauses)

    def satisfied_by(self, tr: Trace) -> bool:
        return any(c.satisfied_by(tr) for c in self.clauses)


def _product(lists_a, lists_b, cap: int):
    if len(lists_a) * len(lists_b) > cap:
        raise ClauseCapError(
            f"clause expansion exceeds cap ({len(lists_a)}x{len(lists_b)} > {cap})"
        )
    return [a.merged_with(b) for a in lists_a for b in lists_b]


def _expand(f, t: int, horizon: int, cap: int):
    if isinstance(f, TrueF):
        return [Clause()]
    if isinstance(f, (Atom, LinAtom)):
        if t >= horizon:
            raise DnfError(f"formula references step {t} beyond horizon {horizon}")
        c = Clause()
        c.add_atom(f, t)
        return [c]
    if isinstance(f, And):
        return _product(
            _expand(f.left, t, horizon, cap), _expand(f.right, t, horizon, cap), cap
        )
    if isinstance(f, Or):
        out = _expand(f.left, t, horizon, cap) + _expand(f.right, t, horizon, cap)
        if len(out) > cap:
            raise ClauseCapError(f"clause count {len(out)} exceeds cap {cap}")
        return out
    if isinstance(f, Always):
        out = [Clause()]
        for u in range(t + f.lo, t + f.hi + 1):
            out = _product(out, _expand(f.child, u, horizon, cap), cap)
        return out
    if isinstance(f, Eventually):
        out = []
        for u in range(t + f.lo, t + f.hi + 1):
            out += _expand(f.child, u, horizon, cap)
        if len(out) > cap:
            raise ClauseCapError(f"clause count {len(out)} exceeds cap {cap}")
        return out
    if isinstance(f, Until):
        out = []
        for u in range(t + f.lo, t + f.hi + 1):
            alts = _expand(f.right, u, horizon, cap)
            # left operand must hold on [t, u], inclusive of the witness
            for v in range(t, u + 1):
                alts = _product(alts, _expand(f.left, v, horizon, cap), cap)
            out += alts
            if len(out) > cap:
                raise ClauseCapError(f"clause count {len(out)} exceeds cap {cap}")
        return out
    raise UnsupportedNodeError(f"cannot expand {type(f).__name__} (apply NNF first)")


def to_dnf(f: Formula, horizon: int, cap: int = DEFAULT_CLAUSE_CAP) -> DnfFormula:
    """Expand f into its clause form over `horizon` steps starting at t=0."""
    if horizon_of(f) >= horizon:
        raise DnfError(
            f"formula horizon {horizon_of(f)} does not fit in {horizon} steps"
        )
    clauses = _expand(to_nnf(f), 0, horizon, cap)
    return DnfFormula(clauses, f, horizon)


# ---------------------------------------------------------------------------
# projection
# ---------------------------------------------------------------------------


def default_margin(values) -> float:
    """Strictness margin: 1e-6 of the signal range (scale-free)."""
    arr = np.asarray(values, dtype=np.float64)
    span = float(arr.max() - arr.min()) if arr.size else 0.0
    scale = span if span > 0 else max(1.0, float(np.abs(arr).max()) if arr.size else 1.0)
    return 1e-6 * scale


def _project_clause_batch(clause: Clause, Y: np.ndarray, var_index, margin: float):
    """Project each trace of Y (N, L, V) onto the clause polyhedron.

    Returns (projected, cost, feasible); near-optimal for interacting linear
    constraints, exact elsewhere.  Infeasible samples keep cost=inf.
    """
    n = Y.shape[0]
    if not clause.box_feasible(margin):
        return Y.copy(), np.full(n, np.inf), np.zeros(n, dtype=bool)
    out = Y.copy()
    for (t, var), box in clause.boxes.items():
        lo, hi = box.closed_bounds(margin)
        col = var_index[var]
        out[:, t, col] = np.clip(out[:, t, col], lo, hi)
    feasible = np.ones(n, dtype=bool)
    if clause.linears:
        for _ in range(_MAX_LINEAR_PASSES):
            moved = False
            for lin in clause.linears:
                target = lin.threshold + (margin if lin.strict else 0.0)
                cols = [(var_index[v], c) for v, c in lin.coeffs]
                dot = np.zeros(n)
                for col, c in cols:
                    dot += c * out[:, lin.step, col]
                viol = target - dot
                if not np.any(viol > 0):
                    continue
                moved = True
                # move coordinates by descending |coefficient|, respecting boxes
                order = sorted(range(len(cols)), key=lambda i: (-abs(cols[i][1]), cols[i][0]))
                for i in order:
                    col, c = cols[i]
                    box = clause.boxes.get((lin.step, _var_of(lin, i)), None)
                    cur = out[:, lin.step, col]
                    if c > 0:
                        limit = np.inf if box is None else box.closed_bounds(margin)[1]
                        room = np.maximum(limit - cur, 0.0)
                    else:
                        limit = -np.inf if box is None else box.closed_bounds(margin)[0]
                        room = np.maximum(cur - limit, 0.0)
                    closable = room * abs(c)
                    take = np.minimum(np.maximum(viol, 0.0), closable)
                    out[:, lin.step, col] = cur + np.sign(c) * take / abs(c)
                    viol = viol - take
            if not moved:
                break
        # float guard: rounding of take/|c| can land one ulp short of a closed
        # halfspace; nudge coordinates (box-aware) until it holds, then decide
        # feasibility from the final state only
        for lin in clause.linears:
            target = lin.threshold + (margin if lin.strict else 0.0)
            cols = [(var_index[v], c) for v, c in lin.coeffs]
            order = sorted(range(len(cols)), key=lambda i: (-abs(cols[i][1]), cols[i][0]))
            for _ in range(4):
                dot = np.zeros(n)
                for col, c in cols:
                    dot += c * out[:, lin.step, col]
                short = dot < target
                if not np.any(short):
                    break
                for i in order:
                    col, c = cols[i]
                    box = clause.boxes.get((lin.step, _var_of(lin, i)), None)
                    cur = out[:, lin.step, col]
                    if c > 0:
                        limit = np.inf if box is None else box.closed_bounds(margin)[1]
                        bumped = np.nextafter(cur, np.inf)
                        ok = short & (bumped <= limit)
                    else:
                        limit = -np.inf if box is None else box.closed_bounds(margin)[0]
                        bumped = np.nextafter(cur, -np.inf)
                        ok = short & (bumped >= limit)
                    out[:, lin.step, col] = np.where(ok, bumped, cur)
                    short = short & ~ok
                    if not np.any(short):
                        break
        for lin in clause.linears:
            target = lin.threshold + (margin if lin.strict else 0.0)
            dot = np.zeros(n)
            for v, c in lin.coeffs:
                dot += c * out[:, lin.step, var_index[v]]
            feasible &= dot >= target
    cost = np.abs(out - Y).sum(axis=(1, 2))
    cost = np.where(feasible, cost, np.inf)
    return out, cost, feasible


def _var_of(lin: LinConstraint, i: int) -> str:
    return lin.coeffs[i][0]


def project_clause(clause: Clause, y: Trace, margin: float | None = None) -> Trace:
    """L1-minimal edit of y satisfying every constraint in the clause."""
    if margin is None:
        margin = default_margin(y.values)
    var_index = {v: i for i, v in enumerate(y.schema)}
    out, cost, feasible = _project_clause_batch(clause, y.values[None, :, :], var_index, margin)
    if not feasible[0]:
        raise InfeasibleClauseError("clause is infeasible")
    return Trace(y.schema, out[0])


# ---------------------------------------------------------------------------
# component-wise loss and teacher correction
# ---------------------------------------------------------------------------


def _support(f, t: int) -> frozenset:
    if isinstance(f, TrueF):
        return frozenset()
    if isinstance(f, Atom):
        return frozenset({(t, f.var)})
    if isinstance(f, LinAtom):
        return frozenset((t, v) for v in f.coeffs)
    if isinstance(f, Not):
        return _support(f.child, t)
    if isinstance(f, (And, Or, Implies)):
        return _support(f.left, t) | _support(f.right, t)
    if isinstance(f, (Always, Eventually)):
        out = frozenset()
        for u in range(t + f.lo, t + f.hi + 1):
            out |= _support(f.child, u)
        return out
    if isinstance(f, Until):
        out = frozenset()
        for u in range(t + f.lo, t + f.hi + 1):
            out |= _support(f.right, u)
        for v in range(t, t + f.hi + 1):
            out |= _support(f.left, v)
        return out
    raise UnsupportedNodeError(f"unknown node {f!r}")


class _CompiledProperty:
    """Clause sets for the coordinate-disjoint components of a conjunction."""

    def __init__(self, f: Formula, horizon: int, cap: int):
        if horizon_of(f) >= horizon:
            raise DnfError(
                f"formula horizon {horizon_of(f)} does not fit in {horizon} steps"
            )
        self.source = f
        self.horizon = horizon
        parts = [to_nnf(p) for p in conjuncts(to_nnf(f))]
        supports = [_support(p, 0) for p in parts]
        # union-find over conjuncts sharing a coordinate
        parent = list(range(len(parts)))

        def find(i):
            while parent[i] != i:
                parent[i] = parent[parent[i]]
                i = parent[i]
            return i

        coord_owner: dict = {}
        for i, sup in enumerate(supports):
            for coord in sup:
                j = coord_owner.setdefault(coord, i)
                if j != i:
                    parent[find(i)] = find(j)
        groups: dict = {}
        for i in range(len(parts)):
            groups.setdefault(find(i), []).append(i)
        self.components = []
        for root in sorted(groups):
            idxs = groups[root]
            clauses = [Clause()]
            for i in idxs:
                clauses = _product(clauses, _expand(parts[i], 0, horizon, cap), cap)
            self.components.append(clauses)


_COMPILE_CACHE: dict = {}


def _compiled(f: Formula, horizon: int, cap: int) -> _CompiledProperty:
    key = (id(f), horizon, cap)
    hit = _COMPILE_CACHE.get(key)
    if hit is None or hit.source is not f:
        hit = _CompiledProperty(f, horizon, cap)
        if len(_COMPILE_CACHE) > 256:
            _COMPILE_CACHE.clear()
        _COMPILE_CACHE[key] = hit
    return hit


def property_loss_many(
    f: Formula,
    schema,
    Y: np.ndarray,
    margin: float | None = None,
    cap: int = DEFAULT_CLAUSE_CAP,
) -> np.ndarray:
    """L1 distance from each trace in Y (N, L, V) to the satisfaction region."""
    Y = np.asarray(Y, dtype=np.float64)
    if Y.ndim == 2:
        Y = Y[:, :, None]
    if margin is None:
        margin = default_margin(Y)
    comp = _compiled(f, Y.shape[1], cap)
    var_index = {v: i for i, v in enumerate(tuple(schema))}
    total = np.zeros(Y.shape[0])
    for clauses in comp.components:
        costs = np.stack(
            [_project_clause_batch(c, Y, var_index, margin)[1] for c in clauses]
        )
        best = costs.min(axis=0)
        if np.any(np.isinf(best)):
            raise InfeasibleClauseError("all clauses infeasible for some trace")
        total += best
    return total


def property_loss(
    f: Formula,
    y: Trace,
    horizon: int | None = None,
    margin: float | None = None,
    cap: int = DEFAULT_CLAUSE_CAP,
) -> float:
    """L1 distance from y to the nearest satisfying trace (0 iff satisfied)."""
    if horizon is not None and horizon != y.length:
        y = Trace(y.schema, y.values[:horizon])
    return float(property_loss_many(f, y.schema, y.values[None, :, :], margin, cap)[0])


def teacher_correct_many(
    f: Formula,
    schema,
    Y: np.ndarray,
    margin: float | None = None,
    cap: int = DEFAULT_CLAUSE_CAP,
) -> np.ndarray:
    """Replace every trace in Y by its nearest satisfying trace."""
    Y = np.asarray(Y, dtype=np.float64)
    if Y.ndim == 2:
        Y = Y[:, :, None]
    if margin is None:
        margin = default_margin(Y)
    schema = tuple(schema)
    comp = _compiled(f, Y.shape[1], cap)
    var_index = {v: i for i, v in enumerate(schema)}
    out = Y.copy()
    for clauses in comp.components:
        projections = []
        costs = []
        for c in clauses:
            proj, cost, _ = _project_clause_batch(c, out, var_index, margin)
            projections.append(proj)
            costs.append(cost)
        costs = np.stack(costs)
        if np.any(np.isinf(costs.min(axis=0))):
            raise InfeasibleClauseError("all clauses infeasible for some trace")
        # ties resolve to the lowest clause index (argmin returns first minimum)
        choice = costs.argmin(axis=0)
        stacked = np.stack(projections)
        out = stacked[choice, np.arange(Y.shape[0])]
    sat = eval_bool_many(f, schema, out, 0)
    if not np.all(sat):
        raise DnfError("teacher correction failed to satisfy the formula")
    return out


def teacher_correct(
    f: Formula,
    y: Trace,
    horizon: int | None = None,
    margin: float | None = None,
    cap: int = DEFAULT_CLAUSE_CAP,
) -> Trace:
    """Nearest satisfying trace to y; satisfies f exactly under eval_bool."""
    if horizon is not None and horizon != y.length:
        y = Trace(y.schema, y.values[:horizon])
    out = teacher_correct_many(f, y.schema, y.values[None, :, :], margin, cap)[0]
    result = Trace(y.schema, out)
    assert eval_bool(f, result, 0)
    return result
