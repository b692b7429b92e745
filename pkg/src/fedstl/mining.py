"""Template instantiation and tight-bound parameter inference.

A template is a formula skeleton whose selected thresholds are named holes.
Robustness of the filled formula is monotone in each hole value, so every
hole is solved independently by bisection: find the tightest value that keeps
the minimum robustness over the training traces at or above zero.  The
reported tightness is that residual robustness.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .projection import ClauseCapError, DnfError, _compiled, DEFAULT_CLAUSE_CAP
from .stl.formula import (
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
    conjoin,
    conjuncts,
    horizon_of,
)
from .stl.parser import parse, render
from .stl.semantics import eval_bool, eval_bool_many, robustness, robustness_many

log = logging.getLogger("fedstl.mining")

TOL_FLOOR = 1e-9
MAX_BISECT_ITERS = 200

UP = "up"      # robustness nondecreasing in the hole value
DOWN = "down"  # robustness nonincreasing


class MiningError(ValueError):
    """Template cannot be mined on the given data."""


@dataclass(frozen=True)
class Hole:
    """Named parameter hole standing in for a threshold."""

    name: str


@dataclass
class HoleSpec:
    name: str
    direction: str  # UP or DOWN
    lo: float | None = None  # None: derived from observed data
    hi: float | None = None


@dataclass
class Template:
    """Formula skeleton with named holes, per-hole monotone direction and bounds."""

    template_id: int
    skeleton: Formula
    holes: list

    def __post_init__(self):
        seen = _hole_polarities(self.skeleton)
        names = [h.name for h in self.holes]
        if len(set(names)) != len(names):
            raise MiningError(f"duplicate hole names in template {self.template_id}")
        if set(names) != set(seen):
            raise MiningError(
                f"template {self.template_id}: declared holes {sorted(names)} "
                f"do not match skeleton holes {sorted(seen)}"
            )
        for h in self.holes:
            if h.direction not in (UP, DOWN):
                raise MiningError(f"bad direction {h.direction!r} for hole {h.name}")
            if h.direction != seen[h.name]:
                raise MiningError(
                    f"hole {h.name}: declared {h.direction}, but polarity implies {seen[h.name]}"
                )

    def fill(self, params: dict) -> Formula:
        return _substitute(self.skeleton, params)


def _hole_polarities(f, negations: int = 0, out=None) -> dict:
    """Map hole name -> expected monotone direction, from atom polarity."""
    if out is None:
        out = {}
    if isinstance(f, (Atom, LinAtom)):
        if isinstance(f.threshold, Hole):
            name = f.threshold.name
            if name in out:
                raise MiningError(f"hole {name} appears more than once")
            base = UP if f.cmp in ("<=", "<") else DOWN
            if negations % 2 == 1:
                base = DOWN if base == UP else UP
            out[name] = base
        return out
    if isinstance(f, TrueF):
        return out
    if isinstance(f, Not):
        return _hole_polarities(f.child, negations + 1, out)
    if isinstance(f, Implies):
        _hole_polarities(f.left, negations + 1, out)
        return _hole_polarities(f.right, negations, out)
    if isinstance(f, (And, Or)):
        _hole_polarities(f.left, negations, out)
        return _hole_polarities(f.right, negations, out)
    if isinstance(f, (Always, Eventually)):
        return _hole_polarities(f.child, negations, out)
    if isinstance(f, Until):
        _hole_polarities(f.left, negations, out)
        return _hole_polarities(f.right, negations, out)
    raise MiningError(f"unknown node {f!r}")


def _substitute(f, params: dict):
    if isinstance(f, Atom):
        if isinstance(f.threshold, Hole):
            return Atom(f.var, f.cmp, float(params[f.threshold.name]))
        return f
    if isinstance(f, LinAtom):
        if isinstance(f.threshold, Hole):
            return LinAtom(f.coeffs, f.cmp, float(params[f.threshold.name]))
        return f
    if isinstance(f, TrueF):
        return f
    if isinstance(f, Not):
        return Not(_substitute(f.child, params))
    if isinstance(f, And):
        return And(_substitute(f.left, params), _substitute(f.right, params))
    if isinstance(f, Or):
        return Or(_substitute(f.left, params), _substitute(f.right, params))
    if isinstance(f, Implies):
        return Implies(_substitute(f.left, params), _substitute(f.right, params))
    if isinstance(f, Always):
        return Always(f.lo, f.hi, _substitute(f.child, params))
    if isinstance(f, Eventually):
        return Eventually(f.lo, f.hi, _substitute(f.child, params))
    if isinstance(f, Until):
        return Until(f.lo, f.hi, _substitute(f.left, params), _substitute(f.right, params))
    raise MiningError(f"unknown node {f!r}")


def _hole_atom(f, name):
    """The unique atom carrying the hole."""
    if isinstance(f, (Atom, LinAtom)):
        if isinstance(f.threshold, Hole) and f.threshold.name == name:
            return f
        return None
    if isinstance(f, (TrueF,)):
        return None
    if isinstance(f, Not):
        return _hole_atom(f.child, name)
    if isinstance(f, (And, Or, Implies, Until)):
        return _hole_atom(f.left, name) or _hole_atom(f.right, name)
    if isinstance(f, (Always, Eventually)):
        return _hole_atom(f.child, name)
    return None


@dataclass
class MinedProperty:
    """Fully instantiated template with its residual tightness."""

    formula: Formula
    tightness: float
    template_id: int
    params: dict = field(default_factory=dict)

    def to_text(self) -> str:
        lines = [f"# template {self.template_id}  eps={self.tightness!r}"]
        lines += [render(c) for c in conjuncts(self.formula)]
        return "\n".join(lines)


def mined_property_from_text(text: str) -> Formula:
    """Parse the serialized form back into the conjunction formula."""
    parts = [parse(line) for line in text.splitlines() if line.strip() and not line.lstrip().startswith("#")]
    if not parts:
        raise MiningError("no conjuncts in serialized property")
    return conjoin(parts)


# ---------------------------------------------------------------------------
# tight-bound inference
# ---------------------------------------------------------------------------


def signal_range(traces) -> float:
    lo = min(float(tr.values.min()) for tr in traces)
    hi = max(float(tr.values.max()) for tr in traces)
    return hi - lo


def default_tol(traces) -> float:
    return max(1e-6 * signal_range(traces), TOL_FLOOR)


def _observed_bounds(atom, traces):
    """Data-derived default bounds: observed [min - range, max + range] of the
    atom's value expression."""
    vals = []
    for tr in traces:
        if isinstance(atom, Atom):
            vals.append(tr.column(atom.var))
        else:
            combo = np.zeros(tr.length)
            for var, coeff in atom.coeffs.items():
                combo = combo + coeff * tr.column(var)
            vals.append(combo)
    vmin = min(float(v.min()) for v in vals)
    vmax = max(float(v.max()) for v in vals)
    rng = vmax - vmin
    return vmin - rng, vmax + rng


class _ConjunctEvaluator:
    """min-over-traces robustness and all-traces satisfaction of one conjunct."""

    def __init__(self, traces):
        self.traces = traces
        lengths = {tr.length for tr in traces}
        self.schema = traces[0].schema
        if len(lengths) == 1:
            self.stack = np.stack([tr.values for tr in traces])
        else:
            self.stack = None

    def satisfying(self, formula) -> tuple:
        if self.stack is not None:
            rho = robustness_many(formula, self.schema, self.stack, 0)
            sat = eval_bool_many(formula, self.schema, self.stack, 0)
            return float(rho.min()), bool(sat.all())
        rho = min(robustness(formula, tr, 0) for tr in self.traces)
        sat = all(eval_bool(formula, tr, 0) for tr in self.traces)
        return rho, sat


def infer_tight(tmpl: Template, traces, tol: float | None = None) -> MinedProperty:
    """Solve every hole by bisection; the filled formula satisfies all traces
    with residual robustness (tightness) in [0, tol]."""
    traces = list(traces)
    if not traces:
        raise MiningError("empty trace list")
    need = horizon_of(tmpl.skeleton) + 1
    short = [tr.length for tr in traces if tr.length < need]
    if short:
        raise MiningError(
            f"template {tmpl.template_id} needs {need} steps, shortest trace has {min(short)}"
        )
    if tol is None:
        tol = default_tol(traces)
    if tol <= 0:
        raise MiningError("tol must be positive")

    # group holes by the top-level conjunct they live in
    parts = conjuncts(tmpl.skeleton)
    hole_part = {}
    for spec in tmpl.holes:
        for i, part in enumerate(parts):
            if _hole_atom(part, spec.name) is not None:
                hole_part[spec.name] = i
                break

    bounds = {}
    for spec in tmpl.holes:
        atom = _hole_atom(tmpl.skeleton, spec.name)
        d_lo, d_hi = _observed_bounds(atom, traces)
        lo = d_lo if spec.lo is None else spec.lo
        hi = d_hi if spec.hi is None else spec.hi
        if lo > hi:
            hi = lo
        bounds[spec.name] = (lo, hi)

    # loosest value first; solved holes are pinned as we go
    params = {
        spec.name: (bounds[spec.name][1] if spec.direction == UP else bounds[spec.name][0])
        for spec in tmpl.holes
    }
    ev = _ConjunctEvaluator(traces)

    for spec in tmpl.holes:
        part = parts[hole_part[spec.name]]
        lo, hi = bounds[spec.name]
        loose, tight = (hi, lo) if spec.direction == UP else (lo, hi)

        def g(p):
            params[spec.name] = p
            return ev.satisfying(_substitute(part, params))

        rho_loose, sat_loose = g(loose)
        if not (rho_loose >= 0 and sat_loose):
            raise MiningError(
                f"template {tmpl.template_id} hole {spec.name}: "
                f"unsatisfiable on [{lo}, {hi}] (rho={rho_loose:.6g} at loosest)"
            )
        rho_tight, sat_tight = g(tight)
        if rho_tight >= 0 and sat_tight:
            params[spec.name] = tight  # both endpoints satisfy: keep the tighter one
            continue
        p_sat, p_unsat = loose, tight
        for _ in range(MAX_BISECT_ITERS):
            if abs(p_sat - p_unsat) <= tol:
                break
            mid = 0.5 * (p_sat + p_unsat)
            rho_mid, sat_mid = g(mid)
            if rho_mid >= 0 and sat_mid:
                p_sat = mid
            else:
                p_unsat = mid
        params[spec.name] = p_sat

    formula = tmpl.fill(params)
    eps, sat = _ConjunctEvaluator(traces).satisfying(formula)
    if eps < 0 or not sat:
        raise MiningError(
            f"template {tmpl.template_id}: solved parameters do not satisfy the data"
        )
    return MinedProperty(formula, float(eps), tmpl.template_id, dict(params))


# ---------------------------------------------------------------------------
# built-in template catalog
# ---------------------------------------------------------------------------

ALL_ROWS = (1, 2, 3, 4, 5, 6, 7)
TWO_VAR_ROWS = (4, 6)


def _windows(horizon: int, window_len: int):
    if window_len >= horizon:
        return [(0, horizon - 1)]
    return [(i * window_len, i * window_len + window_len - 1) for i in range(horizon // window_len)]


def builtin_templates(schema, horizon: int, window_len: int = 2, rows=None) -> list:
    """Catalog of reusable temporal-reasoning templates.

    Rows: 1 per-window operational range, 2 per-window existence bounds,
    3 chained until thresholds, 4 lower-bounded difference of two variables,
    5 threshold event implies a later threshold event (same variable),
    6 the two-variable version of 5, 7 independent eventualities.
    """
    schema = tuple(schema)
    if horizon < 1:
        raise MiningError("horizon must be >= 1")
    explicit = rows is not None
    if rows is None:
        rows = [r for r in ALL_ROWS if len(schema) >= 2 or r not in TWO_VAR_ROWS]
    x = schema[0]
    out = []
    wins = _windows(horizon, window_len)
    for row in rows:
        if row in TWO_VAR_ROWS and len(schema) < 2:
            if explicit:
                raise MiningError(f"template row {row} needs two variables, schema is {schema}")
            continue
        if row == 1 or row == 2:
            op = Always if row == 1 else Eventually
            parts, holes = [], []
            for i, (w0, w1) in enumerate(wins):
                a, b = Hole(f"a{i}"), Hole(f"b{i}")
                parts.append(op(w0, w1, And(Atom(x, "<=", a), Atom(x, ">=", b))))
                holes += [HoleSpec(a.name, UP), HoleSpec(b.name, DOWN)]
            out.append(Template(row, conjoin(parts), holes))
        elif row == 3:
            parts, holes = [], []
            for i, (w0, w1) in enumerate(wins):
                a, b = Hole(f"a{i}"), Hole(f"b{i}")
                parts.append(Until(w0, w1, Atom(x, "<", a), Atom(x, "<", b)))
                holes += [HoleSpec(a.name, UP), HoleSpec(b.name, UP)]
            out.append(Template(row, conjoin(parts), holes))
        elif row == 4:
            x1, x2 = schema[0], schema[1]
            parts, holes = [], []
            for i, (w0, w1) in enumerate(wins):
                a = Hole(f"a{i}")
                parts.append(Always(w0, w1, LinAtom({x1: 1.0, x2: -1.0}, ">", a)))
                # gaps below zero are not meaningful; infeasible data fails the row
                holes.append(HoleSpec(a.name, DOWN, lo=0.0))
            out.append(Template(row, conjoin(parts), holes))
        elif row in (5, 6):
            span = min(window_len, max(1, horizon - 2))
            body_hi = horizon - 1 - span
            if body_hi < 0:
                if explicit:
                    raise MiningError(f"template row {row} needs horizon > {span}")
                continue
            v1 = x if row == 5 else schema[0]
            v2 = x if row == 5 else schema[1]
            a1, a2 = Hole("a1"), Hole("a2")
            skel = Always(
                0, body_hi, Implies(Atom(v1, ">=", a1), Eventually(0, span, Atom(v2, ">=", a2)))
            )
            out.append(Template(row, skel, [HoleSpec("a1", UP), HoleSpec("a2", DOWN)]))
        elif row == 7:
            parts, holes = [], []
            for i, (w0, w1) in enumerate(wins):
                a = Hole(f"a{i}")
                parts.append(Eventually(w0, w1, Atom(x, ">=", a)))
                holes.append(HoleSpec(a.name, DOWN))
            out.append(Template(row, conjoin(parts), holes))
        else:
            raise MiningError(f"unknown template row {row}")
    return out


# ---------------------------------------------------------------------------
# per-client mining
# ---------------------------------------------------------------------------


def mine_properties(
    dataset,
    templates,
    tol: float | None = None,
    require_projectable: bool = True,
    cap: int = DEFAULT_CLAUSE_CAP,
) -> list:
    """Mine each template on the dataset; failures are skipped with a logged reason."""
    dataset = list(dataset)
    if not dataset:
        raise MiningError("empty dataset")
    mined = []
    for tmpl in sorted(templates, key=lambda t: t.template_id):
        try:
            prop = infer_tight(tmpl, dataset, tol)
        except MiningError as err:
            log.warning("template %d skipped: %s", tmpl.template_id, err)
            continue
        if require_projectable:
            try:
                _compiled(prop.formula, dataset[0].length, cap)
            except (ClauseCapError, DnfError) as err:
                log.warning(
                    "template %d mined but not enforceable (%s); skipped", tmpl.template_id, err
                )
                continue
        mined.append(prop)
    return mined


def mine_client_property(dataset, templates, tol: float | None = None, **kw) -> Formula:
    """Conjunction of all successfully mined template instances."""
    mined = mine_properties(dataset, templates, tol, **kw)
    if not mined:
        raise MiningError("all templates failed; client has no property")
    return conjoin([m.formula for m in mined])
