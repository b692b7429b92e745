import numpy as np
import pytest

from fedstl.mining import (
    DOWN,
    Hole,
    HoleSpec,
    MiningError,
    Template,
    UP,
    builtin_templates,
    default_tol,
    infer_tight,
    mine_client_property,
    mine_properties,
    mined_property_from_text,
)
from fedstl.stl import (
    Always,
    And,
    Atom,
    Eventually,
    Implies,
    LinAtom,
    Not,
    Trace,
    conjuncts,
    eval_bool,
    robustness,
    single_var_trace,
)

TOL = 1e-6


def up_always_template(lo, hi):
    return Template(1, Always(lo, hi, Atom("x", "<=", Hole("a"))), [HoleSpec("a", UP)])


def test_tight_upper_bound_on_ramp():
    mined = infer_tight(up_always_template(0, 2), [single_var_trace([1, 2, 3])], TOL)
    assert mined.params["a"] == pytest.approx(3.0, abs=2 * TOL)
    assert 0.0 <= mined.tightness <= TOL


def test_tight_lower_bound_single_point():
    tmpl = Template(1, Always(0, 0, Atom("x", ">=", Hole("b"))), [HoleSpec("b", DOWN)])
    mined = infer_tight(tmpl, [single_var_trace([5.0])], TOL)
    assert mined.params["b"] == 5.0
    assert mined.tightness == 0.0


def test_tight_eventually_lower_bound_two_traces():
    tmpl = Template(7, Eventually(0, 2, Atom("x", ">=", Hole("a"))), [HoleSpec("a", DOWN)])
    traces = [single_var_trace([1, 4, 2]), single_var_trace([3, 1, 1])]
    mined = infer_tight(tmpl, traces, TOL)
    # per-trace maxima are 4 and 3; the tight bound is their minimum
    assert mined.params["a"] == pytest.approx(3.0, abs=2 * TOL)
    assert all(eval_bool(mined.formula, tr, 0) for tr in traces)


def test_unsatisfiable_template_errors():
    tmpl = Template(
        4,
        Always(0, 1, LinAtom({"x1": 1.0, "x2": -1.0}, ">", Hole("a"))),
        [HoleSpec("a", DOWN, lo=0.0)],
    )
    tr = Trace(("x1", "x2"), np.array([[1.0, 2.0], [0.0, 3.0]]))  # x1 < x2 everywhere
    with pytest.raises(MiningError, match="unsatisfiable"):
        infer_tight(tmpl, [tr], TOL)


def test_empty_trace_list_errors():
    with pytest.raises(MiningError, match="empty"):
        infer_tight(up_always_template(0, 1), [], TOL)


def test_short_trace_errors():
    with pytest.raises(MiningError, match="steps"):
        infer_tight(up_always_template(0, 5), [single_var_trace([1, 2])], TOL)


def test_direction_consistency_checked():
    with pytest.raises(MiningError, match="polarity"):
        Template(1, Always(0, 1, Atom("x", "<=", Hole("a"))), [HoleSpec("a", DOWN)])
    # a <=-atom under one negation flips to nonincreasing
    Template(1, Not(Atom("x", "<=", Hole("a"))), [HoleSpec("a", DOWN)])
    # and the antecedent of an implication counts as one negation
    Template(
        5,
        Implies(Atom("x", ">=", Hole("a1")), Atom("x", ">=", Hole("a2"))),
        [HoleSpec("a1", UP), HoleSpec("a2", DOWN)],
    )


def test_hole_must_appear_exactly_once():
    with pytest.raises(MiningError):
        Template(
            1,
            And(Atom("x", "<=", Hole("a")), Atom("x", "<=", Hole("a"))),
            [HoleSpec("a", UP)],
        )
    with pytest.raises(MiningError, match="do not match"):
        Template(1, Atom("x", "<=", Hole("a")), [HoleSpec("a", UP), HoleSpec("zz", UP)])


# --- builtin templates --------------------------------------------------------


def test_row1_window_structure():
    (tmpl,) = builtin_templates(("x",), horizon=24, window_len=2, rows=[1])
    parts = conjuncts(tmpl.skeleton)
    assert len(parts) == 12
    assert len(tmpl.holes) == 24
    first = parts[0]
    assert isinstance(first, Always) and (first.lo, first.hi) == (0, 1)


def test_row7_degenerate_single_window():
    (tmpl,) = builtin_templates(("x",), horizon=2, window_len=2, rows=[7])
    assert isinstance(tmpl.skeleton, Eventually)
    assert len(tmpl.holes) == 1


def test_row5_single_variable_two_holes():
    (tmpl,) = builtin_templates(("x",), horizon=24, window_len=2, rows=[5])
    assert sorted(h.name for h in tmpl.holes) == ["a1", "a2"]
    assert isinstance(tmpl.skeleton, Always)
    assert isinstance(tmpl.skeleton.child, Implies)


def test_two_var_rows_need_two_vars():
    with pytest.raises(MiningError, match="two variables"):
        builtin_templates(("x",), horizon=8, rows=[4])
    default = builtin_templates(("x",), horizon=8)
    assert {t.template_id for t in default} == {1, 2, 3, 5, 7}
    both = builtin_templates(("x1", "x2"), horizon=8)
    assert {t.template_id for t in both} == {1, 2, 3, 4, 5, 6, 7}


def test_all_rows_mine_on_smooth_data():
    rng = np.random.default_rng(0)
    t = np.arange(24)
    traces = []
    for k in range(6):
        x1 = 10 + 2 * np.sin(2 * np.pi * (t + k) / 8.0) + rng.normal(0, 0.1, 24)
        x2 = x1 - 5.0
        traces.append(Trace(("x1", "x2"), np.stack([x1, x2], axis=1)))
    templates = builtin_templates(("x1", "x2"), horizon=24, window_len=2)
    mined = mine_properties(traces, templates, require_projectable=False)
    assert {m.template_id for m in mined} == {1, 2, 3, 4, 5, 6, 7}
    for m in mined:
        assert m.tightness >= 0.0
        for tr in traces:
            assert eval_bool(m.formula, tr, 0), m.template_id


def test_mined_conjunction_satisfies_every_trace():
    rng = np.random.default_rng(1)
    t = np.arange(12)
    traces = [
        single_var_trace(5 + np.sin(2 * np.pi * (t + p) / 6.0) + rng.normal(0, 0.05, 12))
        for p in range(10)
    ]
    templates = builtin_templates(("x",), horizon=12, window_len=2, rows=[1, 2])
    formula = mine_client_property(traces, templates)
    for tr in traces:
        assert eval_bool(formula, tr, 0)


def test_constant_trace_bounds_collapse():
    (tmpl,) = builtin_templates(("x",), horizon=3, window_len=3, rows=[1])
    mined = infer_tight(tmpl, [single_var_trace([4.0, 4.0, 4.0])])
    assert mined.params["a0"] == 4.0 and mined.params["b0"] == 4.0
    assert mined.tightness == 0.0


def test_row4_skipped_when_gap_negative():
    rng = np.random.default_rng(2)
    data = np.stack([rng.uniform(0, 1, 8), rng.uniform(2, 3, 8)], axis=1)  # x1 < x2
    traces = [Trace(("x1", "x2"), data)]
    templates = builtin_templates(("x1", "x2"), horizon=8, window_len=2, rows=[1, 4])
    mined = mine_properties(traces, templates, require_projectable=False)
    assert {m.template_id for m in mined} == {1}
    formula = mine_client_property(traces, templates, require_projectable=False)
    assert all(eval_bool(formula, tr, 0) for tr in traces)


def test_all_templates_failing_is_error():
    tr = Trace(("x1", "x2"), np.array([[0.0, 5.0], [0.0, 5.0]]))
    templates = builtin_templates(("x1", "x2"), horizon=2, window_len=2, rows=[4])
    with pytest.raises(MiningError, match="no property"):
        mine_client_property([tr], templates)


# --- solver quality -----------------------------------------------------------


def test_bisection_matches_grid_oracle():
    rng = np.random.default_rng(3)
    for _ in range(30):
        length = 6
        traces = [single_var_trace(rng.uniform(-3, 3, length)) for _ in range(3)]
        kind = rng.integers(4)
        if kind == 0:
            tmpl = Template(1, Always(0, 5, Atom("x", "<=", Hole("p"))), [HoleSpec("p", UP)])
        elif kind == 1:
            tmpl = Template(1, Always(0, 5, Atom("x", ">=", Hole("p"))), [HoleSpec("p", DOWN)])
        elif kind == 2:
            tmpl = Template(7, Eventually(1, 4, Atom("x", ">=", Hole("p"))), [HoleSpec("p", DOWN)])
        else:
            tmpl = Template(2, Eventually(0, 3, Atom("x", "<=", Hole("p"))), [HoleSpec("p", UP)])
        mined = infer_tight(tmpl, traces, 1e-6)
        got = mined.params["p"]

        grid = np.arange(-9.0, 9.0, 1e-4)
        rho = np.array(
            [min(robustness(tmpl.fill({"p": p}), tr, 0) for tr in traces) for p in grid[:: len(grid) // 400]]
        )
        # refine around the sign change on the coarse grid, then exact local scan
        coarse = grid[:: len(grid) // 400]
        ok = rho >= 0
        assert ok.any()
        direction_up = tmpl.holes[0].direction == UP
        anchor = coarse[ok].min() if direction_up else coarse[ok].max()
        local = np.arange(anchor - 0.06, anchor + 0.06, 1e-4)
        vals = np.array(
            [min(robustness(tmpl.fill({"p": p}), tr, 0) for tr in traces) for p in local]
        )
        sat = vals >= 0
        best = local[sat].min() if direction_up else local[sat].max()
        assert abs(got - best) <= 2e-4


def test_monotonicity_audit():
    rng = np.random.default_rng(4)
    traces = [single_var_trace(rng.uniform(-2, 2, 8)) for _ in range(4)]
    templates = builtin_templates(("x",), horizon=8, window_len=2, rows=[1, 2, 3, 5, 7])
    for tmpl in templates:
        mined = infer_tight(tmpl, traces)
        for spec in tmpl.holes:
            probes = np.sort(rng.uniform(-4, 4, 25))
            vals = []
            for p in probes:
                params = dict(mined.params)
                params[spec.name] = float(p)
                vals.append(min(robustness(tmpl.fill(params), tr, 0) for tr in traces))
            diffs = np.diff(vals)
            if spec.direction == UP:
                assert (diffs >= -1e-12).all(), (tmpl.template_id, spec.name)
            else:
                assert (diffs <= 1e-12).all(), (tmpl.template_id, spec.name)


def test_tightness_perturbation_violates():
    rng = np.random.default_rng(5)
    traces = [single_var_trace(rng.uniform(0, 4, 8)) for _ in range(5)]
    tol = default_tol(traces)
    for row in (1, 2, 7):
        (tmpl,) = builtin_templates(("x",), horizon=8, window_len=2, rows=[row])
        mined = infer_tight(tmpl, traces, tol)
        for spec in tmpl.holes:
            params = dict(mined.params)
            params[spec.name] += -2 * tol if spec.direction == UP else 2 * tol
            perturbed = tmpl.fill(params)
            assert any(not eval_bool(perturbed, tr, 0) for tr in traces), (row, spec.name)


def test_serialization_roundtrip():
    rng = np.random.default_rng(6)
    traces = [single_var_trace(rng.uniform(0, 4, 8)) for _ in range(3)]
    (tmpl,) = builtin_templates(("x",), horizon=8, window_len=2, rows=[1])
    mined = infer_tight(tmpl, traces)
    text = mined.to_text()
    assert text.splitlines()[0].startswith("# template 1")
    back = mined_property_from_text(text)
    for tr in traces:
        assert robustness(back, tr, 0) == robustness(mined.formula, tr, 0)
