import math

import numpy as np
import pytest

from fedstl.stl import (
    Always,
    And,
    Atom,
    Eventually,
    Implies,
    Not,
    Or,
    Trace,
    TraceError,
    TrueF,
    Until,
    eval_bool,
    eval_bool_many,
    horizon_of,
    robustness,
    robustness_many,
    single_var_trace,
)

from gen import oracle_eval, random_formula, random_trace


def test_always_constant_positive():
    f = Always(0, 2, Atom("x", ">=", 0.0))
    assert eval_bool(f, single_var_trace([5, 5, 5]), 0) is True


def test_eventually_never_reached():
    f = Eventually(0, 2, Atom("x", ">=", 4.0))
    # exhaustive over the three steps: 1, 2, 3 all below 4
    assert eval_bool(f, single_var_trace([1, 2, 3]), 0) is False


def test_until_witness_at_last_step():
    f = Until(0, 2, Atom("x", ">=", 0.0), Atom("x", ">=", 2.0))
    # t'=2 works: right holds at 2, left holds on [0,2]
    assert eval_bool(f, single_var_trace([1, 1, 3]), 0) is True


def test_until_requires_left_up_to_witness():
    f = Until(0, 2, Atom("x", ">=", 0.0), Atom("x", ">=", 2.0))
    assert eval_bool(f, single_var_trace([1, -1, 3]), 0) is False


def test_implies_equals_or_not():
    rng = np.random.default_rng(7)
    for _ in range(200):
        tr = random_trace(rng, ("a", "b"), 6)
        p = random_formula(rng, tr.schema, budget=2, depth=2)
        q = random_formula(rng, tr.schema, budget=2, depth=2)
        assert eval_bool(Implies(p, q), tr, 0) == eval_bool(Or(Not(p), q), tr, 0)
        assert robustness(Implies(p, q), tr, 0) == robustness(Or(Not(p), q), tr, 0)


def test_robustness_implication_window_margin():
    f = Always(0, 4, Implies(Atom("x1", ">=", 0.75), Atom("x2", ">=", 10.0)))
    tr = Trace(
        ("x1", "x2"),
        np.array([[0.25, 20], [0.25, 18], [0.5, 16], [0.6, 14], [0.75, 12]], dtype=float),
    )
    # min over 5 steps of max(0.75 - x1, x2 - 10) = 2.0
    assert robustness(f, tr, 0) == pytest.approx(2.0)
    assert eval_bool(f, tr, 0) is True


def test_robustness_boundary_atom():
    assert robustness(Atom("x", ">=", 3.0), single_var_trace([3.0]), 0) == 0.0


def test_robustness_negated_eventually():
    f = Not(Eventually(0, 1, Atom("x", ">=", 5.0)))
    assert robustness(f, single_var_trace([1, 2]), 0) == pytest.approx(3.0)


def test_true_has_infinite_robustness():
    tr = single_var_trace([0.0])
    assert robustness(TrueF(), tr, 0) == math.inf
    assert robustness(Not(TrueF()), tr, 0) == -math.inf


def test_window_out_of_range_is_error():
    f = Always(0, 3, Atom("x", ">=", 0.0))
    tr = single_var_trace([1, 2, 3])
    with pytest.raises(TraceError):
        eval_bool(f, tr, 0)
    with pytest.raises(TraceError):
        robustness(f, tr, 0)
    with pytest.raises(TraceError):
        eval_bool(Atom("x", ">=", 0.0), tr, 3)


def test_unknown_variable_is_error():
    with pytest.raises(TraceError):
        eval_bool(Atom("nope", ">=", 0.0), single_var_trace([1.0]), 0)


def _fuzz_cases(n, seed, length=8, schema=("a", "b")):
    rng = np.random.default_rng(seed)
    for _ in range(n):
        tr = random_trace(rng, schema, length)
        budget = int(rng.integers(0, length))
        f = random_formula(rng, schema, budget=budget, depth=3)
        if horizon_of(f) >= length:
            continue
        yield f, tr


def test_soundness_fuzz():
    checked = 0
    for f, tr in _fuzz_cases(1500, seed=42):
        rho = robustness(f, tr, 0)
        sat = eval_bool(f, tr, 0)
        if rho > 0:
            assert sat, (f, tr.values)
        elif rho < 0:
            assert not sat, (f, tr.values)
        checked += 1
    assert checked > 1000


def test_negation_antisymmetry_exact():
    for f, tr in _fuzz_cases(400, seed=43):
        assert robustness(Not(f), tr, 0) == -robustness(f, tr, 0)


def test_de_morgan_exact():
    rng = np.random.default_rng(44)
    for _ in range(400):
        tr = random_trace(rng, ("a", "b"), 6)
        p = random_formula(rng, tr.schema, budget=2, depth=2)
        q = random_formula(rng, tr.schema, budget=2, depth=2)
        lhs = robustness(Not(And(p, q)), tr, 0)
        rhs = robustness(Or(Not(p), Not(q)), tr, 0)
        assert lhs == rhs


def test_shift_consistency():
    for f, tr in _fuzz_cases(400, seed=45, length=10):
        h = horizon_of(f)
        for t in range(tr.length - h):
            assert robustness(f, tr, t) == robustness(f, tr.suffix(t), 0)


def test_agrees_with_independent_oracle():
    for f, tr in _fuzz_cases(800, seed=46):
        assert eval_bool(f, tr, 0) == oracle_eval(f, tr, 0), (f, tr.values)


def test_batched_matches_scalar():
    rng = np.random.default_rng(47)
    schema = ("a", "b")
    for _ in range(60):
        length = 7
        traces = [random_trace(rng, schema, length) for _ in range(5)]
        stacked = np.stack([tr.values for tr in traces])
        f = random_formula(rng, schema, budget=4, depth=3)
        if horizon_of(f) >= length:
            continue
        rho_vec = robustness_many(f, schema, stacked, 0)
        sat_vec = eval_bool_many(f, schema, stacked, 0)
        for i, tr in enumerate(traces):
            assert rho_vec[i] == robustness(f, tr, 0)
            assert bool(sat_vec[i]) == eval_bool(f, tr, 0)


def test_trace_is_immutable():
    tr = single_var_trace([1, 2, 3])
    with pytest.raises(Exception):
        tr.values[0, 0] = 9.0
    with pytest.raises(AttributeError):
        tr.schema = ("y",)
