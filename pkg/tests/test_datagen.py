import numpy as np
import pytest

from fedstl.datagen import (
    DataGenError,
    GenSpec,
    GroupFamily,
    generate,
    load_csv,
)
from fedstl.mining import builtin_templates, infer_tight
from fedstl.stl import Always, LinAtom, eval_bool


def small_spec(**kw):
    base = dict(
        n_clients=4,
        n_groups=2,
        families=[
            GroupFamily(10.0, 2.0, 8.0, 0.2, (0.0,)),
            GroupFamily(100.0, 2.0, 12.0, 0.2, (0.0,)),
        ],
        n_vars=1,
        series_len=60,
        input_len=12,
        output_len=6,
        seed=7,
    )
    base.update(kw)
    return GenSpec(**base)


def test_determinism_byte_identical():
    a, _ = generate(small_spec())
    b, _ = generate(small_spec())
    for ca, cb in zip(a, b):
        assert ca.series.tobytes() == cb.series.tobytes()
        assert ca.train.inputs.tobytes() == cb.train.inputs.tobytes()


def test_split_is_ordered_and_disjoint():
    clients, _ = generate(small_spec())
    c = clients[0]
    total = small_spec().window_count
    assert len(c.train) + len(c.val) + len(c.test) == total
    assert len(c.train) == int(0.8 * total)
    # windows are ordered: the last train input starts before the first val input
    assert np.array_equal(c.train.inputs[0], c.series[0:12])
    first_val_start = len(c.train)
    assert np.array_equal(c.val.inputs[0], c.series[first_val_start : first_val_start + 12])


def test_identical_up_to_phase_when_one_group_no_noise():
    spec = small_spec(
        n_groups=1,
        families=[GroupFamily(5.0, 1.0, 8.0, 0.0, (0.0,))],
        n_clients=3,
    )
    clients, labels = generate(spec)
    assert labels == [0, 0, 0]
    for c in clients:
        assert c.series.min() >= 4.0 - 1e-9 and c.series.max() <= 6.0 + 1e-9


def test_group_ranges_disjoint_and_mined_bounds_separate():
    clients, labels = generate(small_spec(n_clients=6))
    (tmpl,) = builtin_templates(("x1",), horizon=6, window_len=6, rows=[1])
    intervals = {}
    for c, g in zip(clients, labels):
        mined = infer_tight(tmpl, c.train.target_traces())
        intervals.setdefault(g, []).append((mined.params["b0"], mined.params["a0"]))
    lo_hi = {g: (min(b for b, _ in v), max(a for _, a in v)) for g, v in intervals.items()}
    assert lo_hi[0][1] < lo_hi[1][0]  # group 0's upper bounds below group 1's lower bounds


def test_planted_gap_holds_everywhere():
    spec = small_spec(
        n_vars=2,
        families=[
            GroupFamily(10.0, 2.0, 8.0, 0.1, (0.0, -5.0)),
            GroupFamily(50.0, 2.0, 12.0, 0.1, (0.0, -5.0)),
        ],
        gap=3.0,
    )
    clients, _ = generate(spec)
    prop = Always(0, 5, LinAtom({"x1": 1.0, "x2": -1.0}, ">", 3.0))
    for c in clients:
        assert (c.series[:, 0] - c.series[:, 1] > 3.0).all()
        for tr in c.train.target_traces():
            assert eval_bool(prop, tr, 0)


def test_gap_invariant_enforced():
    with pytest.raises(DataGenError, match="gap"):
        small_spec(
            n_vars=2,
            families=[
                GroupFamily(10.0, 2.0, 8.0, 0.1, (0.0, -3.0)),
                GroupFamily(50.0, 2.0, 12.0, 0.1, (0.0, -3.0)),
            ],
            gap=3.0,
        )


def test_noise_invariant_enforced():
    with pytest.raises(DataGenError, match="sigma"):
        small_spec(families=[GroupFamily(1.0, 2.0, 8.0, 0.5, (0.0,)), GroupFamily(2.0, 2.0, 8.0, 0.5, (0.0,))])


def test_more_groups_than_clients_rejected():
    with pytest.raises(DataGenError):
        small_spec(n_clients=1)


# --- CSV loading --------------------------------------------------------------


def test_load_csv_basic(tmp_path):
    p = tmp_path / "t.csv"
    p.write_text("u,v\n1,4\n2,5\n3,6\n")
    tr = load_csv(p)
    assert tr.schema == ("u", "v")
    assert tr.length == 3
    assert tr.values[:, 1].tolist() == [4.0, 5.0, 6.0]


def test_load_csv_interpolates_middle_gap(tmp_path):
    p = tmp_path / "t.csv"
    p.write_text("x\n2\n\n4\n")
    tr = load_csv(p)
    assert tr.values[:, 0].tolist() == [2.0, 3.0, 4.0]


def test_load_csv_leading_gap_is_error(tmp_path):
    p = tmp_path / "t.csv"
    p.write_text("x\n\n2\n3\n")
    with pytest.raises(DataGenError, match="leading or trailing"):
        load_csv(p)


def test_load_csv_ragged_rows_error(tmp_path):
    p = tmp_path / "t.csv"
    p.write_text("a,b\n1,2\n3\n")
    with pytest.raises(DataGenError, match="expected 2 cells"):
        load_csv(p)


def test_load_csv_non_numeric_error(tmp_path):
    p = tmp_path / "t.csv"
    p.write_text("a\n1\nfish\n")
    with pytest.raises(DataGenError, match="non-numeric"):
        load_csv(p)
