import numpy as np
import pytest

from fedstl.models import (
    Batch,
    GradientError,
    LinearAR,
    MiniGRU,
    ModelError,
    ModelState,
    forward,
    forward_batch,
    init_state,
    load_checkpoint,
    local_loss,
    objective_gradient,
    save_checkpoint,
    sgd_step,
)
from fedstl.stl import Always, And, Atom, Eventually, Trace, single_var_trace

from gen import random_formula


def zero_state(arch):
    return ModelState(arch, np.zeros(arch.shared_size), np.zeros(arch.private_size))


def test_linear_zero_params_zero_prediction():
    arch = LinearAR(input_len=3, output_len=2, n_vars=1)
    out = forward(zero_state(arch), single_var_trace([1.0, 2.0, 3.0]))
    assert np.array_equal(out.values, np.zeros((2, 1)))


def test_linear_persistence_weights():
    arch = LinearAR(input_len=3, output_len=2, n_vars=1)
    w = np.zeros((arch.out_dim, arch.in_dim))
    w[:, -1] = 1.0  # copy the last input step to every output step
    state = ModelState(arch, w.ravel(), np.zeros(arch.private_size))
    out = forward(state, single_var_trace([1.0, 2.0, 7.0]))
    assert out.values[:, 0].tolist() == [7.0, 7.0]


def test_gru_output_shape():
    arch = MiniGRU(hidden_dim=5, input_len=4, output_len=3, n_vars=2)
    state = init_state(arch, np.random.default_rng(0))
    x = Trace(("u", "v"), np.random.default_rng(1).normal(size=(4, 2)))
    out = forward(state, x)
    assert out.values.shape == (3, 2)


def test_forward_shape_mismatch():
    arch = LinearAR(input_len=3, output_len=2, n_vars=1)
    with pytest.raises(ModelError):
        forward(zero_state(arch), single_var_trace([1.0, 2.0]))


def test_local_loss_perfect_and_satisfying_is_zero():
    arch = LinearAR(input_len=2, output_len=2, n_vars=1)
    w = np.zeros((arch.out_dim, arch.in_dim))
    w[:, -1] = 1.0
    state = ModelState(arch, w.ravel(), np.zeros(arch.private_size))
    batch = Batch(np.full((3, 2, 1), 4.0), np.full((3, 2, 1), 4.0), ("x",))
    prop = Always(0, 1, And(Atom("x", "<=", 5.0), Atom("x", ">=", 3.0)))
    assert local_loss(state, batch, prop, lam=1.0) == 0.0


def test_local_loss_lambda_zero_is_mse():
    arch = LinearAR(input_len=2, output_len=2, n_vars=1)
    state = init_state(arch, np.random.default_rng(2))
    rng = np.random.default_rng(3)
    batch = Batch(rng.normal(size=(4, 2, 1)), rng.normal(size=(4, 2, 1)), ("x",))
    preds = forward_batch(state, batch.inputs)
    want = float(((preds - batch.targets) ** 2).mean(axis=(1, 2)).mean())
    assert local_loss(state, batch, None, lam=0.0) == pytest.approx(want)


def test_local_loss_hand_computed_combination():
    arch = LinearAR(input_len=1, output_len=2, n_vars=1)
    state = ModelState(arch, np.zeros(arch.shared_size), np.array([1.0, 0.0]))
    batch = Batch(np.zeros((1, 1, 1)), np.zeros((1, 2, 1)), ("x",))
    # prediction (1, 0): MSE = 0.5; F[0,1](x >= 3) costs min(2, 3) = 2
    prop = Eventually(0, 1, Atom("x", ">=", 3.0))
    assert local_loss(state, batch, prop, lam=1.0) == pytest.approx(2.5)


def test_sgd_matches_closed_form_least_squares():
    arch = LinearAR(input_len=2, output_len=1, n_vars=1)
    rng = np.random.default_rng(4)
    state = init_state(arch, rng)
    x = rng.normal(size=(1, 2, 1))
    y = rng.normal(size=(1, 1, 1))
    eta = 0.05
    batch = Batch(x, y, ("x",))
    stepped = sgd_step(state, batch, None, lam=0.0, eta=eta)
    xf = x.reshape(1, 2)
    pred = xf @ state.shared.reshape(1, 2).T + state.private
    resid = pred - y.reshape(1, 1)
    grad_w = 2.0 * resid.T @ xf  # out_dim = 1, batch of one
    grad_b = 2.0 * resid.ravel()
    assert np.allclose(stepped.shared, state.shared - eta * grad_w.ravel(), atol=1e-15)
    assert np.allclose(stepped.private, state.private - eta * grad_b, atol=1e-15)


def test_satisfied_penalty_contributes_no_gradient():
    arch = LinearAR(input_len=2, output_len=2, n_vars=1)
    state = init_state(arch, np.random.default_rng(5))
    rng = np.random.default_rng(6)
    batch = Batch(rng.uniform(0, 1, (3, 2, 1)), rng.uniform(0, 1, (3, 2, 1)), ("x",))
    wide = Always(0, 1, And(Atom("x", "<=", 1e6), Atom("x", ">=", -1e6)))
    with_pen = sgd_step(state, batch, wide, lam=5.0, eta=0.1)
    without = sgd_step(state, batch, None, lam=0.0, eta=0.1)
    assert np.array_equal(with_pen.shared, without.shared)
    assert np.array_equal(with_pen.private, without.private)


def test_eta_zero_keeps_parameters():
    arch = MiniGRU(hidden_dim=3, input_len=3, output_len=2, n_vars=1)
    state = init_state(arch, np.random.default_rng(7))
    rng = np.random.default_rng(8)
    batch = Batch(rng.normal(size=(2, 3, 1)), rng.normal(size=(2, 2, 1)), ("x",))
    stepped = sgd_step(state, batch, None, lam=0.0, eta=0.0)
    assert np.array_equal(stepped.shared, state.shared)
    assert np.array_equal(stepped.private, state.private)


def test_scope_isolation_is_bitwise():
    for arch in (
        LinearAR(input_len=3, output_len=2, n_vars=1),
        MiniGRU(hidden_dim=4, input_len=3, output_len=2, n_vars=1),
    ):
        state = init_state(arch, np.random.default_rng(9))
        rng = np.random.default_rng(10)
        batch = Batch(rng.normal(size=(4, 3, 1)), rng.normal(size=(4, 2, 1)), ("x",))
        only_shared = sgd_step(state, batch, None, 0.0, 0.05, scope="shared-only")
        assert only_shared.private.tobytes() == state.private.tobytes()
        assert not np.array_equal(only_shared.shared, state.shared)
        only_private = sgd_step(state, batch, None, 0.0, 0.05, scope="private-only")
        assert only_private.shared.tobytes() == state.shared.tobytes()
        assert not np.array_equal(only_private.private, state.private)


def test_determinism_bitwise():
    arch = MiniGRU(hidden_dim=4, input_len=4, output_len=2, n_vars=1)
    rng = np.random.default_rng(11)
    batches = [
        Batch(rng.normal(size=(3, 4, 1)), rng.normal(size=(3, 2, 1)), ("x",)) for _ in range(5)
    ]
    prop = Always(0, 1, Atom("x", "<=", 2.0))

    def run():
        state = init_state(arch, np.random.default_rng(12))
        for b in batches:
            state = sgd_step(state, b, prop, lam=0.5, eta=0.01)
        return state

    a, b = run(), run()
    assert a.shared.tobytes() == b.shared.tobytes()
    assert a.private.tobytes() == b.private.tobytes()


def test_loss_never_increases_in_convex_setting():
    arch = LinearAR(input_len=4, output_len=2, n_vars=1)
    state = init_state(arch, np.random.default_rng(13))
    rng = np.random.default_rng(14)
    batch = Batch(rng.uniform(0, 2, (8, 4, 1)), rng.uniform(0, 2, (8, 2, 1)), ("x",))
    prop = Always(0, 1, And(Atom("x", "<=", 100.0), Atom("x", ">=", -100.0)))
    prev = local_loss(state, batch, prop, lam=1.0)
    for _ in range(50):
        state = sgd_step(state, batch, prop, lam=1.0, eta=0.01)
        cur = local_loss(state, batch, prop, lam=1.0)
        assert cur <= prev + 1e-9
        prev = cur


MARGIN = 1e-6  # fixed, as in training: the margin must not move with parameters


def _finite_difference(state, batch, prop, lam, h=1e-5):
    arch = state.arch
    theta = np.concatenate([state.shared, state.private])
    fd = np.zeros_like(theta)
    for i in range(theta.size):
        up = theta.copy(); up[i] += h
        dn = theta.copy(); dn[i] -= h
        s_up = ModelState(arch, up[: arch.shared_size], up[arch.shared_size :])
        s_dn = ModelState(arch, dn[: arch.shared_size], dn[arch.shared_size :])
        fd[i] = (
            local_loss(s_up, batch, prop, lam, margin=MARGIN)
            - local_loss(s_dn, batch, prop, lam, margin=MARGIN)
        ) / (2 * h)
    return fd


def _away_from_kink(state, batch, prop):
    from fedstl.projection import InfeasibleClauseError, teacher_correct_many

    preds = forward_batch(state, batch.inputs)
    try:
        teach = teacher_correct_many(prop, batch.schema, preds, margin=MARGIN)
    except InfeasibleClauseError:
        return False
    gap = np.abs(preds - teach)
    return not np.any((gap > 0) & (gap < 1e-3))


@pytest.mark.parametrize(
    "arch",
    [LinearAR(input_len=4, output_len=3, n_vars=1), MiniGRU(4, 4, 3, 1)],
    ids=["linear", "gru"],
)
def test_gradient_check_against_central_differences(arch):
    rng = np.random.default_rng(15)
    checked = 0
    attempts = 0
    while checked < 12 and attempts < 200:
        attempts += 1
        state = init_state(arch, np.random.default_rng(int(rng.integers(1 << 31))))
        batch = Batch(rng.normal(size=(2, 4, 1)), rng.normal(size=(2, 3, 1)), ("x",))
        prop = random_formula(
            rng, ("x",), budget=2, depth=2, allow_lin=False,
            kinds=("and", "or", "always", "eventually"),
        )
        if not _away_from_kink(state, batch, prop):
            continue
        d_shared, d_private = objective_gradient(state, batch, prop, lam=1.0, margin=MARGIN)
        analytic = np.concatenate([d_shared, d_private])
        fd = _finite_difference(state, batch, prop, lam=1.0)
        err = np.abs(analytic - fd) / np.maximum(1e-6, np.abs(analytic) + np.abs(fd))
        assert err.max() < 1e-4, (arch, err.max())
        checked += 1
    assert checked >= 12


def test_nonfinite_gradient_carries_index():
    arch = LinearAR(input_len=2, output_len=1, n_vars=1)
    state = ModelState(arch, np.array([np.inf, 0.0]), np.zeros(1))
    batch = Batch(np.ones((1, 2, 1)), np.ones((1, 1, 1)), ("x",))
    with pytest.raises(GradientError) as err:
        sgd_step(state, batch, None, 0.0, 0.1)
    assert err.value.param_index >= 0


def test_checkpoint_roundtrip(tmp_path):
    for arch in (LinearAR(3, 2, 2), MiniGRU(4, 3, 2, 2)):
        state = init_state(arch, np.random.default_rng(16))
        path = tmp_path / "model.ckpt"
        save_checkpoint(state, path)
        back = load_checkpoint(path)
        assert back.arch == arch
        assert np.array_equal(back.shared, state.shared)
        assert np.array_equal(back.private, state.private)


def test_checkpoint_length_validated(tmp_path):
    arch = LinearAR(2, 1, 1)
    state = init_state(arch, np.random.default_rng(17))
    path = tmp_path / "model.ckpt"
    save_checkpoint(state, path)
    with open(path, "ab") as fh:
        fh.write(b"\x00" * 8)
    with pytest.raises(ModelError, match="payload"):
        load_checkpoint(path)
