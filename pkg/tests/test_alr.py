import math

import numpy as np
import pytest

from csrn.alr import LR_MAX, LR_MIN, AlrState, alr_step
from csrn.errors import DivergenceError, RejectedInput


def bowl_reference(w0, lr0, up, down, steps):
    """Plain-float replay of adapt-and-rollback on f(w) = w**2."""
    w, lr = w0, lr0
    prev_err, prev_w, prev_g = math.inf, None, None
    accepted = []
    for _ in range(steps):
        err, g = w * w, 2 * w
        if prev_w is None or err <= prev_err:
            accepted.append(err)
            lr *= up
            prev_err, prev_w, prev_g = err, w, g
            w = w - lr * g
        else:
            lr *= down
            w = prev_w - lr * prev_g
    return w, accepted


def run_bowl(steps):
    state = AlrState(lr=0.1, up_factor=1.05, down_factor=0.5)
    w = np.array([1.0])
    accepted = []
    for _ in range(steps):
        err = float(w @ w)
        w, state = alr_step(state, w, 2 * w, err)
        if not state.rejected:
            accepted.append(err)
    return w, accepted


def test_quadratic_bowl_matches_reference():
    w, acc = run_bowl(200)
    w_ref, acc_ref = bowl_reference(1.0, 0.1, 1.05, 0.5, 200)
    assert w[0] == w_ref
    assert acc == acc_ref


def test_quadratic_bowl_converges_monotonically():
    w, acc = run_bowl(200)
    assert float(w @ w) < 1e-6
    assert all(b <= a for a, b in zip(acc, acc[1:]))


def test_zero_gradient_keeps_weights():
    state = AlrState(lr=0.2)
    w = np.array([0.3, -1.0])
    new_w, st = alr_step(state, w, np.zeros(2), 5.0)
    assert np.array_equal(new_w, w)
    assert st.lr == pytest.approx(0.2 * 1.05)


def test_error_increase_rolls_back_and_halves():
    state = AlrState(lr=0.1)
    w0 = np.array([1.0])
    g0 = np.array([2.0])
    w1, st = alr_step(state, w0, g0, 1.0)
    _, st2 = alr_step(st, w1, np.array([7.0]), 3.0)
    assert st2.rejected
    assert st2.lr == pytest.approx(st.lr * 0.5)
    w2, _ = alr_step(st, w1, np.array([7.0]), 3.0)
    assert np.array_equal(w2, w0 - st2.lr * g0)


def test_lr_clamped():
    st = AlrState(lr=LR_MAX)
    _, st = alr_step(st, np.zeros(1), np.zeros(1), 1.0)
    assert st.lr == LR_MAX
    st = AlrState(lr=LR_MIN)
    w, st = alr_step(st, np.zeros(1), np.ones(1), 1.0)
    for _ in range(5):
        w, st = alr_step(st, w, np.ones(1), 2.0)
    assert st.lr == LR_MIN


def test_rejects_non_finite_and_bad_constants():
    with pytest.raises(DivergenceError):
        alr_step(AlrState(), np.zeros(1), np.array([np.inf]), 1.0)
    with pytest.raises(DivergenceError):
        alr_step(AlrState(), np.zeros(1), np.zeros(1), math.nan)
    with pytest.raises(RejectedInput):
        AlrState(lr=0.0)
    with pytest.raises(RejectedInput):
        AlrState(down_factor=1.5)
