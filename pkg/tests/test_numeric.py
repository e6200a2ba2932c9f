import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from treepin.numeric import (AdamState, ContractError, PlateauSchedule, adam_step, finite_difference_gradient,
                             hard_sigmoid, hard_sigmoid_derivative)

finite = st.floats(-1e6, 1e6, allow_nan=False)


@pytest.mark.parametrize("x, expected", [(0.0, 0.5), (1.0, 1.0), (-1.0, 0.0), (0.5, 0.75), (3.0, 1.0), (-7.0, 0.0)])
def test_hard_sigmoid_values(x, expected):
    assert hard_sigmoid(x) == expected


@pytest.mark.parametrize("bad", [math.nan, math.inf, -math.inf])
def test_hard_sigmoid_rejects_non_finite(bad):
    with pytest.raises(ValueError):
        hard_sigmoid(bad)


@given(finite, finite)
def test_hard_sigmoid_bounded_monotone_lipschitz(a, b):
    sa, sb = hard_sigmoid(a), hard_sigmoid(b)
    assert 0.0 <= sa <= 1.0
    if a <= b:
        assert sa <= sb
    assert abs(sa - sb) <= 0.5 * abs(a - b) + 1e-12


@given(finite)
def test_hard_sigmoid_reclamping_is_identity(x):
    s = hard_sigmoid(x)
    assert hard_sigmoid(2 * s - 1) == pytest.approx(s, abs=1e-15)


@pytest.mark.parametrize("x, expected", [(0.0, 0.5), (2.0, 0.0), (1.0, 0.0), (-1.0, 0.0), (0.999, 0.5)])
def test_hard_sigmoid_derivative_values(x, expected):
    assert hard_sigmoid_derivative(x) == expected


@given(st.floats(-3, 3).filter(lambda x: abs(abs(x) - 1) > 1e-3))
def test_derivative_matches_central_difference_off_kink(x):
    eps = 1e-6
    fd = (hard_sigmoid(x + eps) - hard_sigmoid(x - eps)) / (2 * eps)
    assert hard_sigmoid_derivative(x) == pytest.approx(fd, abs=1e-6)


def test_adam_zero_gradient_is_noop_on_fresh_state():
    p = {"w": np.array([1.0, -2.0])}
    state = AdamState(lr=0.1)
    for _ in range(3):
        adam_step(p, {"w": np.zeros(2)}, state)
    np.testing.assert_array_equal(p["w"], [1.0, -2.0])
    assert state.step == 3


def test_adam_moments_decay_under_zero_gradient():
    p = {"w": np.array([1.0, -2.0])}
    state = AdamState(lr=0.1)
    adam_step(p, {"w": np.array([1.0, 1.0])}, state)
    m0, v0 = state.m["w"].copy(), state.v["w"].copy()
    adam_step(p, {"w": np.zeros(2)}, state)
    np.testing.assert_allclose(state.m["w"], 0.9 * m0)
    np.testing.assert_allclose(state.v["w"], 0.999 * v0)


def test_adam_first_step_bias_correction():
    g = np.array([0.3, -2.0, 1e-3])
    p = {"w": np.zeros(3)}
    state = AdamState(lr=0.01)
    adam_step(p, {"w": g}, state)
    assert state.step == 1
    np.testing.assert_allclose(state.m["w"], (1 - 0.9) * g)
    np.testing.assert_allclose(state.v["w"], (1 - 0.999) * g * g)
    # bias-corrected moments are g and g^2, so the step is lr * g / (|g| + eps)
    np.testing.assert_allclose(p["w"], -0.01 * g / (np.abs(g) + 1e-8), rtol=1e-12)


def test_adam_constant_gradient_step_approaches_lr():
    p = {"w": np.zeros(2)}
    state = AdamState(lr=1e-3)
    g = {"w": np.array([5.0, -0.01])}
    prev = p["w"].copy()
    for _ in range(2000):
        prev = p["w"].copy()
        adam_step(p, g, state)
    np.testing.assert_allclose(p["w"] - prev, [-1e-3, 1e-3], rtol=1e-5)


def test_adam_shape_mismatch():
    with pytest.raises(ContractError):
        adam_step({"w": np.zeros(3)}, {"w": np.zeros(2)}, AdamState())


def test_adam_requires_positive_lr():
    with pytest.raises(ContractError):
        AdamState(lr=0.0)


def test_plateau_reduces_after_patience():
    sched = PlateauSchedule()
    lr = sched.update(1.0, 1e-3)
    lrs = [sched.update(1.0, lr) for _ in range(5)]
    assert lrs[:4] == [1e-3] * 4
    assert lrs[4] == pytest.approx(0.9e-3)


def test_plateau_small_improvement_does_not_count():
    sched = PlateauSchedule(patience=2)
    lr = sched.update(1.0, 1.0)
    lr = sched.update(1.0 - 5e-7, lr)
    lr = sched.update(1.0 - 9e-7, lr)
    assert lr == pytest.approx(0.9)


@given(st.lists(st.floats(0, 10), min_size=1, max_size=60))
def test_plateau_lr_non_increasing_by_factor(losses):
    sched = PlateauSchedule()
    lr, trace = 1.0, []
    for loss in losses:
        new = sched.update(loss, lr)
        assert new == lr or new == pytest.approx(0.9 * lr)
        lr = new
        trace.append(lr)
    assert all(a >= b for a, b in zip(trace, trace[1:]))


def test_finite_difference_quadratic_and_linear():
    p = {"p": np.array([3.0])}
    g = finite_difference_gradient(lambda q: 0.5 * float(q["p"][0]) ** 2, p)
    assert abs(g["p"][0] - 3.0) < 1e-8
    g = finite_difference_gradient(lambda q: 2.0 * float(q["p"][0]), p)
    assert g["p"][0] == pytest.approx(2.0, abs=1e-9)
    assert p["p"][0] == 3.0


def test_finite_difference_rejects_bad_epsilon():
    with pytest.raises(ContractError):
        finite_difference_gradient(lambda q: 0.0, {"p": np.zeros(1)}, epsilon=0.0)
