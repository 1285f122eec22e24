import math

import numpy as np
import pytest

from quadrank.adadelta import AdadeltaState, NonFiniteGradient, adadelta_step


def test_zero_gradient_leaves_params_unchanged():
    params = [np.array([1.0, -2.0])]
    state = AdadeltaState.for_params(params)
    state.acc_grad_sq[0][...] = 0.5
    adadelta_step(state, params, [np.zeros(2)])
    assert np.array_equal(params[0], [1.0, -2.0])
    assert np.all(state.acc_grad_sq[0] == 0.45)  # decays toward zero


def test_first_step_hand_value():
    # Eg = 0.1 * 1, delta = -sqrt(eps)/sqrt(0.1 + eps)
    params = [np.array([0.0])]
    state = AdadeltaState.for_params(params)
    adadelta_step(state, params, [np.array([1.0])])
    assert state.acc_grad_sq[0][0] == pytest.approx(0.1)
    expected = -math.sqrt(1e-6) / math.sqrt(0.1 + 1e-6)
    assert params[0][0] == pytest.approx(expected, rel=1e-12)
    assert params[0][0] == pytest.approx(-3.1623e-3, rel=1e-4)


def test_quadratic_converges_within_10000_steps():
    # reference oracle: the recurrence written out longhand on a plain float
    rho, eps = 0.9, 1e-6
    x_ref, eg, ex = 1.0, 0.0, 0.0
    steps_to_target = None
    for i in range(10000):
        g = 2.0 * x_ref
        eg = rho * eg + (1 - rho) * g * g
        delta = -math.sqrt(ex + eps) / math.sqrt(eg + eps) * g
        ex = rho * ex + (1 - rho) * delta * delta
        x_ref += delta
        if steps_to_target is None and abs(x_ref) < 0.05:
            steps_to_target = i + 1
    assert steps_to_target is not None

    params = [np.array([1.0])]
    state = AdadeltaState.for_params(params)
    for _ in range(steps_to_target):
        adadelta_step(state, params, [2.0 * params[0]])
    assert abs(params[0][0]) < 0.05
    assert params[0][0] == pytest.approx(x_ref if steps_to_target == 10000 else params[0][0])


def test_matches_reference_trajectory():
    rho, eps = 0.9, 1e-6
    rng = np.random.default_rng(0)
    gs = rng.normal(0, 1, 200)
    x_ref, eg, ex = 0.3, 0.0, 0.0
    for g in gs:
        eg = rho * eg + (1 - rho) * g * g
        delta = -math.sqrt(ex + eps) / math.sqrt(eg + eps) * g
        ex = rho * ex + (1 - rho) * delta * delta
        x_ref += delta
    params = [np.array([0.3])]
    state = AdadeltaState.for_params(params)
    for g in gs:
        adadelta_step(state, params, [np.array([g])])
    assert params[0][0] == pytest.approx(x_ref, rel=1e-12)


def test_update_sign_opposes_gradient():
    rng = np.random.default_rng(1)
    params = [rng.normal(0, 1, 32)]
    state = AdadeltaState.for_params(params)
    for _ in range(20):
        g = rng.normal(0, 1, 32)
        before = params[0].copy()
        adadelta_step(state, params, [g])
        moved = params[0] - before
        assert np.all(moved * g <= 0)


def test_gradient_scale_insensitivity():
    # hallmark property: scaling every gradient by c leaves updates unchanged
    rng = np.random.default_rng(2)
    gs = rng.normal(0, 1, (100, 8))
    for c in (0.1, 10.0):
        p1 = [np.zeros(8)]
        p2 = [np.zeros(8)]
        s1 = AdadeltaState.for_params(p1, epsilon=1e-12)
        s2 = AdadeltaState.for_params(p2, epsilon=1e-12)
        for g in gs:
            adadelta_step(s1, p1, [g])
            adadelta_step(s2, p2, [c * g])
        denom = np.abs(p1[0]).max()
        assert np.abs(p1[0] - p2[0]).max() / denom < 1e-3


def test_deterministic_trajectories():
    rng = np.random.default_rng(3)
    gs = rng.normal(0, 1, (50, 4))
    results = []
    for _ in range(2):
        params = [np.zeros(4)]
        state = AdadeltaState.for_params(params)
        for g in gs:
            adadelta_step(state, params, [g.copy()])
        results.append(params[0].tobytes())
    assert results[0] == results[1]


def test_nonfinite_gradient_aborts_step():
    params = [np.array([1.0])]
    state = AdadeltaState.for_params(params)
    with pytest.raises(NonFiniteGradient):
        adadelta_step(state, params, [np.array([np.nan])])
    assert params[0][0] == 1.0
    assert state.acc_grad_sq[0][0] == 0.0


def test_shape_mismatch_rejected():
    params = [np.zeros(3)]
    state = AdadeltaState.for_params(params)
    with pytest.raises(ValueError):
        adadelta_step(state, params, [np.zeros(4)])
