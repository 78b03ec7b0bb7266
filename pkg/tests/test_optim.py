import numpy as np
import pytest

from routedlm.optim import AdamState, Parameter, adam_step, cosine_lr


def test_zero_gradient_leaves_parameter_unchanged():
    p = Parameter(np.array([1.0, -2.0]), "p")
    p.grad = np.zeros(2)
    state = AdamState([p])
    adam_step(state)
    assert np.array_equal(p.data, [1.0, -2.0])


def test_first_step_magnitude_is_learning_rate():
    # closed form at t=1: m_hat=g, v_hat=g^2 -> delta = lr*g/(|g|+eps)
    p = Parameter(np.array([0.0]), "p")
    p.grad = np.array([1.0])
    state = AdamState([p], lr=1e-3)
    adam_step(state)
    assert abs(p.data[0] + 1e-3) <= 1e-9


def test_bias_corrected_first_moment_equals_gradient_at_step_one():
    p = Parameter(np.array([0.5]), "p")
    p.grad = np.array([3.7])
    state = AdamState([p])
    adam_step(state)
    m_hat = state.m[0] / (1.0 - state.beta1 ** 1)
    assert np.allclose(m_hat, [3.7], atol=1e-15)


def test_frozen_parameters_excluded():
    frozen = Parameter(np.array([1.0]), "frozen")
    frozen.freeze()
    live = Parameter(np.array([1.0]), "live")
    live.grad = np.array([1.0])
    state = AdamState([frozen, live], lr=0.1)
    adam_step(state)
    assert frozen.data[0] == 1.0
    assert live.data[0] != 1.0
    assert len(state.params) == 1


def test_step_counter_strictly_increases():
    p = Parameter(np.array([0.0]), "p")
    state = AdamState([p])
    for expected in (1, 2, 3):
        p.grad = np.array([0.1])
        adam_step(state)
        assert state.step_count == expected


def test_shape_mismatch_rejected():
    p = Parameter(np.array([0.0, 1.0]), "p")
    p.grad = np.array([1.0])
    state = AdamState([p])
    with pytest.raises(ValueError):
        adam_step(state)


def test_gradient_descends_quadratic():
    p = Parameter(np.array([5.0]), "p")
    state = AdamState([p], lr=0.1)
    for _ in range(300):
        p.grad = 2.0 * p.data
        adam_step(state)
    assert abs(p.data[0]) < 1e-2


def test_cosine_lr_endpoints():
    assert cosine_lr(1.0, 0, 100) == pytest.approx(1.0)
    assert cosine_lr(1.0, 99, 100) == pytest.approx(0.05, abs=1e-9)
