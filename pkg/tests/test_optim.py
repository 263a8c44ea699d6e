"""
Tests for the SGD and Adam update rules.
"""

import numpy as np
import pytest
from numpy.testing import assert_allclose

from avae.exceptions import ConfigError, GradientError, ShapeError
from avae.optim import OptimizerState, step, zero_grad

from .conftest import as_tensor


def with_grad(values, grad):
    p = as_tensor(values, requires_grad=True)
    p.grad = np.array(grad, dtype=np.float64)
    return p


class TestSgd:

    def test_single_step(self):
        p = with_grad([1.0], [2.0])
        step([p], OptimizerState.sgd(learning_rate=0.1))
        assert_allclose(p.data, [0.8])

    def test_weight_decay_only(self):
        p = with_grad([2.0, -4.0], [0.0, 0.0])
        step([p], OptimizerState.sgd(learning_rate=0.1, weight_decay=0.0005))
        assert_allclose(p.data, np.array([2.0, -4.0]) * (1 - 0.1 * 0.0005))

    def test_grads_are_left_in_place(self):
        p = with_grad([1.0], [2.0])
        step([p], OptimizerState.sgd())
        assert_allclose(p.grad, [2.0])
        zero_grad([p])
        assert p.grad is None


class TestAdam:

    def test_first_step_moves_by_learning_rate(self):
        p = with_grad([1.0, 1.0], [3.0, -0.01])
        state = OptimizerState.adam(learning_rate=0.01)
        step([p], state)
        assert_allclose(p.data, [0.99, 1.01], atol=1e-7)
        assert state.step_count == 1

    def test_moments_track_parameters(self):
        params = [with_grad(np.zeros((2, 3)), np.ones((2, 3))), with_grad([0.0], [1.0])]
        state = OptimizerState.adam()
        step(params, state)
        step(params, state)
        assert state.step_count == 2
        assert [m.shape for m, _ in state.moments] == [(2, 3), (1,)]

    def test_minimizes_quadratic(self):
        p = as_tensor([3.0, -2.0], requires_grad=True)
        state = OptimizerState.adam(learning_rate=0.1)
        for _ in range(300):
            p.zero_grad()
            (p * p).sum().backward()
            step([p], state)
        assert np.all(np.abs(p.data) < 0.05)

    def test_parameter_list_change_rejected(self):
        state = OptimizerState.adam()
        step([with_grad([0.0], [1.0])], state)
        with pytest.raises(ShapeError):
            step([with_grad([0.0], [1.0]), with_grad([0.0], [1.0])], state)


class TestValidation:

    def test_missing_gradient(self):
        with pytest.raises(GradientError):
            step([as_tensor([1.0], requires_grad=True)], OptimizerState.sgd())

    def test_unknown_mode(self):
        with pytest.raises(ConfigError) as excinfo:
            OptimizerState(mode="rmsprop")
        assert "mode" in excinfo.value.errors

    def test_negative_learning_rate(self):
        with pytest.raises(ConfigError):
            OptimizerState.adam(learning_rate=-1.0)
