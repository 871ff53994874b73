import math

import numpy as np
import pytest

from counterfactual_recsys.error import ConfigurationError, GradientOracleError
from counterfactual_recsys.numerics import (
    AdamState,
    adam_step,
    finite_diff_grad,
    logistic_loss,
    logistic_loss_grad,
    max_relative_error,
    sigmoid,
    sparse_adam_step,
)


def test_sigmoid() -> None:
    assert sigmoid(0.0) == 0.5
    assert 0.0 < sigmoid(-1000.0) < 1e-300
    assert sigmoid(1000.0) < 1.0
    values = np.asarray(sigmoid(np.array([-3.0, 0.0, 3.0])))
    assert values[0] + values[2] == pytest.approx(1.0)
    assert values[1] == 0.5


def test_logistic_loss() -> None:
    assert logistic_loss(1.0, 0.0) == pytest.approx(math.log(2.0))
    assert logistic_loss(-1.0, 0.0) == pytest.approx(math.log(2.0))
    assert logistic_loss(1.0, 800.0) == 0.0
    assert logistic_loss(-1.0, 800.0) == pytest.approx(800.0)
    assert logistic_loss_grad(1.0, 0.0) == -0.5
    assert logistic_loss_grad(-1.0, 0.0) == 0.5

    s = np.linspace(-4, 4, 9)
    for y in (-1.0, 1.0):
        numeric = finite_diff_grad(lambda x, y=y: float(np.sum(logistic_loss(y, x))), s)
        assert max_relative_error(logistic_loss_grad(y, s), numeric) < 1e-6


def test_finite_diff_grad() -> None:
    grad = finite_diff_grad(lambda x: float(x[0] ** 2 + 3 * x[0] * x[1]), [1.0, 2.0])
    assert grad == pytest.approx([8.0, 3.0])

    with pytest.raises(ConfigurationError):
        finite_diff_grad(lambda x: 0.0, [1.0], h=0.0)

    with pytest.raises(GradientOracleError) as e:
        finite_diff_grad(lambda x: float(np.sqrt(x[1])), [1.0, 0.0])
    assert e.value.coordinate == 1


def test_max_relative_error() -> None:
    assert max_relative_error([1.0, 2.0], [1.0, 2.0]) == 0.0
    assert max_relative_error([1.0], [1.1]) == pytest.approx(0.1 / 1.1)
    # components below the floor are compared on an absolute scale
    assert max_relative_error([1e-9], [2e-9]) == pytest.approx(1e-6)
    assert max_relative_error([], []) == 0.0


def test_adam_first_step() -> None:
    param = np.array([[1.0, -1.0], [0.5, 2.0]])
    grad = np.array([[0.3, -2.0], [1e-3, 0.0]])
    state = AdamState.zeros_like(param)
    adam_step(param, grad, state, 0.1)
    # bias-corrected first step moves every coordinate with a nonzero gradient by lr against its sign
    expected = np.array([[0.9, -0.9], [0.4, 2.0]])
    assert np.allclose(param, expected, atol=1e-6)
    assert state.t == 1
    assert list(state.row_steps) == [1, 1]


def test_adam_rejects_bad_input() -> None:
    param = np.zeros((2, 2))
    state = AdamState.zeros_like(param)
    with pytest.raises(ConfigurationError):
        adam_step(param, np.zeros((2, 3)), state, 0.1)
    with pytest.raises(ConfigurationError):
        adam_step(param, np.zeros((2, 2)), state, -0.1)
    with pytest.raises(ConfigurationError):
        AdamState.zeros_like(np.zeros(3))


def test_sparse_adam_only_touches_listed_rows() -> None:
    param = np.arange(12, dtype=np.float64).reshape(4, 3)
    original = param.copy()
    state = AdamState.zeros_like(param)
    sparse_adam_step(param, {2: [1.0, 1.0, 1.0]}, state, 0.01)

    assert np.array_equal(param[[0, 1, 3]], original[[0, 1, 3]])
    assert np.allclose(param[2], original[2] - 0.01)
    assert list(state.row_steps) == [0, 0, 1, 0]
    assert np.all(state.m[[0, 1, 3]] == 0.0)

    sparse_adam_step(param, (np.array([0, 2]), np.ones((2, 3))), state, 0.01)
    assert list(state.row_steps) == [1, 0, 2, 0]
    # row 0 takes its own first (bias-corrected) step
    assert np.allclose(param[0], original[0] - 0.01)


def test_sparse_adam_matches_dense_on_all_rows() -> None:
    rng = np.random.default_rng(0)
    dense = rng.normal(size=(3, 2))
    sparse = dense.copy()
    dense_state = AdamState.zeros_like(dense)
    sparse_state = AdamState.zeros_like(sparse)
    for _ in range(5):
        grad = rng.normal(size=(3, 2))
        adam_step(dense, grad, dense_state, 0.05)
        sparse_adam_step(sparse, (np.arange(3), grad), sparse_state, 0.05)
    assert np.array_equal(dense, sparse)


def test_sparse_adam_rejects_bad_rows() -> None:
    param = np.zeros((3, 2))
    state = AdamState.zeros_like(param)
    with pytest.raises(ConfigurationError):
        sparse_adam_step(param, (np.array([1, 1]), np.ones((2, 2))), state, 0.1)
    with pytest.raises(ConfigurationError):
        sparse_adam_step(param, {5: [1.0, 1.0]}, state, 0.1)
    with pytest.raises(ConfigurationError):
        sparse_adam_step(param, (np.array([0]), np.ones((1, 3))), state, 0.1)
    sparse_adam_step(param, {}, state, 0.1)
    assert state.t == 0


def test_logistic_loss_softplus_identity() -> None:
    rng = np.random.default_rng(4)
    y = rng.choice([-1.0, 1.0], size=200)
    s = rng.normal(0.0, 5.0, size=200)
    both = np.asarray(logistic_loss(y, s)) + np.asarray(logistic_loss(-y, s))
    assert np.all(both >= np.abs(s))
    assert np.allclose(both - np.abs(s), 2.0 * np.log1p(np.exp(-np.abs(s))), rtol=1e-12, atol=1e-12)
    assert logistic_loss(-1.0, 50.0) == pytest.approx(50.0)


def test_adam_first_step_ignores_gradient_scale() -> None:
    rng = np.random.default_rng(5)
    start = rng.normal(size=(3, 4))
    grad = rng.uniform(0.1, 2.0, size=(3, 4)) * rng.choice([-1.0, 1.0], size=(3, 4))
    lr = 0.01
    reference = start.copy()
    adam_step(reference, grad, AdamState.zeros_like(reference), lr)
    for scale in (0.5, 10.0, 1000.0):
        scaled = start.copy()
        adam_step(scaled, scale * grad, AdamState.zeros_like(scaled), lr)
        assert np.max(np.abs(scaled - reference)) < 1e-6 * lr, scale


def test_adam_two_steps_by_hand() -> None:
    lr, eps = 0.1, 1e-8
    param = np.array([[0.0, 0.0]])
    state = AdamState.zeros_like(param)
    adam_step(param, np.array([[1.0, 1.0]]), state, lr)
    adam_step(param, np.array([[1.0, -2.0]]), state, lr)

    # identical unit gradients: both bias-corrected moments are exactly one, so each step is -lr
    same = -2.0 * lr / (1.0 + eps)
    # second gradient -2: m = 0.9 * 0.1 - 0.2, v = 0.999 * 0.001 + 0.004
    m_hat = (0.9 * 0.1 + 0.1 * -2.0) / (1.0 - 0.9**2)
    v_hat = (0.999 * 0.001 + 0.001 * 4.0) / (1.0 - 0.999**2)
    flipped = -lr / (1.0 + eps) - lr * m_hat / (math.sqrt(v_hat) + eps)
    assert param[0, 0] == pytest.approx(same, rel=1e-9)
    assert param[0, 1] == pytest.approx(flipped, rel=1e-9)
    assert state.t == 2
    assert list(state.row_steps) == [2]
