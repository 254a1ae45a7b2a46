import numpy as np
import pytest

from sparselm.errors import NonFiniteGradientError
from sparselm.services.autodiff import Tensor
from sparselm.services.optimization import (
    Optimizer,
    OptimizerState,
    adam_step,
    clip_gradients,
    exp_decay_schedule,
    global_norm,
    sgd_momentum_step,
)


def test_sgd_single_step():
    params, state = sgd_momentum_step([np.array([1.0])], [np.array([0.5])], OptimizerState(), lr=1.0, momentum=0.0)
    np.testing.assert_allclose(params[0], [0.5])
    assert state.step == 1


def test_sgd_momentum_second_update():
    p = [np.array([0.0])]
    g = [np.array([1.0])]
    p1, s1 = sgd_momentum_step(p, g, OptimizerState(), lr=0.1, momentum=0.9)
    p2, _ = sgd_momentum_step(p1, g, s1, lr=0.1, momentum=0.9)
    assert float(p1[0] - p2[0]) == pytest.approx(0.1 * 1.0 * 1.9)


def test_sgd_quadratic_bowl():
    target = np.array([3.0, -2.0])
    p, state = [np.zeros(2)], OptimizerState()
    for _ in range(50):
        p, state = sgd_momentum_step(p, [p[0] - target], state, lr=0.5, momentum=0.1)
    np.testing.assert_allclose(p[0], target, atol=1e-6)


def test_adam_first_step_and_zero_gradient():
    p, state = adam_step([np.array([1.0, 1.0])], [np.array([0.3, -4.0])], OptimizerState(), lr=0.001)
    np.testing.assert_allclose(p[0], [1.0 - 0.001, 1.0 + 0.001], atol=1e-8)
    q, _ = adam_step([np.array([2.0])], [np.array([0.0])], OptimizerState(), lr=0.001)
    np.testing.assert_array_equal(q[0], [2.0])


def test_adam_quadratic_bowl():
    target = np.array([0.5, -0.25])
    p, state = [np.zeros(2)], OptimizerState()
    for _ in range(500):
        p, state = adam_step(p, [2 * (p[0] - target)], state, lr=0.05)
    np.testing.assert_allclose(p[0], target, atol=1e-4)


def test_zero_learning_rate_freezes_parameters():
    p = [np.array([1.0, 2.0])]
    q, _ = sgd_momentum_step(p, [np.array([5.0, -5.0])], OptimizerState(), lr=0.0)
    np.testing.assert_array_equal(q[0], p[0])
    q, _ = adam_step(p, [np.array([5.0, -5.0])], OptimizerState(), lr=0.0)
    np.testing.assert_array_equal(q[0], p[0])


def test_replay_is_bit_identical():
    gen = np.random.default_rng(3)
    grads = [[gen.normal(size=3)] for _ in range(20)]

    def replay():
        p, state = [np.ones(3)], OptimizerState()
        for g in grads:
            p, state = adam_step(p, g, state)
        return p[0]

    np.testing.assert_array_equal(replay(), replay())


def test_non_finite_gradient_aborts():
    with pytest.raises(NonFiniteGradientError):
        sgd_momentum_step([np.zeros(2)], [np.array([np.nan, 0.0])], OptimizerState(), lr=1.0)
    with pytest.raises(NonFiniteGradientError):
        adam_step([np.zeros(2)], [np.array([np.inf, 0.0])], OptimizerState())


def test_exp_decay_schedule():
    assert exp_decay_schedule(10.0, 0) == 10.0
    assert exp_decay_schedule(10.0, 1) == pytest.approx(9.7)
    assert exp_decay_schedule(10.0, 150) == pytest.approx(0.105, abs=1e-3)
    with pytest.raises(ValueError):
        exp_decay_schedule(1.0, 1, factor=1.5)


def test_clip_gradients():
    small = [np.array([0.3, 0.4])]
    out, norm = clip_gradients(small, 1.0)
    assert norm == pytest.approx(0.5)
    np.testing.assert_array_equal(out[0], small[0])

    gen = np.random.default_rng(0)
    big = [gen.normal(size=4) * 10, gen.normal(size=(2, 3)) * 10]
    big = [g * (10.0 / global_norm(big)) for g in big]
    clipped, norm = clip_gradients(big, 1.0)
    assert norm == pytest.approx(10.0)
    assert global_norm(clipped) == pytest.approx(1.0, abs=1e-12)
    flat_a = np.concatenate([g.ravel() for g in big])
    flat_b = np.concatenate([g.ravel() for g in clipped])
    cosine = flat_a @ flat_b / (np.linalg.norm(flat_a) * np.linalg.norm(flat_b))
    assert cosine == pytest.approx(1.0, abs=1e-12)


def test_optimizer_updates_tensors():
    w = Tensor(np.array([1.0, -1.0]), requires_grad=True)
    opt = Optimizer([w], lr=0.5, kind="sgd", momentum=0.0, clip_norm=1.0)
    w.grad = np.array([3.0, 4.0])
    norm = opt.step()
    assert norm == pytest.approx(5.0)
    np.testing.assert_allclose(w.data, [1.0 - 0.5 * 0.6, -1.0 - 0.5 * 0.8])
    opt.zero_grad()
    assert w.grad is None
    with pytest.raises(ValueError):
        Optimizer([w], lr=0.1, kind="rmsprop")
