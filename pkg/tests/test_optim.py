import numpy as np
import pytest

from cmm.errors import BadConfig, NonFiniteGradient, OutOfRange, ShapeMismatch
from cmm.optim import OptimState, Schedule, adamw_step, lr_at


def hand_adamw(theta, grads, lr, beta1=0.9, beta2=0.999, eps=1e-8, wd=0.0):
    """Scalar reference recurrence, plain Python floats."""
    m = v = 0.0
    for t, g in enumerate(grads, start=1):
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        m_hat = m / (1 - beta1**t)
        v_hat = v / (1 - beta2**t)
        theta = theta - lr * (m_hat / (v_hat**0.5 + eps) + wd * theta)
    return theta


class TestAdamW:
    def test_scalar_matches_hand_recurrence(self):
        state = OptimState(weight_decay=0.0)
        theta = np.array([1.0])
        adamw_step(state, {"x": theta}, {"x": np.array([0.5])}, lr=0.1)
        assert abs(theta[0] - hand_adamw(1.0, [0.5], 0.1)) <= 1e-12

    def test_multi_step_matches_hand_recurrence(self):
        grads = [0.5, -0.25, 0.1, 0.9, -1.3]
        state = OptimState(weight_decay=0.01)
        theta = np.array([2.0])
        for g in grads:
            adamw_step(state, {"x": theta}, {"x": np.array([g])}, lr=0.05)
        expected = hand_adamw(2.0, grads, 0.05, wd=0.01)
        assert abs(theta[0] - expected) <= 1e-12

    def test_zero_grad_zero_decay_is_identity(self):
        state = OptimState(weight_decay=0.0)
        theta = np.array([1.0, -2.0, 3.5])
        before = theta.copy()
        adamw_step(state, {"x": theta}, {"x": np.zeros(3)}, lr=0.1)
        np.testing.assert_array_equal(theta, before)

    def test_decoupled_decay_only(self):
        state = OptimState(weight_decay=1e-4)
        theta = np.array([1.0])
        adamw_step(state, {"x": theta}, {"x": np.zeros(1)}, lr=1e-4)
        assert theta[0] == 1.0 - 1e-4 * 1e-4 * 1.0

    def test_first_step_is_signed_lr(self):
        for g in (0.01, -3.0, 1e-3):
            state = OptimState(weight_decay=0.0)
            theta = np.array([0.0])
            adamw_step(state, {"x": theta}, {"x": np.array([g])}, lr=0.05)
            assert theta[0] == pytest.approx(-0.05 * np.sign(g), rel=1e-4)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            adamw_step(OptimState(), {"x": np.zeros(3)}, {"x": np.zeros(4)}, lr=0.1)
        with pytest.raises(ShapeMismatch):
            adamw_step(OptimState(), {"x": np.zeros(3)}, {}, lr=0.1)

    def test_non_finite_gradient(self):
        with pytest.raises(NonFiniteGradient):
            adamw_step(
                OptimState(), {"x": np.zeros(2)}, {"x": np.array([1.0, np.nan])}, lr=0.1
            )

    def test_second_moment_nonnegative_and_step_increases(self):
        state = OptimState()
        theta = np.array([1.0, 2.0])
        for i in range(5):
            adamw_step(state, {"x": theta}, {"x": np.array([0.3, -0.4])}, lr=0.01)
        assert state.step == 5
        assert np.all(state.v["x"] >= 0.0)


class TestSchedule:
    def test_warmup_end_hits_base_exactly(self):
        s = Schedule(warmup_steps=500, total_steps=16000)
        assert lr_at(s, 500) == 1e-4

    def test_total_hits_min_exactly(self):
        s = Schedule(warmup_steps=500, total_steps=16000)
        assert lr_at(s, 16000) == 1e-5

    def test_cosine_midpoint(self):
        s = Schedule(warmup_steps=1000, total_steps=3000)
        mid = 1000 + (3000 - 1000) // 2
        assert lr_at(s, mid) == pytest.approx((1e-4 + 1e-5) / 2, abs=1e-12)

    def test_warmup_starts_at_zero_and_is_linear(self):
        s = Schedule(warmup_steps=100, total_steps=1000)
        assert lr_at(s, 0) == 0.0
        assert lr_at(s, 50) == pytest.approx(5e-5, abs=1e-18)

    def test_continuous_at_junction_and_non_increasing_after(self):
        s = Schedule(warmup_steps=40, total_steps=400)
        values = [lr_at(s, t) for t in range(40, 401)]
        assert values[0] == s.lr_base
        assert all(a >= b for a, b in zip(values, values[1:]))

    def test_out_of_range(self):
        s = Schedule(warmup_steps=10, total_steps=100)
        with pytest.raises(OutOfRange):
            lr_at(s, -1)
        with pytest.raises(OutOfRange):
            lr_at(s, 101)

    def test_validation(self):
        with pytest.raises(BadConfig):
            Schedule(warmup_steps=0, total_steps=100)
        with pytest.raises(BadConfig):
            Schedule(warmup_steps=100, total_steps=100)
        with pytest.raises(BadConfig):
            Schedule(warmup_steps=10, total_steps=100, lr_base=1e-5, lr_min=1e-4)
