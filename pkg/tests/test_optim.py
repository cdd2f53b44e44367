import numpy as np
import pytest

from shiftadd_dvs.optim import OptimizerState, adam_update, lr_plateau_schedule


class TestAdam:
    def test_zero_gradient_leaves_params_unchanged(self):
        state = OptimizerState(lr=1e-3)
        arrays = {"w": np.array([1.0, -2.0, 3.0])}
        grads = {"w": np.zeros(3)}
        out = adam_update(arrays, grads, state)
        np.testing.assert_array_equal(out["w"], arrays["w"])
        assert state.step == 1
        # push a nonzero gradient then a zero one: moments decay toward zero
        adam_update(out, {"w": np.ones(3)}, state)
        m_before = state.m["w"].copy()
        adam_update(out, {"w": np.zeros(3)}, state)
        assert np.all(np.abs(state.m["w"]) < np.abs(m_before))

    def test_first_step_is_signed_lr(self):
        lr = 1e-3
        for g in (0.5, -3.0, 10.0):
            state = OptimizerState(lr=lr)
            arrays = {"w": np.array([1.0])}
            out = adam_update(arrays, {"w": np.array([g])}, state)
            delta = out["w"][0] - 1.0
            expected = -lr * g / (abs(g) + state.eps)
            assert delta == pytest.approx(expected, rel=1e-9)
            assert delta == pytest.approx(-lr * np.sign(g), rel=1e-4)

    def test_constant_gradient_asymptote(self):
        state = OptimizerState(lr=1e-3)
        arrays = {"w": np.array([0.0])}
        g = {"w": np.array([2.5])}
        prev = arrays["w"][0]
        for _ in range(400):
            arrays = adam_update(arrays, g, state)
        delta = arrays["w"][0] - prev
        # per-step movement approaches -lr * sign(g)
        step = adam_update(arrays, g, state)["w"][0] - arrays["w"][0]
        assert step == pytest.approx(-1e-3, rel=1e-3)
        assert delta < 0

    def test_moment_shapes_follow_params(self, rng):
        state = OptimizerState()
        arrays = {"k": rng.normal(size=(2, 3)), "b": rng.normal(size=3)}
        grads = {"k": rng.normal(size=(2, 3)), "b": rng.normal(size=3)}
        adam_update(arrays, grads, state)
        assert state.m["k"].shape == (2, 3)
        assert state.v["b"].shape == (3,)


class TestPlateauSchedule:
    def run_losses(self, losses, lr=1e-3, patience=5):
        state = OptimizerState(lr=lr, patience=patience)
        trace = []
        for loss in losses:
            lr_plateau_schedule(state, loss)
            trace.append(state.lr)
        return state, trace

    def test_decreasing_losses_keep_lr(self):
        state, trace = self.run_losses([1.0 - 0.01 * i for i in range(20)])
        assert state.lr == 1e-3
        assert all(v == 1e-3 for v in trace)

    def test_constant_loss_halves_at_epoch_five(self):
        state, trace = self.run_losses([0.7] * 5)
        assert trace[:4] == [1e-3] * 4
        assert trace[4] == pytest.approx(5e-4)

    def test_constant_loss_ten_epochs_halves_twice(self):
        state, trace = self.run_losses([0.7] * 10)
        assert trace[4] == pytest.approx(5e-4)
        assert trace[9] == pytest.approx(2.5e-4)
        assert state.lr == pytest.approx(2.5e-4)

    def test_improvement_resets_window(self):
        losses = [1.0, 1.0, 1.0, 1.0, 0.5, 0.5, 0.5, 0.5, 0.5]
        state, trace = self.run_losses(losses)
        # improvement at epoch 5 resets; halving happens 5 stalls later (epoch 10 not reached)
        assert trace[4] == 1e-3
        assert state.lr == 1e-3
        lr_plateau_schedule(state, 0.5)
        assert state.lr == pytest.approx(5e-4)

    def test_equal_loss_is_not_improvement(self):
        # matching the best exactly does not reset the stall window
        state, _ = self.run_losses([0.3, 0.3, 0.3, 0.3, 0.3])
        assert state.lr == pytest.approx(5e-4)
