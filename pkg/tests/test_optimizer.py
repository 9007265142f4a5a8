"""Unit tests for the optimizer module: AdamW updates and the step-decay schedule."""

import numpy as np
import pytest

from fpi_locate.numkernel import Tensor, precision
from fpi_locate.optimizer import AdamWState, StepDecay, adamw_step
from fpi_locate.validation import ConfigError, DimensionError


def _params(*values):
    return {f"p{i}": Tensor(np.array(v, dtype=np.float64), requires_grad=True)
            for i, v in enumerate(values)}


# ---------------------------------------------------------------------------
# AdamW
# ---------------------------------------------------------------------------

class TestAdamW:
    def test_first_step_moves_by_lr_times_sign(self):
        with precision(np.float64):
            params = _params([1.0, -2.0, 0.5])
            grads = {"p0": np.array([0.3, -4.0, 2.0])}
            state = adamw_step(params, grads, lr=0.01, weight_decay=0.0)
        assert state.step == 1
        assert np.allclose(params["p0"].data, [0.99, -1.99, 0.49], atol=1e-6)

    def test_decoupled_weight_decay(self):
        with precision(np.float64):
            params = _params([2.0])
            adamw_step(params, {"p0": np.zeros(1)}, lr=0.1, weight_decay=0.5)
        # zero gradient: only the decay term acts
        assert params["p0"].data[0] == pytest.approx(2.0 * (1 - 0.1 * 0.5))

    def test_uses_param_grad_by_default(self):
        with precision(np.float64):
            params = _params([1.0])
            params["p0"].grad = np.array([1.0])
            adamw_step(params, None, lr=0.1, weight_decay=0.0)
        assert params["p0"].data[0] == pytest.approx(0.9, abs=1e-6)

    def test_missing_gradient_is_zero(self):
        with precision(np.float64):
            params = _params([1.0])
            adamw_step(params, {}, lr=0.1, weight_decay=0.0)
        assert params["p0"].data[0] == pytest.approx(1.0)

    def test_state_carries_moments(self):
        with precision(np.float64):
            params = _params([0.0])
            state = None
            for _ in range(3):
                state = adamw_step(params, {"p0": np.array([1.0])}, lr=0.1,
                                   weight_decay=0.0, state=state)
        assert state.step == 3
        assert state.m["p0"][0] == pytest.approx(1 - 0.9 ** 3)
        assert params["p0"].data[0] == pytest.approx(-0.3, abs=1e-5)

    def test_minimises_quadratic(self):
        with precision(np.float64):
            params = _params([3.0, -2.0])
            state = None
            for _ in range(500):
                g = 2.0 * params["p0"].data
                state = adamw_step(params, {"p0": g}, lr=0.05, weight_decay=0.0, state=state)
        assert np.all(np.abs(params["p0"].data) < 0.05)

    def test_rejects_non_positive_lr(self):
        with pytest.raises(ConfigError):
            adamw_step(_params([1.0]), None, lr=0.0)

    def test_rejects_negative_decay(self):
        with pytest.raises(ConfigError):
            adamw_step(_params([1.0]), None, weight_decay=-1.0)

    def test_state_mismatch(self):
        state = AdamWState.zeros_like(_params([1.0]))
        with pytest.raises(DimensionError):
            adamw_step(_params([1.0], [2.0]), None, state=state)


# ---------------------------------------------------------------------------
# Schedule
# ---------------------------------------------------------------------------

class TestStepDecay:
    def test_epoch_recipe(self):
        sched = StepDecay(3e-4, (10, 14))
        assert sched.lr_at(1) == pytest.approx(3e-4)
        assert sched.lr_at(9) == pytest.approx(3e-4)
        assert sched.lr_at(10) == pytest.approx(3e-5)
        assert sched.lr_at(13) == pytest.approx(3e-5)
        assert sched.lr_at(14) == pytest.approx(3e-6)
        assert sched.lr_at(16) == pytest.approx(3e-6)

    def test_no_milestones(self):
        assert StepDecay(1e-3).lr_at(10_000) == pytest.approx(1e-3)

    def test_custom_gamma(self):
        assert StepDecay(1.0, (1,), gamma=0.5).lr_at(1) == pytest.approx(0.5)
