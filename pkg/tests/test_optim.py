import numpy as np
import pytest

from alphagan3d.errors import ContractError
from alphagan3d.optim import (
    Adam,
    AdamW,
    OptimizerConfig,
    OptimizerState,
    adam_step,
    adamw_step,
    make_optimizer,
)
import alphagan3d.autodiff as ad


def one_param(value, dtype=np.float64):
    return {"theta": np.array([value], dtype=dtype)}


class TestAdam:
    def test_first_step_bias_corrected(self):
        params = one_param(0.0)
        state = OptimizerState.for_params(params)
        cfg = OptimizerConfig(learning_rate=2e-4)
        adam_step(params, one_param(1.0), state, cfg)
        expected = -cfg.learning_rate * 1.0 / (1.0 + cfg.eps)
        np.testing.assert_allclose(params["theta"], [expected], rtol=1e-12)

    def test_zero_gradient_no_change(self):
        params = one_param(3.14)
        state = OptimizerState.for_params(params)
        adam_step(params, one_param(0.0), state, OptimizerConfig())
        np.testing.assert_array_equal(params["theta"], [3.14])

    def test_descent_on_quadratic(self):
        params = one_param(1.0)
        state = OptimizerState.for_params(params)
        cfg = OptimizerConfig(learning_rate=0.05)
        initial = params["theta"][0] ** 2
        for _ in range(50):
            grads = {"theta": 2.0 * params["theta"]}
            adam_step(params, grads, state, cfg)
        assert params["theta"][0] ** 2 < initial

    def test_misaligned_shapes_rejected(self):
        params = one_param(1.0)
        state = OptimizerState.for_params(params)
        with pytest.raises(ContractError):
            adam_step(params, {"theta": np.zeros(3)}, state, OptimizerConfig())

    def test_state_shapes_mirror_params(self):
        params = {"a": np.zeros((2, 3)), "b": np.zeros(5)}
        state = OptimizerState.for_params(params)
        for k, p in params.items():
            assert state.m[k].shape == p.shape
            assert state.v[k].shape == p.shape


class TestAdamW:
    def test_pure_decay_step(self):
        params = one_param(1.0)
        state = OptimizerState.for_params(params)
        cfg = OptimizerConfig(learning_rate=2e-4, weight_decay=0.01)
        adamw_step(params, one_param(0.0), state, cfg)
        np.testing.assert_allclose(params["theta"], [1.0 - 2e-6], rtol=1e-12)

    def test_zero_decay_equals_adam_bitwise(self, rng):
        p0 = rng.normal(size=7)
        g0 = rng.normal(size=7)
        pa, pw = {"t": p0.copy()}, {"t": p0.copy()}
        sa, sw = OptimizerState.for_params(pa), OptimizerState.for_params(pw)
        cfg = OptimizerConfig(weight_decay=0.0)
        for _ in range(5):
            adam_step(pa, {"t": g0}, sa, cfg)
            adamw_step(pw, {"t": g0}, sw, cfg)
        assert np.array_equal(pa["t"], pw["t"])

    def test_decay_linear_in_theta(self):
        cfg = OptimizerConfig(learning_rate=2e-4, weight_decay=0.01)
        for scale in (1.0, 2.0):
            params = one_param(scale)
            state = OptimizerState.for_params(params)
            adamw_step(params, one_param(0.0), state, cfg)
            decay = scale - params["theta"][0]
            np.testing.assert_allclose(decay, scale * 2e-6, rtol=1e-9)


class TestOptimizerClasses:
    def test_adam_class_steps_difftensors(self, rng):
        theta = ad.tensor(np.array([1.0]), requires_grad=True, dtype=np.float64)
        opt = Adam({"theta": theta}, OptimizerConfig(learning_rate=0.1))
        for _ in range(50):
            opt.zero_grad()
            loss = ad.sum_(ad.square(theta))
            ad.backward(loss)
            opt.step()
        assert abs(theta.numpy()[0]) < 1.0

    def test_missing_grad_treated_as_zero(self):
        theta = ad.tensor(np.array([2.0]), requires_grad=True, dtype=np.float64)
        opt = Adam({"theta": theta})
        opt.step()
        np.testing.assert_array_equal(theta.numpy(), [2.0])

    def test_make_optimizer(self):
        theta = ad.tensor(np.array([1.0]), requires_grad=True)
        assert isinstance(make_optimizer("adamw", {"t": theta}), AdamW)
        with pytest.raises(ContractError):
            make_optimizer("sgd", {"t": theta})

    def test_updates_deterministic(self, rng):
        def run():
            theta = ad.tensor(np.arange(4.0), requires_grad=True, dtype=np.float64)
            opt = AdamW({"theta": theta}, OptimizerConfig(learning_rate=0.01))
            for _ in range(10):
                opt.zero_grad()
                ad.backward(ad.sum_(ad.square(theta)))
                opt.step()
            return theta.numpy().copy()

        assert np.array_equal(run(), run())
