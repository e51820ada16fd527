import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from earlybird.errors import ConfigError, DimensionError
from earlybird.optim import OptimizerState, sgd_step


def _step(p, g, lr=0.1, momentum=0.0, wd=0.0, l1=0.0, gamma=False):
    params = {"w": np.array(p, dtype=np.float64)}
    state = OptimizerState(lr, momentum, wd)
    sgd_step(params, {"w": np.array(g, dtype=np.float64)}, state, l1, ("w",) if gamma else ())
    return params["w"], state


class TestSGD:
    def test_vanilla(self):
        w, _ = _step([1.0, -2.0], [0.5, 0.25])
        np.testing.assert_allclose(w, [0.95, -2.025])

    def test_weight_decay_only(self):
        w, _ = _step([1.0], [0.0], wd=1e-4)
        assert w[0] == pytest.approx(0.99999, abs=1e-15)

    def test_l1_on_gamma(self):
        w, _ = _step([0.5], [0.0], l1=1e-4, gamma=True)
        assert w[0] == pytest.approx(0.49999, abs=1e-15)

    def test_l1_ignores_non_gamma(self):
        w, _ = _step([0.5], [0.0], l1=1e-4, gamma=False)
        assert w[0] == 0.5

    def test_sign_of_zero_is_zero(self):
        w, _ = _step([0.0, -0.5], [0.0, 0.0], l1=1e-2, gamma=True)
        np.testing.assert_allclose(w, [0.0, -0.5 + 0.1 * 1e-2])

    def test_momentum_accumulates(self):
        params = {"w": np.array([0.0])}
        state = OptimizerState(1.0, 0.9, 0.0)
        for _ in range(2):
            sgd_step(params, {"w": np.array([1.0])}, state)
        # v1 = 1, v2 = 0.9 + 1
        assert params["w"][0] == pytest.approx(-(1 + 1.9))
        assert state.buffers["w"][0] == pytest.approx(1.9)

    def test_negative_lr_rejected(self):
        with pytest.raises(ConfigError):
            _step([1.0], [1.0], lr=-0.1)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            sgd_step({"w": np.zeros(2)}, {"w": np.zeros(3)}, OptimizerState(0.1))

    def test_buffer_shapes_checked(self):
        state = OptimizerState(0.1, buffers={"w": np.zeros(3)})
        with pytest.raises(DimensionError):
            state.check({"w": np.zeros(2)})

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=8), st.floats(0, 0.99))
    def test_zero_lr_is_identity(self, values, momentum):
        p = np.array(values, dtype=np.float32)
        params = {"g": p.copy()}
        grads = {"g": np.ones_like(p)}
        sgd_step(params, grads, OptimizerState(0.0, momentum, 0.0), 0.0, ("g",))
        np.testing.assert_array_equal(params["g"], p)
