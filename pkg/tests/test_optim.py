import numpy as np
import pytest

from segcorrect.errors import NumericError
from segcorrect.optim import AdamState, adam_step


def scalar_adam_oracle(g_seq, lr=1e-4, b1=0.9, b2=0.999, eps=1e-8):
    """Hand-rolled scalar recursion for a fixed gradient sequence."""
    theta, m, v = 0.0, 0.0, 0.0
    for t, g in enumerate(g_seq, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mhat = m / (1 - b1**t)
        vhat = v / (1 - b2**t)
        theta -= lr * mhat / (np.sqrt(vhat) + eps)
    return theta


def make(value=0.0):
    params = {"p": np.array([value], dtype=np.float64)}
    state = AdamState.for_params(params, lr=1e-4)
    return params, state


class TestAdamStep:
    def test_zero_gradient_first_step(self):
        params, state = make(1.5)
        adam_step(params, {"p": np.zeros(1)}, state)
        assert params["p"][0] == 1.5
        assert state.m["p"][0] == 0.0 and state.v["p"][0] == 0.0
        assert state.t == 1

    def test_first_step_closed_form(self):
        params, state = make(0.0)
        adam_step(params, {"p": np.array([0.5])}, state)
        expected = -1e-4 * (0.5 / (0.5 + 1e-8))
        assert abs(params["p"][0] - expected) < 1e-10

    def test_two_step_recursion_oracle(self):
        params, state = make(0.0)
        for g in (0.5, 0.5):
            adam_step(params, {"p": np.array([g])}, state)
        assert abs(params["p"][0] - scalar_adam_oracle([0.5, 0.5])) < 1e-10

    def test_varied_gradient_sequence(self):
        params, state = make(0.0)
        seq = [0.3, -0.7, 0.1, 2.0]
        for g in seq:
            adam_step(params, {"p": np.array([g])}, state)
        assert abs(params["p"][0] - scalar_adam_oracle(seq)) < 1e-10

    def test_non_finite_gradient_aborts_without_mutation(self):
        params, state = make(1.0)
        adam_step(params, {"p": np.array([0.5])}, state)
        snapshot = params["p"].copy()
        t_before = state.t
        with pytest.raises(NumericError):
            adam_step(params, {"p": np.array([np.nan])}, state)
        assert np.array_equal(params["p"], snapshot)
        assert state.t == t_before

    def test_second_moment_nonnegative_and_t_increages(self):
        rng = np.random.default_rng(0)
        params = {"w": rng.standard_normal(16)}
        state = AdamState.for_params(params, lr=1e-3)
        for step in range(1, 6):
            adam_step(params, {"w": rng.standard_normal(16)}, state)
            assert state.t == step
            assert state.v["w"].min() >= 0.0
