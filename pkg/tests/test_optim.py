"""Adam update semantics: bias correction, identity on zero grads, determinism."""

import math

import numpy as np
import pytest

from hpfuse.autodiff import ShapeMismatch, Tensor
from hpfuse.optim import Adam, AdamState, adam_step


def test_first_step_hand_value():
    # m=0.1, v=0.001 -> bias-corrected to 1, 1; update = -lr / sqrt(1 + eps)
    p = {"w": Tensor(np.zeros(3), requires_grad=True)}
    state = adam_step(p, {"w": np.ones(3)}, AdamState(lr=1e-3))
    expected = -(1e-3 / math.sqrt(1.0 + 1e-8))
    np.testing.assert_allclose(p["w"].data, expected, rtol=1e-9)
    assert state.step_count == 1


def test_zero_gradients_leave_parameters_unchanged():
    values = np.random.default_rng(0).normal(size=(4, 5))
    p = {"w": Tensor(values.copy(), requires_grad=True)}
    adam_step(p, {"w": np.zeros((4, 5))}, AdamState(lr=0.1))
    np.testing.assert_array_equal(p["w"].data, values)


def test_identical_runs_are_bitwise_identical():
    def run():
        rng = np.random.default_rng(42)
        p = {"a": Tensor(rng.normal(size=6), requires_grad=True),
             "b": Tensor(rng.normal(size=(2, 3)), requires_grad=True)}
        opt = Adam(p, lr=3e-3)
        for _ in range(25):
            for t in p.values():
                t.zero_grad()
            loss = ((p["a"] * p["a"]).sum() + (p["b"] * p["b"]).sum())
            loss.backward()
            opt.step()
        return p["a"].data.copy(), p["b"].data.copy()

    a1, b1 = run()
    a2, b2 = run()
    np.testing.assert_array_equal(a1, a2)
    np.testing.assert_array_equal(b1, b2)


def test_moment_shapes_track_parameters():
    p = {"w": Tensor(np.zeros((2, 2)), requires_grad=True)}
    state = AdamState()
    for step in range(1, 4):
        adam_step(p, {"w": np.full((2, 2), 0.5)}, state)
        assert state.step_count == step
        assert state.first_moment["w"].shape == (2, 2)
        assert state.second_moment["w"].shape == (2, 2)


def test_shape_mismatch_raises():
    p = {"w": Tensor(np.zeros(3), requires_grad=True)}
    with pytest.raises(ShapeMismatch):
        adam_step(p, {"w": np.zeros(4)}, AdamState())


def test_step_count_overflow_guard():
    p = {"w": Tensor(np.zeros(1), requires_grad=True)}
    state = AdamState(step_count=2**53)
    with pytest.raises(OverflowError):
        adam_step(p, {"w": np.zeros(1)}, state)


def test_descends_a_quadratic():
    p = {"w": Tensor(np.array([5.0, -3.0]), requires_grad=True)}
    opt = Adam(p, lr=0.05)
    for _ in range(400):
        opt.zero_grad()
        loss = (p["w"] * p["w"]).sum()
        loss.backward()
        opt.step()
    assert np.abs(p["w"].data).max() < 0.5
