"""Adam: a hand-computed first step, skip rules, and state round-trips."""

import numpy as np
import pytest

from mart.optim import Adam
from mart.tensor import Parameter, ShapeError


def test_first_two_steps_hand_computed():
    # w = 1, constant gradient 0.5, lr = 0.1: bias correction makes the
    # first step almost exactly lr * sign(g), so w walks 1.0 -> 0.9 -> 0.8
    # up to the eps term. Values below worked out on paper; tolerance covers
    # float associativity between the paper form and the running form.
    p = Parameter("w", [1.0])
    opt = Adam([p], lr=0.1)
    p.tensor.grad = np.array([0.5])
    opt.step()
    np.testing.assert_allclose(p.data, [0.90000000199999985], rtol=0, atol=1e-15)
    p.tensor.grad = np.array([0.5])
    opt.step()
    np.testing.assert_allclose(p.data, [0.80000000400000049], rtol=0, atol=1e-15)
    assert opt.state["w"]["t"] == 2


def test_missing_gradient_is_skipped():
    p = Parameter("w", [1.0])
    opt = Adam([p])
    opt.step()
    np.testing.assert_array_equal(p.data, [1.0])
    assert "w" not in opt.state


def test_frozen_parameter_is_skipped():
    p = Parameter("w", [1.0], trainable=False)
    opt = Adam([p])
    p.tensor.grad = np.array([0.5])
    opt.step()
    np.testing.assert_array_equal(p.data, [1.0])
    assert "w" not in opt.state


def test_zero_grad_clears():
    p = Parameter("w", [1.0])
    opt = Adam([p])
    p.tensor.grad = np.array([0.5])
    opt.zero_grad()
    assert p.grad is None


def test_duplicate_names_rejected():
    with pytest.raises(ValueError, match="duplicate"):
        Adam([Parameter("w", [1.0]), Parameter("w", [2.0])])


def test_gradient_shape_mismatch_rejected():
    p = Parameter("w", [1.0, 2.0])
    opt = Adam([p])
    p.tensor.grad = np.array([0.5])
    with pytest.raises(ShapeError, match="gradient shape"):
        opt.step()


def test_state_round_trip_is_bitwise():
    rng = np.random.default_rng(0)
    grads = [rng.normal(size=(2, 3)) for _ in range(5)]

    def run(warm_steps, payload=None):
        p = Parameter("w", np.ones((2, 3)))
        opt = Adam([p], lr=0.01)
        if payload is not None:
            opt.load_state_dict(payload)
        for g in grads[warm_steps:]:
            p.tensor.grad = g.copy()
            opt.step()
        return p.data, opt.state_dict()

    full, _ = run(0)

    p = Parameter("w", np.ones((2, 3)))
    opt = Adam([p], lr=0.01)
    for g in grads[:2]:
        p.tensor.grad = g.copy()
        opt.step()
    saved = opt.state_dict()
    # mutate the live optimizer to prove the snapshot is a copy
    opt.state["w"]["m"][:] = 0.0

    p2 = Parameter("w", p.data.copy())
    opt2 = Adam([p2], lr=0.01)
    opt2.load_state_dict(saved)
    for g in grads[2:]:
        p2.tensor.grad = g.copy()
        opt2.step()
    np.testing.assert_array_equal(p2.data, full)
    assert opt2.state["w"]["t"] == 5
