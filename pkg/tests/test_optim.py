import math

import numpy as np

from dsgas.numkernel import Tensor
from dsgas.optim import AdamState, SGDState, adam_step, sgd_step, zero_grad


def test_adam_three_steps_scalar_oracle():
    p = Tensor(np.array([1.0]), requires_grad=True)
    state = AdamState()
    grads = [0.5, -0.2, 0.1]
    x, m, v = 1.0, 0.0, 0.0
    for t, g in enumerate(grads, start=1):
        p.grad = np.array([g])
        adam_step({"p": p}, state, 0.01)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        x -= 0.01 * (m / (1 - 0.9 ** t)) / (math.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
        assert p.data[0] == x


def test_adam_first_step_is_signed_lr():
    p = Tensor(np.array([0.0, 0.0]), requires_grad=True)
    p.grad = np.array([3.0, -1e-3])
    adam_step({"p": p}, AdamState(), 0.1)
    np.testing.assert_allclose(p.data, [-0.1, 0.1], rtol=1e-4)


def test_sgd_momentum_two_steps():
    p = Tensor(np.array([2.0]), requires_grad=True)
    state = SGDState(momentum=0.9)
    p.grad = np.array([1.0])
    sgd_step({"p": p}, state, 0.1)
    assert p.data[0] == 2.0 - 0.1 * 1.0
    p.grad = np.array([0.5])
    sgd_step({"p": p}, state, 0.1)
    assert p.data[0] == 2.0 - 0.1 * 1.0 - 0.1 * (0.9 * 1.0 + 0.5)


def test_no_ops():
    p = Tensor(np.array([1.5, -2.0]), requires_grad=True)
    before = p.data.copy()
    p.grad = np.array([4.0, 1.0])
    sgd_step({"p": p}, SGDState(), 0.0)
    adam_step({"p": p}, AdamState(), 0.0)
    np.testing.assert_array_equal(p.data, before)
    zero_grad({"p": p})
    assert p.grad is None
    sgd_step({"p": p}, SGDState(momentum=0.5), 1.0)
    adam_step({"p": p}, AdamState(), 1.0)
    np.testing.assert_array_equal(p.data, before)
