import numpy as np
import pytest
from numpy.testing import assert_allclose

from turnformer.optim import AdamState, adam_step, global_norm, named_gradients
from turnformer.tensor import (
    ContractError,
    Tensor,
    backward,
    mul,
    parameter,
    recording,
    sum_,
)


def reference_adam(
    value: np.ndarray,
    grad: np.ndarray,
    steps: int,
    lr: float = 0.01,
) -> np.ndarray:
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    m = np.zeros_like(value)
    v = np.zeros_like(value)
    for t in range(1, steps + 1):
        m = beta1 * m + (1 - beta1) * grad
        v = beta2 * v + (1 - beta2) * grad**2
        m_hat = m / (1 - beta1**t)
        v_hat = v / (1 - beta2**t)
        value = value - lr * m_hat / (np.sqrt(v_hat) + eps)
    return value


def test_two_steps_match_scripted_trace(float64: None) -> None:
    """
    Given a parameter and a constant gradient,
    When two Adam steps are taken without weight decay,
    Then the parameter follows the scripted reference trace.
    """
    start = np.array([0.5, -1.0, 2.0])
    grad = np.array([0.1, -0.3, 0.02])
    params = {'w': parameter(start)}
    state = AdamState(weight_decay=0.0)
    for _ in range(2):
        params, state = adam_step(params, {'w': Tensor(grad)}, state)
    assert state.t == 2
    assert_allclose(params['w'].numpy(), reference_adam(start, grad, 2), atol=1e-8)


def test_first_step_moves_by_learning_rate(float64: None) -> None:
    params = {'w': parameter([1.0, 1.0])}
    params, _ = adam_step(
        params,
        {'w': Tensor([2.0, -5.0])},
        AdamState(lr=0.01, weight_decay=0.0),
    )
    assert_allclose(params['w'].numpy(), [0.99, 1.01], atol=1e-8)


def test_weight_decay_pulls_towards_zero(float64: None) -> None:
    params = {'w': parameter([3.0])}
    params, _ = adam_step(params, {}, AdamState(weight_decay=0.1))
    assert params['w'].item() < 3.0


def test_missing_gradient_is_zero(float64: None) -> None:
    params = {'w': parameter([3.0]), 'b': parameter([1.0])}
    updated, _ = adam_step(params, {'w': Tensor([1.0])}, AdamState(weight_decay=0.0))
    assert updated['b'].item() == 1.0
    assert updated['w'].item() < 3.0


def test_gradient_shape_mismatch() -> None:
    with pytest.raises(ContractError, match='shape'):
        adam_step({'w': parameter([1.0, 2.0])}, {'w': Tensor([1.0])}, AdamState())


def test_shape_mismatch_leaves_state_untouched(float64: None) -> None:
    """
    Given a state that has already taken one step,
    When a later step carries a gradient of the wrong shape for its last parameter,
    Then the step fails and neither the step count nor any moment has moved.
    """
    params = {'a': parameter([1.0, 2.0]), 'b': parameter([1.0, 2.0, 3.0])}
    grads = {'a': Tensor([0.5, -0.5]), 'b': Tensor([0.1, 0.2, 0.3])}
    params, state = adam_step(params, grads, AdamState(weight_decay=0.0))
    before = {name: (state.m[name].copy(), state.v[name].copy()) for name in params}

    with pytest.raises(ContractError, match='gradient of b'):
        adam_step(
            params,
            {'a': Tensor([1.0, 1.0]), 'b': Tensor([1.0, 1.0])},
            state,
        )

    assert state.t == 1
    assert set(state.m) == set(before)
    for name, (m, v) in before.items():
        assert_allclose(state.m[name], m)
        assert_allclose(state.v[name], v)


def test_rejected_first_step_keeps_empty_state() -> None:
    state = AdamState()
    with pytest.raises(ContractError):
        adam_step(
            {'a': parameter([1.0]), 'b': parameter([1.0, 2.0])},
            {'a': Tensor([1.0]), 'b': Tensor([1.0])},
            state,
        )
    assert state.t == 0
    assert state.m == {}
    assert state.v == {}


def test_named_gradients_and_norm(float64: None) -> None:
    params = {'a': parameter([3.0]), 'b': parameter([4.0])}
    with recording():
        grads = named_gradients(
            params,
            backward(sum_(mul(params['a'], params['b']))),
        )
    assert_allclose(grads['a'].numpy(), [4.0])
    assert_allclose(grads['b'].numpy(), [3.0])
    assert global_norm(grads) == pytest.approx(5.0)
