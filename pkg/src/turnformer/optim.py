from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Any

import numpy as np

from turnformer.tensor import ContractError, Tensor

if TYPE_CHECKING:
    from collections.abc import Mapping

    from numpy.typing import NDArray


@dataclass
class AdamState:
    lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-7
    m: 'dict[str, NDArray[np.float64]]' = field(default_factory=dict)
    v: 'dict[str, NDArray[np.float64]]' = field(default_factory=dict)
    t: int = 0


def adam_step(
    params: 'Mapping[str, Tensor]',
    grads: 'Mapping[str, Tensor]',
    state: AdamState,
) -> tuple[dict[str, Tensor], AdamState]:
    """One bias-corrected Adam update with L2 weight decay folded into the gradient.

    Parameters without a gradient are treated as having a zero gradient. Moments
    are kept in 64-bit regardless of the parameter precision. A shape mismatch
    leaves ``state`` untouched.
    """
    for name, param in params.items():
        grad_tensor = grads.get(name)
        if grad_tensor is not None and grad_tensor.shape != param.shape:
            raise ContractError(
                'adam_step',
                f'gradient of {name} has shape {grad_tensor.shape}, '
                f'parameter has {param.shape}',
            )

    t = state.t + 1
    correction1 = 1.0 - state.beta1**t
    correction2 = 1.0 - state.beta2**t
    updated: dict[str, Tensor] = {}
    moments: dict[str, tuple[NDArray[np.float64], NDArray[np.float64]]] = {}
    for name, param in params.items():
        value = param.data.astype(np.float64)
        grad_tensor = grads.get(name)
        if grad_tensor is None:
            grad = np.zeros_like(value)
        else:
            grad = grad_tensor.data.astype(np.float64)
        grad = grad + state.weight_decay * value

        m = state.m.get(name, np.zeros_like(value))
        v = state.v.get(name, np.zeros_like(value))
        m = state.beta1 * m + (1.0 - state.beta1) * grad
        v = state.beta2 * v + (1.0 - state.beta2) * grad**2
        moments[name] = (m, v)

        step = state.lr * (m / correction1) / (np.sqrt(v / correction2) + state.eps)
        updated[name] = Tensor(value - step, requires_grad=param.requires_grad)

    state.t = t
    for name, (m, v) in moments.items():
        state.m[name] = m
        state.v[name] = v
    return updated, state


def named_gradients(
    params: 'Mapping[str, Tensor]',
    grads: 'Mapping[Tensor, Tensor]',
) -> dict[str, Tensor]:
    return {name: grads[param] for name, param in params.items() if param in grads}


def global_norm(values: 'Mapping[str, Tensor]') -> float:
    total: Any = sum(
        float(np.sum(t.data.astype(np.float64) ** 2)) for t in values.values()
    )
    return float(np.sqrt(total))
