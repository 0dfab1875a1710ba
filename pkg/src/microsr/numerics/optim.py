"""Adam with the AMSGrad running maximum."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .tensor import Tensor


class NonFiniteGradientError(FloatingPointError):
    """Raised when a gradient contains NaN or Inf; no parameter is touched."""


@dataclass
class AdamState:
    first_moment: np.ndarray
    second_moment: np.ndarray
    max_second_moment: np.ndarray
    step_count: int = 0

    @classmethod
    def zeros_like(cls, param: np.ndarray) -> "AdamState":
        return cls(np.zeros_like(param), np.zeros_like(param), np.zeros_like(param), 0)

    def copy(self) -> "AdamState":
        return AdamState(self.first_moment.copy(), self.second_moment.copy(),
                         self.max_second_moment.copy(), self.step_count)


def adam_amsgrad_step(param: np.ndarray, grad: np.ndarray, state: AdamState, lr: float,
                      beta1: float = 0.9, beta2: float = 0.99, eps: float = 1e-8):
    """One AMSGrad update; returns ``(new_param, new_state)``.

    The running maximum is taken over the bias-corrected second moment, so
    the per-element denominator ``sqrt(v_max) + eps`` never shrinks between
    steps.  Inputs are not modified.
    """
    if param.shape != grad.shape or state.first_moment.shape != param.shape:
        raise ValueError(f"shape mismatch: param {param.shape}, grad {grad.shape}, "
                         f"state {state.first_moment.shape}")
    if not (0.0 <= beta1 < 1.0 and 0.0 <= beta2 < 1.0):
        raise ValueError(f"betas must lie in [0, 1), got {beta1}, {beta2}")
    if not np.all(np.isfinite(grad)):
        raise NonFiniteGradientError("non-finite gradient; Adam step rejected")
    t = state.step_count + 1
    dt = param.dtype.type
    m = dt(beta1) * state.first_moment + dt(1 - beta1) * grad
    v = dt(beta2) * state.second_moment + dt(1 - beta2) * grad * grad
    m_hat = m / dt(1 - beta1 ** t)
    v_hat = v / dt(1 - beta2 ** t)
    v_max = np.maximum(state.max_second_moment, v_hat)
    new_param = param - dt(lr) * m_hat / (np.sqrt(v_max) + dt(eps))
    return new_param, AdamState(m, v, v_max, t)


@dataclass
class Adam:
    """AMSGrad optimizer over a named parameter dictionary."""

    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-8
    states: dict[str, AdamState] = field(default_factory=dict)

    def step(self, params: Mapping[str, Tensor], lr: float) -> None:
        """Update every parameter that carries a gradient.

        All gradients are validated first, so a single non-finite value
        leaves both parameters and optimizer state untouched.
        """
        live = {k: p for k, p in params.items() if p.grad is not None}
        for name, p in live.items():
            if not np.all(np.isfinite(p.grad)):
                raise NonFiniteGradientError(f"non-finite gradient for parameter {name!r}")
        for name, p in live.items():
            state = self.states.get(name)
            if state is None:
                state = AdamState.zeros_like(p.data)
            p.data, self.states[name] = adam_amsgrad_step(
                p.data, p.grad, state, lr, self.beta1, self.beta2, self.eps)
