"""Central finite-difference gradient verification.

The numeric side only ever calls the forward pass (in float64, without
graph recording), so it stays independent of every backward closure.
"""

from __future__ import annotations

from typing import Callable, Mapping, Optional

import numpy as np

from .tensor import Tensor, backward, no_grad, precision

LossBuilder = Callable[[Mapping[str, Tensor]], Tensor]


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """||a - n|| / max(||a||, ||n||); 0 when both vanish."""
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(n))
    if denom == 0.0:
        return 0.0
    return float(np.linalg.norm(a - n) / denom)


def _forward64(build: LossBuilder, arrays: Mapping[str, np.ndarray]) -> float:
    with precision(np.float64), no_grad():
        tensors = {k: Tensor(v, dtype=np.float64) for k, v in arrays.items()}
        return float(build(tensors).data)


def numerical_gradient(build: LossBuilder, arrays: Mapping[str, np.ndarray], name: str,
                       eps: float = 1e-3, coords: Optional[np.ndarray] = None) -> np.ndarray:
    """Central differences of the loss w.r.t. ``arrays[name]`` at flat indices ``coords``."""
    base = {k: np.array(v, dtype=np.float64) for k, v in arrays.items()}
    target = base[name].reshape(-1)
    if coords is None:
        coords = np.arange(target.size)
    out = np.empty(len(coords))
    for j, idx in enumerate(coords):
        orig = target[idx]
        target[idx] = orig + eps
        plus = _forward64(build, base)
        target[idx] = orig - eps
        minus = _forward64(build, base)
        target[idx] = orig
        out[j] = (plus - minus) / (2 * eps)
    return out


def analytic_gradients(build: LossBuilder, arrays: Mapping[str, np.ndarray],
                       dtype=np.float32) -> dict[str, np.ndarray]:
    with precision(dtype):
        tensors = {k: Tensor(v, requires_grad=True, dtype=dtype) for k, v in arrays.items()}
        loss = build(tensors)
        backward(loss)
    return {k: (t.grad if t.grad is not None else np.zeros(t.shape, dtype=dtype))
            for k, t in tensors.items()}


def check_gradients(build: LossBuilder, arrays: Mapping[str, np.ndarray], dtype=np.float32,
                    eps: float = 1e-3, max_coords: Optional[int] = None,
                    rng: Optional[np.random.Generator] = None) -> dict[str, float]:
    """Relative error of the analytic gradient for each named input.

    ``max_coords`` limits the numeric side to a random subset of entries
    for large parameter tensors.
    """
    rng = rng or np.random.default_rng(0)
    grads = analytic_gradients(build, arrays, dtype)
    errors = {}
    for name, value in arrays.items():
        size = np.asarray(value).size
        coords = np.arange(size)
        if max_coords is not None and size > max_coords:
            coords = np.sort(rng.choice(size, size=max_coords, replace=False))
        numeric = numerical_gradient(build, arrays, name, eps, coords)
        errors[name] = relative_error(grads[name].reshape(-1)[coords], numeric)
    return errors
