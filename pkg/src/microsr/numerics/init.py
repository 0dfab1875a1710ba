from __future__ import annotations

from typing import Sequence, Union

import numpy as np

from .tensor import Tensor, default_dtype

SeedLike = Union[int, np.random.Generator, None]


def fan_in(shape: Sequence[int]) -> int:
    """Inputs feeding one output unit: I·KH·KW for OIHW kernels, F for F×G weights."""
    if len(shape) == 4:
        return int(shape[1] * shape[2] * shape[3])
    if len(shape) == 2:
        return int(shape[0])
    raise ValueError(f"fan-in undefined for shape {tuple(shape)}")


def msra_init(shape: Sequence[int], leak: float = 0.0, scale: float = 1.0,
              rng: SeedLike = None, requires_grad: bool = True) -> Tensor:
    """He/MSRA normal initialisation for leaky-ReLU networks, times ``scale``.

    Samples have variance ``2 / ((1 + leak**2) * fan_in)`` before scaling.
    Draws are made in float64 and cast, so a seed gives identical values in
    both precision modes (up to the final rounding).
    """
    shape = tuple(int(s) for s in shape)
    if not shape or any(s <= 0 for s in shape):
        raise ValueError(f"msra_init needs a non-empty shape, got {shape}")
    if not 0.0 < scale <= 1.0:
        raise ValueError(f"scale must lie in (0, 1], got {scale}")
    gen = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    std = np.sqrt(2.0 / ((1.0 + leak ** 2) * fan_in(shape)))
    values = gen.standard_normal(shape) * std * scale
    return Tensor(values.astype(default_dtype()), requires_grad=requires_grad)
