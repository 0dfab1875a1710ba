"""Kink-free parameter points for finite-difference checks of whole networks.

Central differences with eps = 1e-3 are only a valid oracle where the loss
is smooth within ±eps.  Leaky ReLU has a kink at 0, and a conv bias nudge
moves every pre-activation of its channel, so a random point almost
always straddles some kink.  Here each channel gets a bias of ±1 and
weights small against that bias, keeping every pre-activation well away
from zero while still exercising both slopes.
"""

from contextlib import contextmanager

import numpy as np

from microsr import models


def kink_free_params(shapes, rng, gain=0.5):
    """Arrays for ``shapes`` (OIHW convs and F×G denses) with pre-activations kept off zero.

    Weights are uniform in ±gain/sqrt(fan_in); callers confirm the actual
    margin with ``record_preactivations``.
    """
    out = {}
    for name, shape in shapes.items():
        if name.endswith(".bias"):
            n = shape[0]
            out[name] = np.where(np.arange(n) % 2 == 0, 1.0, -1.0) * rng.uniform(0.9, 1.1, n)
        else:
            fan = int(np.prod(shape[1:])) if len(shape) == 4 else shape[0]
            limit = gain / np.sqrt(fan)
            out[name] = rng.uniform(-limit, limit, shape)
    return out


@contextmanager
def record_preactivations():
    """Collect min |x| over every leaky-ReLU input evaluated inside the block."""
    seen = []
    original = models.leaky_relu

    def spy(x, leak=0.2):
        seen.append(float(np.min(np.abs(x.data))))
        return original(x, leak)

    models.leaky_relu = spy
    try:
        yield seen
    finally:
        models.leaky_relu = original
