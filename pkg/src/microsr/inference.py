"""Whole-image inference: bicubic baseline, tiled generator runs, montages."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Mapping, Optional, Sequence

import numpy as np

from .models import GeneratorConfig, generator_forward
from .numerics import Tensor, no_grad


def cubic_kernel(t: np.ndarray, a: float = -0.5) -> np.ndarray:
    t = np.abs(t)
    return np.where(
        t <= 1, (a + 2) * t ** 3 - (a + 3) * t ** 2 + 1,
        np.where(t < 2, a * t ** 3 - 5 * a * t ** 2 + 8 * a * t - 4 * a, 0.0))


def bicubic_matrix(n_in: int, factor: int = 2, a: float = -0.5) -> np.ndarray:
    """Linear map from ``n_in`` samples to ``factor*n_in`` with replicated edges."""
    n_out = n_in * factor
    centres = (np.arange(n_out) + 0.5) / factor - 0.5
    base = np.floor(centres).astype(int)
    mat = np.zeros((n_out, n_in))
    for offset in range(-1, 3):
        idx = base + offset
        weight = cubic_kernel(centres - idx, a)
        np.add.at(mat, (np.arange(n_out), np.clip(idx, 0, n_in - 1)), weight)
    return mat


def bicubic_upsample(image: np.ndarray, factor: int = 2) -> np.ndarray:
    """Separable Catmull-Rom style (a = -0.5) upsampling of a 2-D image."""
    image = np.asarray(image, dtype=np.float64)
    rows = bicubic_matrix(image.shape[0], factor)
    cols = bicubic_matrix(image.shape[1], factor)
    return rows @ image @ cols.T


def _starts(size: int, tile: int, overlap: int) -> list[int]:
    if size <= tile:
        return [0]
    step = tile - overlap
    starts = list(range(0, size - tile, step))
    starts.append(size - tile)
    return starts


def _feather(length: int, lead: int, trail: int) -> np.ndarray:
    """Linear ramps over the leading/trailing overlap bands, 1 in between."""
    w = np.ones(length)
    pos = np.arange(length) + 0.5
    if lead > 0:
        w = np.minimum(w, pos / lead)
    if trail > 0:
        w = np.minimum(w, (length - pos) / trail)
    return w


@dataclass
class TilePlan:
    tile: int
    overlap: int
    halo: int

    def __post_init__(self):
        if self.tile < 1 or not 0 <= self.overlap < self.tile or self.halo < 0:
            raise ValueError(f"invalid tiling: tile {self.tile}, overlap {self.overlap}, halo {self.halo}")


def default_halo(config: GeneratorConfig, tile: int) -> int:
    """Context margin around each tile: the receptive radius, capped at half a tile."""
    return min(config.receptive_radius(), tile // 2)


def _run(params, config, lr: np.ndarray) -> np.ndarray:
    with no_grad():
        out = generator_forward(params, config, Tensor(lr[None, None]))
    return np.asarray(out.data[0, 0], dtype=np.float64)


def upscale(params: Mapping[str, Tensor], config: GeneratorConfig, lr: np.ndarray,
            tile: int = 256, overlap: int = 32, halo: Optional[int] = None,
            clamp: bool = True) -> np.ndarray:
    """Super-resolve a full 2-D LR image, tiling when it exceeds ``tile``.

    Each tile is run with ``halo`` LR pixels of surrounding context, its
    centre kept, and neighbouring tiles are blended with linear feathering
    across their overlap.  With ``halo`` at least the generator's receptive
    radius the result equals a single untiled forward up to rounding.
    """
    lr = np.asarray(lr, dtype=np.float32)
    h, w = lr.shape
    if h <= tile and w <= tile:
        out = _run(params, config, lr)
        return np.clip(out, 0.0, 1.0) if clamp else out
    if halo is None:
        halo = default_halo(config, tile)
    plan = TilePlan(tile, overlap, halo)
    s = config.upscale
    acc = np.zeros((s * h, s * w))
    weight = np.zeros((s * h, s * w))
    ys, xs = _starts(h, tile, overlap), _starts(w, tile, overlap)
    for yi, y0 in enumerate(ys):
        th = min(tile, h)
        for xi, x0 in enumerate(xs):
            tw = min(tile, w)
            cy0, cx0 = max(0, y0 - plan.halo), max(0, x0 - plan.halo)
            cy1, cx1 = min(h, y0 + th + plan.halo), min(w, x0 + tw + plan.halo)
            pred = _run(params, config, lr[cy0:cy1, cx0:cx1])
            oy, ox = s * (y0 - cy0), s * (x0 - cx0)
            core = pred[oy:oy + s * th, ox:ox + s * tw]
            lead_y = s * (ys[yi - 1] + th - y0) if yi > 0 else 0
            trail_y = s * (y0 + th - ys[yi + 1]) if yi + 1 < len(ys) else 0
            lead_x = s * (xs[xi - 1] + tw - x0) if xi > 0 else 0
            trail_x = s * (x0 + tw - xs[xi + 1]) if xi + 1 < len(xs) else 0
            wmap = np.outer(_feather(s * th, lead_y, trail_y), _feather(s * tw, lead_x, trail_x))
            acc[s * y0:s * (y0 + th), s * x0:s * (x0 + tw)] += wmap * core
            weight[s * y0:s * (y0 + th), s * x0:s * (x0 + tw)] += wmap
    out = acc / weight
    return np.clip(out, 0.0, 1.0) if clamp else out


def timed_upscale(params, config, lr, **kwargs) -> tuple[np.ndarray, float]:
    start = time.perf_counter()
    out = upscale(params, config, lr, **kwargs)
    return out, time.perf_counter() - start


def montage(panels: Sequence[np.ndarray], crop: Optional[tuple[int, int, int]] = None) -> np.ndarray:
    """Side-by-side panels with a second row of zoomed crops.

    ``crop`` is ``(row, col, size)`` in panel coordinates; by default the
    central quarter of the panel is enlarged to panel size.
    """
    h, w = panels[0].shape
    for p in panels:
        if p.shape != (h, w):
            raise ValueError("montage panels must share one size")
    if crop is None:
        size = max(1, min(h, w) // 4)
        crop = ((h - size) // 2, (w - size) // 2, size)
    r, c, size = crop
    zoom_y, zoom_x = math.ceil(h / size), math.ceil(w / size)
    top = np.concatenate([np.clip(p, 0, 1) for p in panels], axis=1)
    zoomed = []
    for p in panels:
        z = np.kron(np.clip(p[r:r + size, c:c + size], 0, 1), np.ones((zoom_y, zoom_x)))
        zoomed.append(z[:h, :w])
    bottom = np.concatenate(zoomed, axis=1)
    return np.concatenate([top, bottom], axis=0)
