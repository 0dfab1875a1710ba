"""Pixel, perceptual, texture and relativistic adversarial losses."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .numerics import Tensor, no_grad
from .numerics import functional as F

Extractor = Callable[[Tensor], Tensor]


@dataclass
class LossWeights:
    pixel: float = 1e-2
    perceptual: float = 1e-2
    adversarial: float = 1.0
    pixel_norm: str = "l1"
    perceptual_norm: str = "l1"
    use_texture_instead_of_perceptual: bool = False

    def __post_init__(self):
        for name in ("pixel", "perceptual", "adversarial"):
            if getattr(self, name) < 0:
                raise ValueError(f"loss weight {name} must be >= 0")
        for name in ("pixel_norm", "perceptual_norm"):
            if getattr(self, name) not in ("l1", "l2"):
                raise ValueError(f"{name} must be 'l1' or 'l2', got {getattr(self, name)!r}")

    @property
    def feature_term(self) -> str:
        return "texture" if self.use_texture_instead_of_perceptual else "perceptual"


def _same_shape(x: Tensor, y: Tensor) -> None:
    if x.shape != y.shape:
        raise ValueError(f"loss inputs differ in shape: {x.shape} vs {y.shape}")


def l1_loss(x: Tensor, y: Tensor) -> Tensor:
    _same_shape(x, y)
    return F.mean(F.abs(x - y))


def l2_loss(x: Tensor, y: Tensor) -> Tensor:
    _same_shape(x, y)
    return F.mean(F.square(x - y))


def pixel_loss(x: Tensor, y: Tensor, norm: str = "l1") -> Tensor:
    if norm == "l1":
        return l1_loss(x, y)
    if norm == "l2":
        return l2_loss(x, y)
    raise ValueError(f"unknown norm {norm!r}")


def _target_features(extractor: Extractor, hr: Tensor) -> Tensor:
    if hr.requires_grad:
        return extractor(hr)
    with no_grad():
        return extractor(hr)


def perceptual_loss(extractor: Extractor, sr: Tensor, hr: Tensor, norm: str = "l1") -> Tensor:
    _same_shape(sr, hr)
    return pixel_loss(extractor(sr), _target_features(extractor, hr), norm)


def gram_matrix(features: Tensor) -> Tensor:
    """Per-sample channel correlations ``F Fᵀ / (C·H·W)`` of an N×C×H×W map."""
    n, c, h, w = features.shape
    flat = F.reshape(features, (n, c, h * w))
    gram = F.matmul(flat, F.transpose(flat, (0, 2, 1)))
    return gram * (1.0 / (c * h * w))


def texture_loss(extractor: Extractor, sr: Tensor, hr: Tensor, norm: str = "l1") -> Tensor:
    _same_shape(sr, hr)
    return pixel_loss(gram_matrix(extractor(sr)), gram_matrix(_target_features(extractor, hr)), norm)


@dataclass
class RadBatch:
    """Discriminator logits of both classes plus their batch means.

    The means are plain floats: each side is compared against the other
    class's average as a constant.
    """

    real_logits: Tensor
    fake_logits: Tensor
    mean_real: float
    mean_fake: float

    @classmethod
    def from_logits(cls, real_logits: Tensor, fake_logits: Tensor) -> "RadBatch":
        if real_logits.size == 0 or fake_logits.size == 0:
            raise ValueError("relativistic losses need at least one real and one fake logit")
        for t in (real_logits, fake_logits):
            if not np.all(np.isfinite(t.data)):
                raise FloatingPointError("non-finite discriminator logits")
        return cls(real_logits, fake_logits,
                   float(np.mean(real_logits.data, dtype=np.float64)),
                   float(np.mean(fake_logits.data, dtype=np.float64)))


def rad_losses(batch: RadBatch) -> tuple[Tensor, Tensor]:
    """Generator and discriminator losses of the relativistic average GAN.

    With ``z_r = C(x_r) - E[C(x_f)]`` and ``z_f = C(x_f) - E[C(x_r)]``::

        L_G = mean(softplus(z_r)) + mean(softplus(-z_f))
        L_D = mean(softplus(-z_r)) + mean(softplus(z_f))

    which equals the ``-log sigmoid`` / ``-log(1 - sigmoid)`` form but never
    overflows.
    """
    if batch.real_logits.size == 0 or batch.fake_logits.size == 0:
        raise ValueError("relativistic losses need at least one real and one fake logit")
    if not (np.isfinite(batch.mean_real) and np.isfinite(batch.mean_fake)):
        raise FloatingPointError("non-finite discriminator logits")
    z_r = batch.real_logits - batch.mean_fake
    z_f = batch.fake_logits - batch.mean_real
    loss_g = F.mean(F.softplus(z_r)) + F.mean(F.softplus(-z_f))
    loss_d = F.mean(F.softplus(-z_r)) + F.mean(F.softplus(z_f))
    return loss_g, loss_d


@dataclass
class GeneratorLoss:
    total: Tensor
    pixel: Optional[float]
    perceptual: Optional[float]
    texture: Optional[float]
    adversarial: Optional[float]


def total_generator_loss(weights: LossWeights, sr: Tensor, hr: Tensor,
                         rad: Optional[RadBatch] = None,
                         extractor: Optional[Extractor] = None) -> GeneratorLoss:
    """Weighted sum of the active terms plus their unweighted values.

    A term whose weight is zero is skipped entirely (reported as ``None``).
    """
    total = None
    terms: dict[str, Optional[float]] = {"pixel": None, "perceptual": None, "texture": None,
                                         "adversarial": None}

    def accumulate(value: Tensor, weight: float):
        nonlocal total
        scaled = value * weight
        total = scaled if total is None else total + scaled

    if weights.pixel > 0:
        term = pixel_loss(sr, hr, weights.pixel_norm)
        terms["pixel"] = term.item()
        accumulate(term, weights.pixel)
    if weights.perceptual > 0:
        if extractor is None:
            raise ValueError("a feature extractor is required for the perceptual/texture term")
        fn = texture_loss if weights.use_texture_instead_of_perceptual else perceptual_loss
        term = fn(extractor, sr, hr, weights.perceptual_norm)
        terms[weights.feature_term] = term.item()
        accumulate(term, weights.perceptual)
    if weights.adversarial > 0:
        if rad is None:
            raise ValueError("discriminator logits are required for the adversarial term")
        term, _ = rad_losses(rad)
        terms["adversarial"] = term.item()
        accumulate(term, weights.adversarial)
    if total is None:
        total = Tensor(np.zeros((), dtype=sr.dtype))
    return GeneratorLoss(total, terms["pixel"], terms["perceptual"], terms["texture"], terms["adversarial"])
