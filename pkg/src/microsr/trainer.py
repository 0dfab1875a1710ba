"""Two-phase training: pixel-loss warm-up, then joint GAN training."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import data as data_mod
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .inference import bicubic_upsample, upscale
from .losses import LossWeights, RadBatch, pixel_loss, rad_losses, total_generator_loss
from .metrics import psnr, ssim
from .models import (
    ConfigMismatchError,
    DiscriminatorConfig,
    FeatureExtractor,
    FeatureExtractorConfig,
    GeneratorConfig,
    Params,
    check_params,
    config_dict,
    discriminator_forward,
    discriminator_param_shapes,
    generator_forward,
    generator_param_shapes,
    init_discriminator,
    init_generator,
)
from .numerics import Adam, AdamState, NonFiniteGradientError, Tensor, backward, frozen, no_grad, zero_grad

logger = logging.getLogger(__name__)

LOG_COLUMNS = ("phase", "epoch", "step", "lr", "pixel_loss", "perceptual_loss", "texture_loss",
               "adv_loss_G", "adv_loss_D", "val_psnr", "val_ssim", "wall_ms")
COLLAPSE_THRESHOLD = 1e-6
COLLAPSE_PATIENCE = 100


class NumericalError(FloatingPointError):
    """A loss or gradient became non-finite during training."""


@dataclass
class TrainSchedule:
    phase1_epochs: int = 50
    phase2_epochs: int = 50
    lr_initial: float = 1e-4
    lr_decay_per_epoch: float = 0.5
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-8
    batch_size: int = 16
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.lr_decay_per_epoch <= 1.0:
            raise ValueError("lr_decay_per_epoch must lie in (0, 1]")
        if self.phase1_epochs < 0 or self.phase2_epochs < 0:
            raise ValueError("epoch counts must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


def lr_at_epoch(schedule: TrainSchedule, epoch: int) -> float:
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return schedule.lr_initial * schedule.lr_decay_per_epoch ** epoch


@dataclass
class TrainConfig:
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    discriminator: DiscriminatorConfig = field(default_factory=DiscriminatorConfig)
    extractor: FeatureExtractorConfig = field(default_factory=FeatureExtractorConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    patch_size: int = 64
    overlap: float = 0.5
    val_fraction: float = 0.1
    drop_last: bool = False

    def configs(self) -> dict:
        return {
            "generator": config_dict(self.generator),
            "discriminator": config_dict(self.discriminator),
            "extractor": config_dict(self.extractor),
            "weights": asdict(self.weights),
            "data": {"patch_size": self.patch_size, "overlap": self.overlap,
                     "val_fraction": self.val_fraction, "drop_last": self.drop_last},
        }


@dataclass
class Network:
    """Parameters plus the optimizer that owns their update."""

    params: Params
    optimizer: Adam

    @classmethod
    def create(cls, params: Params, schedule: TrainSchedule) -> "Network":
        return cls(params, Adam(schedule.beta1, schedule.beta2, schedule.eps))

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}


@dataclass
class StepReport:
    phase: int
    epoch: int
    step: int
    lr: float
    pixel_loss: Optional[float] = None
    perceptual_loss: Optional[float] = None
    texture_loss: Optional[float] = None
    adv_loss_G: Optional[float] = None
    adv_loss_D: Optional[float] = None
    val_psnr: Optional[float] = None
    val_ssim: Optional[float] = None
    wall_ms: float = 0.0
    collapse_warning: bool = False

    def row(self) -> dict:
        return {k: ("" if getattr(self, k) is None else getattr(self, k)) for k in LOG_COLUMNS}


@dataclass
class CollapseGuard:
    """Counts consecutive discriminator steps with a vanishing loss."""

    count: int = 0

    def update(self, loss_d: float) -> bool:
        self.count = self.count + 1 if loss_d < COLLAPSE_THRESHOLD else 0
        return self.count >= COLLAPSE_PATIENCE


def _finite(value: Tensor, what: str, batch_id) -> None:
    if not np.all(np.isfinite(value.data)):
        raise NumericalError(f"non-finite {what} ({value.item()!r}) at batch {batch_id}")


def _apply(net: Network, loss: Tensor, lr: float, batch_id) -> None:
    zero_grad(net.params.values())
    backward(loss)
    try:
        net.optimizer.step(net.params, lr)
    except NonFiniteGradientError as exc:
        raise NumericalError(f"{exc} at batch {batch_id}") from exc


def pretrain_step(gen: Network, config: GeneratorConfig, batch: tuple[Tensor, Tensor], lr: float,
                  weights: LossWeights, batch_id=None) -> StepReport:
    """Generator update on the weighted pixel loss alone."""
    start = time.perf_counter()
    lr_img, hr_img = batch
    sr = generator_forward(gen.params, config, lr_img)
    term = pixel_loss(sr, hr_img, weights.pixel_norm)
    _finite(term, "pixel loss", batch_id)
    _apply(gen, term * weights.pixel, lr, batch_id)
    return StepReport(1, -1, -1, lr, pixel_loss=term.item(),
                      wall_ms=(time.perf_counter() - start) * 1e3)


def gan_step(gen: Network, disc: Optional[Network], batch: tuple[Tensor, Tensor], lr: float,
             weights: LossWeights, gen_config: GeneratorConfig,
             disc_config: Optional[DiscriminatorConfig] = None,
             extractor: Optional[FeatureExtractor] = None,
             guard: Optional[CollapseGuard] = None, batch_id=None) -> StepReport:
    """One generator update followed by one discriminator update.

    The discriminator is skipped entirely when the adversarial weight is
    zero, which makes the generator update identical to ``pretrain_step``
    when the feature term is off as well.
    """
    start = time.perf_counter()
    lr_img, hr_img = batch
    adversarial = weights.adversarial > 0
    if adversarial and (disc is None or disc_config is None):
        raise ValueError("adversarial training needs a discriminator")

    disc_params = disc.params.values() if disc is not None else ()
    with frozen(disc_params):
        sr = generator_forward(gen.params, gen_config, lr_img)
        rad = None
        if adversarial:
            with no_grad():
                real_logits = discriminator_forward(disc.params, disc_config, hr_img)
            rad = RadBatch.from_logits(real_logits, discriminator_forward(disc.params, disc_config, sr))
        parts = total_generator_loss(weights, sr, hr_img, rad, extractor)
    _finite(parts.total, "generator loss", batch_id)
    _apply(gen, parts.total, lr, batch_id)

    report = StepReport(2, -1, -1, lr, pixel_loss=parts.pixel, perceptual_loss=parts.perceptual,
                        texture_loss=parts.texture, adv_loss_G=parts.adversarial)
    if adversarial:
        fake = sr.detach()
        real_logits = discriminator_forward(disc.params, disc_config, hr_img)
        fake_logits = discriminator_forward(disc.params, disc_config, fake)
        _, loss_d = rad_losses(RadBatch.from_logits(real_logits, fake_logits))
        _finite(loss_d, "discriminator loss", batch_id)
        _apply(disc, loss_d, lr, batch_id)
        report.adv_loss_D = loss_d.item()
        if guard is not None and guard.update(report.adv_loss_D):
            report.collapse_warning = True
            logger.warning("discriminator loss below %g for %d consecutive steps",
                           COLLAPSE_THRESHOLD, guard.count)
    report.wall_ms = (time.perf_counter() - start) * 1e3
    return report


def validate(params: Params, config: GeneratorConfig, pairs: Sequence[data_mod.ImagePair]) -> tuple[float, float]:
    """Mean PSNR/SSIM of clamped full-image outputs against HR."""
    if not pairs:
        return float("nan"), float("nan")
    scores = []
    for pair in pairs:
        out = upscale(params, config, pair.lr, tile=max(pair.lr.shape))
        scores.append((psnr(out, pair.hr), ssim(out, pair.hr)))
    return tuple(float(np.mean(v)) for v in zip(*scores))


def bicubic_baseline(pairs: Sequence[data_mod.ImagePair]) -> tuple[float, float]:
    if not pairs:
        return float("nan"), float("nan")
    scores = []
    for pair in pairs:
        up = np.clip(bicubic_upsample(pair.lr), 0.0, 1.0)
        scores.append((psnr(up, pair.hr), ssim(up, pair.hr)))
    return tuple(float(np.mean(v)) for v in zip(*scores))


class MetricsLog:
    """Append-only CSV of step reports."""

    def __init__(self, path: Optional[Path]):
        self.path = Path(path) if path else None
        self.rows: list[dict] = []
        if self.path is not None and not self.path.exists():
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with self.path.open("w", newline="") as fh:
                csv.writer(fh).writerow(LOG_COLUMNS)

    def extend(self, reports: Sequence[StepReport]) -> None:
        rows = [r.row() for r in reports]
        self.rows += rows
        if self.path is not None and rows:
            with self.path.open("a", newline="") as fh:
                writer = csv.DictWriter(fh, fieldnames=LOG_COLUMNS)
                writer.writerows(rows)


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    log: list[dict]
    generator: Params
    discriminator: Optional[Params]
    val_history: list[tuple[int, int, float, float]] = field(default_factory=list)
    bicubic: tuple[float, float] = (float("nan"), float("nan"))
    collapse_warning: bool = False


def _params_from_arrays(arrays: dict[str, np.ndarray], shapes: dict[str, tuple]) -> Params:
    params = {k: Tensor(arrays[k], requires_grad=True) for k in shapes if k in arrays}
    check_params(params, shapes)
    return params


def _checkpoint(gen: Network, disc: Optional[Network], epoch: int, phase: str,
                schedule: TrainSchedule, bundle: TrainConfig, guard: CollapseGuard,
                step: int = 0) -> Checkpoint:
    return Checkpoint(
        generator=gen.snapshot(),
        discriminator=disc.snapshot() if disc is not None else None,
        generator_opt={k: v.copy() for k, v in gen.optimizer.states.items()},
        discriminator_opt={k: v.copy() for k, v in disc.optimizer.states.items()} if disc else {},
        epoch=epoch,
        phase=phase,
        schedule=asdict(schedule),
        configs=bundle.configs(),
        extra={"collapse_count": guard.count, "step": step},
    )


def train(bundle: TrainConfig, dataset: Sequence[data_mod.ImagePair], schedule: TrainSchedule,
          out_dir=None, resume=None, phase1_only: bool = False,
          on_epoch: Optional[Callable[[int, int, Params], None]] = None) -> TrainResult:
    """Run phase 1 (pixel loss) then phase 2 (pixel + feature + adversarial).

    Checkpoints ``phase{1,2}_epoch{k:03d}.ckpt`` and ``last.ckpt`` plus
    ``metrics.csv`` are written under ``out_dir`` when given.  ``resume``
    is a checkpoint path; training continues from the epoch after it.
    """
    if not dataset:
        raise data_mod.DataError("training needs at least one image pair")
    out = Path(out_dir) if out_dir is not None else None
    gcfg, dcfg = bundle.generator, bundle.discriminator
    train_pairs, val_pairs = data_mod.split_by_id(dataset, bundle.val_fraction, schedule.seed)
    patches = [p for pair in train_pairs
               for p in data_mod.extract_patches(pair, bundle.patch_size, bundle.overlap)]
    if not patches:
        raise data_mod.DataError("no training patches could be extracted")
    if dcfg.input_size != 2 * bundle.patch_size and bundle.weights.adversarial > 0:
        raise ConfigMismatchError(f"discriminator input {dcfg.input_size} != HR patch size {2 * bundle.patch_size}")

    gen = Network.create(init_generator(gcfg, schedule.seed), schedule)
    disc: Optional[Network] = None
    guard = CollapseGuard()
    start_phase, start_epoch = 1, 0
    if resume is not None:
        ckpt = load_checkpoint(resume)
        if ckpt.configs.get("generator") != config_dict(gcfg):
            raise ConfigMismatchError("checkpoint generator config differs from the requested one")
        gen.params = _params_from_arrays(ckpt.generator, generator_param_shapes(gcfg))
        gen.optimizer.states = dict(ckpt.generator_opt)
        guard.count = int(ckpt.extra.get("collapse_count", 0))
        if ckpt.phase == "pretrain":
            start_phase, start_epoch = 1, ckpt.epoch + 1
        elif ckpt.phase == "gan":
            start_phase, start_epoch = 2, ckpt.epoch + 1
            if ckpt.discriminator is not None:
                disc = Network.create(_params_from_arrays(ckpt.discriminator, discriminator_param_shapes(dcfg)),
                                      schedule)
                disc.optimizer.states = dict(ckpt.discriminator_opt)
        if start_phase == 1 and start_epoch >= schedule.phase1_epochs:
            start_phase, start_epoch = 2, 0

    log = MetricsLog(out / "metrics.csv" if out else None)
    history: list[tuple[int, int, float, float]] = []
    baseline = bicubic_baseline(val_pairs)
    collapsed = False
    step = int(ckpt.extra.get("step", 0)) if resume is not None else 0

    def finish_epoch(reports: list[StepReport], phase: int, epoch: int, tag: str) -> None:
        vp, vs = validate(gen.params, gcfg, val_pairs)
        if reports:
            reports[-1].val_psnr = None if np.isnan(vp) else vp
            reports[-1].val_ssim = None if np.isnan(vs) else vs
        log.extend(reports)
        history.append((phase, epoch, vp, vs))
        logger.info("phase %d epoch %d: val PSNR %.3f dB, SSIM %.4f", phase, epoch, vp, vs)
        if out is not None:
            ckpt = _checkpoint(gen, disc, epoch, tag, schedule, bundle, guard, step)
            save_checkpoint(ckpt, out / f"phase{phase}_epoch{epoch:03d}.ckpt")
            save_checkpoint(ckpt, out / "last.ckpt")
        if on_epoch is not None:
            on_epoch(phase, epoch, gen.params)

    if out is not None and resume is None:
        save_checkpoint(_checkpoint(gen, disc, -1, "init", schedule, bundle, guard), out / "init.ckpt")

    last_tag, last_epoch = ("init", -1)
    if resume is not None:
        last_tag, last_epoch = ckpt.phase, ckpt.epoch

    if start_phase == 1:
        for epoch in range(start_epoch, schedule.phase1_epochs):
            lr = lr_at_epoch(schedule, epoch)
            pairs = data_mod.epoch_pairs(patches, schedule.seed, 1, epoch)
            reports = []
            for b, batch in enumerate(data_mod.make_batches(pairs, schedule.batch_size, bundle.drop_last)):
                rep = pretrain_step(gen, gcfg, batch, lr, bundle.weights, batch_id=(1, epoch, b))
                rep.epoch, rep.step = epoch, step
                step += 1
                reports.append(rep)
            finish_epoch(reports, 1, epoch, "pretrain")
            last_tag, last_epoch = "pretrain", epoch
        start_epoch = 0

    if not phase1_only and schedule.phase2_epochs > 0:
        extractor = FeatureExtractor(bundle.extractor) if bundle.weights.perceptual > 0 else None
        if start_epoch == 0:
            # fresh optimizer for the new objective; the LR schedule restarts too
            gen.optimizer = Adam(schedule.beta1, schedule.beta2, schedule.eps)
        if disc is None and bundle.weights.adversarial > 0:
            disc = Network.create(init_discriminator(dcfg, schedule.seed + 1), schedule)
        for epoch in range(start_epoch, schedule.phase2_epochs):
            lr = lr_at_epoch(schedule, epoch)
            pairs = data_mod.epoch_pairs(patches, schedule.seed, 2, epoch)
            reports = []
            for b, batch in enumerate(data_mod.make_batches(pairs, schedule.batch_size, bundle.drop_last)):
                rep = gan_step(gen, disc, batch, lr, bundle.weights, gcfg, dcfg, extractor, guard,
                               batch_id=(2, epoch, b))
                rep.epoch, rep.step = epoch, step
                step += 1
                collapsed |= rep.collapse_warning
                reports.append(rep)
            finish_epoch(reports, 2, epoch, "gan")
            last_tag, last_epoch = "gan", epoch

    final = _checkpoint(gen, disc, last_epoch, last_tag, schedule, bundle, guard, step)
    return TrainResult(final, log.rows, gen.params, disc.params if disc else None, history, baseline, collapsed)


def restore_generator(ckpt: Checkpoint) -> tuple[Params, GeneratorConfig]:
    """Rebuild generator parameters and config from a checkpoint."""
    cfg = GeneratorConfig(**ckpt.configs["generator"])
    return _params_from_arrays(ckpt.generator, generator_param_shapes(cfg)), cfg


__all__ = [
    "AdamState", "CollapseGuard", "LOG_COLUMNS", "MetricsLog", "Network", "NumericalError",
    "StepReport", "TrainConfig", "TrainResult", "TrainSchedule", "bicubic_baseline", "gan_step",
    "lr_at_epoch", "pretrain_step", "restore_generator", "train", "validate",
]
