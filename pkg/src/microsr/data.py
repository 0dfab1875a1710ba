"""Paired LR/HR image handling: loading, patching, augmentation, batching.

Every step treats an LR patch and its HR counterpart as one tuple so the
two never drift apart (same crop, same flips, same position in a batch).
"""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional, Sequence, Union

import numpy as np
from PIL import Image
from scipy import ndimage

from .numerics import Tensor

logger = logging.getLogger(__name__)

SCALE = 2
IMAGE_SUFFIXES = (".png", ".tif", ".tiff")


class DataError(ValueError):
    """Invalid or inconsistent image data."""


@dataclass
class ImagePair:
    lr: np.ndarray
    hr: np.ndarray
    id: str = ""

    def __post_init__(self):
        if self.lr.ndim != 2 or self.hr.ndim != 2:
            raise DataError(f"{self.id}: expected 2-D grayscale images, got {self.lr.shape} / {self.hr.shape}")
        if self.hr.shape != (SCALE * self.lr.shape[0], SCALE * self.lr.shape[1]):
            raise DataError(f"{self.id}: HR size {self.hr.shape[::-1]} is not 2x LR size "
                            f"{self.lr.shape[::-1]} (width x height)")


@dataclass
class PatchPair:
    lr_patch: np.ndarray
    hr_patch: np.ndarray
    lr_origin: tuple[int, int] = (0, 0)
    id: str = ""


@dataclass(frozen=True)
class AugmentationOutcome:
    transformed: bool = False
    hflip: bool = False
    vflip: bool = False
    rot90: bool = False

    def __post_init__(self):
        if not self.transformed and (self.hflip or self.vflip or self.rot90):
            raise ValueError("flip/rotation flags require transformed=True")


# -- patching ----------------------------------------------------------------

def patch_stride(patch_size: int, overlap_fraction: float) -> int:
    if not 0.0 <= overlap_fraction < 1.0:
        raise ValueError(f"overlap fraction must lie in [0, 1), got {overlap_fraction}")
    stride = patch_size * (1.0 - overlap_fraction)
    if stride <= 0 or abs(stride - round(stride)) > 1e-9:
        raise ValueError(f"patch {patch_size} with overlap {overlap_fraction} gives non-integer stride {stride}")
    return int(round(stride))


def patch_grid(size: int, patch_size: int, stride: int) -> list[int]:
    return list(range(0, size - patch_size + 1, stride))


def patches_per_image(lr_shape: Sequence[int], patch_size: int = 64, overlap_fraction: float = 0.5) -> int:
    stride = patch_stride(patch_size, overlap_fraction)
    h, w = lr_shape
    if patch_size > min(h, w):
        return 0
    return len(patch_grid(h, patch_size, stride)) * len(patch_grid(w, patch_size, stride))


def extract_patches(pair: ImagePair, patch_size: int = 64, overlap_fraction: float = 0.5) -> list[PatchPair]:
    """Cut coherent LR/HR patch pairs on a regular grid, row-major.

    The LR patch at ``(row, col)`` pairs with the HR patch at
    ``(2*row, 2*col)`` of side ``2*patch_size``.  A trailing remainder that
    does not fit the grid is skipped.
    """
    h, w = pair.lr.shape
    if patch_size > min(h, w):
        raise DataError(f"{pair.id}: patch {patch_size} larger than LR image {h}x{w}")
    stride = patch_stride(patch_size, overlap_fraction)
    hp = SCALE * patch_size
    out = []
    for r in patch_grid(h, patch_size, stride):
        for c in patch_grid(w, patch_size, stride):
            out.append(PatchPair(
                lr_patch=pair.lr[r:r + patch_size, c:c + patch_size].copy(),
                hr_patch=pair.hr[SCALE * r:SCALE * r + hp, SCALE * c:SCALE * c + hp].copy(),
                lr_origin=(r, c),
                id=pair.id,
            ))
    return out


# -- augmentation --------------------------------------------------------------

def apply_transform(image: np.ndarray, outcome: AugmentationOutcome) -> np.ndarray:
    """Horizontal flip, then vertical flip, then 90° counter-clockwise rotation."""
    if not outcome.transformed:
        return image
    if outcome.hflip:
        image = image[:, ::-1]
    if outcome.vflip:
        image = image[::-1, :]
    if outcome.rot90:
        image = np.rot90(image)
    return np.ascontiguousarray(image)


def draw_outcome(rng: np.random.Generator) -> AugmentationOutcome:
    if rng.random() >= 0.5:
        return AugmentationOutcome()
    hflip, vflip, rot = (bool(v) for v in rng.random(3) < 0.5)
    return AugmentationOutcome(True, hflip, vflip, rot)


def augment(pair: PatchPair, rng: np.random.Generator) -> tuple[PatchPair, AugmentationOutcome]:
    outcome = draw_outcome(rng)
    if not outcome.transformed:
        return pair, outcome
    return PatchPair(apply_transform(pair.lr_patch, outcome), apply_transform(pair.hr_patch, outcome),
                     pair.lr_origin, pair.id), outcome


def shuffle_pairs(pairs: Sequence[PatchPair], rng_seed) -> list[PatchPair]:
    order = np.random.default_rng(rng_seed).permutation(len(pairs))
    return [pairs[i] for i in order]


def make_batches(pairs: Sequence[PatchPair], batch_size: int = 16,
                 drop_last: bool = False) -> Iterator[tuple[Tensor, Tensor]]:
    """Yield ``(lr, hr)`` tensors of shape N×1×P×P and N×1×2P×2P."""
    if batch_size < 1:
        raise ValueError(f"batch size must be >= 1, got {batch_size}")
    for start in range(0, len(pairs), batch_size):
        chunk = pairs[start:start + batch_size]
        if drop_last and len(chunk) < batch_size:
            return
        lr = np.stack([p.lr_patch for p in chunk])[:, None]
        hr = np.stack([p.hr_patch for p in chunk])[:, None]
        yield Tensor(lr), Tensor(hr)


def epoch_pairs(patches: Sequence[PatchPair], seed: int, phase: int, epoch: int) -> list[PatchPair]:
    """Re-augment and shuffle the patch set for one epoch.

    Both streams are keyed by ``(seed, phase, epoch)`` so an epoch is
    reproducible regardless of what ran before it.
    """
    rng = np.random.default_rng([seed, phase, epoch, 0])
    augmented = [augment(p, rng)[0] for p in patches]
    return shuffle_pairs(augmented, [seed, phase, epoch, 1])


# -- image I/O -------------------------------------------------------------------

_BIT_DEPTH = {"L": 8, "I;16": 16, "I;16B": 16, "I;16L": 16, "I;16N": 16}


def read_image(path: Union[str, os.PathLike]) -> tuple[np.ndarray, int]:
    """Decode a grayscale 8/16-bit PNG or TIFF into [0, 1] floats.

    Returns the normalised image and its bit depth.
    """
    try:
        with Image.open(path) as img:
            img.load()
            mode = img.mode
            arr = np.asarray(img)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot decode {path}: {exc}") from exc
    if mode in _BIT_DEPTH:
        depth = _BIT_DEPTH[mode]
    elif mode == "I" and arr.size and arr.min() >= 0 and arr.max() <= 65535:
        depth = 16
    else:
        raise DataError(f"{path}: expected grayscale 8- or 16-bit image, got mode {mode!r}")
    if arr.ndim != 2:
        raise DataError(f"{path}: expected a single-channel image, got shape {arr.shape}")
    return (arr.astype(np.float64) / float(2 ** depth - 1)).astype(np.float32), depth


def write_image(path: Union[str, os.PathLike], image: np.ndarray, bit_depth: int = 8) -> None:
    """Clamp to [0, 1], quantise to ``bit_depth`` and save (format from suffix)."""
    if bit_depth not in (8, 16):
        raise ValueError(f"bit depth must be 8 or 16, got {bit_depth}")
    top = 2 ** bit_depth - 1
    q = np.rint(np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0) * top)
    arr = q.astype(np.uint8 if bit_depth == 8 else np.uint16)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr).save(path)


def load_image_pair(lr_path, hr_path, pair_id: Optional[str] = None) -> ImagePair:
    lr, _ = read_image(lr_path)
    hr, _ = read_image(hr_path)
    pair_id = pair_id or Path(lr_path).stem
    if hr.shape != (SCALE * lr.shape[0], SCALE * lr.shape[1]):
        raise DataError(f"{pair_id}: size mismatch, LR {lr.shape[1]}x{lr.shape[0]} "
                        f"vs HR {hr.shape[1]}x{hr.shape[0]} (HR must be exactly 2x LR)")
    return ImagePair(lr, hr, pair_id)


def discover_pairs(root: Union[str, os.PathLike]) -> list[tuple[Path, Path]]:
    """Match same-named files in ``root/lr`` and ``root/hr``."""
    root = Path(root)
    lr_dir, hr_dir = root / "lr", root / "hr"
    if not lr_dir.is_dir() or not hr_dir.is_dir():
        raise DataError(f"{root}: expected 'lr/' and 'hr/' subdirectories")
    hr_names = {p.name for p in hr_dir.iterdir()}
    pairs = []
    for p in sorted(lr_dir.iterdir()):
        if p.suffix.lower() not in IMAGE_SUFFIXES:
            continue
        if p.name not in hr_names:
            logger.warning("no HR counterpart for %s", p.name)
            continue
        pairs.append((p, hr_dir / p.name))
    return pairs


def write_manifest(path, pairs: Sequence[tuple[Path, Path]]) -> None:
    """Write absolute paths so the manifest is valid from any working directory."""
    lines = [f"{Path(lr).resolve()}\t{Path(hr).resolve()}\n" for lr, hr in pairs]
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text("".join(lines))


def read_manifest(path) -> list[tuple[Path, Path]]:
    """Parse ``lr_path<TAB>hr_path`` lines; relative paths resolve against the manifest."""
    base = Path(path).parent
    pairs = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise DataError(f"{path}:{lineno}: expected 'lr_path<TAB>hr_path'")
        lr, hr = (Path(p) if Path(p).is_absolute() else base / p for p in parts)
        pairs.append((lr, hr))
    return pairs


def load_dataset(manifest) -> list[ImagePair]:
    return [load_image_pair(lr, hr) for lr, hr in read_manifest(manifest)]


# -- synthetic data ----------------------------------------------------------------

def box_downsample(image: np.ndarray, factor: int = SCALE) -> np.ndarray:
    h, w = image.shape
    return image.reshape(h // factor, factor, w // factor, factor).mean(axis=(1, 3))


def synthesize_hr(size: int, rng: np.random.Generator) -> np.ndarray:
    """A fluorescence-like clean image: soft cell bodies, bright nuclei, fibrous background."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    img = np.zeros((size, size))
    for _ in range(rng.integers(3, 8)):
        cy, cx = rng.uniform(0, size, 2)
        ry, rx = rng.uniform(0.06, 0.18, 2) * size
        theta = rng.uniform(0, np.pi)
        dy, dx = yy - cy, xx - cx
        u = (dx * np.cos(theta) + dy * np.sin(theta)) / rx
        v = (-dx * np.sin(theta) + dy * np.cos(theta)) / ry
        r2 = u * u + v * v
        img += rng.uniform(0.2, 0.5) * np.exp(-r2 ** 2)
        img += rng.uniform(0.3, 0.6) * np.exp(-r2 / 0.08)
    fibres = ndimage.gaussian_filter(rng.standard_normal((size, size)), sigma=size / 48)
    fibres = np.abs(fibres) / (np.abs(fibres).max() + 1e-12)
    img += 0.35 * fibres ** 2
    img = ndimage.gaussian_filter(img, sigma=0.7)
    return np.clip(img / max(img.max(), 1e-12) * 0.9, 0.0, 1.0)


def degrade(hr: np.ndarray, noise_sigma: float, rng: np.random.Generator) -> np.ndarray:
    """2x box downsample, then signal-dependent shot noise and Gaussian read noise."""
    lr = box_downsample(hr)
    if noise_sigma > 0:
        shot = noise_sigma * np.sqrt(np.clip(lr, 0.0, None)) * rng.standard_normal(lr.shape)
        read = noise_sigma * rng.standard_normal(lr.shape)
        lr = lr + shot + read
    return np.clip(lr, 0.0, 1.0)


def generate_synthetic_dataset(count: int, size: int = 128, noise_sigma: float = 0.05,
                               rng_seed: int = 0) -> list[ImagePair]:
    """Procedural stand-in for a widefield/SIM dataset; ``size`` is the LR side."""
    if size <= 0 or size % 2:
        raise ValueError(f"size must be a positive even number, got {size}")
    if noise_sigma < 0:
        raise ValueError("noise_sigma must be >= 0")
    rng = np.random.default_rng(rng_seed)
    pairs = []
    for i in range(count):
        hr = synthesize_hr(SCALE * size, rng)
        lr = degrade(hr, noise_sigma, rng)
        pairs.append(ImagePair(lr.astype(np.float32), hr.astype(np.float32), f"synth_{i:04d}"))
    return pairs


def split_by_id(pairs: Sequence[ImagePair], val_fraction: float = 0.1,
                seed: int = 0) -> tuple[list[ImagePair], list[ImagePair]]:
    """Hold out ``val_fraction`` of the pairs (at least one when there are two or more)."""
    if len(pairs) < 2 or val_fraction <= 0:
        return list(pairs), []
    ids = sorted(p.id for p in pairs)
    n_val = min(len(pairs) - 1, max(1, int(round(val_fraction * len(pairs)))))
    held = set(np.random.default_rng([seed, 7]).permutation(ids)[:n_val].tolist())
    train = [p for p in pairs if p.id not in held]
    val = [p for p in pairs if p.id in held]
    return train, val
