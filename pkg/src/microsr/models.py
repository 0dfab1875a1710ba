"""Generator (RRDB trunk), relativistic discriminator and frozen feature extractor.

Networks are plain dictionaries of named parameter tensors plus a config
dataclass; the forward functions are pure given (params, config, input).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Mapping, Optional

import numpy as np

from .numerics import Tensor, concat, conv2d, dense, leaky_relu, max_pool2d, msra_init, upsample_nearest
from .numerics import functional as F

Params = dict[str, Tensor]


class ConfigMismatchError(ValueError):
    """Parameters do not match the declared architecture."""


@dataclass
class GeneratorConfig:
    num_rrdb: int = 23
    base_channels: int = 64
    growth_channels: int = 32
    convs_per_dense_block: int = 5
    dense_blocks_per_rrdb: int = 3
    residual_scale: float = 0.2
    leak: float = 0.2
    init_scale: float = 0.1
    upscale: int = 2
    in_channels: int = 1

    def __post_init__(self):
        if self.upscale != 2:
            raise ValueError("only 2x upscaling is supported")
        if self.num_rrdb < 1:
            raise ValueError("num_rrdb must be >= 1")
        if not 0.0 <= self.residual_scale <= 1.0:
            raise ValueError("residual_scale must lie in [0, 1]")
        if self.convs_per_dense_block < 1 or self.dense_blocks_per_rrdb < 1:
            raise ValueError("dense block sizes must be >= 1")

    def receptive_radius(self) -> int:
        """LR pixels of context each output pixel depends on, per side."""
        lr_convs = 2 + self.num_rrdb * self.dense_blocks_per_rrdb * self.convs_per_dense_block
        return lr_convs + 1  # two 3x3 convs at 2x resolution reach one LR pixel


@dataclass
class DiscriminatorConfig:
    input_size: int = 128
    channel_sequence: tuple[int, ...] = (64, 64, 128, 128, 256, 256, 512, 512)
    dense_units: int = 1024
    leak: float = 0.2
    init_scale: float = 0.1
    in_channels: int = 1

    def __post_init__(self):
        self.channel_sequence = tuple(int(c) for c in self.channel_sequence)
        if not self.channel_sequence:
            raise ValueError("channel_sequence must not be empty")
        if self.final_size() < 1:
            raise ValueError(f"input size {self.input_size} vanishes after "
                             f"{len(self.strides())} strided stages")

    def strides(self) -> list[int]:
        return [1 if i % 2 == 0 else 2 for i in range(len(self.channel_sequence))]

    def final_size(self) -> int:
        size = self.input_size
        for s in self.strides():
            size = F.conv_output_size(size, 3, s, 1)
        return size

    def flat_features(self) -> int:
        return self.channel_sequence[-1] * self.final_size() ** 2


VGG19_BLOCKS = ((64, 2), (128, 2), (256, 4), (512, 4), (512, 4))


@dataclass
class FeatureExtractorConfig:
    """VGG-style conv stack truncated at ``truncation`` (``"convB_K"`` or ``"input"``).

    The default stops after the fourth conv of block three, before its
    activation.  ``weight_source`` is a checkpoint-container path or
    ``None`` for seeded-random frozen weights.
    """

    blocks: tuple[tuple[int, int], ...] = VGG19_BLOCKS
    truncation: str = "conv3_4"
    in_channels: int = 3
    weight_source: Optional[str] = None
    seed: int = 1234
    frozen: bool = True

    def __post_init__(self):
        self.blocks = tuple((int(c), int(n)) for c, n in self.blocks)
        if not self.frozen:
            raise ValueError("the feature extractor is always frozen")
        self.layers()

    def layers(self) -> list[tuple[str, int, int]]:
        """``(name, in_channels, out_channels)`` for every conv up to the truncation point."""
        if self.truncation == "input":
            return []
        out, cin = [], self.in_channels
        for b, (width, count) in enumerate(self.blocks, 1):
            for k in range(1, count + 1):
                name = f"conv{b}_{k}"
                out.append((name, cin, width))
                cin = width
                if name == self.truncation:
                    return out
        raise ValueError(f"truncation tag {self.truncation!r} not found in the conv stack")

    def output_scale(self) -> int:
        """Spatial downsampling factor at the truncation point."""
        if self.truncation == "input":
            return 1
        block = int(self.truncation[4:].split("_")[0])
        return 2 ** (block - 1)


# -- generator -----------------------------------------------------------------

def _conv_params(params: Params, name: str, cin: int, cout: int, leak: float, scale: float,
                 rng: np.random.Generator) -> None:
    params[f"{name}.weight"] = msra_init((cout, cin, 3, 3), leak, scale, rng)
    params[f"{name}.bias"] = Tensor(np.zeros(cout), requires_grad=True)


def dense_block_input_channels(base: int, growth: int, convs: int) -> list[int]:
    return [base + k * growth for k in range(convs)]


def generator_layout(config: GeneratorConfig) -> list[tuple[str, int, int]]:
    """``(layer name, in_channels, out_channels)`` of every 3×3 conv, in forward order."""
    c, g = config.base_channels, config.growth_channels
    layers = [("conv_first", config.in_channels, c)]
    for r in range(config.num_rrdb):
        for d in range(config.dense_blocks_per_rrdb):
            ins = dense_block_input_channels(c, g, config.convs_per_dense_block)
            for k, cin in enumerate(ins):
                layers.append((f"rrdb{r}.db{d}.conv{k}", cin, c if k == len(ins) - 1 else g))
    layers += [("conv_trunk", c, c), ("conv_up", c, c), ("conv_last", c, config.in_channels)]
    return layers


def generator_param_shapes(config: GeneratorConfig) -> dict[str, tuple[int, ...]]:
    shapes = {}
    for name, cin, cout in generator_layout(config):
        shapes[f"{name}.weight"] = (cout, cin, 3, 3)
        shapes[f"{name}.bias"] = (cout,)
    return shapes


def init_generator(config: GeneratorConfig, seed: int = 0) -> Params:
    rng = np.random.default_rng(seed)
    params: Params = {}
    for name, cin, cout in generator_layout(config):
        _conv_params(params, name, cin, cout, config.leak, config.init_scale, rng)
    return params


def _conv(params: Mapping[str, Tensor], name: str, x: Tensor, stride: int = 1) -> Tensor:
    return conv2d(x, params[f"{name}.weight"], params[f"{name}.bias"], stride=stride, padding=1)


def dense_block_forward(params: Mapping[str, Tensor], prefix: str, x: Tensor, config: GeneratorConfig) -> Tensor:
    """Densely connected convs with a scaled residual: ``x + beta * last_conv``."""
    if x.shape[1] != config.base_channels:
        raise ConfigMismatchError(f"dense block expects {config.base_channels} channels, got {x.shape[1]}")
    features = [x]
    n = config.convs_per_dense_block
    for k in range(n):
        inp = features[0] if len(features) == 1 else concat(features, axis=1)
        y = _conv(params, f"{prefix}.conv{k}", inp)
        if k < n - 1:
            features.append(leaky_relu(y, config.leak))
    return x + y * config.residual_scale


def rrdb_forward(params: Mapping[str, Tensor], prefix: str, x: Tensor, config: GeneratorConfig) -> Tensor:
    y = x
    for d in range(config.dense_blocks_per_rrdb):
        y = dense_block_forward(params, f"{prefix}.db{d}", y, config)
    return x + y * config.residual_scale


def check_params(params: Mapping[str, Tensor], expected: Mapping[str, tuple[int, ...]]) -> None:
    """Raise with a per-layer diff when ``params`` deviates from ``expected`` shapes."""
    problems = []
    for name, shape in expected.items():
        if name not in params:
            problems.append(f"missing {name} {tuple(shape)}")
        elif tuple(params[name].shape) != tuple(shape):
            problems.append(f"{name}: expected {tuple(shape)}, got {tuple(params[name].shape)}")
    problems += [f"unexpected {name}" for name in params if name not in expected]
    if problems:
        raise ConfigMismatchError("parameters do not match config:\n  " + "\n  ".join(problems))


def generator_forward(params: Mapping[str, Tensor], config: GeneratorConfig, lr: Tensor) -> Tensor:
    """N×C×h×w → N×C×2h×2w; output is not clamped."""
    if lr.ndim != 4 or lr.shape[1] != config.in_channels:
        raise ConfigMismatchError(f"generator expects N×{config.in_channels}×h×w input, got {lr.shape}")
    check_params(params, generator_param_shapes(config))
    first = _conv(params, "conv_first", lr)
    trunk = first
    for r in range(config.num_rrdb):
        trunk = rrdb_forward(params, f"rrdb{r}", trunk, config)
    feat = first + _conv(params, "conv_trunk", trunk)
    up = leaky_relu(_conv(params, "conv_up", upsample_nearest(feat, config.upscale)), config.leak)
    return _conv(params, "conv_last", up)


def count_parameters(params: Mapping[str, Tensor]) -> int:
    return int(sum(p.size for p in params.values()))


# -- discriminator ---------------------------------------------------------------

def discriminator_param_shapes(config: DiscriminatorConfig) -> dict[str, tuple[int, ...]]:
    shapes, cin = {}, config.in_channels
    for i, cout in enumerate(config.channel_sequence):
        shapes[f"conv{i}.weight"] = (cout, cin, 3, 3)
        shapes[f"conv{i}.bias"] = (cout,)
        cin = cout
    shapes["fc1.weight"] = (config.flat_features(), config.dense_units)
    shapes["fc1.bias"] = (config.dense_units,)
    shapes["fc2.weight"] = (config.dense_units, 1)
    shapes["fc2.bias"] = (1,)
    return shapes


def init_discriminator(config: DiscriminatorConfig, seed: int = 1) -> Params:
    rng = np.random.default_rng(seed)
    params: Params = {}
    cin = config.in_channels
    for i, cout in enumerate(config.channel_sequence):
        _conv_params(params, f"conv{i}", cin, cout, config.leak, config.init_scale, rng)
        cin = cout
    params["fc1.weight"] = msra_init((config.flat_features(), config.dense_units), config.leak,
                                     config.init_scale, rng)
    params["fc1.bias"] = Tensor(np.zeros(config.dense_units), requires_grad=True)
    params["fc2.weight"] = msra_init((config.dense_units, 1), config.leak, config.init_scale, rng)
    params["fc2.bias"] = Tensor(np.zeros(1), requires_grad=True)
    return params


def discriminator_forward(params: Mapping[str, Tensor], config: DiscriminatorConfig, img: Tensor) -> Tensor:
    """Raw realism logits ``C(x)`` of shape N×1 (no sigmoid)."""
    s = config.input_size
    if img.ndim != 4 or img.shape[1:] != (config.in_channels, s, s):
        raise ConfigMismatchError(f"discriminator expects N×{config.in_channels}×{s}×{s}, got {img.shape}")
    check_params(params, discriminator_param_shapes(config))
    x = img
    for i, stride in enumerate(config.strides()):
        x = leaky_relu(_conv(params, f"conv{i}", x, stride), config.leak)
    x = leaky_relu(dense(F.flatten(x), params["fc1.weight"], params["fc1.bias"]), config.leak)
    return dense(x, params["fc2.weight"], params["fc2.bias"])


# -- feature extractor -------------------------------------------------------------

def extractor_param_shapes(config: FeatureExtractorConfig) -> dict[str, tuple[int, ...]]:
    shapes = {}
    for name, cin, cout in config.layers():
        shapes[f"{name}.weight"] = (cout, cin, 3, 3)
        shapes[f"{name}.bias"] = (cout,)
    return shapes


def init_extractor_params(config: FeatureExtractorConfig) -> Params:
    rng = np.random.default_rng(config.seed)
    params: Params = {}
    for name, cin, cout in config.layers():
        params[f"{name}.weight"] = msra_init((cout, cin, 3, 3), 0.0, 1.0, rng, requires_grad=False)
        params[f"{name}.bias"] = Tensor(np.zeros(cout))
    return params


@dataclass
class FeatureExtractor:
    """Frozen VGG-style feature map; gradients reach the input image only."""

    config: FeatureExtractorConfig = field(default_factory=FeatureExtractorConfig)
    params: Params = field(default_factory=dict)

    def __post_init__(self):
        expected = extractor_param_shapes(self.config)
        if not self.params:
            if self.config.weight_source:
                from .checkpoint import read_container
                arrays, _ = read_container(self.config.weight_source)
                self.params = {k: Tensor(v) for k, v in arrays.items()}
            else:
                self.params = init_extractor_params(self.config)
        check_params(self.params, expected)
        for p in self.params.values():
            p.requires_grad = False

    def __call__(self, img: Tensor) -> Tensor:
        return feature_extract(self.params, self.config, img)


def feature_extract(params: Mapping[str, Tensor], config: FeatureExtractorConfig, img: Tensor) -> Tensor:
    layers = config.layers()
    if not layers:
        return img
    if img.shape[-1] < 16 or img.shape[-2] < 16:
        raise ValueError(f"feature extractor needs inputs of at least 16×16, got {img.shape}")
    x = img
    if x.shape[1] != config.in_channels:
        if x.shape[1] != 1:
            raise ConfigMismatchError(f"cannot map {x.shape[1]} channels to {config.in_channels}")
        x = concat([x] * config.in_channels, axis=1)
    block = 1
    for name, _, _ in layers:
        b = int(name[4:].split("_")[0])
        if b != block:
            x = max_pool2d(x, 2)
            block = b
        x = _conv(params, name, x)
        if name != config.truncation:
            x = leaky_relu(x, 0.0)
    return x


def config_dict(config) -> dict:
    d = asdict(config)
    return {k: (list(map(list, v)) if k == "blocks" else list(v) if isinstance(v, tuple) else v)
            for k, v in d.items()}
