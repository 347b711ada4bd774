"""Small bias-free conv/ReLU feature extractor with three tapped stages.

The stem downsamples the image with conv3x3 + ReLU (+ optional 2x2 maxpool)
stages; three further conv3x3 + ReLU stages at the final resolution produce
the three same-shaped feature maps consumed by the pooling heads.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import ShapeError

N_TAPS = 3


@dataclass(frozen=True)
class BackboneConfig:
    input_size: int = 32
    # (out_channels, maxpool after the stage?)
    stem: tuple[tuple[int, bool], ...] = ((16, True), (32, True))
    tap_channels: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.input_size <= 0 or self.tap_channels <= 0:
            raise ValueError("input_size and tap_channels must be positive")
        size = self.input_size
        for ch, pool in self.stem:
            if ch <= 0:
                raise ValueError(f"stem channels must be positive, got {ch}")
            if pool:
                if size % 2:
                    raise ValueError(f"cannot 2x2-pool an odd extent {size}")
                size //= 2

    @property
    def downsample(self) -> int:
        return 2 ** sum(1 for _, pool in self.stem if pool)

    @property
    def tap_shape(self) -> tuple[int, int, int]:
        s = self.input_size // self.downsample
        return (s, s, self.tap_channels)

    def kernel_shapes(self) -> dict[str, tuple[int, int, int, int]]:
        shapes, cin = {}, 3
        for i, (ch, _) in enumerate(self.stem):
            shapes[f"conv{i}"] = (3, 3, cin, ch)
            cin = ch
        for i in range(N_TAPS):
            shapes[f"tap{i}"] = (3, 3, cin, self.tap_channels)
            cin = self.tap_channels
        return shapes


def default_desk_config() -> BackboneConfig:
    """32x32x3 input, two pooled stem stages, three 8x8x32 taps."""
    return BackboneConfig(input_size=32, stem=((16, True), (32, True)), tap_channels=32, seed=0)


@dataclass
class BackboneParams:
    config: BackboneConfig
    kernels: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        want = self.config.kernel_shapes()
        if set(want) != set(self.kernels):
            raise ShapeError(f"kernels {sorted(self.kernels)} do not match layout {sorted(want)}")
        for name, shape in want.items():
            if self.kernels[name].shape != shape:
                raise ShapeError(f"kernel {name}: expected {shape}, got {self.kernels[name].shape}")


def init_backbone(config: BackboneConfig, rng: np.random.Generator | None = None) -> BackboneParams:
    """He-uniform kernels, ``+-sqrt(6 / fan_in)``."""
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    kernels = {}
    for name, shape in config.kernel_shapes().items():
        lim = np.sqrt(6.0 / (shape[0] * shape[1] * shape[2]))
        kernels[name] = rng.uniform(-lim, lim, size=shape)
    return BackboneParams(config, kernels)


def zero_backbone(config: BackboneConfig) -> BackboneParams:
    return BackboneParams(config, {k: np.zeros(s) for k, s in config.kernel_shapes().items()})


def backbone_forward(image, params, config: BackboneConfig, ops=T):
    """Return the three tapped feature maps for an image (or a batch).

    ``params`` maps kernel names to arrays, or to tape variables when ``ops``
    is :mod:`hbpool.autodiff`.
    """
    shape = tuple(image.shape)
    size = config.input_size
    if shape[-3:] != (size, size, 3) or len(shape) not in (3, 4):
        raise ShapeError(f"backbone expects {size}x{size}x3 images, got {shape}")
    if isinstance(image, np.ndarray) and image.size and (image.min() < 0.0 or image.max() > 1.0):
        raise ValueError("pixel values must lie in [0, 1]")
    h = image
    for i, (_, pool) in enumerate(config.stem):
        h = ops.relu(ops.conv2d(h, params[f"conv{i}"], 1, 1))
        if pool:
            h = ops.maxpool2(h)
    taps = []
    for i in range(N_TAPS):
        h = ops.relu(ops.conv2d(h, params[f"tap{i}"], 1, 1))
        taps.append(h)
    return tuple(taps)
