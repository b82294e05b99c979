"""Representation backbone: a small trainable conv stack or ingested descriptors.

The backbone's only job is to produce an activation map, an (h, w, d) tensor
that downstream modules read as h*w deep descriptors of dimension d. Real
datasets enter through descriptor files produced by any external feature
extractor; the conv stack exists so the whole pipeline stays trainable from
raw pixels at desk scale.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import formats
from .autodiff import Tensor, conv2d, max_pool2, parameter, relu
from .errors import ConfigError, ShapeError


@dataclass
class ActivationMap:
    """An (h, w, d) activation tensor plus where it came from."""

    tensor: Tensor
    provenance: str = "conv"  # conv | ingested

    def __post_init__(self):
        if self.tensor.data.ndim != 3 or min(self.tensor.shape) < 1:
            raise ShapeError(f"activation map must be (h,w,d) with positive dims, "
                             f"got shape {self.tensor.shape}")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.tensor.shape


def to_descriptors(amap: ActivationMap) -> list[np.ndarray]:
    """The h*w deep descriptors in row-major order (row index outer)."""
    h, w, d = amap.shape
    return list(amap.tensor.data.reshape(h * w, d))


def from_descriptors(descriptors, h: int, w: int, provenance: str = "ingested") -> ActivationMap:
    arr = np.asarray(descriptors, dtype=np.float64)
    return ActivationMap(Tensor(arr.reshape(h, w, -1)), provenance=provenance)


@dataclass
class ConvStackConfig:
    """conv -> ReLU -> 2x2 max-pool, repeated `layers` times, valid padding.

    With the defaults (three 2x2 valid convolutions, each followed by a
    ceil-mode 2x2 pool) a 16x16 input lands on a 2x2 spatial grid.
    """

    layers: int = 3
    kernel: int = 2
    channels: int = 32
    in_channels: int = 1
    stride: int = 1
    pool: bool = True

    def output_shape(self, h: int, w: int) -> tuple[int, int, int]:
        for _ in range(self.layers):
            h = (h - self.kernel) // self.stride + 1
            w = (w - self.kernel) // self.stride + 1
            if h < 1 or w < 1:
                raise ConfigError(f"conv stack reduces a {h}x{w} map below 1x1 "
                                  f"(kernel {self.kernel}, stride {self.stride})")
            if self.pool:
                h, w = (h + 1) // 2, (w + 1) // 2
        return h, w, self.channels


@dataclass
class ConvStackParams:
    config: ConvStackConfig
    kernels: list[Tensor] = field(default_factory=list)
    biases: list[Tensor] = field(default_factory=list)

    @classmethod
    def init(cls, config: ConvStackConfig, rng: np.random.Generator) -> "ConvStackParams":
        kernels, biases = [], []
        cin = config.in_channels
        for _ in range(config.layers):
            fan_in = config.kernel * config.kernel * cin
            bound = 1.0 / np.sqrt(fan_in)
            kernels.append(parameter(rng.uniform(
                -bound, bound, size=(config.kernel, config.kernel, cin, config.channels))))
            biases.append(parameter(np.zeros(config.channels)))
            cin = config.channels
        return cls(config, kernels, biases)

    def named(self, prefix: str = "conv") -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for i, (k, b) in enumerate(zip(self.kernels, self.biases)):
            out[f"{prefix}{i}.kernel"] = k
            out[f"{prefix}{i}.bias"] = b
        return out


def conv_forward(image, params: ConvStackParams) -> ActivationMap:
    """Run the conv stack on an (H, W, C) image; fully differentiable."""
    x = image if isinstance(image, Tensor) else Tensor(np.asarray(image, dtype=np.float64))
    if x.data.ndim != 3:
        raise ShapeError(f"conv_forward expects an (H,W,C) image, got shape {x.shape}")
    if x.shape[2] != params.config.in_channels:
        raise ShapeError(f"image has {x.shape[2]} channels, stack expects "
                         f"{params.config.in_channels}")
    for k, b in zip(params.kernels, params.biases):
        x = relu(conv2d(x, k, b, stride=params.config.stride))
        if params.config.pool:
            x = max_pool2(x)
    return ActivationMap(x, provenance="conv")


def write_descriptors(path, maps) -> None:
    """Persist activation maps (or raw (h,w,d) arrays) in DESC1 format."""
    arrays = [m.tensor.data if isinstance(m, ActivationMap) else m for m in maps]
    formats.write_tensor_file(path, arrays, magic=formats.DESC_MAGIC)


def load_descriptors(path) -> list[ActivationMap]:
    """Load a DESC1 file; the resulting maps are constants (no gradients)."""
    block = formats.read_tensor_file(path, magic=formats.DESC_MAGIC)
    return [ActivationMap(Tensor(block[i]), provenance="ingested")
            for i in range(block.shape[0])]
