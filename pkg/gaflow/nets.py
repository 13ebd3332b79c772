""" Skip-UNet backbones for the warping, segmentation and fusion stages. """
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import functional as F
from .errors import ConfigurationError, DimensionError
from .layers import Conv2d, Module
from .tensor import Tensor, concat_channels, leaky_relu, relu

MAX_WIDTH = 128


@dataclass(frozen=True)
class SkipUNetConfig:
    """ Shape of a Skip-UNet.

    Parameters
    ----------
    in_channels : int
    out_channels : int
        0 means no output convolution; the outermost decoder feature is
        returned as output instead
    depth : int
        number of stride-2 encoder stages, at least 2
    base_width : int
        channels at full resolution, doubling per stage up to MAX_WIDTH
    emit_decoder_features : bool
    """
    in_channels: int
    out_channels: int
    depth: int = 4
    base_width: int = 16
    emit_decoder_features: bool = False

    def __post_init__(self):
        if self.depth < 2:
            raise ConfigurationError(f"Skip-UNet depth must be at least 2, got {self.depth}.")
        if self.in_channels < 1 or self.out_channels < 0 or self.base_width < 1:
            raise ConfigurationError(f"Invalid Skip-UNet configuration {self}.")

    @property
    def widths(self) -> list[int]:
        return [min(self.base_width * 2 ** i, MAX_WIDTH) for i in range(self.depth + 1)]

    def check_extent(self, height: int, width: int) -> None:
        f = 2 ** self.depth
        if height % f or width % f:
            raise ConfigurationError(f"Input extent {height} x {width} is not divisible by 2^{self.depth} = {f}.")


def parameter_count(config: SkipUNetConfig) -> int:
    c = config.widths
    count = 9 * config.in_channels * c[0] + c[0]
    for i in range(1, config.depth + 1):
        count += 9 * c[i - 1] * c[i] + c[i]
        count += 9 * (c[i] + c[i - 1]) * c[i - 1] + c[i - 1]
    if config.out_channels:
        count += c[0] * config.out_channels + config.out_channels
    return count


class SkipUNet(Module):
    """ Encoder-decoder with same-resolution skip connections.

    The encoder halves the resolution per stage with stride-2 convolutions
    (instance norm, LeakyReLU 0.2); the decoder doubles it with bilinear
    upsampling, concatenates the encoder feature of that resolution and
    convolves (instance norm, ReLU).
    """
    def __init__(self, config: SkipUNetConfig, rng: np.random.Generator):
        self.config = config
        c = config.widths
        self.stem = Conv2d(config.in_channels, c[0], 3, rng=rng)
        self.down = [Conv2d(c[i - 1], c[i], 3, stride=2, rng=rng) for i in range(1, config.depth + 1)]
        # up[i - 1] maps stage i back to stage i - 1
        self.up = [Conv2d(c[i] + c[i - 1], c[i - 1], 3, rng=rng) for i in range(1, config.depth + 1)]
        self.head = Conv2d(c[0], config.out_channels, 1, rng=rng) if config.out_channels else None

    def __call__(self, x: Tensor, disabled_skips: frozenset[int] = frozenset()):
        return self.forward(x, disabled_skips)

    def forward(self, x: Tensor, disabled_skips: frozenset[int] = frozenset()) -> tuple[Tensor, list[Tensor]]:
        """ Run the network.

        Parameters
        ----------
        x : Tensor
            N x in_channels x H x W
        disabled_skips : frozenset[int]
            encoder stages whose skip connection is replaced by zeros

        Returns
        -------
        (Tensor, list[Tensor])
            output and the decoder features [bottleneck, ..., full
            resolution], outermost last (empty unless
            emit_decoder_features)
        """
        cfg = self.config
        if x.ndim != 4 or x.shape[1] != cfg.in_channels:
            raise DimensionError(f"Skip-UNet expects N x {cfg.in_channels} x H x W input, got {x.shape}.")
        cfg.check_extent(*x.shape[2:])
        h = leaky_relu(F.instance_norm(self.stem(x)), 0.2)
        skips = [h]
        for conv in self.down:
            h = leaky_relu(F.instance_norm(conv(h)), 0.2)
            skips.append(h)
        features = [h]
        for i in range(cfg.depth, 0, -1):
            skip = skips[i - 1]
            if i - 1 in disabled_skips:
                skip = Tensor(np.zeros(skip.shape), dtype=skip.dtype)
            h = F.upsample_bilinear(h, skip.shape[2], skip.shape[3])
            h = relu(F.instance_norm(self.up[i - 1](concat_channels([h, skip]))))
            features.append(h)
        out = self.head(h) if self.head is not None else h
        return out, (features if cfg.emit_decoder_features else [])


def unet_forward(net: SkipUNet, x: Tensor,
                 disabled_skips: frozenset[int] = frozenset()) -> tuple[Tensor, list[Tensor]]:
    """ Output and decoder features of one stage network; the entry point used by every stage. """
    return net.forward(x, disabled_skips)


logger = logging.getLogger(__name__)
