"""Multi-level feature extractor producing the five-level pyramid F1..F5.

A small residual CNN stands in for a heavyweight encoder: the only contract
downstream modules rely on is that level i has stride 2^i and channel count
channels_per_level[i-1].
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .layers import ConvBNReLU, Module, ResidualBlock


@dataclass
class BackboneConfig:
    input_channels: int = 1
    stem_channels: int = 16
    channels_per_level: tuple = (16, 24, 32, 48, 64)
    blocks_per_level: tuple = (1, 1, 1, 1, 1)

    def __post_init__(self):
        self.channels_per_level = tuple(int(c) for c in self.channels_per_level)
        self.blocks_per_level = tuple(int(b) for b in self.blocks_per_level)
        if len(self.channels_per_level) != 5 or len(self.blocks_per_level) != 5:
            raise ValueError("backbone needs exactly 5 levels")
        if any(c <= 0 for c in self.channels_per_level):
            raise ValueError("channels_per_level must be strictly positive")


@dataclass
class FeaturePyramid:
    """Backbone features F1..F5 at strides 2, 4, 8, 16, 32."""
    levels: list = field(default_factory=list)

    def __getitem__(self, i):
        """1-based access matching the F1..F5 naming."""
        return self.levels[i - 1]


class Backbone(Module):
    def __init__(self, config: BackboneConfig, rng, dtype=np.float64):
        super().__init__()
        self.config = config
        chans = config.channels_per_level
        # stem downsamples once; level 1 keeps stride 2, levels 2..5 halve again
        self.stem = ConvBNReLU(config.input_channels, config.stem_channels, 3,
                               rng, stride=2, dtype=dtype)
        prev = config.stem_channels
        self.levels = _LevelList()
        for i in range(5):
            stride = 1 if i == 0 else 2
            level = _Level(prev, chans[i], config.blocks_per_level[i], stride,
                           rng, dtype)
            setattr(self.levels, f"level{i + 1}", level)
            prev = chans[i]

    def __call__(self, image):
        n, c, h, w = image.shape
        if c != self.config.input_channels:
            raise ValueError(
                f"backbone expects {self.config.input_channels} input channels, got {c}")
        if h % 32 or w % 32 or h < 32 or w < 32:
            raise ValueError(
                f"input spatial size ({h}x{w}) must be a multiple of 32 and >= 32")
        x = self.stem(image)
        feats = []
        for i in range(5):
            x = getattr(self.levels, f"level{i + 1}")(x)
            feats.append(x)
        return FeaturePyramid(feats)


class _LevelList(Module):
    pass


class _Level(Module):
    def __init__(self, cin, cout, n_blocks, stride, rng, dtype):
        super().__init__()
        self.transition = ConvBNReLU(cin, cout, 3, rng, stride=stride, dtype=dtype)
        self.blocks = _LevelList()
        for b in range(n_blocks):
            setattr(self.blocks, f"block{b + 1}", ResidualBlock(cout, rng, dtype))
        self.n_blocks = n_blocks

    def __call__(self, x):
        x = self.transition(x)
        for b in range(self.n_blocks):
            x = getattr(self.blocks, f"block{b + 1}")(x)
        return x
