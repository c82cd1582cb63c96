#!/usr/bin/env python3
"""
🏗️ BACKBONE + FPN
=================

Tiny convolutional backbone with a feature pyramid on top. Produces the
per-level maps P3..P7 (stride 2^l) consumed by the query generation network
and by RoI-Align.

Layout: stride-2 stem pool, then 4 stages of [3x3 conv -> relu -> 2x2 pool]
with widths 16/32/64/64 (C2..C5). Lateral 1x1 convs on C3..C5, top-down
nearest 2x upsampling, 3x3 smoothing. P6/P7 are stride-2 3x3 convs stacked on
P5; every map floors at 1x1.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

import ndgrad as ng
from config import ModelConfig
from ndgrad import Array, Module

logger = logging.getLogger(__name__)

STAGE_WIDTHS = (16, 32, 64, 64)


class Conv2d(Module):
    """k x k convolution with bias, zero padding"""

    def __init__(self, rng: np.random.Generator, in_channels: int, out_channels: int,
                 kernel: int = 3, stride: int = 1, bias_fill: float = 0.0, gain: float = np.sqrt(2.0)):
        super().__init__()
        self.stride = stride
        self.padding = kernel // 2
        fan_in = in_channels * kernel * kernel
        self.weight = self.add_param("weight", ng.init_uniform(rng, (out_channels, in_channels, kernel, kernel), fan_in, gain))
        self.bias = self.add_param("bias", ng.zeros_param((out_channels,), bias_fill))

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    def __call__(self, x: Array) -> Array:
        return ng.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


@dataclass
class FeatureLevel:
    level: int
    stride: int
    map: Array

    @property
    def channels(self) -> int:
        return self.map.shape[0]

    @property
    def spatial(self) -> Tuple[int, int]:
        return self.map.shape[1], self.map.shape[2]


@dataclass
class FeaturePyramid:
    """Ordered FPN levels plus the image size they were computed from"""
    levels: List[FeatureLevel]
    image_size: Tuple[int, int]

    def __post_init__(self):
        for prev, nxt in zip(self.levels, self.levels[1:]):
            if nxt.stride != 2 * prev.stride or nxt.level != prev.level + 1:
                raise ValueError(f"pyramid levels must be contiguous, got P{prev.level} -> P{nxt.level}")

    def __iter__(self) -> Iterator[FeatureLevel]:
        return iter(self.levels)

    def __len__(self) -> int:
        return len(self.levels)

    def level(self, index: int) -> FeatureLevel:
        for feature in self.levels:
            if feature.level == index:
                return feature
        raise KeyError(f"P{index} not in pyramid P{self.lo}..P{self.hi}")

    @property
    def lo(self) -> int:
        return self.levels[0].level

    @property
    def hi(self) -> int:
        return self.levels[-1].level

    @property
    def channels(self) -> int:
        return self.levels[0].channels


def expected_extent(size: int, level: int) -> int:
    """ceil(size / 2^level), never below 1"""
    return max(1, -(-size // (2 ** level)))


def upsample_to(x: Array, height: int, width: int) -> Array:
    """Nearest-neighbor 2x upsample of [C,h,w] cropped to [C,height,width]"""
    rows = [min(i // 2, x.shape[1] - 1) for i in range(height)]
    cols = [min(j // 2, x.shape[2] - 1) for j in range(width)]
    return ng.gather(ng.gather(x, rows, axis=1), cols, axis=2)


class Backbone(Module):
    """CNN + FPN producing P{lo}..P{hi} with a shared channel width"""

    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        super().__init__()
        self.config = config
        self.lo, self.hi = config.fpn_levels
        width = config.fpn_channels
        self.stages: List[Conv2d] = []
        in_channels = 3
        for i, out_channels in enumerate(STAGE_WIDTHS):
            self.stages.append(self.add_module(f"stage{i + 2}", Conv2d(rng, in_channels, out_channels)))
            in_channels = out_channels
        # C3..C5 feed the pyramid
        self.laterals = [self.add_module(f"lateral{l}", Conv2d(rng, STAGE_WIDTHS[l - 2], width, kernel=1, gain=1.0))
                         for l in (3, 4, 5)]
        self.smooth = [self.add_module(f"smooth{l}", Conv2d(rng, width, width, gain=1.0)) for l in (3, 4, 5)]
        self.p6 = self.add_module("p6", Conv2d(rng, width, width, stride=2, gain=1.0)) if self.hi >= 6 else None
        self.p7 = self.add_module("p7", Conv2d(rng, width, width, stride=2, gain=1.0)) if self.hi >= 7 else None

    def extract_pyramid(self, image: Array) -> FeaturePyramid:
        if image.ndim != 3 or image.shape[0] != 3:
            raise ng.ShapeError(f"extract_pyramid: expected a [3,H,W] image, got shape {image.shape}")
        x = ng.max_pool2d(image)
        feats: Dict[int, Array] = {}
        for level, conv in enumerate(self.stages, start=2):
            x = ng.max_pool2d(ng.relu(conv(x)))
            feats[level] = x

        lat = {l: conv(feats[l]) for l, conv in zip((3, 4, 5), self.laterals)}
        merged = {5: lat[5]}
        for l in (4, 3):
            _, h, w = lat[l].shape
            merged[l] = ng.add(lat[l], upsample_to(merged[l + 1], h, w))
        outputs = {l: conv(merged[l]) for l, conv in zip((3, 4, 5), self.smooth)}
        if self.p6 is not None:
            outputs[6] = self.p6(outputs[5])
        if self.p7 is not None:
            outputs[7] = self.p7(ng.relu(outputs[6]))

        height, width = image.shape[1], image.shape[2]
        levels = [FeatureLevel(l, 2 ** l, outputs[l]) for l in range(self.lo, self.hi + 1)]
        return FeaturePyramid(levels, (height, width))


def extract_pyramid(image: Array, params: Backbone) -> FeaturePyramid:
    return params.extract_pyramid(image)
