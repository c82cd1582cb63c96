#!/usr/bin/env python3
"""
🎯 QUERY GENERATION NETWORK
===========================

Anchor-free dense head over the FPN levels. A shared 3x3 tower feeds three
1x1 branches per location:

- objectness  (category-agnostic logit, sigmoid)
- ltrb        (distances to the four box sides, exp(raw) * stride)
- query       (D-dim featurized query vector)

Top-K over all levels turns the dense predictions into a QuerySet whose boxes
and features stay in one-to-one correspondence. No NMS, no sampling.
"""

import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import expit

import ndgrad as ng
from backbone import Conv2d, FeaturePyramid
from config import ModelConfig
from ndgrad import Array, Module

logger = logging.getLogger(__name__)

Box = Tuple[float, float, float, float]
Location = Tuple[int, int, int]

# exp() input cap on the raw ltrb output
LTRB_LOG_CLAMP = 8.0


@dataclass
class DenseLevelPrediction:
    level: int
    stride: int
    objectness_logits: Array   # [H, W]
    ltrb: Array                # [4, H, W]
    query_map: Array           # [D, H, W]
    image_size: Tuple[int, int]

    @property
    def spatial(self) -> Tuple[int, int]:
        return self.objectness_logits.shape

    @property
    def objectness(self) -> np.ndarray:
        return expit(self.objectness_logits.data)


@dataclass
class DenseOutput:
    """All dense locations flattened in (level, row, col) order"""
    logits: Array              # [L]
    boxes: Array               # [L, 4] decoded, clipped
    features: Array            # [L, D]
    locations: np.ndarray      # [L, 3] (level, row, col)
    centers: np.ndarray        # [L, 2] (cx, cy)
    strides: np.ndarray        # [L]
    image_size: Tuple[int, int]

    def __len__(self) -> int:
        return self.locations.shape[0]

    @property
    def scores(self) -> np.ndarray:
        return expit(self.logits.data)


@dataclass
class QuerySet:
    scores: np.ndarray         # [K]
    boxes: Array               # [K, 4]
    features: Array            # [K, D]
    provenance: List[Location]
    indices: np.ndarray        # [K] flat dense indices
    shortfall: bool = False

    def __len__(self) -> int:
        return len(self.provenance)


def location_center(level: int, row: int, col: int) -> Tuple[float, float]:
    stride = 2 ** level
    return (col + 0.5) * stride, (row + 0.5) * stride


def decode_location(level: int, row: int, col: int, ltrb: Sequence[float],
                    image_size: Optional[Tuple[int, int]] = None) -> Box:
    """Box from a location center and its (l, t, r, b) distances, clipped to the image"""
    left, top, right, bottom = (float(v) for v in ltrb)
    cx, cy = location_center(level, row, col)
    x1, y1, x2, y2 = cx - left, cy - top, cx + right, cy + bottom
    if image_size is not None:
        height, width = image_size
        x1, x2 = min(max(x1, 0.0), width), min(max(x2, 0.0), width)
        y1, y2 = min(max(y1, 0.0), height), min(max(y2, 0.0), height)
    return x1, y1, x2, y2


def encode_location(level: int, row: int, col: int, box: Sequence[float]) -> Tuple[float, float, float, float]:
    """ltrb distances of a box seen from a location center (inverse of decode_location)"""
    cx, cy = location_center(level, row, col)
    x1, y1, x2, y2 = (float(v) for v in box)
    return cx - x1, cy - y1, x2 - cx, y2 - cy


def _level_grid(pred: DenseLevelPrediction) -> Tuple[np.ndarray, np.ndarray]:
    h, w = pred.spatial
    rows, cols = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    return rows.reshape(-1), cols.reshape(-1)


def decode_dense(pred: DenseLevelPrediction) -> Array:
    """Differentiable decode of one level: [H*W, 4] clipped boxes"""
    h, w = pred.spatial
    n = h * w
    rows, cols = _level_grid(pred)
    cx = (cols + 0.5) * pred.stride
    cy = (rows + 0.5) * pred.stride
    centers = np.stack([cx, cy, cx, cy], axis=1)
    signs = np.tile(np.array([-1.0, -1.0, 1.0, 1.0]), (n, 1))
    height, width = pred.image_size
    limits = np.tile(np.array([width, height, width, height], dtype=np.float64), (n, 1))
    distances = ng.transpose(ng.reshape(pred.ltrb, (4, n)), (1, 0))
    boxes = ng.add(Array(centers), ng.mul(distances, Array(signs)))
    return ng.minimum(ng.maximum(boxes, 0.0), Array(limits))


def flatten_predictions(preds: Sequence[DenseLevelPrediction]) -> DenseOutput:
    if not preds:
        raise ValueError("flatten_predictions: no dense levels")
    logits, boxes, features, locations, centers, strides = [], [], [], [], [], []
    for pred in preds:
        h, w = pred.spatial
        d = pred.query_map.shape[0]
        rows, cols = _level_grid(pred)
        logits.append(ng.reshape(pred.objectness_logits, (h * w,)))
        boxes.append(decode_dense(pred))
        features.append(ng.transpose(ng.reshape(pred.query_map, (d, h * w)), (1, 0)))
        locations.append(np.stack([np.full(h * w, pred.level), rows, cols], axis=1))
        centers.append(np.stack([(cols + 0.5) * pred.stride, (rows + 0.5) * pred.stride], axis=1))
        strides.append(np.full(h * w, float(pred.stride)))
    return DenseOutput(
        logits=ng.concat(logits, axis=0) if len(logits) > 1 else logits[0],
        boxes=ng.concat(boxes, axis=0) if len(boxes) > 1 else boxes[0],
        features=ng.concat(features, axis=0) if len(features) > 1 else features[0],
        locations=np.concatenate(locations, axis=0).astype(np.int64),
        centers=np.concatenate(centers, axis=0),
        strides=np.concatenate(strides, axis=0),
        image_size=preds[0].image_size,
    )


def select_from_dense(dense: DenseOutput, k: int) -> QuerySet:
    if k < 1:
        raise ValueError(f"select_queries: K must be >= 1, got {k}")
    scores = dense.scores
    # flat order already is (level, row, col); a stable sort keeps it as the tie-break
    order = np.argsort(-scores, kind="stable")
    top = order[:k]
    shortfall = len(dense) < k
    if shortfall:
        logger.warning(f"⚠️ Only {len(dense)} dense locations for K={k}; returning all of them")
    return QuerySet(
        scores=scores[top].copy(),
        boxes=ng.gather(dense.boxes, top, axis=0),
        features=ng.gather(dense.features, top, axis=0),
        provenance=[tuple(int(v) for v in dense.locations[i]) for i in top],
        indices=top.astype(np.int64),
        shortfall=shortfall,
    )


def select_queries(preds: Sequence[DenseLevelPrediction], k: int) -> QuerySet:
    """Top-K locations by objectness over all levels, ties by (level, row, col)"""
    return select_from_dense(flatten_predictions(preds), k)


class QueryGenerationNetwork(Module):
    """Shared dense head: 3x3 tower, then objectness / ltrb / query branches"""

    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        super().__init__()
        c, d = config.fpn_channels, config.d_model
        self.config = config
        self.tower = self.add_module("tower", Conv2d(rng, c, c))
        self.objectness = self.add_module("objectness", Conv2d(rng, c, 1, kernel=1, bias_fill=config.objectness_bias, gain=0.1))
        self.box = self.add_module("ltrb", Conv2d(rng, c, 4, kernel=1, gain=0.1))
        self.query_layers: List[Conv2d] = []
        if config.query_branch == "conv1x1":
            self.query_layers.append(self.add_module("query", Conv2d(rng, c, d, kernel=1, gain=1.0)))
        elif config.query_branch == "conv3x3":
            self.query_layers.append(self.add_module("query", Conv2d(rng, c, d, kernel=3, gain=1.0)))
        else:
            self.query_layers.append(self.add_module("query_stack", Conv2d(rng, c, c, kernel=3)))
            self.query_layers.append(self.add_module("query", Conv2d(rng, c, d, kernel=1, gain=1.0)))

    def _query_map(self, x: Array) -> Array:
        for i, layer in enumerate(self.query_layers):
            x = layer(x)
            if i < len(self.query_layers) - 1:
                x = ng.relu(x)
        return x

    def dense_head(self, pyramid: FeaturePyramid) -> List[DenseLevelPrediction]:
        channels = {feature.channels for feature in pyramid}
        if len(channels) != 1:
            raise ng.ShapeError(f"dense_head: pyramid levels disagree on channel width {sorted(channels)}")
        preds = []
        for feature in pyramid:
            h, w = feature.spatial
            x = ng.relu(self.tower(feature.map))
            logits = ng.reshape(self.objectness(x), (h, w))
            raw = ng.minimum(self.box(x), LTRB_LOG_CLAMP)
            ltrb = ng.mul(ng.exp(raw), float(feature.stride))
            preds.append(DenseLevelPrediction(feature.level, feature.stride, logits, ltrb,
                                              self._query_map(x), pyramid.image_size))
        return preds

    def generate(self, pyramid: FeaturePyramid, k: int) -> Tuple[DenseOutput, QuerySet]:
        dense = flatten_predictions(self.dense_head(pyramid))
        return dense, select_from_dense(dense, k)


def dense_head(pyramid: FeaturePyramid, params: QueryGenerationNetwork) -> List[DenseLevelPrediction]:
    return params.dense_head(pyramid)
