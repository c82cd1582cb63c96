#!/usr/bin/env python3
"""
🧠 QUERY-BASED R-CNN HEAD + CASCADE
===================================

One decoder stage:

    queries -> self-attention -> RoI-Align(boxes) -> [RoI-level self-attention]
            -> dynamic conv -> FFN -> (per-class sigmoid, box deltas)

The cascade chains stages with independent parameters. Stage 1 is the
query-based head (RoI-level self-attention when enabled); later stages are
standard decoders. Boxes handed from one stage to the next are detached.

Also holds the learnable-query baseline: trainable embeddings plus trainable
image-relative boxes standing in for the query generation network.
"""

import logging
import time
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

import ndgrad as ng
from backbone import FeaturePyramid
from config import ModelConfig
from ndgrad import Array, Module
from qgn import QuerySet

logger = logging.getLogger(__name__)

# largest log-scale change one stage may apply to a box side
DELTA_SCALE_CLAMP = float(np.log(1000.0 / 16.0))
AREA_FLOOR = 1e-12
# provenance level used for embedding queries
LEARNED_LEVEL = 0


class Linear(Module):
    """x [N,i] -> [N,o]"""

    def __init__(self, rng: np.random.Generator, in_features: int, out_features: int,
                 gain: float = 1.0, bias_fill: float = 0.0):
        super().__init__()
        self.weight = self.add_param("weight", ng.init_uniform(rng, (in_features, out_features), in_features, gain))
        self.bias = self.add_param("bias", ng.zeros_param((out_features,), bias_fill))

    def __call__(self, x: Array) -> Array:
        return ng.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        super().__init__()
        self.eps = eps
        self.gamma = self.add_param("gamma", ng.zeros_param((dim,), 1.0))
        self.beta = self.add_param("beta", ng.zeros_param((dim,)))

    def __call__(self, x: Array) -> Array:
        return ng.layer_norm(x, self.gamma, self.beta, self.eps)


# ---------------------------------------------------------------- RoI-Align

@dataclass
class RoiFeatures:
    grid: Array              # [K, C, S, S], ordered like the input boxes
    levels: np.ndarray       # [K] pyramid level each box was pooled from

    @property
    def size(self) -> int:
        return self.grid.shape[2]


def roi_levels(boxes: np.ndarray, pyramid: FeaturePyramid, canonical_level: int = 4,
               canonical_size: float = 224.0, reference_size: float = 800.0) -> np.ndarray:
    """Area heuristic: floor(canonical + log2(sqrt(area) / canonical_size * scale)), clamped"""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    area = np.clip(boxes[:, 2] - boxes[:, 0], 0.0, None) * np.clip(boxes[:, 3] - boxes[:, 1], 0.0, None)
    scale = reference_size / max(pyramid.image_size)
    ratio = np.sqrt(np.maximum(area, AREA_FLOOR)) / canonical_size * scale
    levels = np.floor(canonical_level + np.log2(ratio))
    return np.clip(levels, pyramid.lo, pyramid.hi).astype(np.int64)


def sample_points(boxes: np.ndarray, stride: int, size: int, sampling: int) -> Tuple[np.ndarray, np.ndarray]:
    """Map-space (u, v) of the sampling grid, [n, size*sampling, size*sampling] each"""
    n = boxes.shape[0]
    steps = (np.arange(size * sampling) + 0.5) / (size * sampling)    # fractions across the box
    x1, y1, x2, y2 = (boxes[:, i:i + 1] for i in range(4))
    xs = x1 + steps[None, :] * (x2 - x1)
    ys = y1 + steps[None, :] * (y2 - y1)
    u = np.broadcast_to(xs[:, None, :], (n, steps.size, steps.size)) / stride - 0.5
    v = np.broadcast_to(ys[:, :, None], (n, steps.size, steps.size)) / stride - 0.5
    return u, v


def roi_align(pyramid: FeaturePyramid, boxes, size: int = 7, sampling: int = 2,
              canonical_level: int = 4, canonical_size: float = 224.0,
              reference_size: float = 800.0) -> RoiFeatures:
    """Pool each box into a size x size grid of bin averages over sampling^2 bilinear points"""
    if size < 1 or sampling < 1:
        raise ValueError(f"roi_align: size and sampling must be >= 1, got {size}, {sampling}")
    box_data = boxes.data if isinstance(boxes, Array) else np.asarray(boxes, dtype=np.float64)
    box_data = box_data.reshape(-1, 4)
    k = box_data.shape[0]
    levels = roi_levels(box_data, pyramid, canonical_level, canonical_size, reference_size)
    channels = pyramid.channels
    chunks: List[Array] = []
    order: List[int] = []
    for feature in pyramid:
        members = np.flatnonzero(levels == feature.level)
        if members.size == 0:
            continue
        n = members.size
        u, v = sample_points(box_data[members], feature.stride, size, sampling)
        samples = ng.bilinear_sample(feature.map, u, v)                         # [C, n*(S*s)^2]
        samples = ng.reshape(samples, (channels, n, size, sampling, size, sampling))
        pooled = ng.mean(ng.mean(samples, axis=5), axis=3)                      # [C, n, S, S]
        chunks.append(ng.transpose(pooled, (1, 0, 2, 3)))
        order.extend(int(m) for m in members)
    if not chunks:
        raise ng.ShapeError("roi_align: no boxes given")
    stacked = ng.concat(chunks, axis=0) if len(chunks) > 1 else chunks[0]
    inverse = np.empty(k, dtype=np.int64)
    inverse[np.asarray(order, dtype=np.int64)] = np.arange(k)
    return RoiFeatures(ng.gather(stacked, inverse, axis=0), levels)


# ---------------------------------------------------------------- attention

class MultiHeadSelfAttention(Module):
    """Standard multi-head attention over the K rows, residual + layer norm"""

    def __init__(self, rng: np.random.Generator, dim: int, heads: int):
        super().__init__()
        if dim % heads:
            raise ValueError(f"MultiHeadSelfAttention: dim {dim} is not divisible by heads {heads}")
        self.dim, self.heads = dim, heads
        self.q = self.add_module("q", Linear(rng, dim, dim))
        self.k = self.add_module("k", Linear(rng, dim, dim))
        self.v = self.add_module("v", Linear(rng, dim, dim))
        self.out = self.add_module("out", Linear(rng, dim, dim))
        self.norm = self.add_module("norm", LayerNorm(dim))

    def _split(self, x: Array) -> Array:
        n = x.shape[0]
        return ng.transpose(ng.reshape(x, (n, self.heads, self.dim // self.heads)), (1, 0, 2))

    def attention_weights(self, x: Array) -> Array:
        """[heads, K, K] softmax(q k^T / sqrt(d_head))"""
        q, k = self._split(self.q(x)), self._split(self.k(x))
        logits = ng.mul(ng.matmul(q, ng.transpose(k, (0, 2, 1))), 1.0 / np.sqrt(self.dim // self.heads))
        return ng.softmax(logits, axis=-1)

    def __call__(self, x: Array) -> Array:
        if x.ndim != 2 or x.shape[1] != self.dim:
            raise ng.ShapeError(f"self-attention: expected [K,{self.dim}], got {x.shape}")
        n = x.shape[0]
        mixed = ng.matmul(self.attention_weights(x), self._split(self.v(x)))   # [h, K, dh]
        merged = ng.reshape(ng.transpose(mixed, (1, 0, 2)), (n, self.dim))
        return self.norm(ng.add(x, self.out(merged)))


def query_self_attention(queries: Array, params: MultiHeadSelfAttention) -> Array:
    return params(queries)


class RoiLevelSelfAttention(Module):
    """Attention across the per-RoI pooled vectors, added into the query stream"""

    def __init__(self, rng: np.random.Generator, channels: int, dim: int, heads: int):
        super().__init__()
        self.project = self.add_module("project", Linear(rng, channels, dim))
        self.attention = self.add_module("attention", MultiHeadSelfAttention(rng, dim, heads))

    def roi_vectors(self, roi: RoiFeatures) -> Array:
        k, c, s, _ = roi.grid.shape
        pooled = ng.mean(ng.reshape(roi.grid, (k, c, s * s)), axis=2)
        return self.project(pooled)

    def __call__(self, roi: RoiFeatures, queries: Array) -> Array:
        return ng.add(queries, self.attention(self.roi_vectors(roi)))


def roi_level_self_attention(roi_vectors: Array, params: RoiLevelSelfAttention) -> Array:
    return params.attention(roi_vectors)


# ---------------------------------------------------------------- dynamic conv

class DynamicConv(Module):
    """Per-query 1x1 kernels W1 [C,c_mid], W2 [c_mid,C] generated from the query vector"""

    def __init__(self, rng: np.random.Generator, dim: int, channels: int, c_mid: int, roi_size: int):
        super().__init__()
        self.channels, self.c_mid = channels, c_mid
        self.generator = self.add_module("generator", Linear(rng, dim, 2 * channels * c_mid, gain=0.5))
        self.project = self.add_module("project", Linear(rng, roi_size * roi_size * channels, dim))
        self.norm = self.add_module("norm", LayerNorm(dim))

    def kernels(self, queries: Array) -> Tuple[Array, Array]:
        k = queries.shape[0]
        c, m = self.channels, self.c_mid
        generated = self.generator(queries)
        first = ng.reshape(ng.gather(generated, np.arange(c * m), axis=1), (k, c, m))
        second = ng.reshape(ng.gather(generated, np.arange(c * m, 2 * c * m), axis=1), (k, m, c))
        return first, second

    def __call__(self, roi: RoiFeatures, queries: Array) -> Array:
        k, c, s, _ = roi.grid.shape
        if c != self.channels or queries.shape[0] != k:
            raise ng.ShapeError(f"dynamic_conv: roi {roi.grid.shape} vs queries {queries.shape}")
        first, second = self.kernels(queries)
        x = ng.transpose(ng.reshape(roi.grid, (k, c, s * s)), (0, 2, 1))          # [K, S^2, C]
        x = ng.relu(ng.matmul(x, first))                                        # [K, S^2, c_mid]
        x = ng.relu(ng.matmul(x, second))                                       # [K, S^2, C]
        x = self.project(ng.reshape(x, (k, s * s * c)))
        return self.norm(ng.add(queries, x))


def dynamic_conv(roi: RoiFeatures, queries: Array, params: DynamicConv) -> Array:
    return params(roi, queries)


# ---------------------------------------------------------------- boxes

def _box_column(boxes: Array, i: int) -> Array:
    return ng.reshape(ng.gather(boxes, [i], axis=1), (boxes.shape[0],))


def apply_deltas(boxes: Array, deltas: Array, image_size: Tuple[int, int]) -> Array:
    """x' = cx + dx*w, w' = w*exp(dw) (same for y, h), clipped to the image"""
    k = boxes.shape[0]
    x1, y1, x2, y2 = (_box_column(boxes, i) for i in range(4))
    dx, dy, dw, dh = (_box_column(deltas, i) for i in range(4))
    w, h = ng.sub(x2, x1), ng.sub(y2, y1)
    cx = ng.add(x1, ng.mul(w, 0.5))
    cy = ng.add(y1, ng.mul(h, 0.5))
    ncx, ncy = ng.add(cx, ng.mul(dx, w)), ng.add(cy, ng.mul(dy, h))
    nw = ng.mul(w, ng.exp(ng.clamp(dw, hi=DELTA_SCALE_CLAMP)))
    nh = ng.mul(h, ng.exp(ng.clamp(dh, hi=DELTA_SCALE_CLAMP)))
    height, width = image_size
    limits = (float(width), float(height), float(width), float(height))
    corners = [ng.sub(ncx, ng.mul(nw, 0.5)), ng.sub(ncy, ng.mul(nh, 0.5)),
               ng.add(ncx, ng.mul(nw, 0.5)), ng.add(ncy, ng.mul(nh, 0.5))]
    clipped = [ng.reshape(ng.clamp(col, 0.0, limit), (k, 1)) for col, limit in zip(corners, limits)]
    return ng.concat(clipped, axis=1)


# ---------------------------------------------------------------- stage

@dataclass
class StageOutput:
    class_logits: Array      # [K, num_classes]
    class_probs: Array       # [K, num_classes], independent sigmoids
    boxes: Array             # [K, 4] refined, clipped
    queries: Array           # [K, d]
    input_boxes: np.ndarray  # [K, 4] boxes the stage refined
    roi_levels: np.ndarray   # [K]


class RCNNStage(Module):
    """One decoder stage; `roi_attention` switches the RoI-level self-attention"""

    def __init__(self, config: ModelConfig, rng: np.random.Generator, roi_attention: bool):
        super().__init__()
        d, c = config.d_model, config.fpn_channels
        self.config = config
        self.self_attention = self.add_module("self_attention", MultiHeadSelfAttention(rng, d, config.heads))
        self.roi_attention: Optional[RoiLevelSelfAttention] = None
        if roi_attention:
            self.roi_attention = self.add_module("roi_attention", RoiLevelSelfAttention(rng, c, d, config.heads))
        self.dynamic = self.add_module("dynamic_conv", DynamicConv(rng, d, c, config.c_mid, config.roi_size))
        self.ffn_in = self.add_module("ffn_in", Linear(rng, d, config.dim_feedforward, gain=np.sqrt(2.0)))
        self.ffn_out = self.add_module("ffn_out", Linear(rng, config.dim_feedforward, d))
        self.ffn_norm = self.add_module("ffn_norm", LayerNorm(d))
        prior = config.class_prior_prob
        self.classifier = self.add_module("classifier", Linear(rng, d, config.num_classes, gain=0.1,
                                                               bias_fill=-np.log((1.0 - prior) / prior)))
        self.regressor = self.add_module("regressor", Linear(rng, d, 4, gain=0.01))

    def __call__(self, pyramid: FeaturePyramid, queries: Array, boxes: Array) -> StageOutput:
        if queries.shape[0] != boxes.shape[0]:
            raise ng.ShapeError(f"rcnn_stage: {queries.shape[0]} queries but {boxes.shape[0]} boxes")
        cfg = self.config
        x = self.self_attention(queries)
        roi = roi_align(pyramid, boxes, cfg.roi_size, cfg.roi_sampling, cfg.roi_canonical_level,
                        cfg.roi_canonical_size, cfg.roi_reference_size)
        if self.roi_attention is not None:
            x = self.roi_attention(roi, x)
        x = self.dynamic(roi, x)
        x = self.ffn_norm(ng.add(x, self.ffn_out(ng.relu(self.ffn_in(x)))))
        logits = self.classifier(x)
        refined = apply_deltas(boxes, self.regressor(x), pyramid.image_size)
        return StageOutput(logits, ng.sigmoid(logits), refined, x, boxes.data.copy(), roi.levels)


def rcnn_stage(pyramid: FeaturePyramid, queries: Array, boxes: Array, params: RCNNStage) -> StageOutput:
    return params(pyramid, queries, boxes)


class CascadeHead(Module):
    """n_stages decoders with independent parameters"""

    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        super().__init__()
        self.stages: List[RCNNStage] = []
        for i in range(config.n_stages):
            roi_attention = config.use_roi_self_attention and (i == 0 or config.roi_self_attention_all_stages)
            self.stages.append(self.add_module(f"stage{i + 1}", RCNNStage(config, rng, roi_attention)))

    def __call__(self, pyramid: FeaturePyramid, queries: Array, boxes: Array,
                 n_stages: Optional[int] = None, timings: Optional[List[float]] = None) -> List[StageOutput]:
        n_stages = len(self.stages) if n_stages is None else n_stages
        if not 1 <= n_stages <= len(self.stages):
            raise ValueError(f"cascade_forward: n_stages must be in [1, {len(self.stages)}], got {n_stages}")
        outputs: List[StageOutput] = []
        for stage in self.stages[:n_stages]:
            started = time.perf_counter() * 1000.0
            out = stage(pyramid, queries, boxes)
            if timings is not None:
                timings.append(time.perf_counter() * 1000.0 - started)
            outputs.append(out)
            queries, boxes = out.queries, out.boxes.detach()
        return outputs


def cascade_forward(pyramid: FeaturePyramid, initial: QuerySet, n_stages: int, params: CascadeHead) -> List[StageOutput]:
    return params(pyramid, initial.features, initial.boxes, n_stages)


# ---------------------------------------------------------------- learnable queries

class LearnableQueries(Module):
    """Trainable query embeddings and boxes stored as image-relative (cx, cy, w, h)"""

    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        super().__init__()
        k, d = config.num_queries, config.d_model
        self.embedding = self.add_param("embedding", ng.init_uniform(rng, (k, d), d, gain=1.0))
        self.boxes = self.add_param("boxes", Array(np.tile([0.5, 0.5, 1.0, 1.0], (k, 1)), requires_grad=True))

    def query_set(self, image_size: Tuple[int, int]) -> QuerySet:
        k = self.embedding.shape[0]
        height, width = image_size
        cx, cy, w, h = (_box_column(self.boxes, i) for i in range(4))
        half_w, half_h = ng.mul(w, 0.5), ng.mul(h, 0.5)
        corners = [ng.mul(ng.sub(cx, half_w), float(width)), ng.mul(ng.sub(cy, half_h), float(height)),
                   ng.mul(ng.add(cx, half_w), float(width)), ng.mul(ng.add(cy, half_h), float(height))]
        limits = (float(width), float(height), float(width), float(height))
        boxes = ng.concat([ng.reshape(ng.clamp(col, 0.0, limit), (k, 1)) for col, limit in zip(corners, limits)], axis=1)
        return QuerySet(
            scores=np.ones(k),
            boxes=boxes,
            features=self.embedding,
            provenance=[(LEARNED_LEVEL, 0, i) for i in range(k)],
            indices=np.arange(k, dtype=np.int64),
        )


def stage_predictions(outputs: Sequence[StageOutput]) -> List[Tuple[Array, Array]]:
    """(class_probs, boxes) per stage, the form the set loss consumes"""
    return [(out.class_probs, out.boxes) for out in outputs]
