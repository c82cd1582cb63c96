#!/usr/bin/env python3
"""
🤝 ASSIGNMENT + LOSSES
======================

Everything that pairs predictions with ground truth and scores the pairing:

- giou / pairwise IoU and GIoU matrices, differentiable GIoU loss
- focal loss (scalar and differentiable elementwise forms)
- exact Hungarian solver (shortest augmenting path with potentials)
- QGN matching quality Q_obj^(1-a) * Q_IoU^a restricted to in-box locations
- QGN loss (focal objectness + GIoU) and the per-stage R-CNN set loss
- proposal -> GT center deltas

Matching is recomputed every step and is never differentiated through.
"""

import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

import ndgrad as ng
from config import LossConfig
from ndgrad import Array
from qgn import Box, DenseOutput

logger = logging.getLogger(__name__)

PROB_EPS = 1e-12
AREA_EPS = 1e-9
# cost given to pairs a matching must not use; real costs stay within a few units
FORBIDDEN_COST = 1e6

LossWeights = LossConfig


class AssignmentError(ValueError):
    """Invalid matching input (non-finite costs, too few predictions)."""


class MatchQualityParams(BaseModel):
    """Exponent of the IoU term in the QGN matching quality"""
    model_config = ConfigDict(extra="forbid", frozen=True)
    alpha: float = Field(0.8, ge=0.0, le=1.0)


@dataclass
class SceneAnnotation:
    """Ground-truth boxes (x1, y1, x2, y2 pixels) and class ids of one image"""
    boxes: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.boxes = np.asarray(self.boxes, dtype=np.float64).reshape(-1, 4)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if self.boxes.shape[0] != self.labels.shape[0]:
            raise ValueError(f"{self.boxes.shape[0]} boxes but {self.labels.shape[0]} labels")
        if np.any(self.boxes[:, 2] <= self.boxes[:, 0]) or np.any(self.boxes[:, 3] <= self.boxes[:, 1]):
            raise ValueError("ground-truth boxes must satisfy x1 < x2 and y1 < y2")

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    def validate(self, image_size: Tuple[int, int], num_classes: int) -> None:
        height, width = image_size
        if np.any(self.boxes < 0) or np.any(self.boxes[:, [0, 2]] > width) or np.any(self.boxes[:, [1, 3]] > height):
            raise ValueError(f"ground-truth box outside the {width}x{height} image")
        if np.any(self.labels < 0) or np.any(self.labels >= num_classes):
            raise ValueError(f"label outside [0, {num_classes})")


@dataclass
class Assignment:
    """sigma[i] is the GT index matched to prediction i, or None"""
    sigma: List[Optional[int]]
    total_cost: float = 0.0
    unmatched_gts: List[int] = field(default_factory=list)

    @property
    def num_matched(self) -> int:
        return sum(1 for s in self.sigma if s is not None)

    def pairs(self) -> List[Tuple[int, int]]:
        """(prediction, gt) pairs ordered by prediction index"""
        return [(i, s) for i, s in enumerate(self.sigma) if s is not None]


# ---------------------------------------------------------------- box geometry

def box_area(box: Box) -> float:
    return max(0.0, box[2] - box[0]) * max(0.0, box[3] - box[1])


def giou(a: Box, b: Box) -> float:
    """Generalized IoU in [-1, 1]; the loss form is 1 - giou"""
    iw = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    ih = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = iw * ih
    union = box_area(a) + box_area(b) - inter
    iou = inter / union if union > 0 else 0.0
    enclosure = (max(a[2], b[2]) - min(a[0], b[0])) * (max(a[3], b[3]) - min(a[1], b[1]))
    if enclosure <= 0:
        return iou
    return iou - (enclosure - union) / enclosure


def iou(a: Box, b: Box) -> float:
    iw = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    ih = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = iw * ih
    union = box_area(a) + box_area(b) - inter
    return inter / union if union > 0 else 0.0


def _pairwise_terms(a: np.ndarray, b: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)[:, None, :]
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)[None, :, :]
    iw = np.clip(np.minimum(a[..., 2], b[..., 2]) - np.maximum(a[..., 0], b[..., 0]), 0.0, None)
    ih = np.clip(np.minimum(a[..., 3], b[..., 3]) - np.maximum(a[..., 1], b[..., 1]), 0.0, None)
    inter = iw * ih
    area_a = np.clip(a[..., 2] - a[..., 0], 0.0, None) * np.clip(a[..., 3] - a[..., 1], 0.0, None)
    area_b = np.clip(b[..., 2] - b[..., 0], 0.0, None) * np.clip(b[..., 3] - b[..., 1], 0.0, None)
    union = area_a + area_b - inter
    enclosure = (np.maximum(a[..., 2], b[..., 2]) - np.minimum(a[..., 0], b[..., 0])) * \
                (np.maximum(a[..., 3], b[..., 3]) - np.minimum(a[..., 1], b[..., 1]))
    return inter, union, enclosure


def pairwise_iou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    inter, union, _ = _pairwise_terms(a, b)
    return np.divide(inter, union, out=np.zeros_like(inter), where=union > 0)


def pairwise_giou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    inter, union, enclosure = _pairwise_terms(a, b)
    ious = np.divide(inter, union, out=np.zeros_like(inter), where=union > 0)
    slack = np.divide(enclosure - union, enclosure, out=np.zeros_like(inter), where=enclosure > 0)
    return ious - slack


def _columns(boxes: Array) -> List[Array]:
    n = boxes.shape[0]
    return [ng.reshape(ng.gather(boxes, [i], axis=1), (n,)) for i in range(4)]


def giou_loss(pred: Array, target: np.ndarray) -> Array:
    """Differentiable 1 - giou per row of pred [N,4] against constant target [N,4]"""
    target = np.asarray(target, dtype=np.float64).reshape(pred.shape)
    px1, py1, px2, py2 = _columns(pred)
    tx1, ty1, tx2, ty2 = (Array(target[:, i]) for i in range(4))
    area_p = ng.mul(ng.maximum(ng.sub(px2, px1), 0.0), ng.maximum(ng.sub(py2, py1), 0.0))
    area_t = Array(np.clip(target[:, 2] - target[:, 0], 0, None) * np.clip(target[:, 3] - target[:, 1], 0, None))
    iw = ng.maximum(ng.sub(ng.minimum(px2, tx2), ng.maximum(px1, tx1)), 0.0)
    ih = ng.maximum(ng.sub(ng.minimum(py2, ty2), ng.maximum(py1, ty1)), 0.0)
    inter = ng.mul(iw, ih)
    union = ng.add(ng.sub(ng.add(area_p, area_t), inter), AREA_EPS)
    enclosure = ng.add(ng.mul(ng.sub(ng.maximum(px2, tx2), ng.minimum(px1, tx1)),
                              ng.sub(ng.maximum(py2, ty2), ng.minimum(py1, ty1))), AREA_EPS)
    generalized = ng.sub(ng.div(inter, union), ng.div(ng.sub(enclosure, union), enclosure))
    return ng.sub(1.0, generalized)


# ---------------------------------------------------------------- focal loss

def focal_loss(p: float, is_positive: bool, gamma: float = 2.0, alpha_f: float = 0.25) -> float:
    p = min(max(float(p), PROB_EPS), 1.0 - PROB_EPS)
    if is_positive:
        return -alpha_f * (1.0 - p) ** gamma * np.log(p)
    return -(1.0 - alpha_f) * p ** gamma * np.log(1.0 - p)


def focal_loss_array(prob: Array, targets: np.ndarray, gamma: float = 2.0, alpha_f: float = 0.25) -> Array:
    """Elementwise focal loss of probabilities against constant 0/1 targets"""
    t = np.asarray(targets, dtype=np.float64).reshape(prob.shape)
    p = ng.clamp(prob, PROB_EPS, 1.0 - PROB_EPS)
    q = ng.sub(1.0, p)
    positive = ng.mul(ng.mul(ng.power(q, gamma), ng.log(p)), -alpha_f)
    negative = ng.mul(ng.mul(ng.power(p, gamma), ng.log(q)), -(1.0 - alpha_f))
    return ng.add(ng.mul(positive, Array(t)), ng.mul(negative, Array(1.0 - t)))


def focal_cost(prob: np.ndarray, gamma: float = 2.0, alpha_f: float = 0.25) -> np.ndarray:
    """Positive-minus-negative focal term used as a classification matching cost"""
    p = np.clip(prob, PROB_EPS, 1.0 - PROB_EPS)
    positive = alpha_f * (1.0 - p) ** gamma * -np.log(p)
    negative = (1.0 - alpha_f) * p ** gamma * -np.log(1.0 - p)
    return positive - negative


# ---------------------------------------------------------------- hungarian

def _solve_rows_le_cols(cost: np.ndarray) -> np.ndarray:
    """Min-cost assignment of every row (n <= m); returns the column per row"""
    n, m = cost.shape
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    p = np.zeros(m + 1, dtype=np.int64)      # p[j]: row (1-based) owning column j
    way = np.zeros(m + 1, dtype=np.int64)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(m + 1, np.inf)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            free = ~used[1:]
            reduced = cost[i0 - 1] - u[i0] - v[1:]
            better = free & (reduced < minv[1:])
            minv[1:][better] = reduced[better]
            way[1:][better] = j0
            candidates = np.where(free, minv[1:], np.inf)
            j1 = int(np.argmin(candidates)) + 1
            delta = candidates[j1 - 1]
            u[p[used]] += delta
            v[used] -= delta
            minv[~used] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    cols = np.full(n, -1, dtype=np.int64)
    for j in range(1, m + 1):
        if p[j]:
            cols[p[j] - 1] = j - 1
    return cols


def linear_assignment(cost: np.ndarray) -> List[Tuple[int, int]]:
    """Exact min-cost one-to-one pairs (row, col) covering min(N, M) entries"""
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise AssignmentError(f"cost must be a matrix, got shape {cost.shape}")
    if not np.all(np.isfinite(cost)):
        raise AssignmentError("cost matrix contains non-finite entries")
    n, m = cost.shape
    if n == 0 or m == 0:
        return []
    if m <= n:
        rows_for_cols = _solve_rows_le_cols(cost.T)
        return sorted((int(r), int(c)) for c, r in enumerate(rows_for_cols))
    cols_for_rows = _solve_rows_le_cols(cost)
    return [(int(r), int(c)) for r, c in enumerate(cols_for_rows)]


def hungarian(cost: np.ndarray) -> Assignment:
    """Optimal assignment of M ground truths (columns) to N >= M predictions (rows)"""
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise AssignmentError(f"cost must be an N x M matrix, got shape {cost.shape}")
    n, m = cost.shape
    if n < m:
        raise AssignmentError(f"hungarian needs N >= M, got N={n} predictions for M={m} ground truths")
    pairs = linear_assignment(cost)
    sigma: List[Optional[int]] = [None] * n
    total = 0.0
    for row, col in pairs:
        sigma[row] = col
        total += cost[row, col]
    return Assignment(sigma, float(total))


# ---------------------------------------------------------------- QGN matching

def match_quality(q_obj: float, q_iou: float, params: MatchQualityParams = MatchQualityParams()) -> float:
    """Q_obj^(1-alpha) * Q_IoU^alpha with 0^0 = 1"""
    return float(np.power(float(q_obj), 1.0 - params.alpha) * np.power(float(q_iou), params.alpha))


def qgn_assign(dense: DenseOutput, gt: SceneAnnotation,
               params: MatchQualityParams = MatchQualityParams()) -> Assignment:
    """One-to-one matching of GTs to dense locations whose centers lie inside them"""
    n = len(dense)
    if n == 0:
        raise AssignmentError("qgn_assign: no dense locations")
    m = len(gt)
    if m == 0:
        return Assignment([None] * n)
    cx, cy = dense.centers[:, 0:1], dense.centers[:, 1:2]
    boxes = gt.boxes[None, :, :]
    inside = (cx > boxes[..., 0]) & (cx < boxes[..., 2]) & (cy > boxes[..., 1]) & (cy < boxes[..., 3])
    quality = np.power(dense.scores[:, None], 1.0 - params.alpha) * \
        np.power(pairwise_iou(dense.boxes.data, gt.boxes), params.alpha)
    cost = np.where(inside, -quality, FORBIDDEN_COST)

    has_candidate = inside.any(axis=0)
    columns = np.flatnonzero(has_candidate)
    unmatched = [int(j) for j in np.flatnonzero(~has_candidate)]
    sigma: List[Optional[int]] = [None] * n
    total = 0.0
    for row, col in linear_assignment(cost[:, columns]):
        gt_index = int(columns[col])
        if not inside[row, gt_index]:
            unmatched.append(gt_index)
            continue
        sigma[row] = gt_index
        total += cost[row, gt_index]
    if unmatched:
        logger.warning(f"⚠️ {len(unmatched)} ground truth(s) without an in-box location left unassigned")
    return Assignment(sigma, float(total), sorted(unmatched))


def qgn_loss(dense: DenseOutput, gt: SceneAnnotation, assignment: Assignment,
             weights: LossWeights = LossWeights()) -> Array:
    """lambda_obj * focal objectness over all locations + lambda_giou * GIoU over matches"""
    pairs = assignment.pairs()
    num_pos = max(1, len(pairs))
    targets = np.zeros(len(dense))
    for row, _ in pairs:
        targets[row] = 1.0
    probs = ng.sigmoid(dense.logits)
    objectness = ng.mul(ng.sum(focal_loss_array(probs, targets, weights.focal_gamma, weights.focal_alpha)),
                        1.0 / num_pos)
    total = ng.mul(objectness, weights.lambda_obj)
    if pairs:
        rows = [row for row, _ in pairs]
        matched = ng.gather(dense.boxes, rows, axis=0)
        target_boxes = gt.boxes[[col for _, col in pairs]]
        box_term = ng.mul(ng.sum(giou_loss(matched, target_boxes)), 1.0 / num_pos)
        total = ng.add(total, ng.mul(box_term, weights.lambda_giou))
    return total


# ---------------------------------------------------------------- R-CNN set loss

@dataclass
class StageLoss:
    total: Array
    classification: float
    l1: float
    giou: float
    assignment: Assignment


def _image_scale(image_size: Tuple[int, int]) -> np.ndarray:
    height, width = image_size
    return np.array([width, height, width, height], dtype=np.float64)


def set_prediction_cost(class_probs: np.ndarray, boxes: np.ndarray, gt: SceneAnnotation,
                        image_size: Tuple[int, int], weights: LossWeights = LossWeights()) -> np.ndarray:
    """[K, M] matching cost: focal classification + normalized L1 + (1 - GIoU)"""
    scale = _image_scale(image_size)
    cls_cost = focal_cost(class_probs[:, gt.labels], weights.focal_gamma, weights.focal_alpha)
    l1_cost = np.abs((boxes / scale)[:, None, :] - (gt.boxes / scale)[None, :, :]).sum(axis=-1)
    giou_cost = 1.0 - pairwise_giou(boxes, gt.boxes)
    return weights.lambda_cls * cls_cost + weights.lambda_l1 * l1_cost + weights.lambda_giou_rcnn * giou_cost


def rcnn_stage_loss(class_probs: Array, boxes: Array, gt: SceneAnnotation, image_size: Tuple[int, int],
                    weights: LossWeights = LossWeights()) -> StageLoss:
    k, num_classes = class_probs.shape
    m = len(gt)
    if k < m:
        raise AssignmentError(f"rcnn_set_loss: K={k} predictions cannot cover M={m} ground truths")
    num_boxes = max(1, m)
    if m:
        assignment = hungarian(set_prediction_cost(class_probs.data, boxes.data, gt, image_size, weights))
    else:
        assignment = Assignment([None] * k)
    pairs = assignment.pairs()

    targets = np.zeros((k, num_classes))
    for row, col in pairs:
        targets[row, gt.labels[col]] = 1.0
    cls_loss = ng.mul(ng.sum(focal_loss_array(class_probs, targets, weights.focal_gamma, weights.focal_alpha)),
                      1.0 / num_boxes)
    total = ng.mul(cls_loss, weights.lambda_cls)
    l1_value = giou_value = 0.0
    if pairs:
        rows = [row for row, _ in pairs]
        cols = [col for _, col in pairs]
        scale = _image_scale(image_size)
        matched = ng.gather(boxes, rows, axis=0)
        inv_scale = Array(np.tile(1.0 / scale, (len(rows), 1)))
        target_norm = Array(gt.boxes[cols] / scale)
        l1 = ng.mul(ng.sum(ng.absolute(ng.sub(ng.mul(matched, inv_scale), target_norm))), 1.0 / num_boxes)
        g = ng.mul(ng.sum(giou_loss(matched, gt.boxes[cols])), 1.0 / num_boxes)
        total = ng.add(total, ng.add(ng.mul(l1, weights.lambda_l1), ng.mul(g, weights.lambda_giou_rcnn)))
        l1_value, giou_value = l1.item(), g.item()
    return StageLoss(total, cls_loss.item(), l1_value, giou_value, assignment)


def rcnn_stage_losses(predictions: Sequence[Tuple[Array, Array]], gt: SceneAnnotation,
                      image_size: Tuple[int, int], weights: LossWeights = LossWeights()) -> List[StageLoss]:
    """Independent matching and loss for every stage's (class_probs, boxes)"""
    return [rcnn_stage_loss(probs, boxes, gt, image_size, weights) for probs, boxes in predictions]


def rcnn_set_loss(predictions: Sequence[Tuple[Array, Array]], gt: SceneAnnotation,
                  image_size: Tuple[int, int], weights: LossWeights = LossWeights()) -> Array:
    """Set-prediction loss summed over stages (auxiliary supervision on every stage)"""
    stages = rcnn_stage_losses(predictions, gt, image_size, weights)
    total = stages[0].total
    for stage in stages[1:]:
        total = ng.add(total, stage.total)
    return total


# ---------------------------------------------------------------- deltas

def box_delta(gt: Box, proposal: Box) -> Tuple[float, float]:
    """Center offset of gt from proposal, normalized by proposal width/height"""
    pw, ph = proposal[2] - proposal[0], proposal[3] - proposal[1]
    if pw <= 0 or ph <= 0:
        raise AssignmentError(f"box_delta: degenerate proposal {tuple(proposal)}")
    gx, gy = (gt[0] + gt[2]) / 2.0, (gt[1] + gt[3]) / 2.0
    bx, by = (proposal[0] + proposal[2]) / 2.0, (proposal[1] + proposal[3]) / 2.0
    return (gx - bx) / pw, (gy - by) / ph
