#!/usr/bin/env python3
"""
🧪 ASSIGNMENT + LOSS TESTS
==========================
GIoU, focal loss, the Hungarian solver (brute force and scipy oracles),
QGN matching/loss and the per-stage set loss
"""

import itertools
import logging
import math
import unittest

import numpy as np
from scipy.optimize import linear_sum_assignment

import ndgrad as ng
from assignment import (AssignmentError, MatchQualityParams, SceneAnnotation, box_delta, focal_loss, giou,
                        giou_loss, hungarian, iou, linear_assignment, match_quality, pairwise_giou, qgn_assign,
                        qgn_loss, rcnn_set_loss, rcnn_stage_losses, set_prediction_cost)
from config import LossConfig
from ndgrad import Array, Graph
from qgn import DenseOutput

logger = logging.getLogger(__name__)


def brute_force(cost: np.ndarray):
    """Minimum total cost over all injective GT -> prediction maps"""
    n, m = cost.shape
    best, best_map = math.inf, None
    for rows in itertools.permutations(range(n), m):
        total = sum(cost[r, c] for c, r in enumerate(rows))
        if total < best - 1e-12:
            best, best_map = total, rows
    return best, best_map


def dense_output(centers, scores, boxes, image_size=(64, 64)) -> DenseOutput:
    centers = np.asarray(centers, dtype=np.float64)
    n = centers.shape[0]
    scores = np.clip(np.asarray(scores, dtype=np.float64), 1e-12, 1 - 1e-12)
    return DenseOutput(
        logits=Array(np.log(scores / (1.0 - scores)), requires_grad=True),
        boxes=Array(np.asarray(boxes, dtype=np.float64), requires_grad=True),
        features=Array(np.zeros((n, 4))),
        locations=np.stack([np.full(n, 3), np.zeros(n), np.arange(n)], axis=1).astype(np.int64),
        centers=centers,
        strides=np.full(n, 8.0),
        image_size=image_size,
    )


class TestGeometry(unittest.TestCase):
    def test_01_giou_values(self):
        """Identity, disjoint and overlapping pairs"""
        self.assertAlmostEqual(giou((0, 0, 2, 2), (0, 0, 2, 2)), 1.0)
        self.assertAlmostEqual(giou((0, 0, 1, 1), (2, 2, 3, 3)), -7.0 / 9.0)
        self.assertAlmostEqual(giou((0, 0, 2, 2), (1, 1, 3, 3)), 1.0 / 7.0 - 2.0 / 9.0)

    def test_02_giou_symmetric_and_bounded(self):
        """giou(a,b) = giou(b,a) in [-1, 1]; matrix form agrees"""
        rng = np.random.default_rng(0)
        xy = rng.uniform(0, 50, size=(20, 2))
        boxes = np.concatenate([xy, xy + rng.uniform(1, 20, size=(20, 2))], axis=1)
        matrix = pairwise_giou(boxes, boxes)
        for i in range(20):
            for j in range(20):
                self.assertAlmostEqual(matrix[i, j], giou(boxes[i], boxes[j]))
                self.assertAlmostEqual(giou(boxes[i], boxes[j]), giou(boxes[j], boxes[i]))
                self.assertTrue(-1.0 <= matrix[i, j] <= 1.0)

    def test_03_giou_loss_gradient(self):
        """Differentiable GIoU loss passes the central-difference check"""
        target = np.array([[2.0, 3.0, 12.0, 9.0], [0.0, 0.0, 5.0, 5.0]])
        pred = np.array([[1.0, 4.0, 10.0, 11.0], [1.0, 1.5, 7.0, 6.0]])
        self.assertLessEqual(ng.grad_check(lambda x: ng.sum(giou_loss(x, target)), Array(pred)), 1e-5)
        np.testing.assert_allclose(giou_loss(Array(target), target).data, 0.0, atol=1e-9)

    def test_04_box_delta(self):
        """Center offset normalized by proposal size"""
        self.assertEqual(box_delta((4, 4, 6, 6), (3, 3, 5, 5)), (0.5, 0.5))
        self.assertEqual(box_delta((1, 2, 3, 4), (1, 2, 3, 4)), (0.0, 0.0))
        self.assertEqual(box_delta((8, 0, 12, 4), (2, 2, 10, 6)), (0.5, -0.5))
        with self.assertRaises(AssignmentError):
            box_delta((0, 0, 1, 1), (2, 2, 2, 5))

    def test_05_annotation_validation(self):
        """Inverted boxes and mismatched label counts are rejected"""
        with self.assertRaises(ValueError):
            SceneAnnotation([[5, 5, 1, 9]], [0])
        with self.assertRaises(ValueError):
            SceneAnnotation([[0, 0, 1, 1]], [0, 1])
        with self.assertRaises(ValueError):
            SceneAnnotation([[0, 0, 10, 70]], [0]).validate((64, 64), 3)


class TestFocal(unittest.TestCase):
    def test_01_values(self):
        """p=0.5 positive / negative and the perfect prediction limit"""
        self.assertAlmostEqual(focal_loss(0.5, True), 0.25 * 0.25 * math.log(2), places=12)
        self.assertAlmostEqual(focal_loss(0.5, False), 0.75 * 0.25 * math.log(2), places=12)
        self.assertAlmostEqual(focal_loss(1.0, True), 0.0, places=12)
        self.assertAlmostEqual(focal_loss(0.0, False), 0.0, places=12)


class TestHungarian(unittest.TestCase):
    def test_01_small_fixtures(self):
        """Hand-checkable matrices"""
        result = hungarian(np.array([[7.0]]))
        self.assertEqual(result.sigma, [0])
        self.assertEqual(result.total_cost, 7.0)
        self.assertEqual(hungarian(np.array([[0.0, 1.0], [1.0, 0.0]])).sigma, [0, 1])
        result = hungarian(np.array([[4.0, 1.0, 3.0], [2.0, 0.0, 5.0], [3.0, 2.0, 2.0]]))
        self.assertEqual(result.sigma, [1, 0, 2])
        self.assertEqual(result.total_cost, 5.0)

    def test_02_matches_brute_force(self):
        """Optimal total over 200 random matrices up to 7x7, tall and wide"""
        rng = np.random.default_rng(1)
        for trial in range(200):
            n, m = (int(v) for v in rng.integers(1, 8, size=2))
            cost = rng.normal(size=(n, m))
            with self.subTest(trial=trial, n=n, m=m):
                if m <= n:
                    best, _ = brute_force(cost)
                    result = hungarian(cost)
                    self.assertAlmostEqual(result.total_cost, best, places=9)
                    self.assertEqual(result.num_matched, m)
                    self.assertEqual(sorted(s for s in result.sigma if s is not None), list(range(m)))
                else:
                    best, _ = brute_force(cost.T)
                    pairs = linear_assignment(cost)
                    self.assertEqual(len(pairs), n)
                    self.assertEqual(sorted(r for r, _ in pairs), list(range(n)))
                    self.assertAlmostEqual(sum(cost[r, c] for r, c in pairs), best, places=9)

    def test_03_matches_scipy(self):
        """Agrees with scipy's solver on larger and wide matrices"""
        rng = np.random.default_rng(2)
        for n, m in ((30, 30), (40, 7), (5, 12)):
            cost = rng.uniform(0, 10, size=(n, m))
            rows, cols = linear_sum_assignment(cost)
            pairs = linear_assignment(cost)
            self.assertEqual(len(pairs), min(n, m))
            self.assertAlmostEqual(sum(cost[r, c] for r, c in pairs), cost[rows, cols].sum(), places=9)

    def test_04_rejections(self):
        """Non-finite costs and N < M"""
        with self.assertRaises(AssignmentError):
            hungarian(np.array([[1.0, np.inf], [0.0, 1.0]]))
        with self.assertRaises(AssignmentError):
            hungarian(np.zeros((1, 2)))


class TestQgnMatching(unittest.TestCase):
    def test_01_match_quality(self):
        """Q_obj^(1-a) * Q_IoU^a with 0^0 = 1"""
        params = MatchQualityParams(alpha=0.8)
        self.assertAlmostEqual(match_quality(1.0, 1.0, params), 1.0)
        self.assertAlmostEqual(match_quality(0.0, 0.5, params), 0.0)
        self.assertAlmostEqual(match_quality(0.5, 0.8, params), 0.5 ** 0.2 * 0.8 ** 0.8, places=12)
        self.assertAlmostEqual(match_quality(0.0, 0.7, MatchQualityParams(alpha=1.0)), 0.7 ** 1.0)

    def test_02_forced_single_candidate(self):
        """Only one center inside the GT -> that location is matched"""
        dense = dense_output([[4, 4], [20, 20], [40, 40]], [0.1, 0.2, 0.9],
                             [[0, 0, 8, 8], [10, 10, 30, 30], [30, 30, 50, 50]])
        gt = SceneAnnotation([[14, 14, 26, 26]], [0])
        self.assertEqual(qgn_assign(dense, gt).sigma, [None, 0, None])

    def test_03_zero_gts(self):
        """No GTs -> nothing matched"""
        dense = dense_output([[4, 4], [12, 4]], [0.3, 0.6], [[0, 0, 8, 8], [8, 0, 16, 8]])
        result = qgn_assign(dense, SceneAnnotation(np.zeros((0, 4)), []))
        self.assertEqual(result.sigma, [None, None])
        self.assertEqual(result.num_matched, 0)

    def test_04_brute_force_over_in_box_candidates(self):
        """2 GTs, 3 candidates -> best one-to-one quality map"""
        centers = [[8, 8], [15, 8], [30, 8], [55, 55]]
        scores = [0.6, 0.9, 0.4, 0.99]
        boxes = [[0, 0, 18, 18], [5, 0, 35, 20], [12, 0, 40, 18], [50, 50, 60, 60]]
        gts = np.array([[0, 0, 20, 20], [10, 0, 40, 20]], dtype=np.float64)
        params = MatchQualityParams(alpha=0.8)
        dense = dense_output(centers, scores, boxes)
        result = qgn_assign(dense, SceneAnnotation(gts, [0, 1]), params)

        best, best_map = -math.inf, None
        for rows in itertools.permutations(range(4), 2):
            ok, total = True, 0.0
            for j, i in enumerate(rows):
                cx, cy = centers[i]
                x1, y1, x2, y2 = gts[j]
                if not (x1 < cx < x2 and y1 < cy < y2):
                    ok = False
                    break
                total += match_quality(dense.scores[i], iou(boxes[i], gts[j]), params)
            if ok and total > best:
                best, best_map = total, rows
        expected = [None] * 4
        for j, i in enumerate(best_map):
            expected[i] = j
        self.assertEqual(result.sigma, expected)

    def test_05_gt_without_candidate_is_reported(self):
        """A GT containing no location centers is left unmatched with a warning"""
        dense = dense_output([[4, 4], [12, 4]], [0.3, 0.6], [[0, 0, 8, 8], [8, 0, 16, 8]])
        gt = SceneAnnotation([[0, 0, 8, 8], [40, 40, 50, 50]], [0, 1])
        with self.assertLogs("assignment", level="WARNING"):
            result = qgn_assign(dense, gt)
        self.assertEqual(result.unmatched_gts, [1])
        self.assertEqual(result.sigma, [0, None])

    def test_06_match_quality_monotone(self):
        """Non-decreasing in each factor; alpha 0 leaves Q_obj alone"""
        grid = np.linspace(0.0, 1.0, 11)
        for alpha in (0.0, 0.3, 0.8, 1.0):
            params = MatchQualityParams(alpha=alpha)
            for fixed in grid:
                by_obj = [match_quality(q, fixed, params) for q in grid]
                by_iou = [match_quality(fixed, q, params) for q in grid]
                self.assertTrue(all(b >= a for a, b in zip(by_obj, by_obj[1:])), (alpha, fixed))
                self.assertTrue(all(b >= a for a, b in zip(by_iou, by_iou[1:])), (alpha, fixed))
        zero = MatchQualityParams(alpha=0.0)
        for q_obj in grid:
            for q_iou in grid:
                self.assertAlmostEqual(match_quality(q_obj, q_iou, zero), q_obj, places=12)


class TestQgnLoss(unittest.TestCase):
    def setUp(self):
        self.weights = LossConfig()

    def test_01_perfect_prediction(self):
        """p=1 at the matched location with the exact box -> loss 0"""
        dense = dense_output([[8, 8]], [1.0], [[2, 2, 14, 14]])
        gt = SceneAnnotation([[2, 2, 14, 14]], [0])
        loss = qgn_loss(dense, gt, qgn_assign(dense, gt), self.weights)
        self.assertAlmostEqual(loss.item(), 0.0, places=6)

    def test_02_zero_gts_is_background_focal(self):
        """No GT -> lambda_obj * sum of negative focal terms"""
        scores = [0.2, 0.7, 0.4]
        dense = dense_output([[4, 4], [12, 4], [20, 4]], scores, [[0, 0, 8, 8]] * 3)
        gt = SceneAnnotation(np.zeros((0, 4)), [])
        loss = qgn_loss(dense, gt, qgn_assign(dense, gt), self.weights)
        expected = self.weights.lambda_obj * sum(focal_loss(p, False) for p in dense.scores)
        self.assertAlmostEqual(loss.item(), expected, places=10)

    def test_03_two_location_hand_sum(self):
        """Positive + negative focal over the matched count plus weighted GIoU"""
        dense = dense_output([[8, 8], [40, 40]], [0.7, 0.3], [[1, 1, 15, 13], [30, 30, 50, 50]])
        gt = SceneAnnotation([[2, 2, 14, 14]], [0])
        assignment = qgn_assign(dense, gt)
        self.assertEqual(assignment.sigma, [0, None])
        loss = qgn_loss(dense, gt, assignment, self.weights)
        s = dense.scores
        expected = self.weights.lambda_obj * (focal_loss(s[0], True) + focal_loss(s[1], False)) \
            + self.weights.lambda_giou * (1.0 - giou((1, 1, 15, 13), (2, 2, 14, 14)))
        self.assertAlmostEqual(loss.item(), expected, places=6)

    def test_04_gradient_reaches_logits_and_boxes(self):
        """backward fills both dense inputs"""
        dense = dense_output([[8, 8], [40, 40]], [0.7, 0.3], [[1, 1, 15, 13], [30, 30, 50, 50]])
        gt = SceneAnnotation([[2, 2, 14, 14]], [0])
        with Graph() as graph:
            loss = qgn_loss(dense, gt, qgn_assign(dense, gt), self.weights)
            ng.backward(graph, loss)
        self.assertTrue(np.any(dense.logits.grad != 0))
        self.assertTrue(np.any(dense.boxes.grad[0] != 0))
        np.testing.assert_array_equal(dense.boxes.grad[1], 0.0)


class TestSetLoss(unittest.TestCase):
    def setUp(self):
        self.weights = LossConfig()
        self.size = (64, 64)

    def test_01_perfect_single(self):
        """K=1, M=1, perfect prob and box -> 0"""
        gt = SceneAnnotation([[4, 4, 20, 30]], [0])
        loss = rcnn_set_loss([(Array([[1.0]]), Array([[4.0, 4.0, 20.0, 30.0]]))], gt, self.size, self.weights)
        self.assertAlmostEqual(loss.item(), 0.0, places=6)

    def test_02_no_gts_is_background(self):
        """M=0 -> lambda_cls * negative focal over all entries"""
        probs = np.array([[0.1, 0.3], [0.6, 0.2]])
        gt = SceneAnnotation(np.zeros((0, 4)), [])
        loss = rcnn_set_loss([(Array(probs), Array(np.ones((2, 4)) * [0, 0, 5, 5]))], gt, self.size, self.weights)
        expected = self.weights.lambda_cls * sum(focal_loss(p, False) for p in probs.ravel())
        self.assertAlmostEqual(loss.item(), expected, places=10)

    def test_03_three_predictions_two_gts(self):
        """Assignment equals permutation enumeration and the loss its hand sum"""
        probs = np.array([[0.8, 0.1], [0.3, 0.6], [0.2, 0.2]])
        boxes = np.array([[10, 10, 30, 30], [34, 6, 60, 40], [0, 0, 64, 64]], dtype=np.float64)
        gt = SceneAnnotation([[32, 8, 58, 38], [12, 8, 28, 30]], [1, 0])
        cost = set_prediction_cost(probs, boxes, gt, self.size, self.weights)
        _, best_map = brute_force(cost)
        stages = rcnn_stage_losses([(Array(probs), Array(boxes))], gt, self.size, self.weights)
        sigma = stages[0].assignment.sigma
        for j, i in enumerate(best_map):
            self.assertEqual(sigma[i], j)

        w = self.weights
        scale = np.array([64, 64, 64, 64], dtype=np.float64)
        cls = l1 = gi = 0.0
        for i in range(3):
            for c in range(2):
                positive = sigma[i] is not None and gt.labels[sigma[i]] == c
                cls += focal_loss(probs[i, c], positive)
            if sigma[i] is not None:
                target = gt.boxes[sigma[i]]
                l1 += np.abs(boxes[i] / scale - target / scale).sum()
                gi += 1.0 - giou(boxes[i], target)
        expected = (w.lambda_cls * cls + w.lambda_l1 * l1 + w.lambda_giou_rcnn * gi) / 2.0
        self.assertAlmostEqual(stages[0].total.item(), expected, places=6)

    def test_04_too_few_predictions(self):
        """K < M names both counts"""
        gt = SceneAnnotation([[0, 0, 5, 5], [6, 6, 9, 9]], [0, 0])
        with self.assertRaises(AssignmentError) as ctx:
            rcnn_set_loss([(Array([[0.5]]), Array([[0, 0, 5, 5]]))], gt, self.size, self.weights)
        self.assertIn("K=1", str(ctx.exception))
        self.assertIn("M=2", str(ctx.exception))

    def test_05_stages_sum(self):
        """Multi-stage loss is the sum of independent stage losses"""
        gt = SceneAnnotation([[4, 4, 20, 30]], [1])
        stage_a = (Array([[0.2, 0.7], [0.4, 0.1]]), Array([[5.0, 3.0, 21.0, 28.0], [30, 30, 40, 40]]))
        stage_b = (Array([[0.1, 0.9], [0.3, 0.2]]), Array([[4.0, 4.0, 20.0, 29.0], [30, 30, 40, 40]]))
        total = rcnn_set_loss([stage_a, stage_b], gt, self.size, self.weights).item()
        parts = [s.total.item() for s in rcnn_stage_losses([stage_a, stage_b], gt, self.size, self.weights)]
        self.assertAlmostEqual(total, sum(parts), places=12)

    def test_06_invariant_to_prediction_order(self):
        """Permuting the K predictions of every stage leaves the loss unchanged"""
        rng = np.random.default_rng(4)
        gt = SceneAnnotation([[4, 4, 20, 30], [30, 10, 60, 40], [8, 40, 28, 62]], [0, 2, 1])
        stages = []
        for _ in range(2):
            corner = rng.uniform(0, 40, size=(6, 2))
            size = rng.uniform(6, 24, size=(6, 2))
            stages.append((rng.uniform(0.05, 0.95, size=(6, 3)), np.concatenate([corner, corner + size], axis=1)))
        expected = rcnn_set_loss([(Array(p), Array(b)) for p, b in stages], gt, self.size, self.weights).item()
        for seed in range(5):
            order = np.random.default_rng(seed).permutation(6)
            shuffled = [(Array(p[order]), Array(b[order])) for p, b in stages]
            total = rcnn_set_loss(shuffled, gt, self.size, self.weights).item()
            self.assertAlmostEqual(total, expected, places=10)


if __name__ == "__main__":
    unittest.main()
