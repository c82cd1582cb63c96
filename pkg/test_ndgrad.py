#!/usr/bin/env python3
"""
🧪 NDGRAD TESTS
===============
Primitive forwards, reverse-mode gradients and the finite-difference checker
"""

import logging
import unittest

import numpy as np

import ndgrad as ng
from ndgrad import Array, Graph

logger = logging.getLogger(__name__)


def param(values) -> Array:
    return Array(values, requires_grad=True)


class TestPrimitives(unittest.TestCase):
    """Forward values and shape rules"""

    def test_01_matmul_matches_hand_arithmetic(self):
        """2x2 matmul equals the triple-loop result"""
        a = np.array([[1.0, 2.0], [3.0, 4.0]])
        b = np.array([[5.0, 6.0], [7.0, 8.0]])
        out = ng.matmul(Array(a), Array(b)).data
        expected = [[sum(a[i, k] * b[k, j] for k in range(2)) for j in range(2)] for i in range(2)]
        np.testing.assert_array_equal(out, [[19.0, 22.0], [43.0, 50.0]])
        np.testing.assert_array_equal(out, expected)

    def test_02_relu_and_softmax(self):
        """relu clips negatives, softmax of a constant vector is uniform"""
        np.testing.assert_array_equal(ng.relu(Array([-1.0, 0.0, 2.0])).data, [0.0, 0.0, 2.0])
        for c in (-50.0, 0.0, 3.7, 900.0):
            np.testing.assert_allclose(ng.softmax(Array([c, c, c])).data, [1 / 3] * 3, rtol=0, atol=1e-15)

    def test_03_shape_mismatch_names_op_and_shapes(self):
        """Only scalar broadcasting is implicit"""
        with self.assertRaises(ng.ShapeError) as ctx:
            ng.add(Array(np.ones((2, 3))), Array(np.ones((3, 2))))
        self.assertIn("add", str(ctx.exception))
        self.assertIn("(2, 3)", str(ctx.exception))
        self.assertIn("(3, 2)", str(ctx.exception))
        with self.assertRaises(ng.ShapeError):
            ng.matmul(Array(np.ones((2, 3))), Array(np.ones((2, 3))))
        out = ng.mul(Array(np.ones((2, 3))), 2.0)
        np.testing.assert_array_equal(out.data, np.full((2, 3), 2.0))

    def test_04_strict_mode_rejects_non_finite(self):
        """NaN inputs are rejected only while strict mode is on"""
        bad = Array([1.0, np.nan])
        ng.set_strict(True)
        try:
            with self.assertRaises(ng.NonFiniteError):
                ng.exp(bad)
        finally:
            ng.set_strict(False)
        self.assertTrue(np.isnan(ng.exp(bad).data[1]))

    def test_05_conv2d_identity_kernel(self):
        """A centered one-hot 3x3 kernel with padding 1 copies the input"""
        x = np.arange(2 * 4 * 5, dtype=np.float64).reshape(2, 4, 5)
        kernel = np.zeros((2, 2, 3, 3))
        kernel[0, 0, 1, 1] = 1.0
        kernel[1, 1, 1, 1] = 1.0
        out = ng.conv2d(Array(x), Array(kernel), padding=1).data
        np.testing.assert_array_equal(out, x)

    def test_06_conv2d_stride_matches_naive_loop(self):
        """Strided conv equals a direct nested-loop correlation"""
        rng = np.random.default_rng(3)
        x = rng.normal(size=(2, 7, 6))
        k = rng.normal(size=(3, 2, 3, 3))
        b = rng.normal(size=3)
        out = ng.conv2d(Array(x), Array(k), Array(b), stride=2, padding=1).data
        xp = np.pad(x, ((0, 0), (1, 1), (1, 1)))
        expected = np.zeros((3, 4, 3))
        for o in range(3):
            for i in range(4):
                for j in range(3):
                    expected[o, i, j] = np.sum(xp[:, 2 * i:2 * i + 3, 2 * j:2 * j + 3] * k[o]) + b[o]
        np.testing.assert_allclose(out, expected, rtol=1e-12, atol=1e-12)

    def test_07_max_pool_ceil_mode(self):
        """Odd extents round up and never read padding"""
        x = Array(np.array([[[1.0, -5.0, 3.0], [2.0, 0.0, -1.0], [-7.0, 4.0, -2.0]]]))
        out = ng.max_pool2d(x).data
        np.testing.assert_array_equal(out, [[[2.0, 3.0], [4.0, -2.0]]])

    def test_08_bilinear_sample_clamps_and_interpolates(self):
        """Interior points interpolate, outside points clamp to the edge"""
        grid = np.array([[[0.0, 1.0], [2.0, 3.0]]])     # value = u + 2v
        out = ng.bilinear_sample(Array(grid), np.array([0.5, -3.0, 9.0]), np.array([0.25, 0.0, 9.0])).data
        np.testing.assert_allclose(out, [[1.0, 0.0, 3.0]])

    def test_09_forward_is_deterministic(self):
        """Same inputs give bitwise identical outputs"""
        rng = np.random.default_rng(0)
        x, w = rng.normal(size=(3, 8, 8)), rng.normal(size=(4, 3, 3, 3))
        first = ng.conv2d(Array(x), Array(w), padding=1).data
        second = ng.conv2d(Array(x), Array(w), padding=1).data
        self.assertEqual(first.tobytes(), second.tobytes())


class TestBackward(unittest.TestCase):
    """Reverse-mode accumulation"""

    def test_01_square(self):
        """d(sum(x*x))/dx = 2x"""
        x = param([3.0])
        with Graph() as graph:
            loss = ng.sum(ng.mul(x, x))
            ng.backward(graph, loss)
        np.testing.assert_allclose(x.grad, [6.0])

    def test_02_linearity(self):
        """sum(a + b) sends ones to both inputs"""
        a, b = param([1.0, 2.0, 3.0]), param([4.0, 5.0, 6.0])
        with Graph() as graph:
            ng.backward(graph, ng.sum(ng.add(a, b)))
        np.testing.assert_array_equal(a.grad, np.ones(3))
        np.testing.assert_array_equal(b.grad, np.ones(3))

    def test_03_sigmoid_at_zero(self):
        """sigmoid'(0) = 0.25"""
        x = param([0.0])
        with Graph() as graph:
            ng.backward(graph, ng.sum(ng.sigmoid(x)))
        np.testing.assert_allclose(x.grad, [0.25])

    def test_04_non_scalar_loss_rejected(self):
        """backward needs a single-element loss"""
        x = param([1.0, 2.0])
        with Graph() as graph:
            y = ng.mul(x, 2.0)
            with self.assertRaises(ng.ShapeError):
                ng.backward(graph, y)

    def test_05_fan_out_accumulates(self):
        """A value used twice receives both contributions"""
        x = param([2.0])
        with Graph() as graph:
            y = ng.add(ng.mul(x, 3.0), ng.mul(x, x))
            ng.backward(graph, ng.sum(y))
        np.testing.assert_allclose(x.grad, [3.0 + 4.0])

    def test_06_no_graph_no_recording(self):
        """Without an active graph nothing is recorded"""
        x = param([1.0])
        y = ng.mul(x, 2.0)
        self.assertTrue(y.requires_grad)
        self.assertIsNone(ng.current_graph())
        with Graph() as graph:
            self.assertIs(ng.current_graph(), graph)
            self.assertEqual(len(graph), 0)


class TestGradCheck(unittest.TestCase):
    """Central-difference oracle"""

    def setUp(self):
        self.rng = np.random.default_rng(11)

    def test_01_polynomial(self):
        """x^2 at 3"""
        error = ng.grad_check(lambda x: ng.sum(ng.mul(x, x)), Array([3.0]), step=1e-6)
        self.assertLessEqual(error, 1e-6)

    def test_02_softmax(self):
        """sum(softmax(x) * w) over 8 entries"""
        w = Array(self.rng.normal(size=8))
        error = ng.grad_check(lambda x: ng.sum(ng.mul(ng.softmax(x), w)), Array(self.rng.normal(size=8)))
        self.assertLessEqual(error, 1e-5)

    def test_03_conv3x3_batched(self):
        """sum(conv3x3(x, k)) on a 1x1x5x5 input"""
        k = Array(self.rng.normal(size=(1, 1, 3, 3)))
        error = ng.grad_check(lambda x: ng.sum(ng.conv2d(x, k, padding=1)), Array(self.rng.normal(size=(1, 1, 5, 5))))
        self.assertLessEqual(error, 1e-5)

    def test_04_structure_ops(self):
        """gather / concat / expand / transpose chains"""
        w = Array(self.rng.normal(size=(4, 6)))

        def f(x):
            y = ng.concat([ng.gather(x, [1, 1, 0], axis=0), ng.expand(ng.gather(x, [2], axis=0), (1, 3))], axis=0)
            y = ng.transpose(ng.reshape(ng.concat([y, y], axis=1), (6, 4)), (1, 0))
            return ng.sum(ng.mul(y, w))
        self.assertLessEqual(ng.grad_check(f, Array(self.rng.normal(size=(3, 3)))), 1e-5)

    def test_05_layer_norm_and_linear(self):
        """layer_norm(linear(x))"""
        weight, bias = Array(self.rng.normal(size=(5, 4))), Array(self.rng.normal(size=4))
        gamma, beta = Array(self.rng.normal(size=4)), Array(self.rng.normal(size=4))
        w = Array(self.rng.normal(size=(3, 4)))
        f = lambda x: ng.sum(ng.mul(ng.layer_norm(ng.linear(x, weight, bias), gamma, beta), w))  # noqa: E731
        self.assertLessEqual(ng.grad_check(f, Array(self.rng.normal(size=(3, 5)))), 1e-5)

    def test_06_bad_step_and_non_scalar(self):
        """step outside (0, 1e-3] and non-scalar f are rejected"""
        with self.assertRaises(ValueError):
            ng.grad_check(lambda x: ng.sum(x), Array([1.0]), step=0.1)
        with self.assertRaises(ng.ShapeError):
            ng.grad_check(lambda x: ng.mul(x, 2.0), Array([1.0, 2.0]))


class TestModule(unittest.TestCase):
    def test_01_named_parameters_and_count(self):
        """Dotted names in registration order; count sums sizes"""
        root, child = ng.Module(), ng.Module()
        child.add_param("w", ng.zeros_param((2, 3)))
        root.add_param("b", ng.zeros_param((4,)))
        root.add_module("child", child)
        self.assertEqual([name for name, _ in root.named_parameters()], ["b", "child.w"])
        self.assertEqual(root.num_parameters(), 10)


if __name__ == "__main__":
    unittest.main()
