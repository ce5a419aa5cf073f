import unittest

import numpy as np

from src import tensor
from src.errors import ShapeError
from src.tensor import OpCounter


class TestCountedOps(unittest.TestCase):
    def test_matmul_counts_multiplications_and_additions(self):
        counter = OpCounter()
        out = tensor.matmul(np.ones((3, 4)), np.ones((4, 5)), counter)
        self.assertEqual(out.shape, (3, 5))
        self.assertEqual(counter.multiplications, 60)
        self.assertEqual(counter.additions, 45)
        self.assertEqual(counter.flops(), 105)

    def test_matmul_shape_mismatch(self):
        with self.assertRaises(ShapeError) as ctx:
            tensor.matmul(np.ones((3, 4)), np.ones((5, 2)))
        self.assertIn("(3, 4)", str(ctx.exception))
        self.assertIsInstance(ctx.exception, ValueError)

    def test_elementwise_ops_count_and_check_shapes(self):
        counter = OpCounter()
        a, b = np.full(6, 2.0), np.full(6, 3.0)
        np.testing.assert_array_equal(tensor.mul(a, b, counter), np.full(6, 6.0))
        np.testing.assert_array_equal(tensor.add(a, b, counter), np.full(6, 5.0))
        np.testing.assert_array_equal(tensor.sub(a, b, counter), np.full(6, -1.0))
        tensor.one_minus(a, counter)
        self.assertEqual(counter.multiplications, 6)
        self.assertEqual(counter.additions, 18)
        with self.assertRaises(ShapeError):
            tensor.add(np.ones(3), np.ones(4))

    def test_counter_reset(self):
        counter = OpCounter()
        counter.record(3, 4)
        counter.reset()
        self.assertEqual(counter.flops(), 0)


class TestActivations(unittest.TestCase):
    def test_sigmoid_values(self):
        self.assertAlmostEqual(float(tensor.sigmoid(1.5986)), 0.8318, delta=1e-3)
        self.assertAlmostEqual(float(tensor.sigmoid(0.0)), 0.5, places=12)

    def test_sigmoid_is_stable_for_large_inputs(self):
        with np.errstate(over="raise"):
            values = tensor.sigmoid(np.array([-1000.0, 1000.0]))
        np.testing.assert_allclose(values, [0.0, 1.0])

    def test_log_softmax_normalizes_along_axis(self):
        logits = np.random.default_rng(0).normal(size=(7, 3))
        np.testing.assert_allclose(np.exp(tensor.log_softmax(logits, axis=0)).sum(axis=0), np.ones(3))
        np.testing.assert_allclose(tensor.softmax(logits, axis=0).sum(axis=0), np.ones(3))

    def test_cross_entropy_of_uniform_logits(self):
        self.assertAlmostEqual(tensor.cross_entropy(np.zeros(10), 4), np.log(10))
        with self.assertRaises(ShapeError):
            tensor.cross_entropy(np.zeros(10), 10)


class TestRandomnessAndChecksums(unittest.TestCase):
    def test_rng_per_purpose(self):
        a = tensor.rng_for(7, "init").normal(size=5)
        b = tensor.rng_for(7, "init").normal(size=5)
        c = tensor.rng_for(7, "mask").normal(size=5)
        np.testing.assert_array_equal(a, b)
        self.assertFalse(np.array_equal(a, c))

    def test_checksum_sees_dtype_and_values(self):
        x = np.arange(6, dtype=np.float32)
        self.assertEqual(tensor.checksum([x]), tensor.checksum([x.copy()]))
        self.assertNotEqual(tensor.checksum([x]), tensor.checksum([x.astype(np.float64)]))
        y = x.copy()
        y[3] += 1
        self.assertNotEqual(tensor.checksum([x]), tensor.checksum([y]))


if __name__ == '__main__':
    unittest.main()
