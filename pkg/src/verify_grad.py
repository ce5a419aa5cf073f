import unittest
from unittest.mock import MagicMock, patch

import numpy as np

from src import grad, sru
from src.errors import ConfigError, DataError, DivergenceError
from src.grad import Extras, ParamSet
from src.verify_fixtures import periodic_stream, random_tokens, toy_model, toy_stream

GRAD_CHECK = dict(hidden=(8, 8), embed=8, vocab=20, window=(2, 1))


def batch(seed=0, size=2, length=6):
    tokens = random_tokens(length + 1, seed=seed, batch=size)
    return tokens[:, :-1], tokens[:, 1:]


class TestFiniteDifferences(unittest.TestCase):
    def test_all_weights(self):
        model = toy_model(0, **GRAD_CHECK)
        tokens, targets = batch()
        report = grad.finite_diff_check(model, None, ParamSet.all_weights(model), tokens, targets, max_coordinates=80)
        self.assertTrue(report.passed(1e-4), report)

    def test_sru_factors(self):
        model = toy_model(1, **GRAD_CHECK)
        update = sru.init_sru(model, seed=2)
        tokens, targets = batch(seed=1)
        report = grad.finite_diff_check(
            model, Extras(sru=update), ParamSet.sru_factors(update), tokens, targets, max_coordinates=80
        )
        self.assertTrue(report.passed(1e-4), report)

    def test_requires_64_bit_parameters(self):
        model = toy_model(0, dtype=np.float32, **GRAD_CHECK)
        tokens, targets = batch()
        with self.assertRaises(ConfigError):
            grad.finite_diff_check(model, None, ParamSet.all_weights(model), tokens, targets)


class TestBackward(unittest.TestCase):
    def test_selector_must_match_tape(self):
        model = toy_model(0, **GRAD_CHECK)
        tokens, targets = batch()
        _, tape = grad.forward_with_tape(model, tokens, targets)
        with self.assertRaises(ConfigError):
            grad.backward(tape, ParamSet.sru_factors(sru.init_sru(model, 0)))

    def test_gradient_shapes_follow_parameters(self):
        model = toy_model(0, **GRAD_CHECK)
        tokens, targets = batch()
        _, tape = grad.forward_with_tape(model, tokens, targets)
        params = ParamSet.all_weights(model)
        grads = grad.backward(tape, params)
        self.assertEqual(set(grads), set(params.tensors))
        for name, array in params.tensors.items():
            self.assertEqual(grads[name].shape, array.shape)

    def test_loss_is_mean_cross_entropy(self):
        model = toy_model(0, **GRAD_CHECK)
        tokens, targets = batch()
        loss, tape = grad.forward_with_tape(model, tokens, targets)
        self.assertAlmostEqual(loss, tape.cross_entropy)
        self.assertEqual(tape.penalty, 0.0)
        self.assertGreater(loss, 0.0)

    def test_mismatched_targets(self):
        model = toy_model(0, **GRAD_CHECK)
        with self.assertRaises(DataError):
            grad.forward_with_tape(model, np.array([[1, 2]]), np.array([[3, 20]]))


class TestOptimizer(unittest.TestCase):
    def test_clip_by_global_norm(self):
        grads = {"a": np.array([3.0, 0.0]), "b": np.array([[4.0]])}
        clipped, norm = grad.clip_by_global_norm(grads, 1.0)
        self.assertAlmostEqual(norm, 5.0)
        self.assertAlmostEqual(grad.global_norm(clipped), 1.0, places=6)
        untouched, _ = grad.clip_by_global_norm(grads, 0.0)
        self.assertIs(untouched, grads)

    def test_adam_first_step_moves_by_learning_rate(self):
        param = np.array([1.0, -1.0])
        params = ParamSet(grad.Selector.ALL_WEIGHTS, {"w": param})
        grad.adam_step(grad.AdamState(lr=0.1), params, {"w": np.array([0.5, -2.0])})
        np.testing.assert_allclose(param, [0.9, -0.9], atol=1e-6)

    def test_adam_zero_gradient_leaves_parameters(self):
        param = np.array([0.25, -3.0, 7.5])
        params = ParamSet(grad.Selector.ALL_WEIGHTS, {"w": param})
        state = grad.AdamState(lr=0.1)
        for _ in range(3):
            grad.adam_step(state, params, {"w": np.zeros(3)})
        np.testing.assert_array_equal(param, [0.25, -3.0, 7.5])

    def test_adam_converges_on_quadratic(self):
        minimum = np.array([0.5, -0.3])
        param = np.array([2.0, 1.0])
        params = ParamSet(grad.Selector.ALL_WEIGHTS, {"w": param})
        state = grad.AdamState(lr=0.1)
        for _ in range(100):
            grad.adam_step(state, params, {"w": 2 * (param - minimum)})
        np.testing.assert_allclose(param, minimum, atol=0.1)

    def test_baseline_training_reduces_loss(self):
        model = toy_model(0, dtype=np.float32, vocab=7, hidden=(16, 8), embed=8)
        trained, history = grad.train_baseline(
            model, periodic_stream(), steps=60, lr=1e-2, batch_size=4, bptt=10, log_every=0, progress=False
        )
        self.assertLess(np.mean(history[-10:]), np.mean(history[:10]))
        self.assertNotEqual(trained.checksum(), model.checksum())

    def test_divergence_is_reported(self):
        model = toy_model(0, **GRAD_CHECK)
        with patch("src.grad.forward_with_tape", return_value=(float("nan"), MagicMock())):
            with self.assertRaises(DivergenceError) as ctx:
                grad.train_loop(model, ParamSet.all_weights(model), toy_stream(200), 5, 1e-3, 2, 5, progress=False)
        self.assertEqual(ctx.exception.step, 0)
        self.assertEqual(ctx.exception.exit_code, 4)

    def test_stream_too_short_for_a_block(self):
        blocks = grad.training_blocks(toy_stream(30), batch_size=2, bptt=20)
        with self.assertRaises(DataError):
            next(blocks)


class TestStreamCrossEntropy(unittest.TestCase):
    def test_chunking_does_not_matter(self):
        model = toy_model(0, **GRAD_CHECK)
        stream = toy_stream(120, seed=3)
        self.assertAlmostEqual(
            grad.stream_cross_entropy(model, stream, chunk=11), grad.stream_cross_entropy(model, stream), places=10
        )


if __name__ == '__main__':
    unittest.main()
