import math
import unittest

import numpy as np

from src import gates as l0, grad, model as qrnn, pruning
from src.errors import ConfigError
from src.gates import HardConcreteGates
from src.grad import Extras, ParamSet
from src.verify_fixtures import random_tokens, toy_config, toy_model, toy_stream

GRAD_CHECK = dict(hidden=(8, 8), embed=8, vocab=20, window=(2, 1))


def mixed_gates(config, seed=0):
    """Float64 gates with a few filters of layer 0 closed at test time."""
    gates = HardConcreteGates.init(config, lam=0.0, dtype=np.float64)
    rng = np.random.default_rng(seed)
    gates.log_alphas[0][:] = rng.uniform(-1.5, 3.0, gates.log_alphas[0].shape)
    gates.log_alphas[0][[1, 4, 9]] = -5.0
    return gates


class TestDistribution(unittest.TestCase):
    def test_open_probability_matches_monte_carlo(self):
        rng = np.random.default_rng(0)
        for la in (-3.0, 0.0, 3.0):
            u = rng.uniform(l0.NOISE_EPS, 1 - l0.NOISE_EPS, 100000)
            sampled = float(np.mean(l0.sample_gate(np.full(u.shape, la), u) > 0))
            self.assertAlmostEqual(l0.expected_l0_penalty([la]), sampled, delta=0.01, msg=f"log alpha {la}")

    def test_open_probability_closed_form(self):
        for la in (-2.0, 0.5):
            expected = 1 / (1 + math.exp(-(la + l0.BETA * math.log(11))))
            self.assertAlmostEqual(l0.expected_l0_penalty([la]), expected, places=12)

    def test_samples_stay_in_unit_interval(self):
        z = l0.sample_gate(np.linspace(-6, 6, 1000), np.random.default_rng(1))
        self.assertTrue(np.all((z >= 0) & (z <= 1)))
        self.assertTrue(np.any(z == 0) and np.any(z == 1))

    def test_test_gate_closes_below_threshold(self):
        threshold = -math.log(11)
        self.assertEqual(float(l0.test_gate(threshold - 1e-6)), 0.0)
        self.assertGreater(float(l0.test_gate(threshold + 1e-6)), 0.0)
        self.assertEqual(float(l0.test_gate(10.0)), 1.0)

    def test_sample_gate_at_boundaries(self):
        self.assertAlmostEqual(float(l0.sample_gate(0.0, 0.5)), 0.5, places=12)
        self.assertEqual(float(l0.sample_gate(0.0, l0.NOISE_EPS)), 0.0)
        self.assertEqual(float(l0.sample_gate(0.0, 1 - l0.NOISE_EPS)), 1.0)
        self.assertEqual(float(l0.sample_gate(-20.0, 0.5)), 0.0)
        self.assertEqual(float(l0.sample_gate(20.0, 0.5)), 1.0)

    def test_stretch_must_contain_unit_interval(self):
        with self.assertRaises(ConfigError):
            HardConcreteGates([np.zeros(3)], gamma=0.1)
        with self.assertRaises(ConfigError):
            HardConcreteGates([np.zeros(3)], zeta=0.9)


class TestGateSet(unittest.TestCase):
    def test_init_covers_prunable_layers_only(self):
        gates = HardConcreteGates.init(toy_config(hidden=(12, 10, 8), window=(2, 1, 1)), lam=0.1)
        self.assertEqual([len(la) for la in gates.log_alphas], [12, 10])
        self.assertTrue(all(la.dtype == np.float32 for la in gates.log_alphas))
        self.assertTrue(np.all(gates.log_alphas[0] == l0.INIT_LOG_ALPHA))
        self.assertEqual(gates.zero_counts(), [0, 0])

    def test_storage_is_four_bytes_per_filter(self):
        gates = HardConcreteGates.init(toy_config(), lam=0.1)
        self.assertEqual(gates.storage_bytes(), 48)
        self.assertEqual(l0.gate_storage_bytes(gates), 4 * 12)

    def test_copy_is_independent(self):
        gates = HardConcreteGates.init(toy_config(), lam=0.1, tag="a")
        clone = gates.copy()
        clone.log_alphas[0][0] = -9
        self.assertEqual(float(gates.log_alphas[0][0]), l0.INIT_LOG_ALPHA)
        self.assertEqual(clone.tag, "a")


class TestMaskAndScale(unittest.TestCase):
    def test_pruned_model_reproduces_gated_logits(self):
        model = toy_model(3)
        gates = mixed_gates(model.config)
        mask, pruned = l0.gates_to_mask_and_scale(model, gates)
        self.assertEqual(len(mask.kept[0]), 12 - gates.zero_counts()[0])
        self.assertNotIn(4, mask.kept[0])
        tokens = random_tokens(25, seed=2)
        gated, _, _, _ = qrnn.run(model, tokens, gates=gates.test_values() + [None])
        np.testing.assert_allclose(qrnn.forward(pruned, tokens), gated, atol=1e-5)

    def test_flops_follow_closed_gates(self):
        model = toy_model(3)
        mask, pruned = l0.gates_to_mask_and_scale(model, mixed_gates(model.config))
        self.assertEqual(pruning.flops_per_token(model) - pruning.flops_per_token(pruned), 3 * 146)
        self.assertEqual(pruned.mask_digest, mask.digest())

    def test_all_closed_layer_is_rejected(self):
        model = toy_model(0)
        gates = HardConcreteGates.init(model.config, lam=0.0)
        gates.log_alphas[0][:] = -10.0
        with self.assertRaises(ConfigError):
            l0.gates_to_mask_and_scale(model, gates)

    def test_gate_count_must_match_model(self):
        model = toy_model(0)
        gates = HardConcreteGates([np.zeros(5)])
        with self.assertRaises(ConfigError):
            l0.gates_to_mask_and_scale(model, gates)


class TestGateGradients(unittest.TestCase):
    def setUp(self):
        self.model = toy_model(4, **GRAD_CHECK)
        rng = np.random.default_rng(5)
        self.gates = HardConcreteGates.init(self.model.config, lam=0.05, dtype=np.float64)
        self.gates.log_alphas[0][:] = rng.uniform(-0.3, 0.3, self.gates.log_alphas[0].shape)
        self.noise = [rng.uniform(0.4, 0.6, la.shape) for la in self.gates.log_alphas]
        tokens = random_tokens(7, seed=6, batch=2)
        self.tokens, self.targets = tokens[:, :-1], tokens[:, 1:]

    def test_sampled_gates(self):
        report = grad.finite_diff_check(
            self.model,
            Extras(gates=self.gates, gate_noise=self.noise),
            ParamSet.gate_log_alphas(self.gates),
            self.tokens,
            self.targets,
        )
        self.assertTrue(report.passed(1e-4), report)

    def test_test_time_gates(self):
        report = grad.finite_diff_check(
            self.model, Extras(gates=self.gates), ParamSet.gate_log_alphas(self.gates), self.tokens, self.targets
        )
        self.assertTrue(report.passed(1e-4), report)

    def test_penalty_enters_the_loss(self):
        extras = Extras(gates=self.gates, gate_noise=self.noise)
        loss, tape = grad.forward_with_tape(self.model, self.tokens, self.targets, extras)
        self.assertAlmostEqual(tape.penalty, 0.05 * self.gates.penalty())
        self.assertAlmostEqual(loss, tape.cross_entropy + tape.penalty)


class TestTrainGates(unittest.TestCase):
    def test_weights_stay_frozen_and_gates_move(self):
        model = toy_model(0, dtype=np.float32)
        before = model.checksum()
        gates = l0.train_gates(
            model, toy_stream(400), lam=0.05, steps=6, batch_size=2, bptt=10, log_every=0, progress=False, tag="t"
        )
        self.assertEqual(model.checksum(), before)
        self.assertEqual(gates.log_alphas[0].dtype, np.float32)
        self.assertFalse(np.all(gates.log_alphas[0] == l0.INIT_LOG_ALPHA))
        self.assertEqual(gates.tag, "t")
        self.assertIn("flops_fraction", gates.extra)

    def test_seeded_noise_is_reproducible(self):
        model = toy_model(0, dtype=np.float32)
        kwargs = dict(lam=0.01, steps=4, seed=9, batch_size=2, bptt=10, log_every=0, progress=False)
        a = l0.train_gates(model, toy_stream(400), **kwargs)
        b = l0.train_gates(model, toy_stream(400), **kwargs)
        np.testing.assert_array_equal(a.log_alphas[0], b.log_alphas[0])

    def test_strong_penalty_closes_gates(self):
        model = toy_model(0, dtype=np.float32)
        kwargs = dict(steps=80, lr=0.1, batch_size=2, bptt=10, log_every=0, progress=False)
        gates = l0.train_gates(model, toy_stream(400), lam=10.0, **kwargs)
        self.assertGreaterEqual(gates.zero_counts()[0], 6)

    def test_no_penalty_closes_nothing(self):
        model = toy_model(0, dtype=np.float32)
        gates = l0.train_gates(
            model, toy_stream(400), lam=0.0, steps=60, lr=0.05, batch_size=2, bptt=10, log_every=0, progress=False
        )
        self.assertEqual(gates.zero_counts(), [0])

    def test_lambda_sweep_tags_each_run(self):
        model = toy_model(0, dtype=np.float32)
        rows = l0.lambda_sweep(
            model, toy_stream(400), [0.0, 0.5], steps=2, batch_size=2, bptt=10, log_every=0, progress=False
        )
        self.assertEqual([lam for lam, _, _ in rows], [0.0, 0.5])
        self.assertEqual([gates.tag for _, gates, _ in rows], ["l0-0", "l0-0.5"])


if __name__ == '__main__':
    unittest.main()
