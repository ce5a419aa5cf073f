import unittest

import numpy as np

from src import model as qrnn, pruning
from src.errors import ConfigError, MissingPrerequisiteError, OperatingPointError
from src.model import ModelConfig
from src.pruning import PruneMask
from src.tensor import OpCounter
from src.verify_fixtures import random_tokens, toy_config, toy_model, toy_stream, zeroed_gates

DESK_CONFIG = ModelConfig(502, 32, 2, (64, 32), (2, 1))


def fuzzed_mask(config, seed):
    rng = np.random.default_rng(seed)
    kept = []
    for index, m in enumerate(config.hidden_sizes):
        if index == config.num_layers - 1:
            kept.append(tuple(range(m)))
            continue
        count = int(rng.integers(1, m + 1))
        kept.append(tuple(sorted(int(i) for i in rng.choice(m, size=count, replace=False))))
    return PruneMask(tuple(kept))


def permuted(model, order):
    """Same network with the first layer's filters listed in ``order``."""
    clone = model.copy()
    first, second = clone.layers[0], clone.layers[1]
    k = model.config.input_channels(1)
    columns = np.concatenate([block * k + order for block in range(model.config.window_sizes[1])])
    clone.layers[0] = qrnn.QrnnLayerWeights(*(first.gate(g)[order] for g in qrnn.GATE_NAMES))
    clone.layers[1] = qrnn.QrnnLayerWeights(*(second.gate(g)[:, columns] for g in qrnn.GATE_NAMES))
    return clone


class TestDropCount(unittest.TestCase):
    def test_floor_and_cap(self):
        self.assertEqual(pruning.drop_count(10, 0.25), 2)
        self.assertEqual(pruning.drop_count(10, 0.3), 3)
        self.assertEqual(pruning.drop_count(7, 3 / 7), 3)
        self.assertEqual(pruning.drop_count(4, 0.99), 3)
        self.assertEqual(pruning.drop_count(4, 0.0), 0)

    def test_fraction_range(self):
        with self.assertRaises(ConfigError):
            pruning.drop_count(10, 1.0)


class TestMasks(unittest.TestCase):
    def test_final_layer_cannot_be_pruned(self):
        cfg = toy_config()
        with self.assertRaises(ConfigError):
            PruneMask((tuple(range(12)), tuple(range(7)))).validate(cfg)

    def test_empty_layer_rejected(self):
        with self.assertRaises(ConfigError):
            PruneMask(((), tuple(range(8)))).validate(toy_config())

    def test_physical_pruning_equals_channel_zeroing(self):
        for seed in range(20):
            model = toy_model(seed, hidden=(12, 10, 8), window=(2, 1, 3))
            mask = fuzzed_mask(model.config, seed)
            pruned = pruning.apply_mask(model, mask)
            tokens = random_tokens(15, seed=seed)
            zeroed, _, _, _ = qrnn.run(model, tokens, gates=zeroed_gates(model, mask.kept))
            np.testing.assert_allclose(qrnn.forward(pruned, tokens), zeroed, atol=1e-5)

    def test_pruned_shapes_and_lineage(self):
        model = toy_model(0, hidden=(12, 10, 8), window=(2, 1, 3))
        mask = PruneMask.from_dropped(model.config, [[0, 5], [9]])
        pruned = pruning.apply_mask(model, mask)
        self.assertEqual(pruned.config.hidden_sizes, (10, 9, 8))
        self.assertEqual(pruned.layers[1].w_f.shape, (9, 10))
        self.assertEqual(pruned.layers[2].w_o.shape, (8, 27))
        again = pruning.apply_mask(pruned, PruneMask.from_dropped(pruned.config, [[0], []]))
        self.assertEqual(again.kept_filters[0], (2, 3, 4, 6, 7, 8, 9, 10, 11))
        self.assertNotEqual(again.mask_digest, pruned.mask_digest)
        self.assertEqual(model.config.hidden_sizes, (12, 10, 8))

    def test_filter_norm_drops_smallest_rows_lowest_index_first(self):
        model = toy_model(0)
        model.layers[0].w_z[:] = 1.0
        model.layers[0].w_z[7] = 0.5
        mask = pruning.filter_norm_mask(model, 0.25)
        self.assertEqual(mask.kept[0], tuple(i for i in range(12) if i not in (7, 0, 1)))

    def test_random_mask_is_seeded(self):
        model = toy_model(0)
        a = pruning.random_mask(model, 0.5, seed=3)
        self.assertEqual(a, pruning.random_mask(model, 0.5, seed=3))
        self.assertEqual(a.counts(), [6, 8])

    def test_random_masks_differ_across_seeds(self):
        model = toy_model(0)
        masks = {pruning.random_mask(model, 0.5, seed=s).kept for s in range(10)}
        self.assertGreater(len(masks), 1)

    def test_score_masks_follow_filter_permutation(self):
        model = toy_model(2)
        order = np.random.default_rng(5).permutation(12)
        shuffled = permuted(model, order)
        stats = pruning.collect_activation_stats(model, toy_stream(120))
        shuffled_stats = pruning.collect_activation_stats(shuffled, toy_stream(120))
        np.testing.assert_allclose(shuffled_stats.means[0], stats.means[0][order], rtol=1e-5)
        pairs = [
            (pruning.filter_norm_mask(model, 0.25), pruning.filter_norm_mask(shuffled, 0.25)),
            (
                pruning.mean_activation_mask(stats, 0.25, model.config),
                pruning.mean_activation_mask(shuffled_stats, 0.25, shuffled.config),
            ),
        ]
        for mask, shuffled_mask in pairs:
            dropped = set(range(12)) - set(mask.kept[0])
            shuffled_dropped = set(range(12)) - set(shuffled_mask.kept[0])
            self.assertEqual({int(order[i]) for i in shuffled_dropped}, dropped)

    def test_mean_activation_needs_stats(self):
        model = toy_model(0)
        with self.assertRaises(MissingPrerequisiteError) as ctx:
            pruning.mask_for_fraction("mean-activation", model, 0.5)
        self.assertIn("collect-stats", str(ctx.exception))

    def test_l0_is_not_fraction_driven(self):
        with self.assertRaises(ConfigError):
            pruning.mask_for_fraction("l0", toy_model(0), 0.5)


class TestActivationStats(unittest.TestCase):
    def test_lengths_match_layers(self):
        model = toy_model(1)
        stats = pruning.collect_activation_stats(model, toy_stream(100))
        self.assertEqual([len(m) for m in stats.means], [12, 8])
        self.assertEqual(stats.tokens, 100)
        self.assertTrue(all(np.all(m >= 0) for m in stats.means))

    def test_max_tokens_uses_the_first_tokens(self):
        model = toy_model(1)
        stream = toy_stream(300)
        head = pruning.collect_activation_stats(model, stream.head(30))
        limited = pruning.collect_activation_stats(model, stream, max_tokens=30, chunk=7)
        for a, b in zip(head.means, limited.means):
            np.testing.assert_allclose(a, b, rtol=1e-6)
        full = pruning.collect_activation_stats(model, stream)
        everything = pruning.collect_activation_stats(model, stream, max_tokens=len(stream))
        for a, b in zip(full.means, everything.means):
            np.testing.assert_array_equal(a, b)

    def test_mean_activation_mask_drops_quietest_filters(self):
        model = toy_model(1)
        stats = pruning.collect_activation_stats(model, toy_stream(100))
        mask = pruning.mean_activation_mask(stats, 0.25, model.config)
        quietest = set(np.argsort(stats.means[0], kind="stable")[:3].tolist())
        self.assertEqual(set(range(12)) - set(mask.kept[0]), quietest)


class TestFlops(unittest.TestCase):
    def test_analytic_count_matches_instrumented_forward(self):
        model = toy_model(0, hidden=(12, 10, 8), window=(2, 1, 3))
        configs = [model]
        for seed in range(20):
            configs.append(pruning.apply_mask(model, fuzzed_mask(model.config, seed)))
        for candidate in configs:
            counter = OpCounter()
            qrnn.forward(candidate, random_tokens(9, seed=1), counter)
            self.assertEqual(counter.flops(), 9 * pruning.flops_per_token(candidate))

    def test_mask_and_pruned_config_agree(self):
        model = toy_model(0)
        mask = pruning.random_mask(model, 0.5, seed=0)
        pruned = pruning.apply_mask(model, mask)
        self.assertEqual(pruning.flops_per_token(model, mask), pruning.flops_per_token(pruned))
        self.assertEqual(pruning.flops_fraction(model, None), 1.0)

    def test_desk_breakdown(self):
        flops = pruning.FlopsModel.of(DESK_CONFIG)
        self.assertEqual(flops.layers[0].conv, 24384)
        self.assertEqual(flops.layers[0].pooling, 320)
        self.assertEqual(flops.output, 31626)
        self.assertEqual(flops.layers[1].conv, 12192)
        self.assertEqual(flops.total, 68682)


class TestOperatingPoint(unittest.TestCase):
    def test_targets_within_tolerance(self):
        for target in (0.9, 0.8, 0.7, 0.6, 0.5):
            fraction = pruning.solve_operating_point(DESK_CONFIG, target)
            achieved = pruning.flops_fraction(DESK_CONFIG, pruning.uniform_mask_counts(DESK_CONFIG, fraction))
            self.assertLessEqual(abs(achieved - target), pruning.TARGET_TOLERANCE, msg=f"target {target}")

    def test_identity_target(self):
        self.assertEqual(pruning.solve_operating_point(DESK_CONFIG, 1.0), 0.0)

    def test_unreachable_target(self):
        with self.assertRaises(OperatingPointError) as ctx:
            pruning.solve_operating_point(DESK_CONFIG, 0.4)
        self.assertAlmostEqual(ctx.exception.minimum, 32268 / 68682, places=6)

    def test_invalid_target(self):
        with self.assertRaises(ConfigError):
            pruning.solve_operating_point(DESK_CONFIG, 0.0)

    def test_flops_decrease_with_fraction(self):
        fractions = [0.0, 0.1, 0.3, 0.5, 0.9]
        values = [pruning.flops_per_token(DESK_CONFIG, pruning.uniform_mask_counts(DESK_CONFIG, f)) for f in fractions]
        self.assertEqual(values, sorted(values, reverse=True))


class TestScoreEdgeCases(unittest.TestCase):
    def test_mean_activation_ties_drop_lowest_index_first(self):
        means = [np.ones(12, dtype=np.float32), np.ones(8, dtype=np.float32)]
        means[0][5] = 0.1
        mask = pruning.mean_activation_mask(pruning.ActivationStats(means, 10), 0.25, toy_config())
        self.assertEqual(set(range(12)) - set(mask.kept[0]), {5, 0, 1})

    def test_merge_is_token_weighted(self):
        a = pruning.ActivationStats([np.array([1.0, 2.0]), np.array([0.0])], 10)
        b = pruning.ActivationStats([np.array([4.0, 8.0]), np.array([3.0])], 30)
        merged = a.merge(b)
        self.assertEqual(merged.tokens, 40)
        np.testing.assert_allclose(merged.means[0], [3.25, 6.5])
        np.testing.assert_allclose(merged.means[1], [2.25])

    def test_merge_of_split_streams_matches_one_pass(self):
        model = toy_model(1)
        first, second = toy_stream(90, seed=1), toy_stream(60, seed=2)
        merged = pruning.collect_activation_stats(model, first).merge(pruning.collect_activation_stats(model, second))
        together = pruning.collect_activation_stats(model, [first, second])
        self.assertEqual(merged.tokens, 150)
        for a, b in zip(merged.means, together.means):
            np.testing.assert_allclose(a, b, rtol=1e-5)



if __name__ == '__main__':
    unittest.main()
