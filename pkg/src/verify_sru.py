import unittest

import numpy as np

from src import grad, pruning, sru
from src.errors import MaskMismatchError, ShapeError
from src.model import GATE_NAMES, ModelConfig, QrnnLayerWeights, QrnnModel
from src.pruning import PruneMask
from src.verify_fixtures import periodic_stream, toy_model, toy_stream


def pruned_toy(dropped, seed=0, dtype=np.float64):
    model = toy_model(seed, dtype=dtype)
    return pruning.apply_mask(model, PruneMask.from_dropped(model.config, [dropped]))


class TestApplyAndRemove(unittest.TestCase):
    def test_remove_restores_weights(self):
        model = pruned_toy([0, 3])
        update = sru.init_sru(model, seed=1)
        restored = sru.remove_sru(sru.apply_sru(model, update), update)
        for a, b in zip(model.weights(), restored.weights()):
            np.testing.assert_allclose(a, b, atol=1e-12)

    def test_apply_adds_rank_one_term_and_leaves_input_alone(self):
        model = pruned_toy([2])
        before = model.checksum()
        update = sru.init_sru(model, seed=1)
        updated = sru.apply_sru(model, update)
        self.assertEqual(model.checksum(), before)
        u, v = update.factors[0]["z"]
        np.testing.assert_allclose(updated.layers[0].w_z - model.layers[0].w_z, np.outer(u, v), atol=1e-12)
        self.assertEqual(updated.mask_digest, model.mask_digest)

    def test_folded_weights_match_training_view(self):
        model = pruned_toy([5])
        update = sru.init_sru(model, seed=2)
        stream = toy_stream(80, seed=4)
        self.assertAlmostEqual(
            grad.stream_cross_entropy(model, stream, grad.Extras(sru=update)),
            grad.stream_cross_entropy(sru.apply_sru(model, update), stream),
            places=10,
        )

    def test_zero_update_is_bit_exact(self):
        model = pruned_toy([4])
        update = sru.init_sru(model, seed=1)
        for factors in update.factors:
            for g, (u, v) in factors.items():
                factors[g] = (np.zeros_like(u), v)
        updated = sru.apply_sru(model, update)
        for a, b in zip(model.weights(), updated.weights()):
            np.testing.assert_array_equal(a, b)

    def test_one_by_two_weight_by_hand(self):
        config = ModelConfig(3, 1, 1, (1,), (2,))
        w = np.array([[1.0, 2.0]])
        model = QrnnModel(config, np.zeros((3, 1)), [QrnnLayerWeights(w, w.copy(), w.copy())])
        factors = {g: (np.array([1.0]), np.array([0.5, -0.5])) for g in GATE_NAMES}
        updated = sru.apply_sru(model, sru.SruUpdate([factors], model.mask_digest))
        for g in GATE_NAMES:
            np.testing.assert_array_equal(updated.layers[0].gate(g), [[1.5, 1.5]])

    def test_mask_mismatch_with_equal_counts(self):
        a, b = pruned_toy([0]), pruned_toy([1])
        self.assertEqual(a.config, b.config)
        update = sru.init_sru(a, seed=0)
        with self.assertRaises(MaskMismatchError) as ctx:
            sru.apply_sru(b, update)
        self.assertEqual(ctx.exception.expected, a.mask_digest)

    def test_layer_count_mismatch(self):
        model = pruned_toy([0])
        update = sru.init_sru(model, seed=0)
        update.factors = update.factors[:1]
        with self.assertRaises(ShapeError):
            sru.apply_sru(model, update)

    def test_factor_shape_mismatch(self):
        model = pruned_toy([0])
        update = sru.init_sru(model, seed=0)
        u, v = update.factors[1]["o"]
        update.factors[1]["o"] = (u[:-1], v)
        with self.assertRaises(ShapeError):
            sru.remove_sru(model, update)


class TestInit(unittest.TestCase):
    def test_factor_shapes_and_spread(self):
        model = toy_model(0, hidden=(64, 8), dtype=np.float32)
        update = sru.init_sru(model, seed=3, std=0.1)
        self.assertEqual(sorted(update.factors[0]), sorted(GATE_NAMES))
        u, v = update.factors[0]["f"]
        self.assertEqual((len(u), len(v)), (64, 16))
        self.assertEqual(u.dtype, np.float32)
        self.assertAlmostEqual(float(np.std(np.concatenate([u, v]))), 0.1, delta=0.03)

    def test_seeded(self):
        model = pruned_toy([1])
        a, b = sru.init_sru(model, seed=5), sru.init_sru(model, seed=5)
        np.testing.assert_array_equal(a.factors[1]["z"][1], b.factors[1]["z"][1])


class TestStorage(unittest.TestCase):
    def test_bytes_are_linear_in_element_width(self):
        update = sru.init_sru(toy_model(0), seed=0)
        self.assertEqual(update.element_count(), 3 * (12 + 16) + 3 * (8 + 12))
        self.assertEqual(sru.sru_storage_bytes(update, 4), 4 * 144 + 64)
        self.assertEqual(sru.sru_storage_bytes(update, 2), 2 * 144 + 64)
        self.assertEqual(sru.storage_bytes_for(toy_model(0).config, 4), sru.sru_storage_bytes(update, 4))

    def test_pruning_shrinks_the_update(self):
        self.assertLess(
            sru.sru_storage_bytes(sru.init_sru(pruned_toy([0, 1, 2]), 0)),
            sru.sru_storage_bytes(sru.init_sru(toy_model(0), 0)),
        )

    def test_reference_configuration_report(self):
        rows = sru.ptb_storage_report()
        self.assertEqual(len(rows), 6)
        full = next(r for r in rows if r["target_flops"] == 1.0 and r["element_width"] == 4)
        self.assertEqual(full["bytes"], 126064)
        self.assertEqual(full["achieved_flops"], 1.0)
        four_byte = [r["bytes"] for r in rows if r["element_width"] == 4]
        self.assertEqual(four_byte, sorted(four_byte, reverse=True))
        for row in rows:
            self.assertLessEqual(abs(row["achieved_flops"] - row["target_flops"]), pruning.TARGET_TOLERANCE)


class TestTrainSru(unittest.TestCase):
    def test_base_weights_stay_frozen(self):
        model = pruned_toy([0, 7], dtype=np.float32)
        before = model.checksum()
        update = sru.train_sru(
            model, toy_stream(400), steps=4, seed=2, batch_size=2, bptt=10, log_every=0, progress=False,
            flops_fraction=0.9,
        )
        self.assertEqual(model.checksum(), before)
        self.assertEqual(update.mask_digest, model.mask_digest)
        self.assertEqual(update.flops_fraction, 0.9)
        initial = sru.init_sru(model, seed=2)
        self.assertFalse(np.array_equal(initial.factors[0]["z"][0], update.factors[0]["z"][0]))

    def test_zero_steps_returns_the_initial_update(self):
        model = pruned_toy([3])
        update = sru.train_sru(model, toy_stream(200), steps=0, seed=6, batch_size=2, bptt=10, progress=False)
        initial = sru.init_sru(model, seed=6)
        for trained_layer, initial_layer in zip(update.factors, initial.factors):
            for g in GATE_NAMES:
                np.testing.assert_array_equal(trained_layer[g][0], initial_layer[g][0])
                np.testing.assert_array_equal(trained_layer[g][1], initial_layer[g][1])

    def test_training_lowers_the_loss(self):
        model = pruned_toy([0, 7])
        stream = periodic_stream()
        update = sru.train_sru(
            model, stream, steps=80, lr=2e-2, seed=1, batch_size=4, bptt=10, log_every=0, progress=False
        )
        initial = sru.init_sru(model, seed=1)
        self.assertLess(
            grad.stream_cross_entropy(model, stream, grad.Extras(sru=update)),
            grad.stream_cross_entropy(model, stream, grad.Extras(sru=initial)),
        )


if __name__ == '__main__':
    unittest.main()
