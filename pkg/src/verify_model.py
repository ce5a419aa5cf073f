import math
import unittest

import numpy as np

from src import model as qrnn
from src.errors import ConfigError, DataError, ShapeError
from src.model import ModelConfig
from src.verify_fixtures import random_tokens, toy_config, toy_model


def naive_pool(z, f, o, c0):
    m, n = z.shape
    c = [float(v) for v in c0]
    hidden = np.zeros((m, n))
    for t in range(n):
        for i in range(m):
            c[i] = f[i, t] * c[i] + (1 - f[i, t]) * z[i, t]
            hidden[i, t] = o[i, t] * c[i]
    return hidden, np.array(c)


def scalar_forward(model, tokens):
    """Per-scalar loop over layers, timesteps and filters."""
    cfg = model.config
    xs = [[float(v) for v in model.embedding[t]] for t in tokens]
    for index, layer in enumerate(model.layers):
        r = cfg.window_sizes[index]
        c = [0.0] * cfg.hidden_sizes[index]
        out = []
        for t in range(len(xs)):
            stacked = []
            for j in range(r):
                source = t - r + 1 + j
                stacked.extend(xs[source] if source >= 0 else [0.0] * len(xs[0]))
            h = []
            for i in range(len(c)):
                a = [sum(w * s for w, s in zip(layer.gate(g)[i], stacked)) for g in ("z", "f", "o")]
                z, f, o = math.tanh(a[0]), 1 / (1 + math.exp(-a[1])), 1 / (1 + math.exp(-a[2]))
                c[i] = f * c[i] + (1 - f) * z
                h.append(o * c[i])
            out.append(h)
        xs = out
    return np.array([[sum(e * v for e, v in zip(row, h)) for h in xs] for row in model.embedding])


class TestModelConfig(unittest.TestCase):
    def test_last_hidden_size_must_match_embedding(self):
        with self.assertRaises(ConfigError):
            ModelConfig(20, 8, 2, (12, 10), (2, 1))

    def test_layer_counts_must_agree(self):
        with self.assertRaises(ConfigError):
            ModelConfig(20, 8, 2, (8,), (2, 1))

    def test_columns_and_prunable_layers(self):
        cfg = toy_config()
        self.assertEqual(cfg.columns(0), 16)
        self.assertEqual(cfg.columns(1), 12)
        self.assertEqual(list(cfg.prunable_layers), [0])

    def test_dict_round_trip(self):
        cfg = toy_config(hidden=(6, 5, 8), window=(2, 1, 3))
        self.assertEqual(ModelConfig.from_dict(cfg.to_dict()), cfg)


class TestFoPooling(unittest.TestCase):
    def test_single_step_example(self):
        hidden, c = qrnn.fo_pool(np.array([[1.0]]), np.array([[0.5]]), np.array([[1.0]]), np.zeros(1))
        self.assertAlmostEqual(float(c[0]), 0.5)
        self.assertAlmostEqual(float(hidden[0, 0]), 0.5)

    def test_matches_per_timestep_loop(self):
        rng = np.random.default_rng(3)
        z = np.tanh(rng.normal(size=(6, 11)))
        f = 1 / (1 + np.exp(-rng.normal(size=(6, 11))))
        o = 1 / (1 + np.exp(-rng.normal(size=(6, 11))))
        c0 = rng.normal(size=6)
        hidden, c = qrnn.fo_pool(z, f, o, c0)
        expected_hidden, expected_c = naive_pool(z, f, o, c0)
        np.testing.assert_allclose(hidden, expected_hidden, atol=1e-6)
        np.testing.assert_allclose(c, expected_c, atol=1e-6)

    def test_shape_mismatch(self):
        with self.assertRaises(ShapeError):
            qrnn.fo_pool(np.zeros((2, 3)), np.zeros((2, 3)), np.zeros((2, 4)), np.zeros(2))


class TestMaskedConv(unittest.TestCase):
    def test_two_wide_window_by_hand(self):
        a, b = 0.3, -0.7
        w = np.array([[a, b]])
        layer = qrnn.QrnnLayerWeights(w, w.copy(), w.copy())
        x = np.array([[0.4, 0.9]])
        z, f, o = qrnn.masked_conv(layer, x)
        expected = np.array([[b * 0.4, a * 0.4 + b * 0.9]])
        np.testing.assert_allclose(z, np.tanh(expected), atol=1e-12)
        np.testing.assert_allclose(f, 1 / (1 + np.exp(-expected)), atol=1e-12)
        np.testing.assert_allclose(o, f, atol=1e-12)

    def test_identity_weights(self):
        eye = np.eye(3)
        layer = qrnn.QrnnLayerWeights(eye, eye.copy(), eye.copy())
        x = np.random.default_rng(0).normal(size=(3, 5))
        z, f, _ = qrnn.masked_conv(layer, x)
        np.testing.assert_allclose(z, np.tanh(x), atol=1e-12)
        np.testing.assert_allclose(f, 1 / (1 + np.exp(-x)), atol=1e-12)


class TestForward(unittest.TestCase):
    def test_matches_scalar_loop(self):
        model = qrnn.init_model(ModelConfig(5, 2, 2, (3, 2), (2, 1)), 4, dtype=np.float64)
        tokens = np.array([3, 0, 4])
        np.testing.assert_allclose(qrnn.forward(model, tokens), scalar_forward(model, tokens), atol=1e-12)

    def test_step_matches_batch_forward(self):
        for seed in range(20):
            model = toy_model(seed)
            tokens = random_tokens(int(np.random.default_rng(seed).integers(1, 65)), seed=seed)
            logits = qrnn.forward(model, tokens)
            states = qrnn.init_states(model)
            for t, token in enumerate(tokens):
                step_logits, states = qrnn.step(model, states, int(token))
                np.testing.assert_allclose(step_logits, logits[:, t], atol=1e-5)

    def test_batched_forward_matches_single_sequences(self):
        model = toy_model(1)
        tokens = random_tokens(9, seed=4, batch=3)
        logits = qrnn.forward(model, tokens)
        self.assertEqual(logits.shape, (3, 20, 9))
        for b in range(3):
            np.testing.assert_allclose(logits[b], qrnn.forward(model, tokens[b]), atol=1e-10)

    def test_convolution_is_causal(self):
        model = toy_model(2)
        tokens = random_tokens(12, seed=5)
        changed = tokens.copy()
        changed[7] = (changed[7] + 1) % 20
        a, b = qrnn.forward(model, tokens), qrnn.forward(model, changed)
        np.testing.assert_array_equal(a[:, :7], b[:, :7])
        self.assertFalse(np.allclose(a[:, 7:], b[:, 7:]))

    def test_chunked_run_carries_state(self):
        model = toy_model(3)
        tokens = random_tokens(20, seed=6)
        full = qrnn.forward(model, tokens)
        first, states, _, _ = qrnn.run(model, tokens[:8])
        second, _, _, _ = qrnn.run(model, tokens[8:], states)
        np.testing.assert_allclose(np.concatenate([first, second], axis=1), full, atol=1e-10)

    def test_out_of_range_token(self):
        with self.assertRaises(DataError):
            qrnn.forward(toy_model(), np.array([0, 20]))

    def test_step_needs_initialized_states(self):
        model = toy_model()
        with self.assertRaises(ShapeError):
            qrnn.step(model, None, 0)
        with self.assertRaises(ShapeError):
            qrnn.step(model, qrnn.init_states(model)[:1], 0)

    def test_weight_tying(self):
        model = toy_model()
        self.assertIs(model.output_projection, model.embedding)


class TestModelUtilities(unittest.TestCase):
    def test_init_is_deterministic_and_float32_by_default(self):
        a = qrnn.init_model(toy_config(), 11)
        b = qrnn.init_model(toy_config(), 11)
        self.assertEqual(a.dtype, np.float32)
        self.assertEqual(a.checksum(), b.checksum())
        self.assertNotEqual(a.checksum(), qrnn.init_model(toy_config(), 12).checksum())

    def test_astype_and_copy(self):
        model = qrnn.init_model(toy_config(), 0)
        wide = qrnn.astype(model, np.float64)
        self.assertEqual(wide.dtype, np.float64)
        self.assertEqual(wide.layers[1].w_o.dtype, np.float64)
        clone = model.copy()
        clone.layers[0].w_z[0, 0] += 1
        self.assertNotEqual(clone.checksum(), model.checksum())

    def test_unpruned_mask_digest(self):
        self.assertEqual(toy_model().mask_digest, "unpruned")
        self.assertEqual(len(qrnn.digest_kept(((0, 1), (0,)))), 16)


if __name__ == '__main__':
    unittest.main()
