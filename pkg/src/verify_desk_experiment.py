"""
Desk-scale tradeoff experiment on the synthetic Markov corpus.

Minutes of CPU time; set QRNZ_SLOW=1 to run.
"""
import os
import statistics
import tempfile
import unittest

import numpy as np

from src import data, eval as metrics, gates as l0, grad, model as qrnn, pruning, sru
from src.model import ModelConfig

SLOW = bool(os.getenv("QRNZ_SLOW"))
DESK = dict(embed=32, hidden=(64, 32), window=(2, 1))
TRAIN = dict(batch_size=16, bptt=35, log_every=0, progress=False)


def desk_model(corpus, seed):
    config = ModelConfig(len(corpus.vocab), DESK["embed"], 2, DESK["hidden"], DESK["window"])
    trained, _ = grad.train_baseline(qrnn.init_model(config, seed), corpus.train, steps=1500, lr=3e-3, **TRAIN)
    return trained


@unittest.skipUnless(SLOW, "set QRNZ_SLOW=1 for the desk-scale experiment")
class TestDeskTradeoff(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        cls.tmp = tempfile.TemporaryDirectory()
        cls.addClassCleanup(cls.tmp.cleanup)
        data.generate_markov_corpus(cls.tmp.name, seed=1234, train_tokens=40000, valid_tokens=4000, test_tokens=4000)
        cls.corpus = data.load_corpus(cls.tmp.name, vocab_cap=2000)
        cls.model = desk_model(cls.corpus, seed=0)
        cls.baseline_ppl = metrics.perplexity(cls.model, cls.corpus.valid)

    def test_baseline_beats_unigram(self):
        oracle = data.unigram_perplexity(self.corpus.train, self.corpus.valid, len(self.corpus.vocab))
        self.assertLess(self.baseline_ppl, oracle)

    def test_pruning_never_helps(self):
        gate_sets = [
            gates for _, gates, _ in l0.lambda_sweep(
                self.model, self.corpus.train, [0.002, 0.005, 0.01, 0.02, 0.05, 0.1], steps=800, lr=2e-2, **TRAIN
            )
        ]
        stats = pruning.collect_activation_stats(self.model, self.corpus.train)
        rows = metrics.sweep(
            self.model, pruning.METHODS, (0.8, 0.6), self.corpus, stats=stats, gate_sets=gate_sets,
            bench_queries=0, progress=False,
        )
        with tempfile.TemporaryDirectory() as tmp:
            out = os.path.join(tmp, "desk.csv")
            metrics.write_csv(rows, out)
            with open(out) as f:
                self.assertEqual(len(f.read().splitlines()), 1 + len(rows))
        for row in rows[1:]:
            if row.method != "l0":
                self.assertTrue(row.ok, row.error)
            if row.ok:
                self.assertGreaterEqual(row.val_ppl, self.baseline_ppl, f"{row.method} @ {row.target_flops}")
        self.assertTrue(any(row.ok for row in rows if row.method == "l0"))

    def test_update_recovers_random_pruning(self):
        fraction = pruning.solve_operating_point(self.model, 0.6)
        pruned = pruning.apply_mask(self.model, pruning.random_mask(self.model, fraction, seed=0))
        update = sru.train_sru(pruned, self.corpus.train, steps=600, lr=5e-3, **TRAIN)
        self.assertLess(
            metrics.perplexity(pruned, self.corpus.valid, update), metrics.perplexity(pruned, self.corpus.valid)
        )

    def test_l0_matches_or_beats_filter_norm(self):
        gaps = []
        for seed in range(3):
            model = self.model if seed == 0 else desk_model(self.corpus, seed)
            gates = l0.train_gates(model, self.corpus.train, lam=0.02, steps=800, lr=2e-2, seed=seed, **TRAIN)
            mask, gated = l0.gates_to_mask_and_scale(model, gates)
            achieved = pruning.flops_fraction(model, mask)
            norm = pruning.apply_mask(
                model, pruning.filter_norm_mask(model, pruning.solve_operating_point(model, achieved))
            )
            gaps.append(metrics.perplexity(gated, self.corpus.valid) - metrics.perplexity(norm, self.corpus.valid))
        self.assertLessEqual(statistics.median(gaps), 0.0)


@unittest.skipUnless(SLOW, "set QRNZ_SLOW=1 for latency measurements")
class TestLatencyLinearity(unittest.TestCase):
    def test_latency_tracks_flops(self):
        model = qrnn.init_model(ModelConfig(500, 32, 2, (1536, 32), (2, 1)), seed=0)
        stream = data.TokenStream(np.random.default_rng(0).integers(0, 500, 400))
        flops, latency = [], []
        for target in (1.0, 0.9, 0.8, 0.7, 0.6, 0.5):
            mask = pruning.filter_norm_mask(model, pruning.solve_operating_point(model, target))
            pruned = pruning.apply_mask(model, mask)
            flops.append(pruning.flops_per_token(pruned))
            latency.append(metrics.bench_latency(pruned, stream).mean_ms)
        self.assertGreaterEqual(metrics.pearson_r2(flops, latency), 0.9)


if __name__ == '__main__':
    unittest.main()
