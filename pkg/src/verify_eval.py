import csv
import json
import os
import tempfile
import unittest

import numpy as np

from src import eval as metrics, grad, model as qrnn, pruning, sru, tensor
from src.data import TokenStream
from src.errors import ConfigError, DataError
from src.gates import HardConcreteGates
from src.verify_fixtures import random_tokens, toy_corpus, toy_model, toy_stream

FRACTION_METHODS = ("random", "filter-norm", "mean-activation")


def closed_gates(model, closed, tag):
    gates = HardConcreteGates.init(model.config, lam=0.0, tag=tag, dtype=np.float64)
    gates.log_alphas[0][:closed] = -8.0
    return gates


class TestEvaluate(unittest.TestCase):
    def test_silent_model_is_uniform(self):
        model = toy_model(0)
        model.embedding[:] = 0.0
        stream = toy_stream(301, seed=2, split="test")
        report = metrics.evaluate(model, stream)
        targets = stream.ids[1:]
        self.assertAlmostEqual(report.perplexity, 20.0, delta=1e-3)
        self.assertAlmostEqual(report.r_at_3, float(np.mean(targets < 3)))
        self.assertAlmostEqual(report.top1, float(np.mean(targets == 0)))
        self.assertEqual(report.tokens_evaluated, 300)
        self.assertEqual(report.split, "test")

    def test_perplexity_is_exp_of_cross_entropy(self):
        model = toy_model(1)
        stream = toy_stream(200, seed=3)
        self.assertAlmostEqual(
            metrics.perplexity(model, stream), float(np.exp(grad.stream_cross_entropy(model, stream))), places=9
        )

    def test_recall_bounds_top1(self):
        model = toy_model(2)
        stream = toy_stream(200, seed=4)
        self.assertGreaterEqual(metrics.recall_at_3(model, stream), metrics.top1_accuracy(model, stream))

    def test_chunk_size_does_not_matter(self):
        model = toy_model(3)
        stream = toy_stream(150, seed=5)
        a = metrics.evaluate(model, stream, chunk=7)
        b = metrics.evaluate(model, stream)
        self.assertAlmostEqual(a.perplexity, b.perplexity, places=9)
        self.assertEqual(a.r_at_3, b.r_at_3)

    def test_batched_layout_gives_the_same_perplexity(self):
        model = toy_model(4)
        rows = random_tokens(61, seed=8, batch=3)
        per_row = [metrics.evaluate(model, TokenStream(row.astype(np.int64), "valid")) for row in rows]
        expected = float(np.exp(np.mean([np.log(report.perplexity) for report in per_row])))
        nll, states = 0.0, None
        for start in range(0, 60, 13):
            inputs, targets = rows[:, start:start + 13], rows[:, start + 1:start + 14]
            inputs = inputs[:, :targets.shape[1]]
            logits, states, _, _ = qrnn.run(model, inputs, states)
            log_probs = tensor.log_softmax(logits, axis=1)
            picked = np.take_along_axis(log_probs, targets[:, None, :], axis=1)
            nll -= float(np.sum(picked))
        batched = float(np.exp(nll / (3 * 60)))
        self.assertAlmostEqual(batched / expected, 1.0, delta=1e-9)

    def test_ties_rank_lower_ids_first(self):
        logits = np.zeros((5, 3))
        logits[4, 2] = 1.0
        ranks = metrics._ranks(logits, np.array([2, 0, 4]))
        self.assertEqual(ranks.tolist(), [2, 0, 0])

    def test_flops_fraction_against_reference(self):
        model = toy_model(0)
        mask = pruning.random_mask(model, 0.5, seed=1)
        pruned = pruning.apply_mask(model, mask)
        report = metrics.evaluate(pruned, toy_stream(50), reference=model.config)
        self.assertAlmostEqual(report.flops_fraction, pruning.flops_fraction(model, mask))
        self.assertEqual(metrics.evaluate(model, toy_stream(50)).flops_fraction, 1.0)

    def test_update_is_folded_in(self):
        model = toy_model(4)
        update = sru.init_sru(model, seed=1)
        stream = toy_stream(120, seed=6)
        expected = np.exp(grad.stream_cross_entropy(model, stream, grad.Extras(sru=update)))
        self.assertAlmostEqual(metrics.perplexity(model, stream, update), float(expected), places=9)

    def test_too_short(self):
        with self.assertRaises(DataError):
            metrics.evaluate(toy_model(0), toy_stream(1))

    def test_report_dict(self):
        report = metrics.evaluate(toy_model(0), toy_stream(30), tag="x")
        self.assertEqual(report.to_dict()["tag"], "x")
        self.assertIsNone(report.to_dict()["ms_per_query"])


class TestLatency(unittest.TestCase):
    def test_single_query(self):
        report = metrics.bench_latency(toy_model(0), toy_stream(10), queries=1, warmup=0)
        self.assertEqual(report.queries, 1)
        self.assertGreaterEqual(report.mean_ms, 0.0)
        self.assertEqual(report.std_ms, 0.0)

    def test_defaults(self):
        report = metrics.bench_latency(toy_model(0, dtype=np.float32), toy_stream(10))
        self.assertEqual((report.queries, report.warmup), (350, 50))

    def test_invalid_requests(self):
        with self.assertRaises(ConfigError):
            metrics.bench_latency(toy_model(0), toy_stream(10), queries=0)
        with self.assertRaises(DataError):
            metrics.bench_latency(toy_model(0), toy_stream(0))


class TestPearson(unittest.TestCase):
    def test_linear_series(self):
        self.assertAlmostEqual(metrics.pearson_r2([1, 2, 3, 4], [2, 4, 6, 8]), 1.0)
        self.assertAlmostEqual(metrics.pearson_r2([1, 2, 3], [3, 2, 1]), 1.0)
        self.assertLess(metrics.pearson_r2([1, 2, 3, 4], [1, 3, 2, 1]), 0.5)

    def test_undefined(self):
        with self.assertRaises(ConfigError):
            metrics.pearson_r2([1, 1, 1], [1, 2, 3])
        with self.assertRaises(ConfigError):
            metrics.pearson_r2([1], [1])
        with self.assertRaises(ConfigError):
            metrics.pearson_r2([1, 2], [1, 2, 3])


class TestSweep(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        cls.model = toy_model(0, dtype=np.float32)
        cls.corpus = toy_corpus()
        cls.stats = pruning.collect_activation_stats(cls.model, cls.corpus.train)

    def run_sweep(self, **kwargs):
        options = dict(
            methods=FRACTION_METHODS, targets=(0.8, 0.6), corpus=self.corpus, stats=self.stats,
            bench_queries=0, progress=False,
        )
        options.update(kwargs)
        return metrics.sweep(self.model, **options)

    def test_row_layout(self):
        rows = self.run_sweep()
        self.assertEqual(len(rows), 7)
        self.assertEqual((rows[0].method, rows[0].target_flops, rows[0].achieved_flops), ("unpruned", 1.0, 1.0))
        self.assertTrue(all(row.ok for row in rows))
        for row in rows[1:]:
            # one layer-0 filter is worth 146 of 2068 FLOPs
            self.assertLessEqual(abs(row.achieved_flops - row.target_flops), 73 / 2068)
            self.assertIsNone(row.ms_per_query)

    def test_full_target_matches_unpruned(self):
        rows = self.run_sweep(targets=(1.0,))
        for row in rows[1:]:
            self.assertEqual(row.achieved_flops, 1.0)
            self.assertEqual(row.val_ppl, rows[0].val_ppl)
            self.assertEqual(row.test_ppl, rows[0].test_ppl)

    def test_pruned_model_is_measured_against_its_source(self):
        pruned = pruning.apply_mask(self.model, pruning.PruneMask.from_dropped(self.model.config, [[0, 1]]))
        rows = metrics.sweep(
            pruned, ("random",), (0.9, 0.5), self.corpus, bench_queries=0, progress=False,
            reference=self.model.config,
        )
        share = (2068 - 2 * 146) / 2068
        self.assertAlmostEqual(rows[0].achieved_flops, share)
        self.assertAlmostEqual(rows[1].achieved_flops, share)
        self.assertLessEqual(abs(rows[2].achieved_flops - 0.5), 73 / 2068)
        self.assertEqual(rows[1].test_ppl, rows[0].test_ppl)

    def test_missing_prerequisites_become_error_rows(self):
        rows = self.run_sweep(methods=("mean-activation", "l0", "random"), stats=None, targets=(0.8,))
        by_method = {row.method: row for row in rows}
        self.assertIn("collect-stats", by_method["mean-activation"].error)
        self.assertIn("train-gates", by_method["l0"].error)
        self.assertTrue(by_method["random"].ok)
        self.assertIsNone(by_method["l0"].val_ppl)

    def test_unreachable_target_is_an_error_row(self):
        rows = self.run_sweep(methods=("random",), targets=(0.1,))
        self.assertFalse(rows[1].ok)
        self.assertIn("unreachable", rows[1].error)

    def test_unknown_method(self):
        with self.assertRaises(ConfigError):
            self.run_sweep(methods=("magnitude",))

    def test_l0_uses_the_closest_gate_set(self):
        gate_sets = [closed_gates(self.model, 3, "l0-a"), closed_gates(self.model, 6, "l0-b")]
        rows = self.run_sweep(methods=("l0",), gate_sets=gate_sets)
        self.assertAlmostEqual(rows[1].achieved_flops, 1 - 3 * 146 / 2068)
        self.assertAlmostEqual(rows[2].achieved_flops, 1 - 6 * 146 / 2068)
        far = self.run_sweep(methods=("l0",), gate_sets=gate_sets, targets=(0.4,))
        self.assertIn("closest", far[1].error)

    def test_threads_do_not_change_results(self):
        self.assertEqual(self.run_sweep(threads=1), self.run_sweep(threads=3))

    def test_ceiling_flags_rows(self):
        rows = self.run_sweep(methods=("random",), targets=(0.6,), ppl_ceiling=1.0)
        self.assertTrue(all(row.above_ceiling for row in rows))

    def test_update_rows(self):
        rows = self.run_sweep(methods=("random",), targets=(1.0, 0.8), with_sru=True, sru_steps=2)
        self.assertEqual([(r.method, r.target_flops, r.sru) for r in rows[1:]], [
            ("random", 1.0, False), ("random", 0.8, False), ("random", 0.8, True),
        ])
        self.assertEqual(rows[2].achieved_flops, rows[3].achieved_flops)
        self.assertTrue(rows[3].ok)

    def test_latency_is_measured_per_row(self):
        rows = self.run_sweep(methods=("random",), targets=(0.8,), bench_queries=3, bench_warmup=1)
        self.assertTrue(all(row.ms_per_query is not None for row in rows))


class TestSweepFiles(unittest.TestCase):
    def setUp(self):
        self.rows = [
            metrics.SweepRow("unpruned", 1.0, 1.0, 21.5, 22.25, 0.31, 0.05, False, 0),
            metrics.SweepRow("l0", 0.8, seed=0, error="Missing trained gates. Run `train-gates` first."),
        ]

    def test_csv_header_and_cells(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "sweep.csv")
            metrics.write_csv(self.rows, path)
            with open(path, encoding="utf-8") as f:
                lines = f.read().splitlines()
            self.assertEqual(lines[0], "method,target_flops,achieved_flops,val_ppl,test_ppl,r_at_3,ms_per_query,sru,seed")
            self.assertEqual(lines[1], "unpruned,1,1,21.5,22.25,0.31,0.05,0,0")
            with open(path, encoding="utf-8") as f:
                error_row = list(csv.DictReader(f))[1]
            self.assertEqual(error_row["val_ppl"], "")

    def test_json_keeps_status(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "sweep.json")
            metrics.write_json(self.rows, path)
            with open(path, encoding="utf-8") as f:
                loaded = json.load(f)
        self.assertEqual(loaded[1]["error"], self.rows[1].error)
        self.assertFalse(loaded[0]["above_ceiling"])


if __name__ == '__main__':
    unittest.main()
