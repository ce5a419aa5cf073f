import csv
import io
import os
import tempfile
import unittest
from contextlib import redirect_stderr, redirect_stdout
from unittest.mock import patch

import numpy as np
import yaml

from src import main as cli, model as qrnn, pruning, storage
from src.eval import LatencyReport
from src.verify_fixtures import random_tokens

SMALL_CONFIG = {
    "seed": 0,
    "corpus_dir": None,
    "progress": False,
    "model": {"vocab_cap": 30, "embed": 8, "hidden": [12, 8], "window": [2, 1]},
    "baseline": {"steps": 2, "lr": 0.01, "batch_size": 4, "bptt": 10, "clip_norm": 0.25, "log_every": 0},
    "stats": {"max_tokens": None},
    "gates": {"lambda": 0.01, "steps": 2, "lr": 0.05, "batch_size": 4, "bptt": 10, "log_every": 0},
    "sru": {"steps": 2, "lr": 0.005, "batch_size": 4, "bptt": 10, "element_width": 4},
    "bench": {"warmup": 1},
    "sweep": {"methods": ["random", "filter-norm"], "targets": [1.0, 0.8], "threads": 1},
    "corpus": {"seed": 7, "vocab_size": 40, "train_tokens": 1500, "valid_tokens": 300, "test_tokens": 300},
}


class CliTestCase(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        cls.tmp = tempfile.TemporaryDirectory()
        cls.corpus = os.path.join(cls.tmp.name, "corpus")
        cls.config = os.path.join(cls.tmp.name, "config.yml")
        with open(cls.config, "w") as f:
            yaml.safe_dump(dict(SMALL_CONFIG, corpus_dir=cls.corpus), f)
        env = patch.dict(os.environ, {"QRNZ_CORPUS_DIR": "", "QRNZ_THREADS": "", "QRNZ_PROGRESS": ""})
        env.start()
        cls.addClassCleanup(env.stop)
        cls.addClassCleanup(cls.tmp.cleanup)
        assert cls.run_cli("gen-corpus", "--out", cls.corpus)[0] == 0
        cls.baseline = cls.path("baseline.qz")
        assert cls.run_cli("train-baseline", "--out", cls.baseline)[0] == 0

    @classmethod
    def path(cls, name):
        return os.path.join(cls.tmp.name, name)

    @classmethod
    def run_cli(cls, *argv):
        out, err = io.StringIO(), io.StringIO()
        with redirect_stdout(out), redirect_stderr(err):
            code = cli.main(["--config", cls.config, "--quiet", *argv])
        return code, out.getvalue(), err.getvalue()


class TestTraining(CliTestCase):
    def test_checkpoint_and_stamp(self):
        checkpoint = storage.load(self.baseline)
        self.assertEqual(checkpoint.model.config.hidden_sizes, (12, 8))
        self.assertEqual(checkpoint.meta["trained_steps"], 2)
        with open(f"{self.baseline}.stamp.yml") as f:
            stamp = yaml.safe_load(f)
        self.assertEqual(stamp["command"], "train-baseline")
        self.assertEqual(stamp["params"]["steps"], 2)
        self.assertEqual(stamp["checkpoint_format"], storage.VERSION)

    def test_zero_steps(self):
        out = self.path("untrained.qz")
        self.assertEqual(self.run_cli("train-baseline", "--steps", "0", "--out", out)[0], 0)
        self.assertEqual(storage.load(out).meta["trained_steps"], 0)

    def test_same_seed_same_bytes(self):
        again = self.path("again.qz")
        self.assertEqual(self.run_cli("train-baseline", "--out", again)[0], 0)
        with open(self.baseline, "rb") as a, open(again, "rb") as b:
            self.assertEqual(a.read(), b.read())

    def test_missing_corpus(self):
        code, _, err = self.run_cli("train-baseline", "--corpus", self.path("nowhere"), "--out", self.path("x.qz"))
        self.assertEqual(code, 3)
        self.assertIn("not found", err)

    def test_missing_checkpoint(self):
        self.assertEqual(self.run_cli("eval", "--model", self.path("absent.qz"))[0], 5)


class TestPruning(CliTestCase):
    def test_full_target_is_forward_identical(self):
        out = self.path("p100.qz")
        self.assertEqual(
            self.run_cli("prune", "--model", self.baseline, "--method", "random", "--target-flops", "1.0", "--out", out)[0],
            0,
        )
        source, pruned = storage.load(self.baseline).model, storage.load(out).model
        tokens = random_tokens(30, vocab=source.config.vocab_size, seed=1)
        np.testing.assert_array_equal(qrnn.forward(source, tokens), qrnn.forward(pruned, tokens))
        self.assertEqual(storage.load(out).meta["achieved_flops"], 1.0)

    def test_fraction_driven_prune_records_lineage(self):
        out = self.path("p80.qz")
        code, _, _ = self.run_cli(
            "prune", "--model", self.baseline, "--method", "filter-norm", "--target-flops", "0.8", "--out", out
        )
        self.assertEqual(code, 0)
        checkpoint = storage.load(out)
        self.assertLess(checkpoint.model.config.hidden_sizes[0], 12)
        self.assertEqual(checkpoint.source_config, storage.load(self.baseline).model.config)
        self.assertAlmostEqual(checkpoint.meta["achieved_flops"], 0.8, delta=0.04)

    def test_l0_without_gates_names_the_missing_step(self):
        code, _, err = self.run_cli("prune", "--model", self.baseline, "--method", "l0", "--out", self.path("l0.qz"))
        self.assertEqual(code, 2)
        self.assertIn("train-gates", err)

    def test_mean_activation_needs_stats(self):
        code, _, err = self.run_cli(
            "prune", "--model", self.baseline, "--method", "mean-activation", "--target-flops", "0.8",
            "--out", self.path("ma.qz"),
        )
        self.assertEqual(code, 2)
        self.assertIn("collect-stats", err)

    def test_unreachable_target(self):
        code, _, err = self.run_cli(
            "prune", "--model", self.baseline, "--method", "random", "--target-flops", "0.05", "--out", self.path("u.qz")
        )
        self.assertEqual(code, 2)
        self.assertIn("unreachable", err)

    def test_stats_then_mean_activation(self):
        with_stats = self.path("stats.qz")
        self.assertEqual(self.run_cli("collect-stats", "--model", self.baseline, "--out", with_stats)[0], 0)
        self.assertIsNotNone(storage.load(with_stats).stats)
        code, _, _ = self.run_cli(
            "prune", "--model", with_stats, "--method", "mean-activation", "--target-flops", "0.8",
            "--out", self.path("ma80.qz"),
        )
        self.assertEqual(code, 0)

    def test_gates_then_l0(self):
        gated = self.path("gated.qz")
        self.assertEqual(self.run_cli("train-gates", "--model", self.baseline, "--lambda", "0.02", "--out", gated)[0], 0)
        self.assertIn("l0-0.02", storage.load(gated).gates)
        code, _, _ = self.run_cli("prune", "--model", gated, "--method", "l0", "--out", self.path("l0ok.qz"))
        self.assertEqual(code, 0)
        self.assertEqual(storage.load(self.path("l0ok.qz")).meta["gates"], "l0-0.02")


class TestMeasurement(CliTestCase):
    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        cls.pruned = cls.path("p80.qz")
        assert cls.run_cli(
            "prune", "--model", cls.baseline, "--method", "random", "--target-flops", "0.8", "--out", cls.pruned
        )[0] == 0

    def test_eval_is_deterministic(self):
        first = self.run_cli("eval", "--model", self.pruned)
        self.assertEqual(first[0], 0)
        self.assertEqual(first, self.run_cli("eval", "--model", self.pruned))
        self.assertIn("perplexity", first[1])

    def test_sru_round_trip(self):
        with_update = self.path("p80-sru.qz")
        self.assertEqual(self.run_cli("train-sru", "--model", self.pruned, "--tag", "p80", "--out", with_update)[0], 0)
        update = storage.load(with_update).sru["p80"]
        self.assertAlmostEqual(update.flops_fraction, storage.load(self.pruned).meta["achieved_flops"])
        self.assertEqual(self.run_cli("eval", "--model", with_update, "--sru")[0], 0)
        self.assertEqual(self.run_cli("eval", "--model", with_update, "--sru", "p80")[0], 0)
        self.assertEqual(self.run_cli("eval", "--model", with_update, "--sru", "other")[0], 2)
        self.assertEqual(self.run_cli("storage-report", "--model", with_update)[0], 0)

    def test_bench_defaults_to_350_queries(self):
        with patch("src.eval.bench_latency", return_value=LatencyReport(0.1, 0.0, 350, 1)) as bench:
            self.assertEqual(self.run_cli("bench", "--model", self.pruned)[0], 0)
        self.assertEqual(bench.call_args.args[2], 350)
        self.assertEqual(bench.call_args.args[3], 1)

    def test_sweep_writes_table(self):
        out = self.path("sweep.csv")
        code, _, _ = self.run_cli("sweep", "--model", self.baseline, "--bench-queries", "3", "--out", out)
        self.assertEqual(code, 0)
        with open(out) as f:
            lines = f.read().splitlines()
        self.assertEqual(lines[0], ",".join(cli.metrics.CSV_COLUMNS))
        self.assertEqual(len(lines), 1 + 1 + 2 * 2)
        self.assertTrue(os.path.exists(self.path("sweep.json")))
        self.assertTrue(os.path.exists(f"{out}.stamp.yml"))

    def test_sweep_of_pruned_checkpoint_reports_source_fractions(self):
        out = self.path("pruned-sweep.csv")
        code, _, _ = self.run_cli("sweep", "--model", self.pruned, "--bench-queries", "0", "--out", out)
        self.assertEqual(code, 0)
        with open(out) as f:
            unpruned = next(csv.DictReader(f))
        checkpoint = storage.load(self.pruned)
        share = pruning.flops_per_token(checkpoint.model.config) / pruning.flops_per_token(checkpoint.source_config)
        self.assertLess(share, 1.0)
        self.assertAlmostEqual(float(unpruned["achieved_flops"]), share, places=4)

    def test_unwritable_output(self):
        out = os.path.join(self.path("no-such-dir"), "sweep.csv")
        code, _, err = self.run_cli("sweep", "--model", self.baseline, "--bench-queries", "0", "--out", out)
        self.assertEqual(code, 5)
        self.assertIn("cannot write", err)

    def test_storage_report_without_model(self):
        code, out, _ = self.run_cli("storage-report")
        self.assertEqual(code, 0)
        self.assertIn("126064", out)


if __name__ == '__main__':
    unittest.main()
