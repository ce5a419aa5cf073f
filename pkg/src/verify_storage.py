import os
import tempfile
import unittest

import numpy as np
import yaml

from src import pruning, sru, storage
from src.errors import (
    CheckpointError,
    CheckpointFormatError,
    CheckpointShapeError,
    CheckpointTruncatedError,
    ConfigError,
    MaskMismatchError,
)
from src.gates import HardConcreteGates
from src.verify_fixtures import toy_config, toy_model, toy_stream


def repack(data: bytes, edit) -> bytes:
    """Rewrite a checkpoint's manifest with ``edit`` and keep its payload."""
    manifest, payload = storage._parse_header(data)
    edit(manifest)
    text = yaml.safe_dump(manifest, sort_keys=True).encode("utf-8")
    return storage.HEADER.pack(storage.MAGIC, storage.VERSION, len(text)) + text + bytes(payload)


def full_checkpoint():
    model = toy_model(0, dtype=np.float32)
    mask = pruning.random_mask(model, 0.25, seed=2)
    pruned = pruning.apply_mask(model, mask)
    stats = pruning.collect_activation_stats(pruned, toy_stream(80))
    gates = HardConcreteGates.init(pruned.config, lam=0.01, tag="l0-0.01")
    gates.log_alphas[0][:] = np.linspace(-3, 3, len(gates.log_alphas[0]), dtype=np.float32)
    gates.extra["flops_fraction"] = 0.75
    update = sru.init_sru(pruned, seed=4, tag="p75", flops_fraction=0.75)
    meta = {"method": "random", "source_config": model.config.to_dict(), "achieved_flops": 0.75}
    return storage.Checkpoint(pruned, "abc123", stats, {gates.tag: gates}, {update.tag: update}, meta)


class TestRoundTrip(unittest.TestCase):
    def test_bit_exact(self):
        original = full_checkpoint()
        loaded = storage.from_bytes(storage.to_bytes(original))
        self.assertEqual(loaded.model.config, original.model.config)
        self.assertEqual(loaded.model.checksum(), original.model.checksum())
        self.assertEqual(loaded.model.kept_filters, original.model.kept_filters)
        self.assertEqual(loaded.vocab_digest, "abc123")
        for a, b in zip(loaded.stats.means, original.stats.means):
            np.testing.assert_array_equal(a, b)
        self.assertEqual(loaded.stats.tokens, 80)
        gates = loaded.gates["l0-0.01"]
        np.testing.assert_array_equal(gates.log_alphas[0], original.gates["l0-0.01"].log_alphas[0])
        self.assertEqual((gates.lam, gates.extra), (0.01, {"flops_fraction": 0.75}))
        update = loaded.sru["p75"]
        self.assertEqual(update.mask_digest, loaded.model.mask_digest)
        np.testing.assert_array_equal(update.factors[1]["f"][1], original.sru["p75"].factors[1]["f"][1])
        self.assertEqual(loaded.source_config, toy_config())
        self.assertEqual(loaded.meta["method"], "random")

    def test_loaded_update_applies(self):
        loaded = storage.from_bytes(storage.to_bytes(full_checkpoint()))
        sru.apply_sru(loaded.model, loaded.sru["p75"])

    def test_unpruned_model_without_extras(self):
        model = toy_model(1, dtype=np.float64)
        loaded = storage.from_bytes(storage.to_bytes(storage.Checkpoint(model)))
        self.assertIsNone(loaded.model.kept_filters)
        self.assertIsNone(loaded.stats)
        self.assertEqual(loaded.model.dtype, np.float64)
        self.assertEqual(loaded.source_config, model.config)

    def test_same_input_same_bytes(self):
        self.assertEqual(storage.to_bytes(full_checkpoint()), storage.to_bytes(full_checkpoint()))

    def test_file_size(self):
        model = toy_model(0, dtype=np.float32)
        data = storage.to_bytes(storage.Checkpoint(model))
        _, _, manifest_len = storage.HEADER.unpack_from(data)
        self.assertEqual(len(data), storage.HEADER.size + manifest_len + 4 * (20 * 8 + 3 * 12 * 16 + 3 * 8 * 12))

    def test_half_width_updates(self):
        checkpoint = full_checkpoint()
        wide, narrow = storage.to_bytes(checkpoint), storage.to_bytes(checkpoint, sru_width=2)
        self.assertLess(len(narrow), len(wide))
        loaded = storage.from_bytes(narrow)
        u = loaded.sru["p75"].factors[0]["z"][0]
        self.assertEqual(u.dtype, np.float32)
        np.testing.assert_allclose(u, checkpoint.sru["p75"].factors[0]["z"][0], rtol=1e-3, atol=1e-4)
        manifest, _ = storage._parse_header(narrow)
        self.assertEqual(manifest["sru"]["p75"]["element_width"], 2)
        with self.assertRaises(ConfigError):
            storage.to_bytes(checkpoint, sru_width=3)


class TestFiles(unittest.TestCase):
    def test_save_load_and_manifest(self):
        checkpoint = full_checkpoint()
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "model.qz")
            written = storage.save(
                path, checkpoint.model, checkpoint.stats, list(checkpoint.gates.values()),
                list(checkpoint.sru.values()), "abc123", checkpoint.meta,
            )
            self.assertEqual(os.path.getsize(path), written)
            self.assertFalse(os.path.exists(f"{path}.tmp"))
            self.assertEqual(storage.load(path).model.checksum(), checkpoint.model.checksum())
            manifest = storage.read_manifest(path)
            self.assertEqual(manifest["format_version"], 1)
            self.assertEqual([t["name"] for t in manifest["tensors"]][:2], ["embedding", "layers.0.w_z"])

    def test_missing_file(self):
        with self.assertRaises(CheckpointError):
            storage.load("/nonexistent/model.qz")

    def test_duplicate_tags(self):
        model = toy_model(0, dtype=np.float32)
        gates = HardConcreteGates.init(model.config, 0.1, tag="same")
        with tempfile.TemporaryDirectory() as tmp:
            with self.assertRaises(CheckpointError):
                storage.save(os.path.join(tmp, "x.qz"), model, gates=[gates, gates.copy()])

    def test_update_for_another_mask_is_not_written(self):
        model = toy_model(0, dtype=np.float32)
        a = pruning.apply_mask(model, pruning.PruneMask.from_dropped(model.config, [[0]]))
        b = pruning.apply_mask(model, pruning.PruneMask.from_dropped(model.config, [[1]]))
        update = sru.init_sru(a, seed=0, tag="a")
        with self.assertRaises(MaskMismatchError):
            storage.to_bytes(storage.Checkpoint(b, sru={"a": update}))

    def test_gates_are_stored_as_float32(self):
        model = toy_model(0, dtype=np.float64)
        gates = HardConcreteGates.init(model.config, 0.1, tag="wide", dtype=np.float64)
        data = storage.to_bytes(storage.Checkpoint(model, gates={"wide": gates}))
        manifest, _ = storage._parse_header(data)
        entries = [t for t in manifest["tensors"] if t["role"] == "gate"]
        self.assertEqual([t["dtype"] for t in entries], ["<f4"])
        self.assertEqual(sum(t["nbytes"] for t in entries), gates.storage_bytes())
        loaded = storage.from_bytes(data).gates["wide"]
        self.assertEqual(loaded.log_alphas[0].dtype, np.float32)
        self.assertEqual(loaded.zero_counts(), gates.zero_counts())

    def test_mistagged_gate_set(self):
        model = toy_model(0, dtype=np.float32)
        gates = HardConcreteGates.init(model.config, 0.1, tag="a")
        with self.assertRaises(CheckpointError):
            storage.to_bytes(storage.Checkpoint(model, gates={"b": gates}))


class TestCorruption(unittest.TestCase):
    def setUp(self):
        self.data = storage.to_bytes(full_checkpoint())

    def test_truncated_payload(self):
        with self.assertRaises(CheckpointTruncatedError):
            storage.from_bytes(self.data[:-1])

    def test_truncated_header_and_manifest(self):
        with self.assertRaises(CheckpointTruncatedError):
            storage.from_bytes(self.data[:5])
        with self.assertRaises(CheckpointTruncatedError):
            storage.from_bytes(self.data[:storage.HEADER.size + 10])

    def test_bad_magic(self):
        with self.assertRaises(CheckpointFormatError):
            storage.from_bytes(b"GGUF" + self.data[4:])
        with self.assertRaises(CheckpointFormatError):
            storage.from_bytes(b"PK")

    def test_unknown_version(self):
        data = bytearray(self.data)
        data[4] = 2
        with self.assertRaises(CheckpointFormatError) as ctx:
            storage.from_bytes(bytes(data))
        self.assertIn("version 2", str(ctx.exception))

    def test_untied_configuration(self):
        def untie(manifest):
            manifest["model"]["embed_dim"] = 9

        with self.assertRaises(CheckpointShapeError):
            storage.from_bytes(repack(self.data, untie))

    def test_configuration_disagrees_with_tensors(self):
        def widen(manifest):
            manifest["model"]["hidden_sizes"][0] += 1

        with self.assertRaises(CheckpointShapeError):
            storage.from_bytes(repack(self.data, widen))

    def test_index_size_disagrees_with_shape(self):
        def shrink(manifest):
            manifest["tensors"][0]["nbytes"] -= 4

        with self.assertRaises(CheckpointShapeError):
            storage.from_bytes(repack(self.data, shrink))

    def test_update_for_another_mask_is_refused(self):
        def retarget(manifest):
            manifest["sru"]["p75"]["mask_digest"] = "0" * 16

        with self.assertRaises(MaskMismatchError) as ctx:
            storage.from_bytes(repack(self.data, retarget))
        self.assertEqual(ctx.exception.tag, "p75")
        self.assertIn("p75", str(ctx.exception))
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "retargeted.qz")
            with open(path, "wb") as f:
                f.write(repack(self.data, retarget))
            with self.assertRaises(MaskMismatchError):
                storage.load(path)


if __name__ == '__main__':
    unittest.main()
