"""
``.qz`` checkpoint container.

    b"QRNZ" | version (u8) | manifest length (u32 LE) | manifest (UTF-8 YAML) | payload

The manifest holds the model configuration, the vocabulary digest, one index
entry per tensor (name, role, shape, dtype, offset, nbytes; offsets are
relative to the payload start) and the per-tag metadata of gate sets and
single-rank updates. Tensors are little-endian and packed back to back in
index order. See FORMAT.md.
"""
import logging
import os
import struct
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import yaml

from src.errors import (
    CheckpointError,
    CheckpointFormatError,
    CheckpointShapeError,
    CheckpointTruncatedError,
    ConfigError,
    MaskMismatchError,
)
from src.gates import HardConcreteGates
from src.model import GATE_NAMES, ModelConfig, QrnnLayerWeights, QrnnModel
from src.pruning import ActivationStats
from src.sru import SruUpdate

logger = logging.getLogger(__name__)

MAGIC = b"QRNZ"
VERSION = 1
HEADER = struct.Struct("<4sBI")
DTYPES = ("<f2", "<f4", "<f8", "<i4")


@dataclass
class TensorEntry:
    name: str
    role: str
    shape: Tuple[int, ...]
    dtype: str
    offset: int
    nbytes: int

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "role": self.role,
            "shape": list(self.shape),
            "dtype": self.dtype,
            "offset": self.offset,
            "nbytes": self.nbytes,
        }


@dataclass
class Checkpoint:
    model: QrnnModel
    vocab_digest: str = ""
    stats: Optional[ActivationStats] = None
    gates: Dict[str, HardConcreteGates] = field(default_factory=dict)
    sru: Dict[str, SruUpdate] = field(default_factory=dict)
    # free-form provenance: pruning method, target, source configuration
    meta: dict = field(default_factory=dict)

    @property
    def source_config(self) -> ModelConfig:
        """Configuration of the unpruned model this checkpoint descends from."""
        source = self.meta.get("source_config")
        return ModelConfig.from_dict(source) if source else self.model.config


def _dtype_code(array: np.ndarray) -> str:
    code = array.dtype.newbyteorder("<").str
    if code not in DTYPES:
        raise CheckpointFormatError(f"cannot store dtype {array.dtype}; supported: {DTYPES}")
    return code


def _collect(checkpoint: Checkpoint, sru_width: int) -> List[Tuple[str, str, np.ndarray]]:
    model = checkpoint.model
    tensors = [("embedding", "embedding", model.embedding)]
    for index, layer in enumerate(model.layers):
        for g in GATE_NAMES:
            tensors.append((f"layers.{index}.w_{g}", "weight", layer.gate(g)))
    if model.kept_filters is not None:
        for index, kept in enumerate(model.kept_filters):
            tensors.append((f"mask.{index}", "mask", np.asarray(kept, dtype="<i4")))
    if checkpoint.stats is not None:
        for index, means in enumerate(checkpoint.stats.means):
            tensors.append((f"stats.{index}", "stats", np.asarray(means, dtype="<f4")))
    for tag in sorted(checkpoint.gates):
        for index, log_alpha in enumerate(checkpoint.gates[tag].log_alphas):
            tensors.append((f"gates.{tag}.{index}", "gate", np.asarray(log_alpha, dtype="<f4")))
    for tag in sorted(checkpoint.sru):
        for index, factors in enumerate(checkpoint.sru[tag].factors):
            for g in GATE_NAMES:
                u, v = factors[g]
                if sru_width == 2:
                    u, v = u.astype("<f2"), v.astype("<f2")
                tensors.append((f"sru.{tag}.{index}.{g}.u", "sru", u))
                tensors.append((f"sru.{tag}.{index}.{g}.v", "sru", v))
    return tensors


def _manifest(checkpoint: Checkpoint, entries: List[TensorEntry], sru_width: int) -> dict:
    return {
        "format_version": VERSION,
        "model": checkpoint.model.config.to_dict(),
        "vocab_sha256": checkpoint.vocab_digest,
        "stats": None if checkpoint.stats is None else {"tokens": int(checkpoint.stats.tokens)},
        "gates": {
            tag: {
                "lam": float(g.lam),
                "gamma": float(g.gamma),
                "zeta": float(g.zeta),
                "beta": float(g.beta),
                "extra": {k: float(v) for k, v in g.extra.items()},
            }
            for tag, g in checkpoint.gates.items()
        },
        "sru": {
            tag: {
                "mask_digest": s.mask_digest,
                "flops_fraction": float(s.flops_fraction),
                "element_width": 2 if sru_width == 2 else int(s.factors[0]["z"][0].dtype.itemsize),
            }
            for tag, s in checkpoint.sru.items()
        },
        "meta": checkpoint.meta,
        "tensors": [entry.to_dict() for entry in entries],
    }


def _check_update_mask(tag: str, digest: str, model: QrnnModel):
    if digest != model.mask_digest:
        raise MaskMismatchError(digest, model.mask_digest, tag)


def to_bytes(checkpoint: Checkpoint, sru_width: int = 4) -> bytes:
    if sru_width not in (2, 4):
        raise ConfigError(f"update element width must be 2 or 4 bytes, got {sru_width}")
    for tag, update in checkpoint.gates.items():
        if update.tag and update.tag != tag:
            raise CheckpointError(f"gate set stored under {tag!r} is tagged {update.tag!r}")
    for tag, update in checkpoint.sru.items():
        _check_update_mask(tag, update.mask_digest, checkpoint.model)
    tensors = _collect(checkpoint, sru_width)
    entries, blobs, offset, seen = [], [], 0, set()
    for name, role, array in tensors:
        if name in seen:
            raise CheckpointError(f"tensor name collision in checkpoint index: {name}")
        seen.add(name)
        code = _dtype_code(array)
        blob = np.ascontiguousarray(array, dtype=code).tobytes()
        entries.append(TensorEntry(name, role, tuple(int(d) for d in array.shape), code, offset, len(blob)))
        blobs.append(blob)
        offset += len(blob)
    manifest = yaml.safe_dump(_manifest(checkpoint, entries, sru_width), sort_keys=True).encode("utf-8")
    return HEADER.pack(MAGIC, VERSION, len(manifest)) + manifest + b"".join(blobs)


def save(
    path: str,
    model: QrnnModel,
    stats: Optional[ActivationStats] = None,
    gates: Sequence[HardConcreteGates] = (),
    sru: Sequence[SruUpdate] = (),
    vocab_digest: str = "",
    meta: Optional[dict] = None,
    sru_width: int = 4,
) -> int:
    """Write a checkpoint; gate sets and updates are keyed by their tags. Returns bytes written."""
    gate_map, sru_map = {}, {}
    for g in gates:
        if g.tag in gate_map:
            raise CheckpointError(f"two gate sets share the tag {g.tag!r}")
        gate_map[g.tag] = g
    for s in sru:
        if s.tag in sru_map:
            raise CheckpointError(f"two updates share the tag {s.tag!r}")
        sru_map[s.tag] = s
    return save_checkpoint(path, Checkpoint(model, vocab_digest, stats, gate_map, sru_map, dict(meta or {})), sru_width)


def save_checkpoint(path: str, checkpoint: Checkpoint, sru_width: int = 4) -> int:
    data = to_bytes(checkpoint, sru_width)
    tmp = f"{path}.tmp"
    try:
        with open(tmp, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except OSError as e:
        raise CheckpointError(f"cannot write checkpoint {path}: {e}") from e
    logger.debug("wrote %s (%d bytes)", path, len(data))
    return len(data)


def _parse_header(data: bytes) -> Tuple[dict, memoryview]:
    if len(data) < HEADER.size:
        if data[: len(MAGIC)] != MAGIC[: len(data)]:
            raise CheckpointFormatError("not a .qz checkpoint (bad magic)")
        raise CheckpointTruncatedError(f"checkpoint ends inside its {HEADER.size}-byte header")
    magic, version, manifest_len = HEADER.unpack_from(data)
    if magic != MAGIC:
        raise CheckpointFormatError(f"not a .qz checkpoint (magic {magic!r})")
    if version != VERSION:
        raise CheckpointFormatError(f"unsupported checkpoint version {version}; this build reads {VERSION}")
    end = HEADER.size + manifest_len
    if len(data) < end:
        raise CheckpointTruncatedError(f"checkpoint ends inside its manifest ({len(data)} < {end} bytes)")
    try:
        manifest = yaml.safe_load(bytes(data[HEADER.size:end]).decode("utf-8"))
    except (UnicodeDecodeError, yaml.YAMLError) as e:
        raise CheckpointFormatError(f"unreadable checkpoint manifest: {e}") from e
    if not isinstance(manifest, dict) or "tensors" not in manifest or "model" not in manifest:
        raise CheckpointFormatError("checkpoint manifest lacks 'model' or 'tensors'")
    return manifest, memoryview(data)[end:]


def _parse_entries(manifest: dict, payload_len: int) -> Dict[str, TensorEntry]:
    entries = {}
    try:
        for raw in manifest["tensors"]:
            entry = TensorEntry(
                str(raw["name"]), str(raw["role"]), tuple(int(d) for d in raw["shape"]),
                str(raw["dtype"]), int(raw["offset"]), int(raw["nbytes"]),
            )
            if entry.name in entries:
                raise CheckpointFormatError(f"duplicate tensor {entry.name} in checkpoint index")
            entries[entry.name] = entry
    except (KeyError, TypeError, ValueError) as e:
        raise CheckpointFormatError(f"malformed tensor index entry: {e}") from e

    end = 0
    for entry in sorted(entries.values(), key=lambda e: e.offset):
        if entry.dtype not in DTYPES:
            raise CheckpointFormatError(f"tensor {entry.name} has unsupported dtype {entry.dtype}")
        expected = int(np.prod(entry.shape, dtype=np.int64)) * np.dtype(entry.dtype).itemsize
        if entry.nbytes != expected:
            raise CheckpointShapeError(f"tensor {entry.name} is {entry.nbytes} bytes, shape {entry.shape} needs {expected}")
        if entry.offset < end:
            raise CheckpointFormatError(f"tensor {entry.name} overlaps the previous tensor")
        end = entry.offset + entry.nbytes
        if end > payload_len:
            raise CheckpointTruncatedError(f"payload ends before tensor {entry.name} ({payload_len} < {end} bytes)")
    return entries


def _expected_shapes(manifest: dict, config: ModelConfig) -> Dict[str, Tuple[int, ...]]:
    shapes = {"embedding": (config.vocab_size, config.embed_dim)}
    for index in range(config.num_layers):
        for g in GATE_NAMES:
            shapes[f"layers.{index}.w_{g}"] = (config.hidden_sizes[index], config.columns(index))
    for tag in manifest.get("gates") or {}:
        for index in config.prunable_layers:
            shapes[f"gates.{tag}.{index}"] = (config.hidden_sizes[index],)
    for tag in manifest.get("sru") or {}:
        for index in range(config.num_layers):
            for g in GATE_NAMES:
                shapes[f"sru.{tag}.{index}.{g}.u"] = (config.hidden_sizes[index],)
                shapes[f"sru.{tag}.{index}.{g}.v"] = (config.columns(index),)
    return shapes


def _validate(manifest: dict, entries: Dict[str, TensorEntry], config: ModelConfig):
    for name, shape in _expected_shapes(manifest, config).items():
        if name not in entries:
            raise CheckpointShapeError(f"checkpoint is missing tensor {name}")
        if entries[name].shape != shape:
            raise CheckpointShapeError(f"tensor {name} has shape {entries[name].shape}, config needs {shape}")
    masks = [entries.get(f"mask.{i}") for i in range(config.num_layers)]
    if any(masks) and not all(masks):
        raise CheckpointShapeError("checkpoint carries a partial pruning mask")
    for index, entry in enumerate(masks):
        if entry is not None and entry.shape != (config.hidden_sizes[index],):
            raise CheckpointShapeError(f"mask of layer {index} has {entry.shape} entries for {config.hidden_sizes[index]} filters")
    if manifest.get("stats") is not None:
        for index in range(config.num_layers):
            entry = entries.get(f"stats.{index}")
            if entry is None or entry.shape != (config.hidden_sizes[index],):
                raise CheckpointShapeError(f"activation statistics of layer {index} do not match the model")


def from_bytes(data: bytes) -> Checkpoint:
    """Validate header, index and shapes, then build the objects; nothing is built from a bad file."""
    manifest, payload = _parse_header(data)
    entries = _parse_entries(manifest, len(payload))
    try:
        config = ModelConfig.from_dict(manifest["model"])
    except (ConfigError, KeyError, TypeError, ValueError) as e:
        raise CheckpointShapeError(f"checkpoint model configuration is invalid: {e}") from e
    _validate(manifest, entries, config)

    def read(name, dtype=None):
        entry = entries[name]
        array = np.frombuffer(payload, dtype=entry.dtype, count=int(np.prod(entry.shape, dtype=np.int64)), offset=entry.offset)
        array = array.reshape(entry.shape)
        return array.astype(dtype or array.dtype.newbyteorder("="), copy=True)

    layers = [QrnnLayerWeights(*(read(f"layers.{i}.w_{g}") for g in GATE_NAMES)) for i in range(config.num_layers)]
    kept = None
    if "mask.0" in entries:
        kept = tuple(tuple(int(i) for i in read(f"mask.{index}")) for index in range(config.num_layers))
    model = QrnnModel(config, read("embedding"), layers, kept)

    stats = None
    if manifest.get("stats") is not None:
        stats = ActivationStats([read(f"stats.{i}") for i in range(config.num_layers)], int(manifest["stats"]["tokens"]))

    gates = {}
    for tag, info in sorted((manifest.get("gates") or {}).items()):
        gates[tag] = HardConcreteGates(
            [read(f"gates.{tag}.{i}") for i in config.prunable_layers],
            lam=info["lam"], gamma=info["gamma"], zeta=info["zeta"], beta=info["beta"],
            tag=tag, extra=dict(info.get("extra") or {}),
        )

    updates = {}
    for tag, info in sorted((manifest.get("sru") or {}).items()):
        _check_update_mask(tag, info["mask_digest"], model)
        factors = []
        for index in range(config.num_layers):
            factors.append(
                {
                    g: (read(f"sru.{tag}.{index}.{g}.u", model.dtype), read(f"sru.{tag}.{index}.{g}.v", model.dtype))
                    for g in GATE_NAMES
                }
            )
        updates[tag] = SruUpdate(factors, info["mask_digest"], info["flops_fraction"], tag)

    return Checkpoint(model, manifest.get("vocab_sha256") or "", stats, gates, updates, dict(manifest.get("meta") or {}))


def load(path: str) -> Checkpoint:
    if not os.path.exists(path):
        raise CheckpointError(f"Checkpoint not found: {path}")
    with open(path, "rb") as f:
        data = f.read()
    checkpoint = from_bytes(data)
    logger.debug(
        "loaded %s: %s, %d gate sets, %d updates", path, checkpoint.model.config.hidden_sizes,
        len(checkpoint.gates), len(checkpoint.sru),
    )
    return checkpoint


def read_manifest(path: str) -> dict:
    with open(path, "rb") as f:
        manifest, _ = _parse_header(f.read())
    return manifest
