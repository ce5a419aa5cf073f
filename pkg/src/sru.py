"""
Single-rank updates: a trained ΔW = u·vᵀ per gate weight of every conv layer
of a pruned model, stored per operating point and folded into the weights
at load time so a query costs the same FLOPs as without the update.
"""
import logging
from dataclasses import dataclass
from typing import Dict, List, Tuple

import numpy as np

from src import grad, pruning, tensor
from src.data import TokenStream
from src.errors import MaskMismatchError, ShapeError
from src.model import GATE_NAMES, ModelConfig, QrnnLayerWeights, QrnnModel

logger = logging.getLogger(__name__)

INIT_STD = 0.1
HEADER_BYTES = 64
PTB_CONFIG = ModelConfig(
    vocab_size=10000,
    embed_dim=400,
    num_layers=4,
    hidden_sizes=(1550, 1550, 1550, 400),
    window_sizes=(2, 1, 1, 1),
)

Factors = Dict[str, Tuple[np.ndarray, np.ndarray]]


@dataclass
class SruUpdate:
    factors: List[Factors]
    mask_digest: str
    flops_fraction: float = 1.0
    tag: str = ""

    def element_count(self) -> int:
        return sum(len(u) + len(v) for layer in self.factors for u, v in layer.values())

    def copy(self) -> "SruUpdate":
        factors = [{g: (u.copy(), v.copy()) for g, (u, v) in layer.items()} for layer in self.factors]
        return SruUpdate(factors, self.mask_digest, self.flops_fraction, self.tag)


def init_sru(
    pruned_model: QrnnModel, seed: int, std: float = INIT_STD, tag: str = "", flops_fraction: float = 1.0
) -> SruUpdate:
    """Every u, v entry i.i.d. Normal(0, std)."""
    rng = tensor.rng_for(seed, "sru-init")
    dtype = pruned_model.dtype
    factors = []
    for layer in pruned_model.layers:
        factors.append(
            {
                g: (
                    rng.normal(0.0, std, layer.hidden_size).astype(dtype),
                    rng.normal(0.0, std, layer.columns).astype(dtype),
                )
                for g in GATE_NAMES
            }
        )
    return SruUpdate(factors, pruned_model.mask_digest, flops_fraction, tag)


def _check(model: QrnnModel, sru: SruUpdate):
    if sru.mask_digest != model.mask_digest:
        raise MaskMismatchError(sru.mask_digest, model.mask_digest)
    if len(sru.factors) != len(model.layers):
        raise ShapeError(f"update has {len(sru.factors)} layers, model has {len(model.layers)}")
    for index, (layer, factors) in enumerate(zip(model.layers, sru.factors)):
        for g in GATE_NAMES:
            u, v = factors[g]
            if (len(u), len(v)) != layer.gate(g).shape:
                raise ShapeError(f"update {g} of layer {index} is {len(u)}x{len(v)}, weight is {layer.gate(g).shape}")


def _shifted(model: QrnnModel, sru: SruUpdate, sign: float) -> QrnnModel:
    _check(model, sru)
    layers = []
    for layer, factors in zip(model.layers, sru.factors):
        weights = []
        for g in GATE_NAMES:
            u, v = factors[g]
            weights.append(layer.gate(g) + (sign * np.outer(u, v)).astype(layer.gate(g).dtype))
        layers.append(QrnnLayerWeights(*weights))
    return QrnnModel(model.config, model.embedding.copy(), layers, model.kept_filters)


def apply_sru(pruned_model: QrnnModel, sru: SruUpdate) -> QrnnModel:
    """W* = W + u·vᵀ for every layer and gate; the input model is untouched."""
    return _shifted(pruned_model, sru, 1.0)


def remove_sru(model: QrnnModel, sru: SruUpdate) -> QrnnModel:
    return _shifted(model, sru, -1.0)


def train_sru(
    pruned_model: QrnnModel,
    stream: TokenStream,
    steps: int = 2000,
    lr: float = 5e-3,
    seed: int = 0,
    batch_size: int = 16,
    bptt: int = 35,
    std: float = INIT_STD,
    clip_norm: float = 0.0,
    log_every: int = 200,
    progress: bool = True,
    tag: str = "",
    flops_fraction: float = 1.0,
) -> SruUpdate:
    """Adam on the update factors only; base weights are frozen."""
    before = pruned_model.checksum()
    sru = init_sru(pruned_model, seed, std, tag, flops_fraction)
    extras = grad.Extras(sru=sru)
    history = grad.train_loop(
        pruned_model,
        grad.ParamSet.sru_factors(sru),
        stream,
        steps,
        lr,
        batch_size,
        bptt,
        extras_for_step=lambda _step: extras,
        clip_norm=clip_norm,
        log_every=log_every,
        progress=progress,
        label="sru",
    )
    if pruned_model.checksum() != before:
        raise RuntimeError("update training modified frozen model weights")
    if history:
        logger.info("sru: loss %.4f -> %.4f over %d steps", history[0], history[-1], len(history))
    return sru


def sru_storage_bytes(sru: SruUpdate, element_width: int = 4) -> int:
    return element_width * sru.element_count() + HEADER_BYTES


def storage_bytes_for(config: ModelConfig, element_width: int = 4) -> int:
    """Update size for a model of the given (already pruned) dimensions."""
    elements = sum(
        len(GATE_NAMES) * (config.hidden_sizes[i] + config.columns(i)) for i in range(config.num_layers)
    )
    return element_width * elements + HEADER_BYTES


def ptb_storage_report(flops_targets=(1.0, 0.8, 0.6), element_widths=(4, 2)) -> List[dict]:
    """Update sizes for the 4-layer 1550-unit configuration at several operating points."""
    rows = []
    for target in flops_targets:
        fraction = pruning.solve_operating_point(PTB_CONFIG, target)
        mask = pruning.uniform_mask_counts(PTB_CONFIG, fraction)
        pruned = ModelConfig(
            PTB_CONFIG.vocab_size, PTB_CONFIG.embed_dim, PTB_CONFIG.num_layers, tuple(mask.counts()), PTB_CONFIG.window_sizes
        )
        for width in element_widths:
            rows.append(
                {
                    "target_flops": target,
                    "achieved_flops": round(pruning.flops_fraction(PTB_CONFIG, mask), 4),
                    "element_width": width,
                    "bytes": storage_bytes_for(pruned, width),
                    "kib": round(storage_bytes_for(pruned, width) / 1024, 1),
                }
            )
    return rows
