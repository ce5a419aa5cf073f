"""
Structured filter pruning for QRNN layers.

Filter ``i`` of layer ``l`` is one row of each of W_z, W_f, W_o (indices are
tied across the three gates) plus, in layer ``l + 1``, the input column ``i``
of every window block. The final layer keeps all of its filters because its
output is tied to the embedding.
"""
import logging
import math
from dataclasses import dataclass, field, replace
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from src import model as qrnn, tensor
from src.data import TokenStream
from src.errors import ConfigError, DataError, MissingPrerequisiteError, OperatingPointError, ShapeError
from src.model import ModelConfig, QrnnLayerWeights, QrnnModel

logger = logging.getLogger(__name__)

METHODS = ("random", "filter-norm", "mean-activation", "l0")
TARGET_TOLERANCE = 0.005


@dataclass(frozen=True)
class PruneMask:
    kept: Tuple[Tuple[int, ...], ...]

    @classmethod
    def full(cls, config: ModelConfig) -> "PruneMask":
        return cls(tuple(tuple(range(m)) for m in config.hidden_sizes))

    @classmethod
    def from_dropped(cls, config: ModelConfig, dropped: Sequence[Sequence[int]]) -> "PruneMask":
        kept = []
        for index, m in enumerate(config.hidden_sizes):
            gone = set(dropped[index]) if index < len(dropped) else set()
            kept.append(tuple(i for i in range(m) if i not in gone))
        return cls(tuple(kept))

    def counts(self) -> List[int]:
        return [len(k) for k in self.kept]

    def digest(self) -> str:
        return qrnn.digest_kept(self.kept)

    def validate(self, config: ModelConfig):
        if len(self.kept) != config.num_layers:
            raise ShapeError(f"mask covers {len(self.kept)} layers, model has {config.num_layers}")
        for index, (kept, m) in enumerate(zip(self.kept, config.hidden_sizes)):
            if not kept:
                raise ConfigError(f"mask leaves layer {index} without filters")
            if list(kept) != sorted(set(kept)):
                raise ConfigError(f"kept indices of layer {index} must be sorted and unique")
            if kept[0] < 0 or kept[-1] >= m:
                raise ConfigError(f"kept index out of range for layer {index} with {m} filters")
        if len(self.kept[-1]) != config.hidden_sizes[-1]:
            raise ConfigError("the final layer is tied to the embedding and cannot be pruned")


@dataclass
class ActivationStats:
    means: List[np.ndarray]
    tokens: int

    def merge(self, other: "ActivationStats") -> "ActivationStats":
        total = self.tokens + other.tokens
        means = [
            (a * self.tokens + b * other.tokens) / total for a, b in zip(self.means, other.means)
        ]
        return ActivationStats(means, total)

    def storage_bytes(self) -> int:
        return 4 * sum(len(m) for m in self.means)


@dataclass
class LayerFlops:
    kept: int
    columns: int
    conv: int
    pooling: int


@dataclass
class FlopsModel:
    layers: List[LayerFlops] = field(default_factory=list)
    output: int = 0

    @property
    def total(self) -> int:
        return self.output + sum(layer.conv + layer.pooling for layer in self.layers)

    @classmethod
    def of(cls, config: ModelConfig, mask: Optional[PruneMask] = None) -> "FlopsModel":
        counts = mask.counts() if mask is not None else list(config.hidden_sizes)
        layers = []
        for index, m in enumerate(counts):
            k = config.embed_dim if index == 0 else counts[index - 1]
            s = k * config.window_sizes[index]
            layers.append(LayerFlops(m, s, 3 * (m * s + m * (s - 1)), 5 * m))
        vocab, d = config.vocab_size, counts[-1]
        return cls(layers, vocab * d + vocab * (d - 1))


def _config_of(source: Union[ModelConfig, QrnnModel]) -> ModelConfig:
    return source.config if isinstance(source, QrnnModel) else source


def flops_per_token(source: Union[ModelConfig, QrnnModel], mask: Optional[PruneMask] = None) -> int:
    """Additions plus multiplications per predicted token; activations and lookups cost nothing."""
    return FlopsModel.of(_config_of(source), mask).total


def flops_fraction(source, mask: Optional[PruneMask]) -> float:
    config = _config_of(source)
    return flops_per_token(config, mask) / flops_per_token(config)


def apply_mask(model: QrnnModel, mask: PruneMask) -> QrnnModel:
    """Physically smaller copy: rows go from layer l, matching input columns from layer l+1."""
    cfg = model.config
    mask.validate(cfg)
    layers = []
    for index, layer in enumerate(model.layers):
        rows = np.asarray(mask.kept[index], dtype=np.int64)
        if index == 0:
            cols = np.arange(layer.columns)
        else:
            k = cfg.input_channels(index)
            previous = np.asarray(mask.kept[index - 1], dtype=np.int64)
            cols = np.concatenate([block * k + previous for block in range(cfg.window_sizes[index])])
        layers.append(QrnnLayerWeights(*(layer.gate(g)[np.ix_(rows, cols)] for g in qrnn.GATE_NAMES)))

    if model.kept_filters is None:
        lineage = mask.kept
    else:
        lineage = tuple(
            tuple(model.kept_filters[index][i] for i in kept) for index, kept in enumerate(mask.kept)
        )
    config = replace(cfg, hidden_sizes=tuple(mask.counts()))
    return QrnnModel(config, model.embedding.copy(), layers, lineage)


def drop_count(filters: int, fraction: float) -> int:
    if not 0 <= fraction < 1:
        raise ConfigError(f"per-layer drop fraction must be in [0, 1), got {fraction}")
    # the epsilon keeps j/m from flooring to j - 1 in binary floating point
    return min(filters - 1, int(math.floor(fraction * filters + 1e-9)))


def _mask_from_scores(config: ModelConfig, scores: Sequence[np.ndarray], fraction: float) -> PruneMask:
    dropped = []
    for index in config.prunable_layers:
        order = np.argsort(scores[index], kind="stable")
        dropped.append(order[: drop_count(config.hidden_sizes[index], fraction)].tolist())
    return PruneMask.from_dropped(config, dropped)


def random_mask(model: QrnnModel, per_layer_fraction: float, seed: int) -> PruneMask:
    config = model.config
    rng = tensor.rng_for(seed, "mask")
    dropped = []
    for index in config.prunable_layers:
        m = config.hidden_sizes[index]
        count = drop_count(m, per_layer_fraction)
        dropped.append(rng.choice(m, size=count, replace=False).tolist())
    return PruneMask.from_dropped(config, dropped)


def filter_norm_mask(model: QrnnModel, per_layer_fraction: float) -> PruneMask:
    """Drop the filters whose W_z rows have the smallest L1 norms."""
    norms = [np.abs(layer.w_z).sum(axis=1) for layer in model.layers]
    return _mask_from_scores(model.config, norms, per_layer_fraction)


def mean_activation_mask(stats: Optional[ActivationStats], per_layer_fraction: float, config: ModelConfig) -> PruneMask:
    if stats is None:
        raise MissingPrerequisiteError("activation statistics", "collect-stats")
    if len(stats.means) != config.num_layers or any(
        len(stats.means[i]) != config.hidden_sizes[i] for i in config.prunable_layers
    ):
        raise MissingPrerequisiteError("activation statistics matching this model", "collect-stats")
    return _mask_from_scores(config, stats.means, per_layer_fraction)


def collect_activation_stats(
    model: QrnnModel,
    streams: Union[TokenStream, Sequence[TokenStream]],
    max_tokens: Optional[int] = None,
    chunk: int = 512,
) -> ActivationStats:
    """
    Mean |h_t[i]| per filter over a single in-order pass. Each stream starts
    from a zero state; ``max_tokens`` keeps the first tokens only.
    """
    if isinstance(streams, TokenStream):
        streams = [streams]
    budget = max_tokens if max_tokens is not None else sum(len(s) for s in streams)
    sums = [np.zeros(m, dtype=np.float64) for m in model.config.hidden_sizes]
    seen = 0
    for stream in streams:
        ids = stream.ids[: max(0, budget - seen)]
        states = qrnn.init_states(model)
        for start in range(0, len(ids), chunk):
            _, states, caches, _ = qrnn.run(model, ids[start:start + chunk], states)
            for index, cache in enumerate(caches):
                sums[index] += np.abs(cache.o * cache.cells).sum(axis=-1)
        seen += len(ids)
    if seen == 0:
        raise DataError("cannot collect activation statistics from an empty stream")
    logger.info("collected activation statistics over %d tokens", seen)
    return ActivationStats([(s / seen).astype(np.float32) for s in sums], seen)


def mask_for_fraction(
    method: str,
    model: QrnnModel,
    per_layer_fraction: float,
    seed: int = 0,
    stats: Optional[ActivationStats] = None,
) -> PruneMask:
    if method == "random":
        return random_mask(model, per_layer_fraction, seed)
    if method == "filter-norm":
        return filter_norm_mask(model, per_layer_fraction)
    if method == "mean-activation":
        return mean_activation_mask(stats, per_layer_fraction, model.config)
    raise ConfigError(f"method {method!r} has no fraction-driven mask; expected one of {METHODS[:3]}")


def uniform_mask_counts(config: ModelConfig, fraction: float) -> PruneMask:
    """Any mask with the per-layer counts a uniform fraction produces (FLOPs only depend on counts)."""
    dropped = [list(range(drop_count(config.hidden_sizes[i], fraction))) for i in config.prunable_layers]
    return PruneMask.from_dropped(config, dropped)


def solve_operating_point(source, target_flops_fraction: float) -> float:
    """
    Uniform per-layer drop fraction whose FLOPs fraction is closest to the
    target. Candidates are the breakpoints j/m where a layer's floor count
    changes, searched by bisection on the monotone FLOPs curve.
    """
    config = _config_of(source)
    target = target_flops_fraction
    if not 0 < target <= 1:
        raise ConfigError(f"FLOPs target must be in (0, 1], got {target}")
    breakpoints = {0.0}
    for index in config.prunable_layers:
        m = config.hidden_sizes[index]
        breakpoints.update(j / m for j in range(m))
    candidates = sorted(breakpoints)

    def achieved(fraction):
        return flops_fraction(config, uniform_mask_counts(config, fraction))

    minimum = achieved(candidates[-1])
    if target < minimum - TARGET_TOLERANCE:
        raise OperatingPointError(target, minimum)

    lo, hi = 0, len(candidates) - 1
    while lo < hi:
        mid = (lo + hi) // 2
        if achieved(candidates[mid]) > target:
            lo = mid + 1
        else:
            hi = mid
    nearby = [candidates[i] for i in (lo - 1, lo) if 0 <= i < len(candidates)]
    best = min(nearby, key=lambda f: (abs(achieved(f) - target), f))
    logger.debug("target %.3f -> drop fraction %.4f (achieved %.4f)", target, best, achieved(best))
    return best
