"""
Quasi-recurrent language model: tied embedding, stacked QRNN layers
(masked temporal convolution followed by fo-pooling) and a tied softmax
projection. Weights carry no biases.

Arrays are laid out channels-by-time: a layer input is ``(k, n)`` for one
sequence or ``(B, k, n)`` for a batch of ``B`` parallel streams.
"""
import hashlib
import json
from dataclasses import dataclass, replace
from typing import List, Optional, Sequence, Tuple

import numpy as np

from src import tensor
from src.errors import ConfigError, DataError, ShapeError
from src.tensor import DEFAULT_DTYPE, Matrix, OpCounter

GATE_NAMES = ("z", "f", "o")


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    embed_dim: int
    num_layers: int
    hidden_sizes: Tuple[int, ...]
    window_sizes: Tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "hidden_sizes", tuple(int(h) for h in self.hidden_sizes))
        object.__setattr__(self, "window_sizes", tuple(int(r) for r in self.window_sizes))
        self.validate()

    def validate(self):
        if self.vocab_size < 1 or self.embed_dim < 1:
            raise ConfigError("vocab_size and embed_dim must be positive")
        if self.num_layers < 1:
            raise ConfigError("a model needs at least one QRNN layer")
        if len(self.hidden_sizes) != self.num_layers or len(self.window_sizes) != self.num_layers:
            raise ConfigError(
                f"expected {self.num_layers} hidden and window sizes, got "
                f"{list(self.hidden_sizes)} and {list(self.window_sizes)}"
            )
        if any(h < 1 for h in self.hidden_sizes) or any(r < 1 for r in self.window_sizes):
            raise ConfigError("hidden and window sizes must be positive")
        # the output projection is the embedding, so the last layer must match it
        if self.hidden_sizes[-1] != self.embed_dim:
            raise ConfigError(
                f"last hidden size {self.hidden_sizes[-1]} must equal embed_dim "
                f"{self.embed_dim} for weight tying"
            )

    def input_channels(self, layer: int) -> int:
        return self.embed_dim if layer == 0 else self.hidden_sizes[layer - 1]

    def columns(self, layer: int) -> int:
        return self.input_channels(layer) * self.window_sizes[layer]

    @property
    def prunable_layers(self) -> range:
        return range(self.num_layers - 1)

    def to_dict(self) -> dict:
        return {
            "vocab_size": self.vocab_size,
            "embed_dim": self.embed_dim,
            "num_layers": self.num_layers,
            "hidden_sizes": list(self.hidden_sizes),
            "window_sizes": list(self.window_sizes),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        return cls(
            vocab_size=int(data["vocab_size"]),
            embed_dim=int(data["embed_dim"]),
            num_layers=int(data["num_layers"]),
            hidden_sizes=tuple(data["hidden_sizes"]),
            window_sizes=tuple(data["window_sizes"]),
        )


@dataclass
class QrnnLayerWeights:
    w_z: Matrix
    w_f: Matrix
    w_o: Matrix

    def __post_init__(self):
        if not (self.w_z.shape == self.w_f.shape == self.w_o.shape):
            raise ShapeError(
                f"gate weights disagree: {self.w_z.shape}, {self.w_f.shape}, {self.w_o.shape}"
            )

    @property
    def hidden_size(self) -> int:
        return self.w_z.shape[0]

    @property
    def columns(self) -> int:
        return self.w_z.shape[1]

    def gate(self, name: str) -> Matrix:
        return getattr(self, f"w_{name}")

    def copy(self) -> "QrnnLayerWeights":
        return QrnnLayerWeights(self.w_z.copy(), self.w_f.copy(), self.w_o.copy())


def digest_kept(kept) -> str:
    if kept is None:
        return "unpruned"
    payload = json.dumps([list(map(int, k)) for k in kept]).encode("utf-8")
    return hashlib.sha256(payload).hexdigest()[:16]


@dataclass
class QrnnModel:
    config: ModelConfig
    embedding: Matrix
    layers: List[QrnnLayerWeights]
    # kept filter indices of the model this one was pruned from
    kept_filters: Optional[Tuple[Tuple[int, ...], ...]] = None

    def __post_init__(self):
        cfg = self.config
        if self.embedding.shape != (cfg.vocab_size, cfg.embed_dim):
            raise ShapeError(
                f"embedding {self.embedding.shape} does not match "
                f"({cfg.vocab_size}, {cfg.embed_dim})"
            )
        if len(self.layers) != cfg.num_layers:
            raise ShapeError(f"{len(self.layers)} layers for a {cfg.num_layers}-layer config")
        for index, layer in enumerate(self.layers):
            expected = (cfg.hidden_sizes[index], cfg.columns(index))
            if layer.w_z.shape != expected:
                raise ShapeError(f"layer {index} weights {layer.w_z.shape}, expected {expected}")

    @property
    def output_projection(self) -> Matrix:
        return self.embedding

    @property
    def dtype(self):
        return self.embedding.dtype

    @property
    def mask_digest(self) -> str:
        return digest_kept(self.kept_filters)

    def weights(self) -> List[Matrix]:
        arrays = [self.embedding]
        for layer in self.layers:
            arrays.extend(layer.gate(g) for g in GATE_NAMES)
        return arrays

    def checksum(self) -> str:
        return tensor.checksum(self.weights())

    def copy(self) -> "QrnnModel":
        return replace(
            self,
            embedding=self.embedding.copy(),
            layers=[layer.copy() for layer in self.layers],
        )


@dataclass
class LayerState:
    c: np.ndarray
    history: np.ndarray  # last (r - 1) input columns, oldest first


@dataclass
class LayerCache:
    stacked: np.ndarray
    a_z: np.ndarray
    z: np.ndarray
    f: np.ndarray
    o: np.ndarray
    cells: np.ndarray
    c0: np.ndarray
    gate: Optional[np.ndarray] = None


def init_model(config: ModelConfig, seed: int, dtype=DEFAULT_DTYPE) -> QrnnModel:
    rng = tensor.rng_for(seed, "init")
    embedding = rng.uniform(-0.1, 0.1, (config.vocab_size, config.embed_dim)).astype(dtype)
    layers = []
    for index in range(config.num_layers):
        shape = (config.hidden_sizes[index], config.columns(index))
        bound = 1.0 / np.sqrt(shape[1])
        layers.append(QrnnLayerWeights(*(rng.uniform(-bound, bound, shape).astype(dtype) for _ in GATE_NAMES)))
    return QrnnModel(config, embedding, layers)


def astype(model: QrnnModel, dtype) -> QrnnModel:
    return replace(
        model,
        embedding=model.embedding.astype(dtype),
        layers=[QrnnLayerWeights(*(layer.gate(g).astype(dtype) for g in GATE_NAMES)) for layer in model.layers],
    )


def init_states(model: QrnnModel, batch_size: Optional[int] = None) -> List[LayerState]:
    lead = () if batch_size is None else (batch_size,)
    states = []
    for index, layer in enumerate(model.layers):
        k = model.config.input_channels(index)
        r = layer.columns // k
        states.append(
            LayerState(
                c=np.zeros(lead + (layer.hidden_size,), dtype=model.dtype),
                history=np.zeros(lead + (k, r - 1), dtype=model.dtype),
            )
        )
    return states


def stack_window(inputs: np.ndarray, history: np.ndarray, window: int):
    """Stack (x_{t-r+1} ⊕ … ⊕ x_t) per column; returns (stacked, new history)."""
    full = np.concatenate([history, inputs], axis=-1)
    n = inputs.shape[-1]
    blocks = [full[..., j:j + n] for j in range(window)]
    return np.concatenate(blocks, axis=-2), full[..., n:]


def _window_of(layer: QrnnLayerWeights, channels: int) -> int:
    if channels < 1 or layer.columns % channels:
        raise ShapeError(
            f"input with {channels} channels does not fit weights with {layer.columns} columns"
        )
    return layer.columns // channels


def _preactivations(layer, inputs, history=None, counter=None, gate=None):
    k = inputs.shape[-2]
    window = _window_of(layer, k)
    if history is None:
        history = np.zeros(inputs.shape[:-1] + (window - 1,), dtype=inputs.dtype)
    stacked, new_history = stack_window(inputs, history, window)
    a_z = tensor.matmul(layer.w_z, stacked, counter)
    a_f = tensor.matmul(layer.w_f, stacked, counter)
    a_o = tensor.matmul(layer.w_o, stacked, counter)
    gated = a_z if gate is None else a_z * gate.astype(a_z.dtype)[:, None]
    return stacked, new_history, a_z, gated, a_f, a_o


def masked_conv(layer: QrnnLayerWeights, inputs: Matrix, counter: OpCounter = None, history=None):
    """Z = tanh(W_z·X), F = σ(W_f·X), O = σ(W_o·X) with zero left-padding."""
    _, _, _, a_z, a_f, a_o = _preactivations(layer, inputs, history, counter)
    return tensor.tanh(a_z), tensor.sigmoid(a_f), tensor.sigmoid(a_o)


def fo_pool(z, f, o, c0, counter: OpCounter = None, return_cells=False):
    if not (z.shape == f.shape == o.shape):
        raise ShapeError(f"pooling shape mismatch: {z.shape}, {f.shape}, {o.shape}")
    if c0.shape != z.shape[:-1]:
        raise ShapeError(f"initial cell {c0.shape} does not match gates {z.shape}")
    hidden = np.empty_like(z)
    cells = np.empty_like(z)
    c = c0
    for t in range(z.shape[-1]):
        f_t = f[..., t]
        c = tensor.add(
            tensor.mul(f_t, c, counter),
            tensor.mul(tensor.one_minus(f_t, counter), z[..., t], counter),
            counter,
        )
        cells[..., t] = c
        hidden[..., t] = tensor.mul(o[..., t], c, counter)
    if return_cells:
        return hidden, c, cells
    return hidden, c


def run_layer(layer: QrnnLayerWeights, inputs, state: LayerState, counter=None, gate=None):
    stacked, new_history, a_z, gated, a_f, a_o = _preactivations(
        layer, inputs, state.history, counter, gate
    )
    z, f, o = tensor.tanh(gated), tensor.sigmoid(a_f), tensor.sigmoid(a_o)
    hidden, c_n, cells = fo_pool(z, f, o, state.c, counter, return_cells=True)
    cache = LayerCache(stacked, a_z, z, f, o, cells, state.c, gate)
    return hidden, LayerState(c_n, new_history), cache


def embed(model: QrnnModel, tokens: np.ndarray) -> np.ndarray:
    tokens = np.asarray(tokens)
    if tokens.size and (tokens.min() < 0 or tokens.max() >= model.config.vocab_size):
        raise DataError(
            f"token id out of range [0, {model.config.vocab_size}): "
            f"min={tokens.min()}, max={tokens.max()}"
        )
    return np.swapaxes(model.embedding[tokens], -1, -2)


def run(
    model: QrnnModel,
    tokens,
    states: Optional[Sequence[LayerState]] = None,
    counter: OpCounter = None,
    gates: Optional[Sequence[Optional[np.ndarray]]] = None,
):
    """Full pass returning (logits, new states, per-layer caches, embedded input)."""
    tokens = np.asarray(tokens, dtype=np.int64)
    if states is None:
        states = init_states(model, None if tokens.ndim == 1 else tokens.shape[0])
    if len(states) != len(model.layers):
        raise ShapeError(f"{len(states)} layer states for a {len(model.layers)}-layer model")
    x = embed(model, tokens)
    inputs = x
    new_states, caches = [], []
    for index, layer in enumerate(model.layers):
        gate = gates[index] if gates is not None and index < len(gates) else None
        x, state, cache = run_layer(layer, x, states[index], counter, gate)
        new_states.append(state)
        caches.append(cache)
    logits = tensor.matmul(model.output_projection, x, counter)
    return logits, new_states, caches, inputs


def forward(model: QrnnModel, tokens, counter: OpCounter = None) -> Matrix:
    logits, _, _, _ = run(model, tokens, counter=counter)
    return logits


def step(model: QrnnModel, states: Sequence[LayerState], token: int):
    if states is None or len(states) != len(model.layers):
        raise ShapeError(
            f"step needs {len(model.layers)} initialized layer states, "
            f"got {None if states is None else len(states)}"
        )
    logits, new_states, _, _ = run(model, np.array([token]), states)
    return logits[:, 0], new_states
